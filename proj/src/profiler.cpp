#include "evprof/profiler.hpp"

#include <algorithm>
#include <cmath>

#include "evprof/injection.hpp"
#include "evprof/memory.hpp"

namespace evprof {

namespace {

std::optional<std::size_t> first_duration_arg(const ApiPayload& p) {
  for (std::size_t i = 0; i < p.args.size(); ++i)
    if (p.args[i].type == Value::Type::duration_ms) return i;
  return std::nullopt;
}

class SampleRun {
 public:
  SampleRun(const Catalog& catalog, const RunConfig& config)
      : catalog_(catalog),
        config_(config),
        tracker_([&catalog](const std::string& f) { return catalog.field_owner(f); }),
        router_(tracker_),
        clock_(config.clock) {}

  SampleReport run(const Trace& trace) {
    report_.total_event_count = trace.size();
    report_.fp_prone_included = !config_.exclude_fp_prone;
    report_.diagnostics = validate_trace(trace);
    if (!trace.empty()) max_seq_ = trace.back().seq;
    for (const auto& ev : trace) step(ev);
    finish();
    return std::move(report_);
  }

 private:
  bool enabled(const std::string& id) const {
    if (!config_.mitigate) return false;
    auto it = config_.overrides.find(id);
    return it == config_.overrides.end() || it->second.enabled;
  }

  void diag(std::uint64_t seq, std::string reason) { report_.diagnostics.push_back({seq, std::move(reason)}); }

  void install(Pid pid, std::uint64_t seq, const std::vector<LayoutDecl>& layouts) {
    std::vector<std::string> notes;
    for (const auto& l : layouts) tracker_.install_watchpoints(pid, l, &notes);
    for (auto& n : notes) diag(seq, std::move(n));
  }

  void step(const TraceEvent& ev) {
    const Pid pid = router_.effective_pid(ev.pid);
    MatchSignals signals;
    std::optional<Value> clock_value;

    try {
      switch (ev.kind) {
        case EventKind::meta: {
          const auto& m = std::get<MetaPayload>(ev.payload);
          report_.sample_id = m.sample_id;
          report_.labels = m.labels;
          return;
        }
        case EventKind::image_load: {
          const auto& p = std::get<ImageLoadPayload>(ev.payload);
          if (p.region == RegionKind::pe_header)
            tracker_.load_pe_header(pid, p.base, p.size, p.header_bytes, p.size_of_image);
          else
            tracker_.register_region(MemoryRegion{pid, p.base, p.size, p.region, p.name});
          install(pid, ev.seq, p.layouts);
          return;
        }
        case EventKind::region_alloc: {
          const auto& p = std::get<RegionAllocPayload>(ev.payload);
          tracker_.register_region(MemoryRegion{pid, p.base, p.size, p.region, {}});
          return;
        }
        case EventKind::region_free: {
          const auto& p = std::get<RegionFreePayload>(ev.payload);
          if (!tracker_.free_region(pid, p.base)) diag(ev.seq, "free of unknown region " + hex_u64(p.base));
          return;
        }
        case EventKind::process_start:
        case EventKind::thread_start:
          return;
        case EventKind::api:
          on_api(ev, pid, signals, clock_value);
          break;
        case EventKind::insn:
          on_insn(ev, pid, signals, clock_value);
          break;
        case EventKind::mem_read:
          signals.watch_hit = tracker_.resolve_access(pid, ev.kind, ev.mem());
          break;
        case EventKind::mem_write:
          tracker_.resolve_access(pid, ev.kind, ev.mem());
          signals.pe_write = tracker_.pe_header_write(pid, ev.mem());
          break;
      }
    } catch (const std::exception& e) {
      diag(ev.seq, e.what());
      return;
    }

    const TraceEvent* matched = &ev;
    TraceEvent remapped;
    if (pid != ev.pid) {
      remapped = ev;
      remapped.pid = pid;
      matched = &remapped;
    }
    for (auto& d : catalog_.match_event(*matched, tracker_, signals)) {
      d.normalized_pos = max_seq_ == 0 ? 0.0 : 100.0 * static_cast<double>(d.seq) / static_cast<double>(max_seq_);
      const auto& rule = catalog_.rule(d.technique);
      if (rule.has_mitigation() && enabled(rule.id)) {
        MitigationContext ctx;
        ctx.seed = config_.seed;
        ctx.clock_value = clock_value;
        ctx.honeypot_pid = kHoneypotPid;
        if (auto it = config_.overrides.find(rule.id); it != config_.overrides.end()) ctx.override_value = it->second.value;
        d.substituted_value = apply_mitigation(rule, *matched, ctx);
        d.mitigated = true;
      }
      report_.detections.push_back(std::move(d));
    }

    if (ev.kind == EventKind::api) install(pid, ev.seq, ev.api().out_structs);
  }

  void on_api(const TraceEvent& ev, Pid pid, MatchSignals& signals, std::optional<Value>& clock_value) {
    const auto& p = ev.api();
    if (p.native) ++report_.native_api_count;

    auto route = router_.route(ev, pid);
    signals.injection = route.rerouted;
    if (route.diagnostic) diag(ev.seq, *route.diagnostic);

    if (is_stall_api(p.name)) {
      if (auto idx = first_duration_arg(p)) {
        auto out = clock_.on_stall(p.args[*idx].raw, enabled("time_stalling"));
        signals.stall_candidate = out.candidate;
        clock_value = Value::duration(out.rewritten_ms);
        if (out.rewritten_ms != out.requested_ms)
          report_.rewrites.push_back(Rewrite{ev.seq, "arg" + std::to_string(*idx), p.args[*idx], *clock_value});
      }
    }
    if (is_time_query_api(p.name) && p.ret) {
      Value adjusted = *p.ret;
      adjusted.raw = clock_.on_time_query(p.name, p.ret->raw);
      if (adjusted != *p.ret) report_.rewrites.push_back(Rewrite{ev.seq, "ret", *p.ret, adjusted});
    }

    if (tracker_.is_red(pid, p.return_address)) {
      auto traits = catalog_.api_traits(p.name);
      if (traits.externally_visible) {
        visible_seqs_.push_back(ev.seq);
        report_.externally_visible_apis.push_back(p.name);
      }
      report_.internet = report_.internet || traits.internet;
      report_.child_process = report_.child_process || traits.child_process;
    }
  }

  void on_insn(const TraceEvent& ev, Pid pid, MatchSignals& signals, std::optional<Value>& clock_value) {
    const auto& p = ev.insn();
    if (p.mnemonic != Mnemonic::rdtsc) return;
    auto tsc = p.out_regs.find("TSC");
    if (tsc == p.out_regs.end()) return;
    auto out = clock_.on_rdtsc(pid, ev.tid, ev.insn_index, tsc->second, enabled("RDTSC"));
    signals.rdtsc_candidate = out.in_sandwich || !config_.clock.rdtsc_requires_sandwich;
    clock_value = Value::integer(static_cast<std::int64_t>(out.returned));
    if (out.returned != tsc->second)
      report_.rewrites.push_back(Rewrite{ev.seq, "TSC", Value::integer(static_cast<std::int64_t>(tsc->second)),
                                         *clock_value});
    if (out.diagnostic) diag(ev.seq, *out.diagnostic);
  }

  void finish() {
    auto& r = report_;
    r.started = r.native_api_count >= 1;
    r.active = r.native_api_count >= kActiveNativeApiThreshold;
    for (const auto& d : r.detections)
      if (!config_.exclude_fp_prone || !catalog_.is_fp_prone(d.technique)) r.technique_set.push_back(d.technique);
    std::sort(r.technique_set.begin(), r.technique_set.end());
    r.technique_set.erase(std::unique(r.technique_set.begin(), r.technique_set.end()), r.technique_set.end());
    r.techniques_count = r.technique_set.size();
    r.evasive = !r.technique_set.empty();
    r.injections = router_.payloads();
    if (!r.evasive) return;

    auto counted = r.counted_detections();
    r.first_pos = counted.front().normalized_pos;
    r.last_pos = counted.back().normalized_pos;
    for (const auto& d : counted)
      if (std::find(r.categories_in_order.begin(), r.categories_in_order.end(), d.category) ==
          r.categories_in_order.end())
        r.categories_in_order.push_back(d.category);
    r.externally_visible_split = externally_visible_split(visible_seqs_, counted.front().seq, counted.back().seq);
  }

  const Catalog& catalog_;
  const RunConfig& config_;
  MemoryTracker tracker_;
  InjectionRouter router_;
  VirtualClock clock_;
  SampleReport report_;
  std::uint64_t max_seq_ = 0;
  std::vector<std::uint64_t> visible_seqs_;
};

}  // namespace

void check_config(const RunConfig& config, const Catalog& catalog) {
  for (const auto& [id, o] : config.overrides) {
    const auto* rule = catalog.find(id);
    if (!rule) throw ConfigError("override for unknown technique '" + id + "'");
    if (o.value && !rule->has_mitigation())
      throw ConfigError("technique '" + id + "' has no mitigation whose value could be overridden");
  }
}

SampleReport run_sample(const Trace& trace, const Catalog& catalog, const RunConfig& config) {
  check_config(config, catalog);
  return SampleRun(catalog, config).run(trace);
}

TimeSlot timeline_slot(double normalized_pos) {
  auto f = std::floor(normalized_pos);
  if (f <= 10) return TimeSlot::head;
  if (f >= 90) return TimeSlot::tail;
  return TimeSlot::middle;
}

std::string_view to_string(TimeSlot s) {
  switch (s) {
    case TimeSlot::head: return "[0-10]";
    case TimeSlot::middle: return "[11-89]";
    case TimeSlot::tail: return "[90-100]";
  }
  return {};
}

VisibleSplit externally_visible_split(const std::vector<std::uint64_t>& visible_seqs, std::uint64_t first_seq,
                                      std::uint64_t last_seq) {
  VisibleSplit s;
  if (visible_seqs.empty()) {
    s.no_visible_events = true;
    return s;
  }
  auto before = std::count_if(visible_seqs.begin(), visible_seqs.end(), [&](auto q) { return q < first_seq; });
  auto after = std::count_if(visible_seqs.begin(), visible_seqs.end(), [&](auto q) { return q > last_seq; });
  auto n = static_cast<double>(visible_seqs.size());
  s.before_first_pct = 100.0 * static_cast<double>(before) / n;
  s.after_last_pct = 100.0 * static_cast<double>(after) / n;
  return s;
}

}  // namespace evprof
