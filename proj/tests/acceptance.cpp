#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <unistd.h>

#include "clock_oracle.hpp"
#include "evprof/aggregator.hpp"
#include "evprof/catalog.hpp"
#include "evprof/generator.hpp"
#include "evprof/injection.hpp"
#include "evprof/profiler.hpp"
#include "oracle.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace evprof;
using Clock = std::chrono::steady_clock;

namespace {

const Catalog& cat() { return evtest::catalog(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (!pass) detail << "; ";
      if (pass) detail.str("");
      pass = false;
      detail << what;
    }
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Outcome catalog_integrity() {
  Outcome o;
  std::map<Category, int> per;
  std::set<std::string> ids, fp;
  int mitigated = 0;
  for (const auto& r : cat().rules()) {
    ids.insert(r.id);
    ++per[r.category];
    mitigated += r.has_mitigation();
    if (r.fp_prone) fp.insert(r.id);
  }
  o.require(cat().rules().size() == 53 && ids.size() == 53, "expected 53 unique ids");
  o.require(per[Category::VMChecks] == 20 && per[Category::AntiDebug] == 21 &&
                per[Category::ResourceProfiling] == 6 && per[Category::TimingAttacks] == 2 &&
                per[Category::AntiDump] == 2 && per[Category::CodeInjection] == 1 &&
                per[Category::AntiInstrumentation] == 1,
            "category counts differ");
  o.require(mitigated == 17, "mitigated rules: " + std::to_string(mitigated));
  o.require(fp == std::set<std::string>{"GetTickCount", "cpuid_is_hypervisor", "mouse_movement", "NumberOfProcessors"},
            "FP-prone set differs");
  if (o.pass) o.detail << "53 ids, 20/21/6/2/2/1/1 per category, 17 mitigated, 4 FP-prone";
  return o;
}

Outcome round_trip() {
  Outcome o;
  auto corpus = gen_corpus(preset("roundtrip", 0, cat()), cat());
  std::vector<std::string> texts;
  for (const auto& g : corpus) texts.push_back(serialize_trace(g.trace));
  auto t0 = Clock::now();
  int red = 0, benign = 0;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    auto r = run_sample(parse_trace(texts[k]), cat());
    const auto& id = corpus[k].spec.sample_id;
    auto dot = id.find('.');
    auto technique = id.substr(0, dot);
    bool is_red = id.substr(dot + 1) == "red";
    if (is_red) {
      ++red;
      o.require(r.detections.size() == 1 && r.detections[0].technique == technique, id + " did not yield exactly " + technique);
    } else {
      ++benign;
      o.require(r.detections.empty(), id + " yielded detections");
    }
  }
  double secs = seconds_since(t0);
  o.require(red == 53 && benign == 53, "expected 53 red and 53 benign traces");
  o.require(secs < 10.0, "took " + std::to_string(secs) + " s");
  if (o.pass) o.detail << "106 traces (53 red -> own id, 53 benign -> none) in " << secs << " s";
  return o;
}

Outcome clock_exactness() {
  Outcome o;
  // Stalling fixture through the whole profiler.
  auto stall = generate(preset("stall", 0, cat()).front(), cat());
  auto sr = run_sample(stall.trace, cat());
  std::uint64_t requested = 0;
  std::size_t waits = 0, zeroed = 0;
  for (const auto& w : sr.rewrites)
    if (w.target != "ret") {
      ++waits;
      requested += w.original.raw;
      zeroed += w.value == Value::duration(0);
    }
  o.require(requested == 300'000 && waits == zeroed && waits > 0, "waits not all rewritten to 0 (total " +
                                                                      std::to_string(requested) + " ms)");
  std::size_t ticks = 0;
  for (const auto& ev : stall.trace)
    if (ev.kind == EventKind::api && ev.api().name == "GetTickCount") {
      ++ticks;
      bool ok = false;
      for (const auto& w : sr.rewrites)
        ok = ok || (w.seq == ev.seq && w.value.raw == ev.api().ret->raw + 300'000);
      o.require(ok, "GetTickCount at seq " + std::to_string(ev.seq) + " not raw + 300000");
    }
  o.require(ticks > 0, "stall fixture has no GetTickCount");

  // 1,000 random sandwiches replayed as a trace.
  evtest::Gen g(20240601);
  ClockConfig cfg;
  auto ss = evtest::random_sandwiches(g, 1000, cfg.sandwich_window);
  auto want = evtest::expected_second_reads(ss, 0);
  std::ostringstream t;
  t << "seq=0 kind=meta pid=1000 tid=1 insn_index=0 sample_id=sandwiches\n";
  std::uint64_t seq = 0;
  for (Pid pid : {1000u, 1001u})
    t << "seq=" << ++seq << " kind=image_load pid=" << pid
      << " tid=1 insn_index=0 region=main_image base=0x401000 size=0x1000 name=s.exe\n";
  std::vector<std::uint64_t> second_seq;
  for (const auto& s : ss) {
    t << "seq=" << ++seq << " kind=insn pid=" << s.pid << " tid=" << s.tid << " insn_index=" << s.index
      << " mnemonic=rdtsc address=0x401010 out_regs=TSC:" << hex_u64(s.r1) << "\n";
    t << "seq=" << ++seq << " kind=insn pid=" << s.pid << " tid=" << s.tid << " insn_index=" << s.index + s.gap
      << " mnemonic=rdtsc address=0x401020 out_regs=TSC:" << hex_u64(s.r1 + s.delta) << "\n";
    second_seq.push_back(seq);
  }
  auto rr = run_sample(parse_trace(t.str()), cat());
  std::map<std::uint64_t, std::uint64_t> returned;
  for (const auto& w : rr.rewrites) returned[w.seq] = w.value.raw;
  std::size_t exact = 0;
  for (std::size_t k = 0; k < ss.size(); ++k) exact += returned.count(second_seq[k]) && returned[second_seq[k]] == want[k];
  o.require(exact == ss.size(), std::to_string(exact) + "/1000 sandwiches value-exact");
  o.require(rr.diagnostics.empty(), "sandwich trace produced diagnostics");
  if (o.pass)
    o.detail << waits << " waits -> 0 ms, GetTickCount = raw + 300000; 1000/1000 sandwiches match r1 + floor(p*delta)";
  return o;
}

Outcome factor_ten_and_locky() {
  Outcome o;
  VirtualClock c;
  const std::uint64_t delta = 987'654;
  auto a1 = c.on_rdtsc(1, 1, 0, 10'000).returned;
  auto b1 = c.on_rdtsc(1, 1, 10, 10'000 + delta).returned;
  auto a2 = c.on_rdtsc(1, 1, 1000, 50'000'000).returned;
  auto b2 = c.on_rdtsc(1, 1, 1010, 50'000'000 + delta).returned;
  double d1 = static_cast<double>(b1 - a1), d2 = static_cast<double>(b2 - a2);
  o.require(std::fabs(d2 - d1 / 10.0) <= 1.0, "ratio " + std::to_string(d2 / d1));

  auto locky = generate(preset("locky", 0, cat()).front(), cat());
  auto check = [&](bool mitigate) {
    RunConfig cfg;
    cfg.mitigate = mitigate;
    auto r = run_sample(locky.trace, cat(), cfg);
    std::map<std::uint64_t, std::uint64_t> rewritten;
    for (const auto& w : r.rewrites) rewritten[w.seq] = w.value.raw;
    std::vector<std::uint64_t> reads;
    for (const auto& ev : locky.trace)
      if (ev.kind == EventKind::insn && ev.insn().mnemonic == Mnemonic::rdtsc)
        reads.push_back(rewritten.count(ev.seq) ? rewritten[ev.seq] : ev.insn().out_regs.at("TSC"));
    int passing = 0, iterations = 0;
    for (std::size_t k = 0; k + 3 < reads.size(); k += 4, ++iterations) {
      auto first = reads[k + 1] - reads[k], second = reads[k + 3] - reads[k + 2];
      passing += first * 10 >= second;
    }
    return std::pair{passing, iterations};
  };
  auto [ok_mit, it_mit] = check(true);
  auto [ok_raw, it_raw] = check(false);
  o.require(it_mit == 10, "locky fixture has " + std::to_string(it_mit) + " iterations");
  o.require(ok_mit >= 1, "no mitigated iteration passes the 1/10 check");
  if (o.pass)
    o.detail << "equal-delta ratio " << d2 / d1 << "; Locky check passes in " << ok_mit << "/" << it_mit
             << " iterations (" << ok_raw << "/" << it_raw << " without mitigation)";
  return o;
}

Outcome watchpoints() {
  Outcome o;
  auto count = [](const std::string& id, const std::string& variant) {
    return run_sample(gen_technique_trace(id, Origin::red, 0, cat(), variant).trace, cat()).detections.size();
  };
  auto wbr = count("IsDebuggerPresentPEB", "write_before_read");
  auto rbw = count("IsDebuggerPresentPEB", "");
  auto same = count("ErasePEHeader", "same_value");
  auto changed = count("ErasePEHeader", "");
  o.require(wbr == 0, "write-then-read gave " + std::to_string(wbr));
  o.require(rbw == 1, "read-before-write gave " + std::to_string(rbw));
  o.require(same == 0, "same-value header write gave " + std::to_string(same));
  o.require(changed == 1, "erasing header write gave " + std::to_string(changed));
  if (o.pass) o.detail << "write-then-read 0, read-before-write 1, same-value PE write 0 (erase 1)";
  return o;
}

Outcome injection() {
  Outcome o;
  auto g = generate(preset("injection", 0, cat()).front(), cat());
  auto r = run_sample(g.trace, cat());
  std::set<Pid> targets;
  std::size_t cross = 0;
  for (const auto& ev : g.trace)
    if (ev.kind == EventKind::api && is_injection_api(ev.api().name) && ev.api().target_pid &&
        *ev.api().target_pid != ev.pid) {
      ++cross;
      targets.insert(*ev.api().target_pid);
    }
  o.require(cross > 0 && r.injections.size() == cross,
            "routed " + std::to_string(r.injections.size()) + " of " + std::to_string(cross) + " cross-process calls");

  // Replay the routing alone to inspect the honeypot's memory map.
  MemoryTracker tracker;
  InjectionRouter router(tracker);
  bool red_ok = true;
  for (const auto& ev : g.trace)
    if (ev.kind == EventKind::api) {
      auto out = router.route(ev, router.effective_pid(ev.pid));
      if (out.rerouted && ev.api().name == "NtWriteVirtualMemory") {
        Address a = ev.api().args[1].raw;
        std::uint64_t n = ev.api().args[3].raw;
        red_ok = red_ok && tracker.is_red(kHoneypotPid, a) && tracker.is_red(kHoneypotPid, a + n - 1);
      }
    }
  for (Pid t : targets) o.require(router.effective_pid(t) == kHoneypotPid, "pid " + std::to_string(t) + " not redirected");
  o.require(red_ok, "injected range not red in honeypot");

  bool attributed = false;
  for (const auto& d : r.detections)
    attributed = attributed || (d.technique == "IsDebuggerPresentAPI" && d.pid == kHoneypotPid);
  o.require(attributed, "no IsDebuggerPresentAPI detection from the honeypot");
  o.require(r.sample_id == g.spec.sample_id && std::count(r.technique_set.begin(), r.technique_set.end(),
                                                          "IsDebuggerPresentAPI") == 1,
            "detection not in the originating sample's report");
  if (o.pass)
    o.detail << cross << " cross-process calls routed to honeypot, injected range red, IsDebuggerPresentAPI attributed to "
             << r.sample_id;
  return o;
}

Outcome aggregator_oracle() {
  Outcome o;
  auto corpus = gen_corpus(preset("fixture60", 0, cat()), cat());
  std::vector<SampleReport> reports;
  for (const auto& c : corpus) reports.push_back(run_sample(c.trace, cat()));
  auto labels = parse_labels_csv(write_labels_csv(corpus));
  o.require(reports.size() == 60, "fixture has " + std::to_string(reports.size()) + " samples");
  o.require(apply_labels(reports, labels) == 0, "unlabeled samples");
  double secs = 0;
  std::size_t mismatches = 0;
  std::string first;
  for (auto by : {GroupBy::dataset, GroupBy::year, GroupBy::family}) {
    auto t0 = Clock::now();
    CorpusAccumulator acc(by);
    for (const auto& r : reports) acc.add(r);
    auto agg = finalize(acc);
    write_summary_json(agg, acc);
    write_tables_csv(agg, acc);
    secs += seconds_since(t0);
    auto bad = evtest::oracle_mismatches(reports, by, agg, acc);
    mismatches += bad.size();
    if (!bad.empty() && first.empty()) first = bad.front();
  }
  o.require(mismatches == 0, std::to_string(mismatches) + " mismatches, first: " + first);
  o.require(secs < 30.0, "aggregation took " + std::to_string(secs) + " s");
  if (o.pass) o.detail << "60 samples x 3 groupings, every statistic equals the recount; " << secs << " s";
  return o;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> dir_contents(const fs::path& d) {
  std::map<std::string, std::string> out;
  if (!fs::is_directory(d)) return out;
  for (const auto& e : fs::directory_iterator(d))
    if (e.is_regular_file()) out[e.path().filename().string()] = read_all(e.path());
  return out;
}

int run(const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

Outcome determinism(const std::string& cli) {
  Outcome o;
  auto base = fs::temp_directory_path() / ("evprof_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(base);
  fs::create_directories(base);
  auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };
  auto gen = [&](const fs::path& dir, int seed) {
    return run(q(cli) + " gen --preset all --seed " + std::to_string(seed) + " --out " + q(dir));
  };
  o.require(gen(base / "a", 7) == 0 && gen(base / "b", 7) == 0, "gen failed");
  auto a = dir_contents(base / "a");
  auto b = dir_contents(base / "b");
  o.require(!a.empty() && a == b, "same seed produced different corpora");
  o.require(run(q(cli) + " batch " + q(base / "a") + " --jobs 1 --out " + q(base / "r1")) == 0 &&
                run(q(cli) + " batch " + q(base / "a") + " --jobs 8 --out " + q(base / "r8")) == 0,
            "batch failed");
  auto r1 = dir_contents(base / "r1");
  auto r8 = dir_contents(base / "r8");
  std::size_t traces = 0;
  for (const auto& [name, _] : a) traces += name.ends_with(".trace");
  o.require(r1.size() == traces && r1 == r8, "report sets differ between 1 and 8 jobs");
  if (o.pass) o.detail << traces << " traces: identical corpora for equal seeds, identical reports at 1 and 8 jobs";
  fs::remove_all(base);
  return o;
}

Outcome thresholds() {
  Outcome o;
  const std::map<std::string, std::pair<bool, bool>> want{
      {"native_0", {false, false}}, {"native_1", {true, false}}, {"native_49", {true, false}}, {"native_50", {true, true}}};
  std::ostringstream got;
  for (const auto& spec : preset("thresholds", 0, cat())) {
    auto r = run_sample(generate(spec, cat()).trace, cat());
    auto it = want.find(spec.sample_id);
    if (it == want.end()) continue;
    got << spec.sample_id << "=(" << (r.started ? 'T' : 'F') << "," << (r.active ? 'T' : 'F') << ") ";
    o.require(r.started == it->second.first && r.active == it->second.second, spec.sample_id + " wrong");
  }
  if (o.pass) o.detail << got.str();
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <path to evprof>\n";
    return 2;
  }
  const std::string cli = argv[1];
  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"catalog integrity", catalog_integrity},
      {"round-trip soundness", round_trip},
      {"virtual clock exactness", clock_exactness},
      {"factor-10 and Locky", factor_ten_and_locky},
      {"watchpoint semantics", watchpoints},
      {"injection end-to-end", injection},
      {"aggregator oracle equivalence", aggregator_oracle},
      {"determinism", [&] { return determinism(cli); }},
      {"started/active thresholds", thresholds},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail.str(std::string("exception: ") + e.what());
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << k + 1 << " " << criteria[k].first << ": " << o.detail.str()
              << "\n";
  }
  return failed ? 1 : 0;
}
