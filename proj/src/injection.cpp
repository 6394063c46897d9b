#include "evprof/injection.hpp"

#include <algorithm>

namespace evprof {

namespace {

std::optional<std::uint64_t> first_of(const std::vector<Value>& args, Value::Type type) {
  for (const auto& a : args)
    if (a.type == type) return a.raw;
  return std::nullopt;
}

}  // namespace

bool is_injection_api(std::string_view name) {
  return name == "NtWriteVirtualMemory" || name == "NtCreateThreadEx" || name == "NtResumeThread" ||
         name == "NtQueueApcThread";
}

InjectionRouter::InjectionRouter(MemoryTracker& tracker) : tracker_(tracker) {
  tracker_.register_region(
      MemoryRegion{kHoneypotPid, kHoneypotImageBase, kHoneypotImageSize, RegionKind::honeypot_image, "honeypot.exe"});
}

Pid InjectionRouter::effective_pid(Pid trace_pid) const {
  auto it = redirected_.find(trace_pid);
  return it == redirected_.end() ? trace_pid : it->second;
}

RouteOutcome InjectionRouter::route(const TraceEvent& ev, Pid caller) {
  RouteOutcome out;
  if (ev.kind != EventKind::api) return out;
  const auto& p = ev.api();
  if (!is_injection_api(p.name) || !p.target_pid) return out;
  out.target = effective_pid(*p.target_pid);
  if (*p.target_pid == ev.pid || out.target == caller) return out;

  redirected_[*p.target_pid] = kHoneypotPid;
  out.rerouted = true;
  out.target = kHoneypotPid;

  InjectedPayload rec;
  rec.seq = ev.seq;
  rec.api = p.name;
  rec.source = caller;
  rec.original_target = *p.target_pid;
  rec.address = first_of(p.args, Value::Type::address);
  rec.length = first_of(p.args, Value::Type::byte_length);

  if (p.name == "NtWriteVirtualMemory") {
    if (rec.address && rec.length && *rec.length > 0)
      mark_injected(*rec.address, *rec.length);
    else
      out.diagnostic = "NtWriteVirtualMemory without address and length";
  } else if (p.name == "NtCreateThreadEx" && rec.address) {
    const auto* r = tracker_.find_region(kHoneypotPid, *rec.address);
    if (r == nullptr || r->kind != RegionKind::injected)
      out.diagnostic = "thread started at " + hex_u64(*rec.address) + " in unwritten honeypot memory";
  }
  payloads_.push_back(std::move(rec));
  return out;
}

void InjectionRouter::mark_injected(Address base, std::uint64_t length) {
  // Only the uncovered gaps become new regions; bytes already mapped in the
  // honeypot keep their region.
  Address cursor = base;
  const Address end = base + length;
  auto regions = tracker_.regions(kHoneypotPid);
  std::sort(regions.begin(), regions.end(), [](const auto& a, const auto& b) { return a.base < b.base; });
  for (const auto& r : regions) {
    if (r.end() <= cursor) continue;
    if (r.base >= end) break;
    if (r.base > cursor)
      tracker_.register_region(MemoryRegion{kHoneypotPid, cursor, r.base - cursor, RegionKind::injected, {}});
    cursor = std::max(cursor, r.end());
  }
  if (cursor < end)
    tracker_.register_region(MemoryRegion{kHoneypotPid, cursor, end - cursor, RegionKind::injected, {}});
}

}  // namespace evprof
