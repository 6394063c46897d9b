#include "evprof/clock.hpp"

#include <array>

namespace evprof {

namespace {

constexpr std::array<std::string_view, 5> kStallApis{"NtDelayExecution", "WaitForSingleObject", "SetWaitableTimer",
                                                     "TimeSetEvent", "Sleep"};

}  // namespace

bool is_stall_api(std::string_view name) {
  for (auto n : kStallApis)
    if (n == name) return true;
  return false;
}

bool is_time_query_api(std::string_view name) {
  return name == "GetTickCount" || name == "GetTickCount64" || name == "QueryPerformanceCounter" ||
         name == "GetSystemTimeAsFileTime" || name == "timeGetTime";
}

VirtualClock::VirtualClock(ClockConfig config) : config_(std::move(config)) {}

StallOutcome VirtualClock::on_stall(std::uint64_t requested_ms, bool apply) {
  StallOutcome out;
  out.requested_ms = requested_ms;
  out.infinite = requested_ms == kInfiniteWait;
  std::uint64_t effective = out.infinite ? config_.infinite_wait_cap_ms : requested_ms;
  out.candidate = effective >= config_.stall_threshold_ms;
  if (apply) {
    out.rewritten_ms = 0;
    out.advanced_ms = effective;
    offset_ms_ += effective;
  } else {
    out.rewritten_ms = requested_ms;
  }
  return out;
}

std::uint64_t VirtualClock::on_time_query(std::string_view api, std::uint64_t raw) const {
  auto it = config_.time_query_units.find(api);
  if (it == config_.time_query_units.end())
    throw ClockConfigError("no time unit configured for " + std::string(api));
  return raw + offset_ms_ * it->second;
}

RdtscOutcome VirtualClock::on_rdtsc(Pid pid, Tid tid, std::uint64_t insn_index, std::uint64_t raw_tsc, bool scale) {
  RdtscOutcome out;
  std::uint64_t candidate = raw_tsc + offset_ticks();
  auto key = std::make_pair(pid, tid);
  auto it = sandwiches_.find(key);
  if (it == sandwiches_.end()) {
    out.returned = candidate;
    sandwiches_.emplace(key, SandwichState{candidate, insn_index, 0});
    return out;
  }
  auto& st = it->second;
  out.in_sandwich = insn_index >= st.last_index && insn_index - st.last_index <= config_.sandwich_window;
  if (!scale) {
    out.returned = candidate;
  } else if (out.in_sandwich) {
    out.adjusted = true;
    if (candidate < st.last_returned) {
      out.returned = st.last_returned + 1;
      out.diagnostic = "rdtsc regressed by " + std::to_string(st.last_returned - candidate) + " ticks";
    } else {
      std::uint64_t delta = candidate - st.last_returned;
      // p = 0.5 on even parity, 0.05 on odd; floor(p * delta) in integers.
      std::uint64_t scaled = (st.parity % 2 == 0) ? delta / 2 : delta / 20;
      out.returned = st.last_returned + std::max<std::uint64_t>(scaled, 1);
    }
    ++st.parity;
  } else {
    out.returned = std::max(candidate, st.last_returned + 1);
  }
  st.last_returned = out.returned;
  st.last_index = insn_index;
  return out;
}

}  // namespace evprof
