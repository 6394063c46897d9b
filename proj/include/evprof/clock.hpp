#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include "evprof/trace.hpp"

namespace evprof {

struct ClockConfig {
  std::uint64_t stall_threshold_ms = 30'000;
  std::uint64_t infinite_wait_cap_ms = 600'000;
  std::uint64_t tick_rate = 2'600'000;  // rdtsc ticks per millisecond
  std::uint64_t sandwich_window = 50;   // max instructions between paired rdtsc
  bool rdtsc_requires_sandwich = true;
  // Units per millisecond returned by each time-query API.
  std::map<std::string, std::uint64_t, std::less<>> time_query_units{
      {"GetTickCount", 1},
      {"GetTickCount64", 1},
      {"timeGetTime", 1},
      {"QueryPerformanceCounter", 10'000},
      {"GetSystemTimeAsFileTime", 10'000},
  };
};

class ClockConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

bool is_stall_api(std::string_view name);
bool is_time_query_api(std::string_view name);

struct StallOutcome {
  std::uint64_t requested_ms = 0;
  std::uint64_t rewritten_ms = 0;
  std::uint64_t advanced_ms = 0;
  bool infinite = false;
  bool candidate = false;  // requested wait reaches the stalling threshold
};

struct RdtscOutcome {
  std::uint64_t returned = 0;
  bool in_sandwich = false;
  bool adjusted = false;
  std::optional<std::string> diagnostic;
};

// Accumulates skipped wait time and rewrites every time source the sample
// can observe. rdtsc pairs inside the sandwich window have their delta
// scaled by p, alternating 0.5 and 0.05 per thread.
class VirtualClock {
 public:
  explicit VirtualClock(ClockConfig config = {});

  // `apply` false leaves the wait untouched (mitigation disabled).
  StallOutcome on_stall(std::uint64_t requested_ms, bool apply = true);
  std::uint64_t on_time_query(std::string_view api, std::uint64_t raw) const;
  // `scale` false returns raw + offset even inside a sandwich.
  RdtscOutcome on_rdtsc(Pid pid, Tid tid, std::uint64_t insn_index, std::uint64_t raw_tsc, bool scale = true);

  std::uint64_t offset_ms() const { return offset_ms_; }
  std::uint64_t offset_ticks() const { return offset_ms_ * config_.tick_rate; }
  const ClockConfig& config() const { return config_; }

 private:
  struct SandwichState {
    std::uint64_t last_returned = 0;
    std::uint64_t last_index = 0;
    std::uint64_t parity = 0;
  };

  ClockConfig config_;
  std::uint64_t offset_ms_ = 0;
  std::map<std::pair<Pid, Tid>, SandwichState> sandwiches_;
};

}  // namespace evprof
