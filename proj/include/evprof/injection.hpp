#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evprof/memory.hpp"
#include "evprof/trace.hpp"

namespace evprof {

// Pid of the decoy process that receives every cross-process injection.
inline constexpr Pid kHoneypotPid = 0xFFFFFFF0u;
inline constexpr Address kHoneypotImageBase = 0x10000000;
inline constexpr std::uint64_t kHoneypotImageSize = 0x10000;

bool is_injection_api(std::string_view name);

struct InjectedPayload {
  std::uint64_t seq = 0;
  std::string api;
  Pid source = 0;
  Pid original_target = 0;
  std::optional<Address> address;
  std::optional<std::uint64_t> length;
  friend bool operator==(const InjectedPayload&, const InjectedPayload&) = default;
};

struct RouteOutcome {
  bool rerouted = false;
  Pid target = 0;  // pid the call now targets
  std::optional<std::string> diagnostic;
};

// Redirects NtWriteVirtualMemory, NtCreateThreadEx, NtResumeThread and
// NtQueueApcThread aimed at another process into the honeypot. Later events
// recorded under a redirected pid are attributed to the honeypot.
class InjectionRouter {
 public:
  explicit InjectionRouter(MemoryTracker& tracker);

  // Pid that events recorded under `trace_pid` belong to.
  Pid effective_pid(Pid trace_pid) const;

  // `caller` is the effective pid of the calling thread.
  RouteOutcome route(const TraceEvent& event, Pid caller);

  const std::vector<InjectedPayload>& payloads() const { return payloads_; }
  const std::map<Pid, Pid>& redirected() const { return redirected_; }

 private:
  void mark_injected(Address base, std::uint64_t length);

  MemoryTracker& tracker_;
  std::map<Pid, Pid> redirected_;
  std::vector<InjectedPayload> payloads_;
};

}  // namespace evprof
