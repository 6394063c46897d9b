#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "evprof/catalog.hpp"
#include "evprof/injection.hpp"
#include "evprof/trace.hpp"

namespace evprof {

// One value the sample observed instead of the recorded one.
struct Rewrite {
  std::uint64_t seq = 0;
  std::string target;  // "ret", "arg<N>", or a register name
  Value original;
  Value value;
  friend bool operator==(const Rewrite&, const Rewrite&) = default;
};

struct VisibleSplit {
  double before_first_pct = 0.0;
  double after_last_pct = 0.0;
  bool no_visible_events = false;
  friend bool operator==(const VisibleSplit&, const VisibleSplit&) = default;
};

struct SampleReport {
  std::string sample_id;
  Labels labels;
  bool started = false;
  bool active = false;
  std::uint64_t native_api_count = 0;
  std::uint64_t total_event_count = 0;
  bool evasive = false;
  bool fp_prone_included = false;
  std::vector<DetectionRecord> detections;
  std::vector<std::string> technique_set;  // sorted
  std::uint64_t techniques_count = 0;
  std::optional<double> first_pos;
  std::optional<double> last_pos;
  std::vector<Category> categories_in_order;
  std::optional<VisibleSplit> externally_visible_split;  // evasive samples only
  std::vector<std::string> externally_visible_apis;      // in call order
  bool internet = false;
  bool child_process = false;
  std::vector<Rewrite> rewrites;
  std::vector<InjectedPayload> injections;
  std::vector<Diagnostic> diagnostics;

  // Detections that count toward the verdict (technique in technique_set).
  std::vector<DetectionRecord> counted_detections() const;

  friend bool operator==(const SampleReport&, const SampleReport&) = default;
};

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Stable, diffable document with fixed field order.
std::string write_report(const SampleReport& report);
SampleReport read_report(std::string_view document);

}  // namespace evprof
