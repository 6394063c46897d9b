#pragma once

#include <map>
#include <optional>
#include <string>

#include "evprof/catalog.hpp"
#include "evprof/clock.hpp"
#include "evprof/report.hpp"
#include "evprof/trace.hpp"

namespace evprof {

inline constexpr std::uint64_t kActiveNativeApiThreshold = 50;

struct MitigationOverride {
  bool enabled = true;
  std::optional<Value> value;  // replaces the catalog's substitution
};

struct RunConfig {
  bool mitigate = true;
  bool exclude_fp_prone = true;
  std::map<std::string, MitigationOverride> overrides;
  ClockConfig clock;
  std::uint64_t seed = 0;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Rejects overrides naming unknown techniques, or value overrides for
// techniques without a mitigation.
void check_config(const RunConfig& config, const Catalog& catalog);

SampleReport run_sample(const Trace& trace, const Catalog& catalog, const RunConfig& config = {});

enum class TimeSlot { head, middle, tail };  // [0-10], [11-89], [90-100]

TimeSlot timeline_slot(double normalized_pos);
std::string_view to_string(TimeSlot s);

// Share of externally-visible calls strictly before the first and strictly
// after the last detection.
VisibleSplit externally_visible_split(const std::vector<std::uint64_t>& visible_seqs, std::uint64_t first_seq,
                                      std::uint64_t last_seq);

}  // namespace evprof
