#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "evprof/catalog.hpp"
#include "evprof/profiler.hpp"
#include "evprof/report.hpp"

namespace evprof {

enum class GroupBy { dataset, year, family };

std::optional<GroupBy> parse_group_by(std::string_view s);
std::string_view to_string(GroupBy g);

struct LabelRow {
  std::string family;
  std::string year;
  std::string packer;
  std::string protector;
};

class LabelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Delimited text: header row then sample_id,family,year,packer,protector.
std::map<std::string, LabelRow> parse_labels_csv(std::string_view text);

// Overwrites report labels from the label table. Returns the number of
// reports without a label row.
std::size_t apply_labels(std::vector<SampleReport>& reports, const std::map<std::string, LabelRow>& labels);

// Integer tallies for one group; every ratio is derived from these.
struct GroupCounts {
  std::uint64_t samples = 0;
  std::uint64_t started = 0;
  std::uint64_t active = 0;
  std::uint64_t evasive = 0;
  std::uint64_t active_evasive = 0;
  std::uint64_t internet = 0;
  std::uint64_t child_process = 0;
  std::uint64_t technique_sum = 0;
  std::uint64_t technique_sq_sum = 0;
  std::uint64_t technique_max = 0;
  std::uint64_t packed = 0;
  std::uint64_t packed_evasive = 0;
  std::uint64_t protected_ = 0;
  std::uint64_t protected_evasive = 0;
  std::uint64_t protected_technique_sum = 0;
  std::uint64_t protected_technique_sq_sum = 0;
  std::array<std::uint64_t, kCategoryCount> packed_with_category{};

  void merge(const GroupCounts& o);
  friend bool operator==(const GroupCounts&, const GroupCounts&) = default;
};

inline constexpr std::size_t kHistogramBins = 100;

struct Histogram {
  std::array<std::uint64_t, kHistogramBins> bins{};
  double sum = 0.0;
  std::uint64_t count = 0;

  void add(double pos);
  void merge(const Histogram& o);
  friend bool operator==(const Histogram&, const Histogram&) = default;
};

struct YearCounts {
  std::uint64_t started = 0;
  std::array<std::uint64_t, kCategoryCount> with_category{};
  friend bool operator==(const YearCounts&, const YearCounts&) = default;
};

// Mergeable fold over reports. Only started samples enter the statistics;
// evasive means started and evasive.
class CorpusAccumulator {
 public:
  explicit CorpusAccumulator(GroupBy group_by = GroupBy::dataset) : group_by_(group_by) {}

  void add(const SampleReport& report);
  void merge(const CorpusAccumulator& other);

  GroupBy group_by() const { return group_by_; }
  const std::map<std::string, GroupCounts>& groups() const { return groups_; }
  const GroupCounts& overall() const { return overall_; }
  const std::map<std::string, std::uint64_t>& technique_samples() const { return technique_samples_; }
  const Histogram& first_hist() const { return first_; }
  const Histogram& last_hist() const { return last_; }
  const Histogram& diff_hist() const { return diff_; }
  std::uint64_t timeline_samples() const { return timeline_samples_; }
  std::uint64_t first_in_head() const { return first_in_head_; }
  std::uint64_t last_in_tail() const { return last_in_tail_; }
  const std::array<std::uint64_t, 3>& slot_samples() const { return slot_samples_; }
  const std::array<std::array<std::uint64_t, kCategoryCount>, 3>& slot_first() const { return slot_first_; }
  std::uint64_t multi_category() const { return multi_category_; }
  const std::array<std::uint64_t, kCategoryCount>& first_category() const { return first_category_; }
  std::uint64_t not_antidebug_first() const { return not_antidebug_first_; }
  const std::array<std::uint64_t, kCategoryCount>& first_category_not_antidebug() const {
    return first_category_not_antidebug_;
  }
  const std::map<std::string, std::optional<std::set<std::string>>>& footprints() const { return footprints_; }
  const std::map<std::string, YearCounts>& years() const { return years_; }
  std::uint64_t reports() const { return reports_; }

  friend bool operator==(const CorpusAccumulator&, const CorpusAccumulator&) = default;

 private:
  std::string group_key(const SampleReport& r) const;

  GroupBy group_by_;
  std::uint64_t reports_ = 0;
  GroupCounts overall_;
  std::map<std::string, GroupCounts> groups_;
  std::map<std::string, std::uint64_t> technique_samples_;
  Histogram first_, last_, diff_;
  std::uint64_t timeline_samples_ = 0;
  std::uint64_t first_in_head_ = 0;
  std::uint64_t last_in_tail_ = 0;
  std::array<std::uint64_t, 3> slot_samples_{};
  std::array<std::array<std::uint64_t, kCategoryCount>, 3> slot_first_{};
  std::uint64_t multi_category_ = 0;
  std::array<std::uint64_t, kCategoryCount> first_category_{};
  std::array<std::uint64_t, kCategoryCount> first_category_not_antidebug_{};
  std::uint64_t not_antidebug_first_ = 0;
  std::map<std::string, std::optional<std::set<std::string>>> footprints_;  // nullopt: no evasive sample yet
  std::map<std::string, YearCounts> years_;
};

// Derived, presentation-ready statistics.
struct GroupRow {
  std::string group;
  GroupCounts counts;
  std::optional<double> active_pct, evasive_pct, active_evasive_pct, internet_pct, child_process_pct;
  std::optional<double> avg_techniques, std_techniques;
  std::uint64_t max_techniques = 0;
  std::optional<double> packed_pct, evasive_of_packed_pct, protected_pct, evasive_of_protected_pct;
  std::optional<double> protected_avg_techniques, protected_std_techniques;
  std::array<std::optional<double>, kCategoryCount> packed_category_pct{};
};

struct Share {
  std::string name;
  std::uint64_t count = 0;
  double pct = 0.0;
};

struct CorpusAggregate {
  GroupBy group_by = GroupBy::dataset;
  GroupRow overall;
  std::vector<GroupRow> groups;
  std::vector<Share> technique_ranking;
  std::optional<double> first_in_head_pct, last_in_tail_pct;
  std::optional<double> mean_first, mean_last, mean_diff;
  std::array<std::vector<Share>, 3> slot_top;  // top three categories per slot
  std::vector<Share> first_category_shares;
  std::vector<Share> first_category_when_not_antidebug;
  bool no_multi_category = false;
  std::map<std::string, std::vector<std::string>> footprints;
  std::optional<double> nonempty_footprint_pct;
  std::map<std::string, std::array<std::optional<double>, kCategoryCount>> category_by_year;
  std::vector<std::string> diagnostics;
};

// Population standard deviation from integer sums.
std::optional<double> mean_of(std::uint64_t sum, std::uint64_t n);
std::optional<double> population_std(std::uint64_t sum, std::uint64_t sq_sum, std::uint64_t n);

CorpusAggregate finalize(const CorpusAccumulator& acc, std::size_t top_n = 0);
CorpusAggregate corpus_stats(const std::vector<SampleReport>& reports, GroupBy group_by, std::size_t top_n = 0);

// Descending by count, ties by name.
std::vector<Share> rank_shares(const std::map<std::string, std::uint64_t>& counts, std::uint64_t denominator,
                               std::size_t top_n = 0);

struct BehaviorDiff {
  bool same_techniques = false;
  bool same_visible_effects = false;
};

BehaviorDiff behavior_diff(const SampleReport& a, const SampleReport& b);

// Machine-readable summary and delimited tables.
std::string write_summary_json(const CorpusAggregate& agg, const CorpusAccumulator& acc);
std::map<std::string, std::string> write_tables_csv(const CorpusAggregate& agg, const CorpusAccumulator& acc);

}  // namespace evprof
