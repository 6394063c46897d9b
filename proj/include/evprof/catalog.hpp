#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "evprof/memory.hpp"
#include "evprof/trace.hpp"

namespace evprof {

enum class Category {
  AntiDebug,
  AntiDump,
  AntiInstrumentation,
  CodeInjection,
  ResourceProfiling,
  VMChecks,
  TimingAttacks,
};

inline constexpr std::size_t kCategoryCount = 7;

std::string_view to_string(Category c);
std::optional<Category> parse_category(std::string_view s);

// How a rule is triggered. virtual_clock and injection candidates are
// produced by the clock and the injection router and only gated here.
enum class TriggerKind { api, instruction, memory_read, memory_write, virtual_clock, injection };

std::string_view to_string(TriggerKind k);

enum class MitigationKind {
  none,
  clear_hypervisor_bit,
  neutral_hypervisor_vendor,
  random_cursor,
  four_processors,
  ram_8gb,
  disk_800gb,
  parent_cmd,
  scrub_firmware,
  zero_buffer,
  guard_page_exception,
  expected_eip,
  wmi_disabled,
  virtual_clock,
  honeypot,
};

std::string_view to_string(MitigationKind k);

// Case-insensitive substring constraint in conjunctive normal form: every
// group must have at least one token present. An integer argument matches
// when it equals one of `ints` or has all of `bits_set`.
struct ArgMatch {
  std::optional<std::size_t> index;  // nullopt: all string args joined
  std::vector<std::vector<std::string>> all_of;
  std::vector<std::string> equals;   // case-insensitive whole-string match
  std::vector<std::uint64_t> ints;
  std::uint64_t bits_set = 0;
};

struct ApiTrigger {
  std::vector<std::string> names;
  std::optional<ArgMatch> arg;
};

struct Trigger {
  TriggerKind kind = TriggerKind::api;
  std::vector<ApiTrigger> apis;
  std::optional<Mnemonic> mnemonic;
  std::optional<std::uint32_t> cpuid_leaf;
  std::vector<std::string> fields;  // "STRUCT.field" watched for memory_read
  bool size_of_image = false;       // memory_write: SizeOfImage vs rest of header
};

struct RuleFlags {
  bool native_api = false;
  bool externally_visible = false;
  bool internet = false;
  bool child_process = false;
};

struct TechniqueRule {
  std::string id;
  Category category = Category::AntiDebug;
  Trigger trigger;
  MitigationKind mitigation = MitigationKind::none;
  bool fp_prone = false;
  RuleFlags flags;
  std::string description;

  bool has_mitigation() const { return mitigation != MitigationKind::none; }
};

struct DetectionRecord {
  std::string technique;
  Category category = Category::AntiDebug;
  std::uint64_t seq = 0;
  Pid pid = 0;
  Tid tid = 0;
  bool mitigated = false;
  std::optional<Value> substituted_value;
  double normalized_pos = 0.0;
  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

// Side results of the stateful modules for the event being matched.
struct MatchSignals {
  std::optional<WatchPoint> watch_hit;
  std::optional<PeWriteResult> pe_write;
  bool rdtsc_candidate = false;
  bool stall_candidate = false;
  bool injection = false;
};

struct MitigationContext {
  std::uint64_t seed = 0;
  std::optional<Value> override_value;
  std::optional<Value> clock_value;  // precomputed by the virtual clock
  Pid honeypot_pid = 0;
};

class UnknownTechnique : public std::out_of_range {
 public:
  explicit UnknownTechnique(const std::string& id) : std::out_of_range("unknown technique '" + id + "'") {}
};

class MitigationError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Behavioral metadata for API names outside the technique rules.
struct ApiTraits {
  bool externally_visible = false;
  bool internet = false;
  bool child_process = false;
};

class Catalog {
 public:
  Catalog();

  const std::vector<TechniqueRule>& rules() const { return rules_; }
  const TechniqueRule& rule(std::string_view id) const;
  const TechniqueRule* find(std::string_view id) const;
  bool is_fp_prone(std::string_view id) const { return rule(id).fp_prone; }

  // Technique that owns reads of "STRUCT.field", or "" if none.
  std::string field_owner(const std::string& struct_field) const;

  // Candidates for one event. Non-red provenance yields nothing.
  std::vector<DetectionRecord> match_event(const TraceEvent& event, const MemoryTracker& tracker,
                                           const MatchSignals& signals = {}) const;

  ApiTraits api_traits(std::string_view api_name) const;

 private:
  std::vector<TechniqueRule> rules_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
  std::map<std::string, std::string, std::less<>> field_owner_;
  std::map<std::string, std::vector<std::size_t>, std::less<>> by_api_;
};

// Computes the value the sample observes instead of the real one.
Value apply_mitigation(const TechniqueRule& rule, const TraceEvent& event, const MitigationContext& ctx);

// Substrings that betray a hypervisor in names, paths and firmware tables.
const std::vector<std::string>& hypervisor_artifacts();

inline constexpr std::uint64_t kGiB = 1024ull * 1024 * 1024;

}  // namespace evprof
