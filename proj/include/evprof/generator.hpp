#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "evprof/catalog.hpp"
#include "evprof/trace.hpp"

namespace evprof {

enum class Origin { red, benign };

// One technique occurrence. `variant` selects a non-detecting shape:
// "same_value" (ErasePEHeader/SizeOfImage rewrite the stored bytes) or
// "write_before_read" (watched field overwritten before it is read).
struct TechniqueSpec {
  std::string id;
  double pos = 50.0;
  Origin origin = Origin::red;
  std::string variant;
};

// Externally visible calls (file, registry, network, process creation).
struct VisibleSpec {
  std::string api = "WriteFile";
  double pos = 50.0;
  std::uint32_t count = 1;
};

struct StallSpec {
  std::string api = "NtDelayExecution";
  std::uint64_t ms = 0;
  std::uint32_t count = 1;
  double pos = 50.0;
  Origin origin = Origin::red;
};

// Loop timing two API calls with rdtsc sandwiches per iteration.
struct LockySpec {
  std::uint32_t iterations = 10;
  double pos = 50.0;
  std::uint64_t first_ticks = 1'000;    // raw duration of the first call
  std::uint64_t second_ticks = 50'000;  // raw duration of the second call
};

// Write + remote thread into another process, then an IsDebuggerPresent
// call executed by the injected code.
struct InjectSpec {
  double pos = 50.0;
  Origin origin = Origin::red;
  Pid target = 2000;
};

struct GenSpec {
  std::string sample_id;
  Labels labels;
  std::uint64_t seed = 0;
  std::uint32_t filler = 60;
  std::vector<TechniqueSpec> techniques;
  std::vector<VisibleSpec> visible;
  std::vector<StallSpec> stalls;
  std::vector<LockySpec> locky;
  std::vector<InjectSpec> injections;
};

struct ExpectedDetection {
  std::string technique;
  std::uint64_t seq = 0;
  Pid pid = 0;
  friend bool operator==(const ExpectedDetection&, const ExpectedDetection&) = default;
};

// What the default analysis configuration must report for a generated trace.
struct Expectation {
  std::string sample_id;
  std::uint64_t native_api_count = 0;
  std::uint64_t max_seq = 0;
  std::vector<ExpectedDetection> detections;
  std::vector<std::string> technique_set;  // sorted, FP-prone excluded
  bool evasive = false;
  std::optional<double> first_pos;
  std::optional<double> last_pos;
};

struct GeneratedSample {
  GenSpec spec;
  Trace trace;
  Expectation expected;
};

class GenError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fixed code addresses used by generated traces.
inline constexpr Pid kGenPid = 1000;
inline constexpr Address kGenPeHeader = 0x400000;
inline constexpr Address kGenImageBase = 0x401000;
inline constexpr std::uint64_t kGenImageSize = 0x1f000;
inline constexpr Address kGenKernel32 = 0x76000000;
inline constexpr std::uint64_t kGenSizeOfImageOffset = 0xd0;

GeneratedSample generate(const GenSpec& spec, const Catalog& catalog);

// Minimal trace exercising one technique plus enough filler to be active.
GeneratedSample gen_technique_trace(const std::string& id, Origin origin, std::uint64_t seed,
                                    const Catalog& catalog, const std::string& variant = {});

std::vector<GeneratedSample> gen_corpus(const std::vector<GenSpec>& specs, const Catalog& catalog);

// Spec file dialect: one `kind=...` record per line, same key=value syntax
// as traces. `kind=sample` opens a spec; technique/visible/stall/locky/inject
// lines attach to the most recent sample.
std::vector<GenSpec> parse_gen_specs(std::string_view source);
std::string serialize_gen_specs(const std::vector<GenSpec>& specs);

std::vector<std::string> preset_names();
std::vector<GenSpec> preset(const std::string& name, std::uint64_t seed, const Catalog& catalog);

// Two traces of one sample: the behavior when a check's mitigation is active
// (continues to its payload) and when it is not (exits right after the check).
std::pair<GeneratedSample, GeneratedSample> gen_divergent_pair(const std::string& id, std::uint64_t seed,
                                                               const Catalog& catalog);

std::string write_manifest(const std::vector<GeneratedSample>& corpus);
std::vector<Expectation> read_manifest(std::string_view document);
std::string write_labels_csv(const std::vector<GeneratedSample>& corpus);

}  // namespace evprof
