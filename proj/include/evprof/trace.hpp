#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace evprof {

using Address = std::uint64_t;
using Pid = std::uint32_t;
using Tid = std::uint32_t;

// Typed scalar carried by API arguments, return values and substitutions.
// All payloads live in `raw`; integers are two's-complement int64.
struct Value {
  enum class Type { integer, string, duration_ms, address, byte_length };

  Type type = Type::integer;
  std::uint64_t raw = 0;
  std::string text;

  static Value integer(std::int64_t v) { return {Type::integer, static_cast<std::uint64_t>(v), {}}; }
  static Value string(std::string s) { return {Type::string, 0, std::move(s)}; }
  static Value duration(std::uint64_t ms) { return {Type::duration_ms, ms, {}}; }
  static Value address(Address a) { return {Type::address, a, {}}; }
  static Value length(std::uint64_t n) { return {Type::byte_length, n, {}}; }

  bool is_string() const { return type == Type::string; }
  std::int64_t as_int() const { return static_cast<std::int64_t>(raw); }

  friend bool operator==(const Value&, const Value&) = default;
};

std::string to_string(const Value& v);
Value parse_value(std::string_view token);

// Infinite-wait sentinel for duration arguments (INFINITE).
inline constexpr std::uint64_t kInfiniteWait = 0xFFFFFFFFull;

enum class EventKind {
  meta,
  image_load,
  region_alloc,
  region_free,
  api,
  insn,
  mem_read,
  mem_write,
  process_start,
  thread_start,
};

std::string_view to_string(EventKind k);
std::optional<EventKind> parse_event_kind(std::string_view s);

enum class RegionKind {
  main_image,
  standard_library,
  custom_library,
  exec_alloc,
  data_alloc,
  injected,
  pe_header,
  honeypot_image,
};

std::string_view to_string(RegionKind k);
std::optional<RegionKind> parse_region_kind(std::string_view s);

enum class Mnemonic { rdtsc, cpuid, int3, int2d, sldt, sidt, sgdt, str, fpu_eip_leak };

std::string_view to_string(Mnemonic m);
std::optional<Mnemonic> parse_mnemonic(std::string_view s);

struct FieldDecl {
  std::string name;
  std::uint64_t offset = 0;
  std::uint32_t width = 4;
  friend bool operator==(const FieldDecl&, const FieldDecl&) = default;
};

// A structure instance whose fields the tracker should know about.
struct LayoutDecl {
  std::string struct_name;
  Address base = 0;
  std::vector<FieldDecl> fields;
  friend bool operator==(const LayoutDecl&, const LayoutDecl&) = default;
};

struct Labels {
  std::string family;
  std::string year;
  std::string packer;
  std::string protector;
  std::string dataset;
  friend bool operator==(const Labels&, const Labels&) = default;
};

struct MetaPayload {
  std::string sample_id;
  Labels labels;
  friend bool operator==(const MetaPayload&, const MetaPayload&) = default;
};

// image_load declares a mapped module. For region=pe_header the optional
// header bytes seed the byte shadow and size_of_image is the offset of the
// SizeOfImage field inside it.
struct ImageLoadPayload {
  RegionKind region = RegionKind::main_image;
  Address base = 0;
  std::uint64_t size = 0;
  std::string name;
  std::vector<LayoutDecl> layouts;
  std::string header_bytes;
  std::optional<std::uint64_t> size_of_image;
  friend bool operator==(const ImageLoadPayload&, const ImageLoadPayload&) = default;
};

struct RegionAllocPayload {
  RegionKind region = RegionKind::data_alloc;
  Address base = 0;
  std::uint64_t size = 0;
  friend bool operator==(const RegionAllocPayload&, const RegionAllocPayload&) = default;
};

struct RegionFreePayload {
  Address base = 0;
  friend bool operator==(const RegionFreePayload&, const RegionFreePayload&) = default;
};

struct ApiPayload {
  std::string name;
  std::vector<Value> args;
  std::optional<Value> ret;
  Address return_address = 0;
  bool native = false;
  std::vector<LayoutDecl> out_structs;
  std::optional<Pid> target_pid;
  friend bool operator==(const ApiPayload&, const ApiPayload&) = default;
};

using RegisterFile = std::map<std::string, std::uint64_t>;

struct InsnPayload {
  Mnemonic mnemonic = Mnemonic::cpuid;
  Address address = 0;
  RegisterFile in_regs;
  RegisterFile out_regs;
  friend bool operator==(const InsnPayload&, const InsnPayload&) = default;
};

struct MemPayload {
  Address address = 0;
  std::uint32_t size = 4;
  std::uint64_t value = 0;
  Address accessor_address = 0;
  friend bool operator==(const MemPayload&, const MemPayload&) = default;
};

struct ProcessStartPayload {
  Pid parent = 0;
  std::string image;
  friend bool operator==(const ProcessStartPayload&, const ProcessStartPayload&) = default;
};

struct ThreadStartPayload {
  Address start = 0;
  friend bool operator==(const ThreadStartPayload&, const ThreadStartPayload&) = default;
};

using Payload = std::variant<MetaPayload, ImageLoadPayload, RegionAllocPayload, RegionFreePayload, ApiPayload,
                             InsnPayload, MemPayload, ProcessStartPayload, ThreadStartPayload>;

struct TraceEvent {
  std::uint64_t seq = 0;
  EventKind kind = EventKind::meta;
  Pid pid = 0;
  Tid tid = 0;
  std::uint64_t insn_index = 0;
  Payload payload;

  const ApiPayload& api() const { return std::get<ApiPayload>(payload); }
  const InsnPayload& insn() const { return std::get<InsnPayload>(payload); }
  const MemPayload& mem() const { return std::get<MemPayload>(payload); }

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

using Trace = std::vector<TraceEvent>;

class TraceError : public std::runtime_error {
 public:
  TraceError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Parses the line-oriented trace format. Blank lines and lines starting with
// '#' are skipped but still count toward line numbers.
Trace parse_trace(std::string_view source);

std::string serialize_event(const TraceEvent& ev);
std::string serialize_trace(const Trace& trace);

struct Diagnostic {
  std::uint64_t seq = 0;
  std::string reason;
  friend bool operator==(const Diagnostic&, const Diagnostic&) = default;
};

std::vector<Diagnostic> validate_trace(const Trace& trace);

// Percent-encoding used for string values inside records.
std::string encode_text(std::string_view s);
std::string decode_text(std::string_view s);

std::string hex_u64(std::uint64_t v);
std::uint64_t parse_u64(std::string_view s);

}  // namespace evprof
