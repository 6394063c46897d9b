#include "evprof/trace.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <set>
#include <sstream>
#include <unordered_map>

namespace evprof {

namespace {

bool is_plain(unsigned char c) {
  if (std::isalnum(c)) return true;
  switch (c) {
    case '.': case '_': case '-': case ':': case '\\': case '!': case '*': case '(': case ')':
    case '~': case '$': case '&': case '?': case '#': case '\'': case '"': case '<': case '>':
    case '|': case '^': case '{': case '}':
      return true;
    default:
      return false;
  }
}

int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string bytes_to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(kDigits[c >> 4]);
    out.push_back(kDigits[c & 0xF]);
  }
  return out;
}

std::string hex_to_bytes(std::string_view hex) {
  if (hex.size() % 2 != 0) throw std::invalid_argument("odd-length hex string");
  std::string out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    int hi = hex_digit(hex[i]);
    int lo = hex_digit(hex[i + 1]);
    if (hi < 0 || lo < 0) throw std::invalid_argument("bad hex digit");
    out.push_back(static_cast<char>((hi << 4) | lo));
  }
  return out;
}

std::string layouts_to_string(const std::vector<LayoutDecl>& layouts) {
  std::string out;
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    const auto& l = layouts[i];
    if (i) out += ',';
    out += encode_text(l.struct_name);
    out += '@';
    out += hex_u64(l.base);
    out += '[';
    for (std::size_t f = 0; f < l.fields.size(); ++f) {
      if (f) out += ';';
      out += encode_text(l.fields[f].name);
      out += '+';
      out += hex_u64(l.fields[f].offset);
      out += '/';
      out += std::to_string(l.fields[f].width);
    }
    out += ']';
  }
  return out;
}

std::vector<LayoutDecl> parse_layouts(std::string_view s) {
  std::vector<LayoutDecl> out;
  if (s.empty()) return out;
  for (auto item : split(s, ',')) {
    auto at = item.find('@');
    auto open = item.find('[');
    if (at == std::string_view::npos || open == std::string_view::npos || open < at || item.back() != ']')
      throw std::invalid_argument("malformed layout '" + std::string(item) + "'");
    LayoutDecl decl;
    decl.struct_name = decode_text(item.substr(0, at));
    decl.base = parse_u64(item.substr(at + 1, open - at - 1));
    auto body = item.substr(open + 1, item.size() - open - 2);
    if (!body.empty()) {
      for (auto field : split(body, ';')) {
        auto plus = field.find('+');
        auto slash = field.find('/');
        if (plus == std::string_view::npos || slash == std::string_view::npos || slash < plus)
          throw std::invalid_argument("malformed layout field '" + std::string(field) + "'");
        FieldDecl fd;
        fd.name = decode_text(field.substr(0, plus));
        fd.offset = parse_u64(field.substr(plus + 1, slash - plus - 1));
        fd.width = static_cast<std::uint32_t>(parse_u64(field.substr(slash + 1)));
        decl.fields.push_back(std::move(fd));
      }
    }
    out.push_back(std::move(decl));
  }
  return out;
}

std::string regs_to_string(const RegisterFile& regs) {
  std::string out;
  bool first = true;
  for (const auto& [name, value] : regs) {
    if (!first) out += ',';
    first = false;
    out += name;
    out += ':';
    out += hex_u64(value);
  }
  return out;
}

RegisterFile parse_regs(std::string_view s) {
  RegisterFile regs;
  if (s.empty()) return regs;
  for (auto item : split(s, ',')) {
    auto colon = item.find(':');
    if (colon == std::string_view::npos) throw std::invalid_argument("malformed register '" + std::string(item) + "'");
    regs[std::string(item.substr(0, colon))] = parse_u64(item.substr(colon + 1));
  }
  return regs;
}

std::string values_to_string(const std::vector<Value>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += to_string(values[i]);
  }
  return out;
}

std::vector<Value> parse_values(std::string_view s) {
  std::vector<Value> out;
  if (s.empty()) return out;
  for (auto item : split(s, ',')) out.push_back(parse_value(item));
  return out;
}

// Flat key=value record with duplicate detection and consumption tracking.
class Record {
 public:
  explicit Record(std::string_view line) {
    for (auto tok : split(line, ' ')) {
      if (tok.empty()) continue;
      auto eq = tok.find('=');
      if (eq == std::string_view::npos || eq == 0)
        throw std::invalid_argument("token '" + std::string(tok) + "' is not key=value");
      std::string key(tok.substr(0, eq));
      if (!fields_.emplace(key, std::string(tok.substr(eq + 1))).second)
        throw std::invalid_argument("duplicate key '" + key + "'");
    }
  }

  std::optional<std::string> take(const std::string& key) {
    auto it = fields_.find(key);
    if (it == fields_.end()) return std::nullopt;
    std::string v = std::move(it->second);
    fields_.erase(it);
    return v;
  }

  std::string require(const std::string& key) {
    auto v = take(key);
    if (!v) throw std::invalid_argument("missing key '" + key + "'");
    return *v;
  }

  void finish() const {
    if (!fields_.empty()) throw std::invalid_argument("unknown key '" + fields_.begin()->first + "'");
  }

 private:
  std::map<std::string, std::string> fields_;
};

RegionKind require_region(Record& r) {
  auto s = r.require("region");
  auto k = parse_region_kind(s);
  if (!k) throw std::invalid_argument("unknown region kind '" + s + "'");
  return *k;
}

bool parse_bool(std::string_view s) {
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  throw std::invalid_argument("bad boolean '" + std::string(s) + "'");
}

TraceEvent parse_line(std::string_view line) {
  Record r(line);
  TraceEvent ev;
  ev.seq = parse_u64(r.require("seq"));
  auto kind_text = r.require("kind");
  auto kind = parse_event_kind(kind_text);
  if (!kind) throw std::invalid_argument("unknown kind '" + kind_text + "'");
  ev.kind = *kind;
  if (auto v = r.take("pid")) ev.pid = static_cast<Pid>(parse_u64(*v));
  if (auto v = r.take("tid")) ev.tid = static_cast<Tid>(parse_u64(*v));
  if (auto v = r.take("insn_index")) ev.insn_index = parse_u64(*v);

  switch (ev.kind) {
    case EventKind::meta: {
      MetaPayload p;
      p.sample_id = decode_text(r.require("sample_id"));
      if (auto v = r.take("family")) p.labels.family = decode_text(*v);
      if (auto v = r.take("year")) p.labels.year = decode_text(*v);
      if (auto v = r.take("packer")) p.labels.packer = decode_text(*v);
      if (auto v = r.take("protector")) p.labels.protector = decode_text(*v);
      if (auto v = r.take("dataset")) p.labels.dataset = decode_text(*v);
      ev.payload = std::move(p);
      break;
    }
    case EventKind::image_load: {
      ImageLoadPayload p;
      p.region = require_region(r);
      p.base = parse_u64(r.require("base"));
      p.size = parse_u64(r.require("size"));
      if (auto v = r.take("name")) p.name = decode_text(*v);
      if (auto v = r.take("layout")) p.layouts = parse_layouts(*v);
      if (auto v = r.take("header_bytes")) p.header_bytes = hex_to_bytes(*v);
      if (auto v = r.take("size_of_image")) p.size_of_image = parse_u64(*v);
      ev.payload = std::move(p);
      break;
    }
    case EventKind::region_alloc: {
      RegionAllocPayload p;
      p.region = require_region(r);
      p.base = parse_u64(r.require("base"));
      p.size = parse_u64(r.require("size"));
      ev.payload = p;
      break;
    }
    case EventKind::region_free:
      ev.payload = RegionFreePayload{parse_u64(r.require("base"))};
      break;
    case EventKind::api: {
      ApiPayload p;
      p.name = decode_text(r.require("name"));
      if (auto v = r.take("args")) p.args = parse_values(*v);
      if (auto v = r.take("ret")) p.ret = parse_value(*v);
      p.return_address = parse_u64(r.require("return_address"));
      if (auto v = r.take("native")) p.native = parse_bool(*v);
      if (auto v = r.take("out_structs")) p.out_structs = parse_layouts(*v);
      if (auto v = r.take("target_pid")) p.target_pid = static_cast<Pid>(parse_u64(*v));
      ev.payload = std::move(p);
      break;
    }
    case EventKind::insn: {
      InsnPayload p;
      auto m = r.require("mnemonic");
      auto mn = parse_mnemonic(m);
      if (!mn) throw std::invalid_argument("unknown mnemonic '" + m + "'");
      p.mnemonic = *mn;
      p.address = parse_u64(r.require("address"));
      if (auto v = r.take("in_regs")) p.in_regs = parse_regs(*v);
      if (auto v = r.take("out_regs")) p.out_regs = parse_regs(*v);
      ev.payload = std::move(p);
      break;
    }
    case EventKind::mem_read:
    case EventKind::mem_write: {
      MemPayload p;
      p.address = parse_u64(r.require("address"));
      p.size = static_cast<std::uint32_t>(parse_u64(r.require("size")));
      p.value = parse_u64(r.require("value"));
      p.accessor_address = parse_u64(r.require("accessor_address"));
      ev.payload = p;
      break;
    }
    case EventKind::process_start: {
      ProcessStartPayload p;
      p.parent = static_cast<Pid>(parse_u64(r.require("parent")));
      if (auto v = r.take("image")) p.image = decode_text(*v);
      ev.payload = std::move(p);
      break;
    }
    case EventKind::thread_start:
      ev.payload = ThreadStartPayload{parse_u64(r.require("start"))};
      break;
  }
  r.finish();
  return ev;
}

template <typename Enum, std::size_t N>
std::optional<Enum> lookup(const std::array<std::string_view, N>& names, std::string_view s) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<Enum>(i);
  return std::nullopt;
}

constexpr std::array<std::string_view, 10> kEventKindNames{
    "meta", "image_load", "region_alloc", "region_free", "api",
    "insn", "mem_read",   "mem_write",    "process_start", "thread_start"};
constexpr std::array<std::string_view, 8> kRegionKindNames{
    "main_image", "standard_library", "custom_library", "exec_alloc",
    "data_alloc", "injected",         "pe_header",      "honeypot_image"};
constexpr std::array<std::string_view, 9> kMnemonicNames{
    "rdtsc", "cpuid", "int3", "int2d", "sldt", "sidt", "sgdt", "str", "fpu_eip_leak"};

}  // namespace

std::string_view to_string(EventKind k) { return kEventKindNames[static_cast<std::size_t>(k)]; }
std::optional<EventKind> parse_event_kind(std::string_view s) { return lookup<EventKind>(kEventKindNames, s); }
std::string_view to_string(RegionKind k) { return kRegionKindNames[static_cast<std::size_t>(k)]; }
std::optional<RegionKind> parse_region_kind(std::string_view s) { return lookup<RegionKind>(kRegionKindNames, s); }
std::string_view to_string(Mnemonic m) { return kMnemonicNames[static_cast<std::size_t>(m)]; }
std::optional<Mnemonic> parse_mnemonic(std::string_view s) { return lookup<Mnemonic>(kMnemonicNames, s); }

std::string hex_u64(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

std::uint64_t parse_u64(std::string_view s) {
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    s.remove_prefix(2);
    base = 16;
  }
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
    throw std::invalid_argument("bad number '" + std::string(s) + "'");
  return v;
}

std::string encode_text(std::string_view s) {
  static constexpr char kDigits[] = "0123456789ABCDEF";
  std::string out;
  out.reserve(s.size());
  for (unsigned char c : s) {
    if (is_plain(c)) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kDigits[c >> 4]);
      out.push_back(kDigits[c & 0xF]);
    }
  }
  return out;
}

std::string decode_text(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '%') {
      out.push_back(s[i]);
      continue;
    }
    if (i + 2 >= s.size()) throw std::invalid_argument("truncated escape");
    int hi = hex_digit(s[i + 1]);
    int lo = hex_digit(s[i + 2]);
    if (hi < 0 || lo < 0) throw std::invalid_argument("bad escape in '" + std::string(s) + "'");
    out.push_back(static_cast<char>((hi << 4) | lo));
    i += 2;
  }
  return out;
}

std::string to_string(const Value& v) {
  switch (v.type) {
    case Value::Type::integer: return "i:" + std::to_string(v.as_int());
    case Value::Type::string: return "s:" + encode_text(v.text);
    case Value::Type::duration_ms: return "ms:" + std::to_string(v.raw);
    case Value::Type::address: return "a:" + hex_u64(v.raw);
    case Value::Type::byte_length: return "n:" + std::to_string(v.raw);
  }
  return {};
}

Value parse_value(std::string_view token) {
  auto colon = token.find(':');
  if (colon == std::string_view::npos) throw std::invalid_argument("untyped value '" + std::string(token) + "'");
  auto tag = token.substr(0, colon);
  auto body = token.substr(colon + 1);
  if (tag == "s") return Value::string(decode_text(body));
  if (tag == "ms") return Value::duration(parse_u64(body));
  if (tag == "a") return Value::address(parse_u64(body));
  if (tag == "n") return Value::length(parse_u64(body));
  if (tag == "i") {
    if (!body.empty() && body[0] == '-') {
      std::uint64_t mag = parse_u64(body.substr(1));
      if (mag > (1ull << 63)) throw std::invalid_argument("integer out of range '" + std::string(body) + "'");
      return Value::integer(static_cast<std::int64_t>(0 - mag));
    }
    return Value::integer(static_cast<std::int64_t>(parse_u64(body)));
  }
  throw std::invalid_argument("unknown value tag '" + std::string(tag) + "'");
}

Trace parse_trace(std::string_view source) {
  Trace out;
  std::size_t line_no = 0;
  bool seen_meta = false;
  std::size_t start = 0;
  while (start <= source.size()) {
    auto end = source.find('\n', start);
    if (end == std::string_view::npos) end = source.size();
    auto line = source.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') {
      if (end == source.size()) break;
      continue;
    }
    TraceEvent ev;
    try {
      ev = parse_line(line);
    } catch (const std::invalid_argument& e) {
      throw TraceError(line_no, e.what());
    }
    if (ev.kind == EventKind::meta) {
      if (seen_meta) throw TraceError(line_no, "second meta record");
      if (!out.empty()) throw TraceError(line_no, "meta record must be first");
      seen_meta = true;
    } else if (!seen_meta) {
      throw TraceError(line_no, "missing meta record before first event");
    }
    if (!out.empty() && ev.seq <= out.back().seq)
      throw TraceError(line_no, "non-monotonic seq " + std::to_string(ev.seq) + " after " +
                                    std::to_string(out.back().seq));
    out.push_back(std::move(ev));
    if (end == source.size()) break;
  }
  if (!seen_meta) throw TraceError(line_no, "missing meta record");
  return out;
}

std::string serialize_event(const TraceEvent& ev) {
  std::string s = "seq=" + std::to_string(ev.seq) + " kind=" + std::string(to_string(ev.kind)) +
                  " pid=" + std::to_string(ev.pid) + " tid=" + std::to_string(ev.tid) +
                  " insn_index=" + std::to_string(ev.insn_index);
  auto add = [&s](std::string_view key, const std::string& value) {
    s += ' ';
    s += key;
    s += '=';
    s += value;
  };
  auto add_opt = [&](std::string_view key, const std::string& text) {
    if (!text.empty()) add(key, encode_text(text));
  };

  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, MetaPayload>) {
          add("sample_id", encode_text(p.sample_id));
          add_opt("family", p.labels.family);
          add_opt("year", p.labels.year);
          add_opt("packer", p.labels.packer);
          add_opt("protector", p.labels.protector);
          add_opt("dataset", p.labels.dataset);
        } else if constexpr (std::is_same_v<T, ImageLoadPayload>) {
          add("region", std::string(to_string(p.region)));
          add("base", hex_u64(p.base));
          add("size", hex_u64(p.size));
          add_opt("name", p.name);
          if (!p.layouts.empty()) add("layout", layouts_to_string(p.layouts));
          if (!p.header_bytes.empty()) add("header_bytes", bytes_to_hex(p.header_bytes));
          if (p.size_of_image) add("size_of_image", hex_u64(*p.size_of_image));
        } else if constexpr (std::is_same_v<T, RegionAllocPayload>) {
          add("region", std::string(to_string(p.region)));
          add("base", hex_u64(p.base));
          add("size", hex_u64(p.size));
        } else if constexpr (std::is_same_v<T, RegionFreePayload>) {
          add("base", hex_u64(p.base));
        } else if constexpr (std::is_same_v<T, ApiPayload>) {
          add("name", encode_text(p.name));
          if (!p.args.empty()) add("args", values_to_string(p.args));
          if (p.ret) add("ret", to_string(*p.ret));
          add("return_address", hex_u64(p.return_address));
          add("native", p.native ? "1" : "0");
          if (!p.out_structs.empty()) add("out_structs", layouts_to_string(p.out_structs));
          if (p.target_pid) add("target_pid", std::to_string(*p.target_pid));
        } else if constexpr (std::is_same_v<T, InsnPayload>) {
          add("mnemonic", std::string(to_string(p.mnemonic)));
          add("address", hex_u64(p.address));
          if (!p.in_regs.empty()) add("in_regs", regs_to_string(p.in_regs));
          if (!p.out_regs.empty()) add("out_regs", regs_to_string(p.out_regs));
        } else if constexpr (std::is_same_v<T, MemPayload>) {
          add("address", hex_u64(p.address));
          add("size", std::to_string(p.size));
          add("value", hex_u64(p.value));
          add("accessor_address", hex_u64(p.accessor_address));
        } else if constexpr (std::is_same_v<T, ProcessStartPayload>) {
          add("parent", std::to_string(p.parent));
          add_opt("image", p.image);
        } else if constexpr (std::is_same_v<T, ThreadStartPayload>) {
          add("start", hex_u64(p.start));
        }
      },
      ev.payload);
  return s;
}

std::string serialize_trace(const Trace& trace) {
  std::string out;
  for (const auto& ev : trace) {
    out += serialize_event(ev);
    out += '\n';
  }
  return out;
}

namespace {

struct Span {
  Address base;
  std::uint64_t size;
};

class ShadowRegions {
 public:
  void add(Pid pid, Address base, std::uint64_t size) { spans_[pid].push_back({base, size}); }
  void remove(Pid pid, Address base) {
    auto& v = spans_[pid];
    v.erase(std::remove_if(v.begin(), v.end(), [&](const Span& s) { return s.base == base; }), v.end());
  }
  bool known_pid(Pid pid) const { return spans_.count(pid) != 0; }
  bool contains(Pid pid, Address a) const {
    auto it = spans_.find(pid);
    if (it == spans_.end()) return false;
    return std::any_of(it->second.begin(), it->second.end(),
                       [&](const Span& s) { return a >= s.base && a - s.base < s.size; });
  }

 private:
  std::unordered_map<Pid, std::vector<Span>> spans_;
};

std::string pid_tid(Pid pid, Tid tid) { return "(" + std::to_string(pid) + "," + std::to_string(tid) + ")"; }

void check_layouts(const TraceEvent& ev, const std::vector<LayoutDecl>& layouts, std::vector<Diagnostic>& out) {
  for (const auto& l : layouts) {
    auto fields = l.fields;
    std::sort(fields.begin(), fields.end(), [](const FieldDecl& a, const FieldDecl& b) { return a.offset < b.offset; });
    for (std::size_t i = 1; i < fields.size(); ++i) {
      if (fields[i - 1].offset + fields[i - 1].width > fields[i].offset)
        out.push_back({ev.seq, "layout " + l.struct_name + " fields " + fields[i - 1].name + " and " +
                                   fields[i].name + " overlap"});
    }
  }
}

}  // namespace

std::vector<Diagnostic> validate_trace(const Trace& trace) {
  std::vector<Diagnostic> out;
  std::map<std::pair<Pid, Tid>, std::uint64_t> last_index;
  ShadowRegions regions;
  std::set<Pid> honeypot_targets;

  for (const auto& ev : trace) {
    if (ev.kind != EventKind::meta) {
      auto key = std::make_pair(ev.pid, ev.tid);
      auto it = last_index.find(key);
      if (it != last_index.end() && ev.insn_index < it->second)
        out.push_back({ev.seq, "insn_index decreased on " + pid_tid(ev.pid, ev.tid) + " from " +
                                   std::to_string(it->second) + " to " + std::to_string(ev.insn_index)});
      last_index[key] = std::max(ev.insn_index, it == last_index.end() ? 0 : it->second);
    }

    switch (ev.kind) {
      case EventKind::image_load: {
        const auto& p = std::get<ImageLoadPayload>(ev.payload);
        regions.add(ev.pid, p.base, p.size);
        check_layouts(ev, p.layouts, out);
        if (p.size_of_image && *p.size_of_image + 4 > p.header_bytes.size() && !p.header_bytes.empty())
          out.push_back({ev.seq, "size_of_image offset outside header bytes"});
        break;
      }
      case EventKind::region_alloc: {
        const auto& p = std::get<RegionAllocPayload>(ev.payload);
        regions.add(ev.pid, p.base, p.size);
        break;
      }
      case EventKind::region_free:
        regions.remove(ev.pid, std::get<RegionFreePayload>(ev.payload).base);
        break;
      case EventKind::api: {
        const auto& p = ev.api();
        check_layouts(ev, p.out_structs, out);
        if (regions.known_pid(ev.pid) && !regions.contains(ev.pid, p.return_address) &&
            !honeypot_targets.count(ev.pid))
          out.push_back({ev.seq, "return_address " + hex_u64(p.return_address) + " of " + p.name +
                                     " not inside any region of pid " + std::to_string(ev.pid)});
        if (p.target_pid && *p.target_pid != ev.pid) honeypot_targets.insert(*p.target_pid);
        break;
      }
      case EventKind::insn: {
        const auto& p = ev.insn();
        if (p.mnemonic == Mnemonic::cpuid) {
          if (!p.in_regs.count("EAX")) out.push_back({ev.seq, "cpuid missing EAX-in"});
          for (const char* r : {"EBX", "ECX", "EDX"})
            if (!p.out_regs.count(r)) out.push_back({ev.seq, std::string("cpuid missing ") + r + "-out"});
        } else if (p.mnemonic == Mnemonic::rdtsc) {
          if (!p.out_regs.count("TSC")) out.push_back({ev.seq, "rdtsc missing TSC-out"});
        }
        break;
      }
      case EventKind::mem_read:
      case EventKind::mem_write: {
        const auto& p = ev.mem();
        if (p.size != 1 && p.size != 2 && p.size != 4 && p.size != 8)
          out.push_back({ev.seq, "memory access size " + std::to_string(p.size) + " not in {1,2,4,8}"});
        break;
      }
      default:
        break;
    }
  }
  return out;
}

}  // namespace evprof
