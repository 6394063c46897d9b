#include "evprof/generator.hpp"

#include <array>
#include <cstdio>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <json.hpp>

#include "evprof/injection.hpp"
#include "evprof/clock.hpp"

namespace evprof {

namespace {

constexpr Tid kGenTid = 1;
constexpr Address kPeb = 0x7ffd0000;
constexpr Address kHeap = 0x00500000;
constexpr Address kSharedUserData = 0x7ffe0000;
constexpr Address kNtdll = 0x77000000;
constexpr std::uint64_t kLibSize = 0x100000;
constexpr std::uint64_t kDefaultStep = 7;
constexpr std::uint64_t kSandwichGap = 100;  // keeps consecutive pairs out of each other's window
constexpr std::uint64_t kInitialTsc = 1'000'000'000;

// Native filler calls that no rule matches.
constexpr std::array<const char*, 11> kFillerPool{
    "NtClose",         "NtQueryVirtualMemory", "NtReadFile",          "NtFreeVirtualMemory",
    "NtProtectVirtualMemory", "NtQueryInformationFile", "NtOpenSection", "NtMapViewOfSection",
    "NtUnmapViewOfSection",   "NtQueryKey",          "NtEnumerateKey"};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }
  bool chance(std::uint64_t percent) { return below(100) < percent; }

 private:
  std::uint64_t state_;
};

bool is_native_name(std::string_view name) { return name.rfind("Nt", 0) == 0 || name.rfind("Zw", 0) == 0; }

// Events are built without seq; insn_index holds the instruction advance
// since the previous event of the thread and rdtsc TSC holds the raw tick
// advance since the previous rdtsc of the thread.
struct Block {
  double pos = 50.0;
  std::vector<TraceEvent> events;
  std::vector<std::pair<std::size_t, std::string>> hits;
  std::map<std::size_t, Pid> hit_pids;
};

class BlockBuilder {
 public:
  BlockBuilder(Origin origin, Rng& rng) : origin_(origin), rng_(rng) {}

  Address code() {
    Address base = origin_ == Origin::red ? kGenImageBase : kGenKernel32;
    return base + 0x100 + rng_.below(0x1000) * 0x10;
  }

  TraceEvent& api(std::string name, std::vector<Value> args, std::optional<Value> ret = Value::integer(0)) {
    ApiPayload p;
    p.native = is_native_name(name);
    p.name = std::move(name);
    p.args = std::move(args);
    p.ret = std::move(ret);
    p.return_address = code();
    return push(EventKind::api, std::move(p));
  }

  TraceEvent& insn(Mnemonic m, RegisterFile in = {}, RegisterFile out = {}) {
    InsnPayload p;
    p.mnemonic = m;
    p.address = code();
    p.in_regs = std::move(in);
    p.out_regs = std::move(out);
    return push(EventKind::insn, std::move(p));
  }

  TraceEvent& rdtsc(std::uint64_t tick_advance, std::uint64_t insn_advance) {
    auto& ev = insn(Mnemonic::rdtsc, {}, {{"TSC", tick_advance}});
    ev.insn_index = insn_advance;
    return ev;
  }

  TraceEvent& mem(EventKind kind, Address address, std::uint32_t size, std::uint64_t value) {
    return push(kind, MemPayload{address, size, value, code()});
  }

  TraceEvent& push(EventKind kind, Payload payload) {
    TraceEvent ev;
    ev.kind = kind;
    ev.pid = kGenPid;
    ev.tid = kGenTid;
    ev.insn_index = kDefaultStep;
    ev.payload = std::move(payload);
    block_.events.push_back(std::move(ev));
    return block_.events.back();
  }

  // Marks the last event as producing `technique` when the origin is red.
  void hit(const std::string& technique, bool regardless_of_origin = false, Pid pid = kGenPid) {
    if (origin_ != Origin::red && !regardless_of_origin) return;
    block_.hits.emplace_back(block_.events.size() - 1, technique);
    if (pid != kGenPid) block_.hit_pids[block_.events.size() - 1] = pid;
  }

  Block take(double pos) {
    block_.pos = pos;
    return std::move(block_);
  }

 private:
  Origin origin_;
  Rng& rng_;
  Block block_;
};

Value s(std::string v) { return Value::string(std::move(v)); }
Value i(std::int64_t v) { return Value::integer(v); }
Value a(Address v) { return Value::address(v); }
Value n(std::uint64_t v) { return Value::length(v); }

struct WatchedField {
  Address address;
  std::uint32_t width;
  std::uint64_t value;
};

const std::map<std::string, WatchedField, std::less<>>& watched_fields() {
  static const std::map<std::string, WatchedField, std::less<>> kFields{
      {"IsDebuggerPresentPEB", {kPeb + 0x2, 1, 0}},
      {"NtGlobalFlag", {kPeb + 0x68, 4, 0}},
      {"NumberOfProcessors", {kPeb + 0x64, 4, 1}},
      {"HeapFlags", {kHeap + 0x40, 4, 2}},
      {"HeapForceFlags", {kHeap + 0x44, 4, 0}},
      {"SharedUserData_KernelDebugger", {kSharedUserData + 0x2d4, 1, 0}},
  };
  return kFields;
}

std::vector<LayoutDecl> system_layouts() {
  return {
      LayoutDecl{"PEB", kPeb, {{"BeingDebugged", 0x2, 1}, {"NumberOfProcessors", 0x64, 4}, {"NtGlobalFlag", 0x68, 4}}},
      LayoutDecl{"PEB.ProcessHeap", kHeap, {{"Flags", 0x40, 4}, {"ForceFlags", 0x44, 4}}},
      LayoutDecl{"SharedUserData", kSharedUserData, {{"KernelDebugger", 0x2d4, 1}}},
  };
}

std::string pe_header_bytes() {
  std::string h(kGenSizeOfImageOffset + 4, '\0');
  h[0] = 'M';
  h[1] = 'Z';
  h[0x3c] = static_cast<char>(0x80);
  h[0x80] = 'P';
  h[0x81] = 'E';
  std::uint32_t soi = static_cast<std::uint32_t>(kGenImageSize + 0x1000);
  for (int b = 0; b < 4; ++b) h[kGenSizeOfImageOffset + b] = static_cast<char>((soi >> (8 * b)) & 0xff);
  return h;
}

using ApiBuilder = std::function<void(BlockBuilder&)>;

void single_api(BlockBuilder& b, const std::string& id, std::string name, std::vector<Value> args,
                std::optional<Value> ret = Value::integer(0)) {
  b.api(std::move(name), std::move(args), std::move(ret));
  b.hit(id);
}

const std::map<std::string, ApiBuilder, std::less<>>& api_builders() {
  static const std::map<std::string, ApiBuilder, std::less<>> kBuilders = [] {
    std::map<std::string, ApiBuilder, std::less<>> m;
    auto simple = [&m](std::string id, std::string name, std::vector<Value> args,
                       std::optional<Value> ret = Value::integer(0)) {
      m[id] = [id, name, args, ret](BlockBuilder& b) { single_api(b, id, name, args, ret); };
    };
    // Anti Debug
    simple("IsDebuggerPresentAPI", "IsDebuggerPresent", {});
    simple("CheckRemoteDebuggerPresentAPI", "CheckRemoteDebuggerPresent", {i(-1), a(0x12ff00)}, i(1));
    simple("NSIT_ThreadHideFromDebugger", "NtSetInformationThread", {i(-2), s("ThreadHideFromDebugger"), a(0), n(0)});
    simple("NQIP_ProcessDebugPort", "NtQueryInformationProcess", {i(-1), s("ProcessDebugPort"), a(0x12fe00), n(4)});
    simple("NQIP_ProcessDebugObject", "NtQueryInformationProcess", {i(-1), i(0x1e), a(0x12fe00), n(4)});
    simple("NQIP_ProcessDebugFlag", "NtQueryInformationProcess", {i(-1), s("ProcessDebugFlags"), a(0x12fe00), n(4)});
    simple("CanOpenCsrss", "OpenProcess", {i(0x1f0fff), i(0), s("csrss.exe")}, i(0));
    simple("MemoryBreakpoints_PageGuard", "VirtualProtect", {a(0x600000), n(0x1000), i(0x104), a(0x12fd00)}, i(1));
    simple("HardwareBreakpoints", "GetThreadContext", {i(-2), a(0x12fc00)}, i(1));
    simple("NQSI_SystemKernelDebuggerInformation", "NtQuerySystemInformation",
           {s("SystemKernelDebuggerInformation"), a(0x12fb00), n(2)});
    simple("VirtualAlloc_WriteWatch", "VirtualAlloc", {a(0), n(0x1000), i(0x203000), i(4)}, a(0x610000));
    simple("NQO_ObjectTypeInformation", "NtQueryObject", {i(0x24), s("ObjectTypeInformation"), a(0x12fa00), n(0x1000)});
    simple("NQO_ObjectAllTypesInformation", "NtQueryObject", {i(0), i(3), a(0x12fa00), n(0x1000)});
    simple("GetTickCount", "GetTickCount", {});
    // VM Checks
    simple("reg_keys", "RegOpenKeyExA", {i(0x80000002), s("HARDWARE\\ACPI\\DSDT\\VBOX__"), i(0), i(0x20019), a(0x12f900)},
           i(0));
    simple("reg_key_value", "RegQueryValueExA", {i(0x1a4), s("SystemBiosVersion"), a(0), a(0x12f800), a(0x12f700)},
           i(0));
    simple("vm_check_mac", "GetAdaptersInfo", {a(0x12f000), a(0x12eff0)}, i(0));
    simple("Firmware_RSMB", "GetSystemFirmwareTable", {s("RSMB"), i(0), a(0x620000), n(0x1000)},
           s("SMBIOS 2.5 innotek GmbH VirtualBox VBOX 1.2"));
    simple("Firmware_ACPI", "GetSystemFirmwareTable", {i(0x41435049), i(0x54445344), a(0x620000), n(0x1000)},
           s("DSDT VBOX   VBOXBIOS"));
    simple("Device_Artifacts", "CreateFileA", {s("\\\\.\\VBoxMiniRdrDN"), i(0x80000000), i(1), a(0), i(3)}, i(-1));
    simple("mouse_movement", "GetCursorPos", {a(0x12ef00)}, s("640,480"));
    simple("filesystem_artifacts", "GetFileAttributesA", {s("C:\\windows\\System32\\drivers\\VBoxMouse.sys")}, i(0x20));
    simple("setupdi_diskdrive", "SetupDiGetDeviceRegistryPropertyW", {i(0x7c0), a(0x12ee00), i(0xc), a(0), a(0x12ed00)},
           s("VBOX HARDDISK"));
    simple("manufacturer_computer_system_wmi", "wmi_query", {s("SELECT Manufacturer FROM Win32_ComputerSystem")},
           s("innotek GmbH"));
    simple("model_computer_system_wmi", "wmi_query", {s("SELECT Model FROM Win32_ComputerSystem")},
           s("VirtualBox"));
    simple("vbox_mac_wmi", "wmi_query", {s("SELECT MACAddress FROM Win32_NetworkAdapterConfiguration")},
           s("08:00:27:12:34:56"));
    simple("process_id_processor_wmi", "wmi_query", {s("SELECT ProcessorId FROM Win32_Processor")},
           s("178BFBFF00000000"));
    simple("serial_number_bios_wmi", "wmi_query", {s("SELECT SerialNumber FROM Win32_BIOS")}, s("0"));
    // Resource Profiling
    simple("process_enum", "Process32FirstW", {i(0x1b0), a(0x12ec00)}, s("pin.exe"));
    simple("memory_space", "GlobalMemoryStatusEx", {a(0x12eb00)}, n(2 * kGiB));
    simple("disk_size_getdiskfreespace", "GetDiskFreeSpaceExA", {s("C:\\"), a(0x12ea00), a(0x12ea08), a(0x12ea10)},
           n(40 * kGiB));
    simple("dizk_size_deviceiocontrol", "DeviceIoControl",
           {i(0x1c0), i(0x7405c), a(0), n(0), a(0x12e900), n(8), a(0x12e8f0), a(0)}, n(40 * kGiB));
    simple("disk_size_wmi", "wmi_query", {s("SELECT Size FROM Win32_LogicalDisk")}, s("42949672960"));
    // Timing Attacks
    simple("time_stalling", "NtDelayExecution", {i(0), Value::duration(300'000)});
    // Code Injection
    m["Shellcode_injected"] = [](BlockBuilder& b) {
      auto& ev = b.api("NtWriteVirtualMemory", {i(0x1c), a(0x9000), a(0x402000), n(0x200)});
      std::get<ApiPayload>(ev.payload).target_pid = 2000;
      b.hit("Shellcode_injected");
    };
    return m;
  }();
  return kBuilders;
}


Block technique_block(const TechniqueSpec& t, Rng& rng) {
  BlockBuilder b(t.origin, rng);
  const bool plain = t.variant.empty();
  if (!plain && t.variant != "same_value" && t.variant != "write_before_read")
    throw GenError("unknown variant '" + t.variant + "'");

  if (auto it = api_builders().find(t.id); it != api_builders().end()) {
    if (!plain) throw GenError("variant '" + t.variant + "' does not apply to " + t.id);
    it->second(b);
    return b.take(t.pos);
  }
  if (auto it = watched_fields().find(t.id); it != watched_fields().end()) {
    if (t.variant == "same_value") throw GenError("variant same_value does not apply to " + t.id);
    const auto& f = it->second;
    if (t.variant == "write_before_read") b.mem(EventKind::mem_write, f.address, f.width, f.value);
    b.mem(EventKind::mem_read, f.address, f.width, f.value);
    if (plain) b.hit(t.id);
    return b.take(t.pos);
  }
  if (t.id == "ErasePEHeader" || t.id == "SizeOfImage") {
    if (t.variant == "write_before_read") throw GenError("variant write_before_read does not apply to " + t.id);
    const bool soi = t.id == "SizeOfImage";
    const std::uint64_t stored = soi ? kGenImageSize + 0x1000 : 0x5a4d;
    const std::uint64_t written = plain ? (soi ? 2 * stored : 0) : stored;
    b.mem(EventKind::mem_write, kGenPeHeader + (soi ? kGenSizeOfImageOffset : 0), soi ? 4 : 2, written);
    if (plain) b.hit(t.id);
    return b.take(t.pos);
  }
  if (!plain) throw GenError("variant '" + t.variant + "' does not apply to " + t.id);

  static const std::map<std::string, Mnemonic, std::less<>> kInsn{
      {"Interrupt_0x2d", Mnemonic::int2d}, {"Interrupt_3", Mnemonic::int3}, {"ldt_trick", Mnemonic::sldt},
      {"idt_trick", Mnemonic::sidt},       {"gdt_trick", Mnemonic::sgdt},   {"str_trick", Mnemonic::str},
      {"Check_EIP", Mnemonic::fpu_eip_leak}};
  if (auto it = kInsn.find(t.id); it != kInsn.end()) {
    b.insn(it->second);
    b.hit(t.id);
  } else if (t.id == "cpuid_hypervisor_vendor") {
    // "VBoxVBoxVBox"
    b.insn(Mnemonic::cpuid, {{"EAX", 0x40000000}, {"ECX", 0}},
           {{"EAX", 0x40000006}, {"EBX", 0x786f4256}, {"ECX", 0x786f4256}, {"EDX", 0x786f4256}});
    b.hit(t.id);
  } else if (t.id == "cpuid_is_hypervisor") {
    b.insn(Mnemonic::cpuid, {{"EAX", 1}, {"ECX", 0}},
           {{"EAX", 0x000306a9}, {"EBX", 0x00020800}, {"ECX", 0x80000000 | 0x0209}, {"EDX", 0x078bfbff}});
    b.hit(t.id);
  } else if (t.id == "RDTSC") {
    b.rdtsc(1'000'000, kSandwichGap);
    b.rdtsc(20'000, 12);
    b.hit(t.id);
  } else {
    throw GenError("no generator for technique '" + t.id + "'");
  }
  return b.take(t.pos);
}

Block visible_block(const VisibleSpec& v, Rng& rng) {
  BlockBuilder b(Origin::red, rng);
  for (std::uint32_t k = 0; k < v.count; ++k) {
    if (v.api == "WriteFile" || v.api == "NtWriteFile")
      b.api(v.api, {i(0x1d0), a(0x402400), n(0x100)}, i(1));
    else
      b.api(v.api, {s("visible-" + std::to_string(k))}, i(0));
  }
  return b.take(v.pos);
}

Block stall_block(const StallSpec& st, Rng& rng, const ClockConfig& clock) {
  BlockBuilder b(st.origin, rng);
  const std::uint64_t effective = st.ms == kInfiniteWait ? clock.infinite_wait_cap_ms : st.ms;
  for (std::uint32_t k = 0; k < st.count; ++k) {
    std::vector<Value> args;
    if (st.api == "Sleep")
      args = {Value::duration(st.ms)};
    else if (st.api == "TimeSetEvent")
      args = {Value::duration(st.ms), i(0)};
    else if (st.api == "NtDelayExecution")
      args = {i(0), Value::duration(st.ms)};
    else if (is_stall_api(st.api))
      args = {i(0x1c), Value::duration(st.ms)};
    else
      throw GenError("'" + st.api + "' is not a stalling API");
    b.api(st.api, std::move(args));
    if (effective >= clock.stall_threshold_ms) b.hit("time_stalling");
  }
  return b.take(st.pos);
}

Block locky_block(const LockySpec& l, Rng& rng) {
  BlockBuilder b(Origin::red, rng);
  for (std::uint32_t k = 0; k < l.iterations; ++k) {
    b.rdtsc(1'000'000, kSandwichGap);
    b.api("GetProcessHeap", {}, a(kHeap)).insn_index = 5;
    b.rdtsc(l.first_ticks, 5);
    b.hit("RDTSC");
    b.rdtsc(1'000'000, kSandwichGap);
    b.api("CloseHandle", {i(0xdeadbeef)}, i(0)).insn_index = 5;
    b.rdtsc(l.second_ticks, 5);
    b.hit("RDTSC");
  }
  return b.take(l.pos);
}

Block inject_block(const InjectSpec& inj, Rng& rng) {
  BlockBuilder b(inj.origin, rng);
  auto& write = b.api("NtWriteVirtualMemory", {i(0x1c), a(0x9000), a(0x402000), n(0x200)});
  std::get<ApiPayload>(write.payload).target_pid = inj.target;
  b.hit("Shellcode_injected");
  auto& thread = b.api("NtCreateThreadEx", {i(0x1fffff), i(0x1c), a(0x9000)});
  std::get<ApiPayload>(thread.payload).target_pid = inj.target;
  b.hit("Shellcode_injected");
  auto& start = b.push(EventKind::thread_start, ThreadStartPayload{0x9000});
  start.pid = inj.target;
  // The injected code runs in the honeypot whatever called the write.
  auto& call = b.api("IsDebuggerPresent", {});
  call.pid = inj.target;
  std::get<ApiPayload>(call.payload).return_address = 0x9010;
  b.hit("IsDebuggerPresentAPI", true, kHoneypotPid);
  return b.take(inj.pos);
}

TraceEvent filler_event(Rng& rng) {
  ApiPayload p;
  p.name = kFillerPool[rng.below(kFillerPool.size())];
  p.native = true;
  p.args = {i(static_cast<std::int64_t>(rng.below(0x100) * 4))};
  p.ret = i(0);
  p.return_address = kGenImageBase + 0x100 + rng.below(0x1000) * 0x10;
  TraceEvent ev;
  ev.kind = EventKind::api;
  ev.pid = kGenPid;
  ev.tid = kGenTid;
  ev.insn_index = kDefaultStep;
  ev.payload = std::move(p);
  return ev;
}

std::vector<TraceEvent> preamble(const GenSpec& spec) {
  std::vector<TraceEvent> out;
  auto push = [&](EventKind kind, Payload p) {
    TraceEvent ev;
    ev.kind = kind;
    ev.pid = kGenPid;
    ev.tid = kGenTid;
    ev.payload = std::move(p);
    out.push_back(std::move(ev));
  };
  push(EventKind::meta, MetaPayload{spec.sample_id, spec.labels});
  push(EventKind::process_start, ProcessStartPayload{0, spec.sample_id + ".exe"});
  ImageLoadPayload header;
  header.region = RegionKind::pe_header;
  header.base = kGenPeHeader;
  header.size = 0x1000;
  header.header_bytes = pe_header_bytes();
  header.size_of_image = kGenSizeOfImageOffset;
  push(EventKind::image_load, header);
  push(EventKind::image_load,
       ImageLoadPayload{RegionKind::main_image, kGenImageBase, kGenImageSize, spec.sample_id + ".exe", {}, {}, {}});
  push(EventKind::image_load,
       ImageLoadPayload{RegionKind::standard_library, kNtdll, kLibSize, "ntdll.dll", system_layouts(), {}, {}});
  push(EventKind::image_load,
       ImageLoadPayload{RegionKind::standard_library, kGenKernel32, kLibSize, "kernel32.dll", {}, {}, {}});
  return out;
}

}  // namespace

GeneratedSample generate(const GenSpec& spec, const Catalog& catalog) {
  if (spec.sample_id.empty()) throw GenError("spec without sample_id");
  Rng rng(spec.seed ^ 0x5eedf00dull);
  const ClockConfig clock;

  std::vector<Block> blocks;
  for (const auto& t : spec.techniques) {
    if (!catalog.find(t.id)) throw GenError("unknown technique '" + t.id + "'");
    blocks.push_back(technique_block(t, rng));
  }
  for (const auto& v : spec.visible) blocks.push_back(visible_block(v, rng));
  for (const auto& st : spec.stalls) blocks.push_back(stall_block(st, rng, clock));
  for (const auto& l : spec.locky) blocks.push_back(locky_block(l, rng));
  for (const auto& inj : spec.injections) blocks.push_back(inject_block(inj, rng));
  for (const auto& bl : blocks)
    if (!(bl.pos >= 0.0 && bl.pos <= 100.0)) throw GenError("position outside [0,100] in " + spec.sample_id);
  std::stable_sort(blocks.begin(), blocks.end(), [](const Block& x, const Block& y) { return x.pos < y.pos; });

  std::vector<TraceEvent> events = preamble(spec);
  std::size_t total = events.size() + spec.filler;
  for (const auto& bl : blocks) total += bl.events.size();
  const std::uint64_t max_seq = total - 1;

  std::vector<std::pair<std::size_t, ExpectedDetection>> hits;  // absolute index
  std::uint32_t fillers_left = spec.filler;
  for (auto& bl : blocks) {
    std::size_t key = bl.hits.empty() ? 0 : bl.hits.front().first;
    auto target = static_cast<std::int64_t>(std::llround(bl.pos / 100.0 * static_cast<double>(max_seq))) -
                  static_cast<std::int64_t>(key);
    while (fillers_left > 0 && static_cast<std::int64_t>(events.size()) < target) {
      events.push_back(filler_event(rng));
      --fillers_left;
    }
    for (const auto& [idx, technique] : bl.hits) {
      auto pid = bl.hit_pids.count(idx) ? bl.hit_pids.at(idx) : kGenPid;
      hits.push_back({events.size() + idx, ExpectedDetection{technique, 0, pid}});
    }
    for (auto& ev : bl.events) events.push_back(std::move(ev));
  }
  while (fillers_left-- > 0) events.push_back(filler_event(rng));

  // Assign seq, absolute instruction counters and tick values.
  std::map<std::pair<Pid, Tid>, std::uint64_t> insn_counter;
  std::map<std::pair<Pid, Tid>, std::uint64_t> tsc;
  GeneratedSample out;
  out.spec = spec;
  for (std::size_t k = 0; k < events.size(); ++k) {
    auto& ev = events[k];
    ev.seq = k;
    auto key = std::make_pair(ev.pid, ev.tid);
    if (ev.kind == EventKind::meta || ev.kind == EventKind::image_load || ev.kind == EventKind::process_start) {
      ev.insn_index = insn_counter[key];
    } else {
      ev.insn_index = (insn_counter[key] += ev.insn_index);
    }
    if (ev.kind == EventKind::insn) {
      auto& p = std::get<InsnPayload>(ev.payload);
      if (p.mnemonic == Mnemonic::rdtsc) {
        auto [it, fresh] = tsc.try_emplace(key, kInitialTsc);
        it->second += p.out_regs["TSC"];
        p.out_regs["TSC"] = it->second;
      }
    } else if (ev.kind == EventKind::api) {
      auto& p = std::get<ApiPayload>(ev.payload);
      if (is_time_query_api(p.name)) p.ret = Value::integer(static_cast<std::int64_t>(1000 + 10 * k));
      if (p.native) ++out.expected.native_api_count;
    }
  }
  out.trace = std::move(events);

  auto& ex = out.expected;
  ex.sample_id = spec.sample_id;
  ex.max_seq = max_seq;
  std::sort(hits.begin(), hits.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  std::vector<const ExpectedDetection*> counted;
  for (auto& [idx, d] : hits) {
    d.seq = idx;
    ex.detections.push_back(d);
  }
  for (const auto& d : ex.detections)
    if (!catalog.is_fp_prone(d.technique)) counted.push_back(&d);
  for (const auto* d : counted) ex.technique_set.push_back(d->technique);
  std::sort(ex.technique_set.begin(), ex.technique_set.end());
  ex.technique_set.erase(std::unique(ex.technique_set.begin(), ex.technique_set.end()), ex.technique_set.end());
  ex.evasive = !ex.technique_set.empty();
  if (ex.evasive) {
    auto pos = [&](std::uint64_t seq) { return max_seq == 0 ? 0.0 : 100.0 * double(seq) / double(max_seq); };
    ex.first_pos = pos(counted.front()->seq);
    ex.last_pos = pos(counted.back()->seq);
  }
  return out;
}

GeneratedSample gen_technique_trace(const std::string& id, Origin origin, std::uint64_t seed, const Catalog& catalog,
                                    const std::string& variant) {
  GenSpec spec;
  spec.sample_id = id + (origin == Origin::red ? ".red" : ".benign") + (variant.empty() ? "" : "." + variant);
  spec.seed = seed;
  spec.techniques.push_back(TechniqueSpec{id, 50.0, origin, variant});
  return generate(spec, catalog);
}

std::vector<GeneratedSample> gen_corpus(const std::vector<GenSpec>& specs, const Catalog& catalog) {
  std::set<std::string> seen;
  for (const auto& sp : specs)
    if (!seen.insert(sp.sample_id).second) throw GenError("duplicate sample_id '" + sp.sample_id + "'");
  std::vector<GeneratedSample> out;
  out.reserve(specs.size());
  for (const auto& sp : specs) out.push_back(generate(sp, catalog));
  return out;
}

// --- spec files ------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(std::string_view s) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument("bad number '" + std::string(s) + "'");
  return v;
}

Origin parse_origin(std::string_view s) {
  if (s == "red") return Origin::red;
  if (s == "benign") return Origin::benign;
  throw std::invalid_argument("origin must be red or benign, got '" + std::string(s) + "'");
}

std::string_view origin_name(Origin o) { return o == Origin::red ? "red" : "benign"; }

class SpecRecord {
 public:
  explicit SpecRecord(std::string_view line) {
    std::size_t p = 0;
    while (p < line.size()) {
      while (p < line.size() && line[p] == ' ') ++p;
      if (p >= line.size()) break;
      auto end = line.find(' ', p);
      if (end == std::string_view::npos) end = line.size();
      auto tok = line.substr(p, end - p);
      auto eq = tok.find('=');
      if (eq == std::string_view::npos) throw std::invalid_argument("expected key=value, got '" + std::string(tok) + "'");
      if (!fields_.emplace(std::string(tok.substr(0, eq)), decode_text(tok.substr(eq + 1))).second)
        throw std::invalid_argument("duplicate key '" + std::string(tok.substr(0, eq)) + "'");
      p = end;
    }
  }
  std::optional<std::string> take(const std::string& key) {
    auto it = fields_.find(key);
    if (it == fields_.end()) return std::nullopt;
    auto v = std::move(it->second);
    fields_.erase(it);
    return v;
  }
  std::string need(const std::string& key) {
    auto v = take(key);
    if (!v) throw std::invalid_argument("missing key '" + key + "'");
    return *v;
  }
  void done() const {
    if (!fields_.empty()) throw std::invalid_argument("unknown key '" + fields_.begin()->first + "'");
  }

 private:
  std::map<std::string, std::string> fields_;
};

}  // namespace

std::vector<GenSpec> parse_gen_specs(std::string_view source) {
  std::vector<GenSpec> specs;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= source.size()) {
    auto end = source.find('\n', start);
    if (end == std::string_view::npos) end = source.size();
    auto line = source.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    start = end + 1;
    if (line.empty() || line.front() == '#') {
      if (end == source.size()) break;
      continue;
    }
    try {
      SpecRecord r(line);
      auto kind = r.need("kind");
      auto pos = [&r] {
        auto v = r.take("pos");
        return v ? parse_double(*v) : 50.0;
      };
      if (kind == "sample") {
        GenSpec g;
        g.sample_id = r.need("sample_id");
        if (auto v = r.take("seed")) g.seed = parse_u64(*v);
        if (auto v = r.take("filler")) g.filler = static_cast<std::uint32_t>(parse_u64(*v));
        if (auto v = r.take("family")) g.labels.family = *v;
        if (auto v = r.take("year")) g.labels.year = *v;
        if (auto v = r.take("packer")) g.labels.packer = *v;
        if (auto v = r.take("protector")) g.labels.protector = *v;
        if (auto v = r.take("dataset")) g.labels.dataset = *v;
        r.done();
        specs.push_back(std::move(g));
        if (end == source.size()) break;
        continue;
      }
      if (specs.empty()) throw std::invalid_argument("'" + kind + "' record before any kind=sample");
      auto& g = specs.back();
      if (kind == "technique") {
        TechniqueSpec t;
        t.id = r.need("id");
        t.pos = pos();
        if (auto v = r.take("origin")) t.origin = parse_origin(*v);
        if (auto v = r.take("variant")) t.variant = *v;
        g.techniques.push_back(std::move(t));
      } else if (kind == "visible") {
        VisibleSpec v;
        v.api = r.need("api");
        v.pos = pos();
        if (auto c = r.take("count")) v.count = static_cast<std::uint32_t>(parse_u64(*c));
        g.visible.push_back(std::move(v));
      } else if (kind == "stall") {
        StallSpec st;
        if (auto v = r.take("api")) st.api = *v;
        st.ms = parse_u64(r.need("ms"));
        st.pos = pos();
        if (auto v = r.take("count")) st.count = static_cast<std::uint32_t>(parse_u64(*v));
        if (auto v = r.take("origin")) st.origin = parse_origin(*v);
        g.stalls.push_back(std::move(st));
      } else if (kind == "locky") {
        LockySpec l;
        if (auto v = r.take("iterations")) l.iterations = static_cast<std::uint32_t>(parse_u64(*v));
        l.pos = pos();
        if (auto v = r.take("first_ticks")) l.first_ticks = parse_u64(*v);
        if (auto v = r.take("second_ticks")) l.second_ticks = parse_u64(*v);
        g.locky.push_back(l);
      } else if (kind == "inject") {
        InjectSpec inj;
        inj.pos = pos();
        if (auto v = r.take("origin")) inj.origin = parse_origin(*v);
        if (auto v = r.take("target")) inj.target = static_cast<Pid>(parse_u64(*v));
        g.injections.push_back(inj);
      } else {
        throw std::invalid_argument("unknown spec kind '" + kind + "'");
      }
      r.done();
    } catch (const std::invalid_argument& e) {
      throw GenError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (end == source.size()) break;
  }
  return specs;
}

std::string serialize_gen_specs(const std::vector<GenSpec>& specs) {
  std::string out;
  auto opt = [](const char* key, const std::string& v) {
    return v.empty() ? std::string{} : std::string(" ") + key + "=" + encode_text(v);
  };
  for (const auto& g : specs) {
    out += "kind=sample sample_id=" + encode_text(g.sample_id) + " seed=" + std::to_string(g.seed) +
           " filler=" + std::to_string(g.filler) + opt("family", g.labels.family) + opt("year", g.labels.year) +
           opt("packer", g.labels.packer) + opt("protector", g.labels.protector) +
           opt("dataset", g.labels.dataset) + "\n";
    for (const auto& t : g.techniques)
      out += "kind=technique id=" + encode_text(t.id) + " pos=" + format_double(t.pos) + " origin=" +
             std::string(origin_name(t.origin)) + opt("variant", t.variant) + "\n";
    for (const auto& v : g.visible)
      out += "kind=visible api=" + encode_text(v.api) + " pos=" + format_double(v.pos) +
             " count=" + std::to_string(v.count) + "\n";
    for (const auto& st : g.stalls)
      out += "kind=stall api=" + encode_text(st.api) + " ms=" + std::to_string(st.ms) + " pos=" +
             format_double(st.pos) + " count=" + std::to_string(st.count) + " origin=" +
             std::string(origin_name(st.origin)) + "\n";
    for (const auto& l : g.locky)
      out += "kind=locky iterations=" + std::to_string(l.iterations) + " pos=" + format_double(l.pos) +
             " first_ticks=" + std::to_string(l.first_ticks) + " second_ticks=" + std::to_string(l.second_ticks) +
             "\n";
    for (const auto& inj : g.injections)
      out += "kind=inject pos=" + format_double(inj.pos) + " origin=" + std::string(origin_name(inj.origin)) +
             " target=" + std::to_string(inj.target) + "\n";
  }
  return out;
}

// --- presets -----------------------------------------------------------------

namespace {

std::vector<GenSpec> roundtrip_specs(std::uint64_t seed, const Catalog& catalog) {
  std::vector<GenSpec> out;
  std::uint64_t k = 0;
  for (const auto& r : catalog.rules()) {
    for (auto origin : {Origin::red, Origin::benign}) {
      GenSpec g;
      g.sample_id = r.id + (origin == Origin::red ? ".red" : ".benign");
      g.seed = seed + k++;
      g.techniques.push_back(TechniqueSpec{r.id, 50.0, origin, {}});
      out.push_back(std::move(g));
    }
  }
  return out;
}

std::vector<GenSpec> threshold_specs(std::uint64_t seed) {
  std::vector<GenSpec> out;
  for (std::uint32_t f : {0u, 1u, 49u, 50u}) {
    GenSpec g;
    g.sample_id = "native_" + std::to_string(f);
    g.seed = seed + f;
    g.filler = f;
    out.push_back(std::move(g));
  }
  return out;
}

GenSpec stall_spec(std::uint64_t seed) {
  GenSpec g;
  g.sample_id = "stall_300s";
  g.seed = seed;
  g.stalls.push_back(StallSpec{"NtDelayExecution", 100'000, 3, 20.0, Origin::red});
  g.techniques.push_back(TechniqueSpec{"GetTickCount", 80.0, Origin::red, {}});
  return g;
}

GenSpec locky_spec(std::uint64_t seed) {
  GenSpec g;
  g.sample_id = "locky_ratio";
  g.seed = seed;
  g.labels.family = "locky";
  g.locky.push_back(LockySpec{});
  return g;
}

GenSpec themida_spec(std::uint64_t seed) {
  GenSpec g;
  g.sample_id = "themida_bundle";
  g.seed = seed;
  g.labels.protector = "Themida";
  const char* ids[] = {"IsDebuggerPresentAPI", "NtGlobalFlag",        "NQIP_ProcessDebugPort", "HeapFlags",
                       "HardwareBreakpoints",  "NQO_ObjectTypeInformation", "cpuid_hypervisor_vendor",
                       "Firmware_RSMB",        "reg_keys",            "ErasePEHeader",         "SizeOfImage",
                       "RDTSC",                "Check_EIP",           "time_stalling"};
  double pos = 3.0;
  for (const char* id : ids) {
    g.techniques.push_back(TechniqueSpec{id, pos, Origin::red, {}});
    pos += 6.5;
  }
  return g;
}

GenSpec injection_spec(std::uint64_t seed) {
  GenSpec g;
  g.sample_id = "inject_honeypot";
  g.seed = seed;
  g.injections.push_back(InjectSpec{40.0, Origin::red, 2000});
  g.visible.push_back(VisibleSpec{"WriteFile", 70.0, 2});
  return g;
}

std::vector<GenSpec> fixture60_specs(std::uint64_t seed, const Catalog& catalog) {
  static const char* kFamilies[] = {"emotet", "zeus", "locky", "wannacry", "trickbot", "dridex"};
  static const char* kDatasets[] = {"vx", "vs", "goodware"};
  static const char* kPackers[] = {"UPX", "ASPack", "MPRESS"};
  static const char* kProtectors[] = {"Themida", "VMProtect", "Enigma"};
  static const char* kVisible[] = {"WriteFile", "RegSetValueExW", "connect", "CreateProcessW", "DeleteFileW"};
  Rng rng(seed ^ 0xf1f7u);
  std::vector<std::string> ids;
  for (const auto& r : catalog.rules()) ids.push_back(r.id);

  std::vector<GenSpec> out;
  for (std::uint32_t k = 0; k < 60; ++k) {
    GenSpec g;
    char name[32];
    std::snprintf(name, sizeof name, "fx%02u", k);
    g.sample_id = name;
    g.seed = rng.next();
    g.labels.family = kFamilies[k % 6];
    g.labels.year = std::to_string(2012 + (k % 8));
    g.labels.dataset = kDatasets[k % 3];
    const bool packed = k % 4 == 0;
    const bool protected_ = k % 5 == 1;
    if (packed) g.labels.packer = kPackers[rng.below(3)];
    if (protected_) g.labels.protector = kProtectors[rng.below(3)];

    if (k % 10 == 9) {
      g.filler = 0;  // never started
      out.push_back(std::move(g));
      continue;
    }
    g.filler = k % 10 == 8 ? 20 : 50 + static_cast<std::uint32_t>(rng.below(40));

    const bool evasive = packed || protected_ || rng.chance(65);
    if (evasive) {
      std::set<std::string> chosen;
      if (packed && rng.chance(95)) chosen.insert("ErasePEHeader");
      // Family core shared by most members, then random extras.
      const std::string& core = ids[(k % 6) * 7 % ids.size()];
      if (k % 6 < 3 || rng.chance(80)) chosen.insert(core);
      if (rng.chance(60)) chosen.insert("IsDebuggerPresentAPI");
      std::uint64_t extra = rng.below(protected_ ? 7 : 3);
      for (std::uint64_t e = 0; e < extra; ++e) chosen.insert(ids[rng.below(ids.size())]);
      if (chosen.empty()) chosen.insert(ids[rng.below(ids.size())]);
      for (const auto& id : chosen) {
        double pos = static_cast<double>(rng.below(1001)) / 10.0;
        if (id == "IsDebuggerPresentAPI" && rng.chance(70)) pos = static_cast<double>(rng.below(101)) / 10.0;
        g.techniques.push_back(TechniqueSpec{id, pos, Origin::red, {}});
      }
    }
    if (rng.chance(30)) {
      const auto& id = ids[rng.below(ids.size())];
      if (id != "ErasePEHeader" && id != "SizeOfImage")
        g.techniques.push_back(TechniqueSpec{id, 50.0, Origin::benign, {}});
    }
    for (std::uint64_t v = rng.below(4); v > 0; --v)
      g.visible.push_back(VisibleSpec{kVisible[rng.below(5)], static_cast<double>(rng.below(101)),
                                      static_cast<std::uint32_t>(1 + rng.below(3))});
    if (k % 15 == 7) g.injections.push_back(InjectSpec{static_cast<double>(20 + rng.below(60)), Origin::red, 3000});
    if (rng.chance(15)) g.stalls.push_back(StallSpec{"Sleep", 45'000, 1, static_cast<double>(rng.below(101)), Origin::red});
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"roundtrip", "thresholds", "stall", "locky", "themida", "injection", "fixture60", "all"};
}

std::vector<GenSpec> preset(const std::string& name, std::uint64_t seed, const Catalog& catalog) {
  if (name == "roundtrip") return roundtrip_specs(seed, catalog);
  if (name == "thresholds") return threshold_specs(seed);
  if (name == "stall") return {stall_spec(seed)};
  if (name == "locky") return {locky_spec(seed)};
  if (name == "themida") return {themida_spec(seed)};
  if (name == "injection") return {injection_spec(seed)};
  if (name == "fixture60") return fixture60_specs(seed, catalog);
  if (name == "all") {
    std::vector<GenSpec> out;
    for (const auto& n : preset_names())
      if (n != "all") {
        auto part = preset(n, seed, catalog);
        out.insert(out.end(), part.begin(), part.end());
      }
    return out;
  }
  throw GenError("unknown preset '" + name + "'");
}

std::pair<GeneratedSample, GeneratedSample> gen_divergent_pair(const std::string& id, std::uint64_t seed,
                                                               const Catalog& catalog) {
  GenSpec base;
  base.sample_id = id + ".divergent";
  base.seed = seed;
  base.techniques.push_back(TechniqueSpec{id, 30.0, Origin::red, {}});
  GenSpec mitigated = base;
  mitigated.visible.push_back(VisibleSpec{"WriteFile", 60.0, 3});
  mitigated.visible.push_back(VisibleSpec{"connect", 80.0, 1});
  return {generate(mitigated, catalog), generate(base, catalog)};
}

// --- manifest and labels ---------------------------------------------------

std::string write_manifest(const std::vector<GeneratedSample>& corpus) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& g : corpus) {
    const auto& e = g.expected;
    nlohmann::ordered_json j;
    j["sample_id"] = e.sample_id;
    j["native_api_count"] = e.native_api_count;
    j["max_seq"] = e.max_seq;
    j["evasive"] = e.evasive;
    j["technique_set"] = e.technique_set;
    j["first_pos"] = e.first_pos ? nlohmann::ordered_json(*e.first_pos) : nlohmann::ordered_json(nullptr);
    j["last_pos"] = e.last_pos ? nlohmann::ordered_json(*e.last_pos) : nlohmann::ordered_json(nullptr);
    auto dets = nlohmann::ordered_json::array();
    for (const auto& d : e.detections) dets.push_back({{"technique", d.technique}, {"seq", d.seq}, {"pid", d.pid}});
    j["detections"] = dets;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::vector<Expectation> read_manifest(std::string_view document) {
  std::vector<Expectation> out;
  try {
    for (const auto& j : nlohmann::json::parse(document)) {
      Expectation e;
      e.sample_id = j.at("sample_id").get<std::string>();
      e.native_api_count = j.at("native_api_count").get<std::uint64_t>();
      e.max_seq = j.at("max_seq").get<std::uint64_t>();
      e.evasive = j.at("evasive").get<bool>();
      e.technique_set = j.at("technique_set").get<std::vector<std::string>>();
      if (!j.at("first_pos").is_null()) e.first_pos = j.at("first_pos").get<double>();
      if (!j.at("last_pos").is_null()) e.last_pos = j.at("last_pos").get<double>();
      for (const auto& d : j.at("detections"))
        e.detections.push_back(
            {d.at("technique").get<std::string>(), d.at("seq").get<std::uint64_t>(), d.at("pid").get<Pid>()});
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw GenError(std::string("malformed manifest: ") + e.what());
  }
  return out;
}

std::string write_labels_csv(const std::vector<GeneratedSample>& corpus) {
  std::string out = "sample_id,family,year,packer,protector\n";
  for (const auto& g : corpus) {
    const auto& l = g.spec.labels;
    out += g.spec.sample_id + "," + l.family + "," + l.year + "," + l.packer + "," + l.protector + "\n";
  }
  return out;
}

}  // namespace evprof
