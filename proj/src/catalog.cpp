#include "evprof/catalog.hpp"

#include <algorithm>
#include <array>
#include <cctype>

namespace evprof {

namespace {

constexpr std::array<std::string_view, kCategoryCount> kCategoryNames{
    "AntiDebug", "AntiDump", "AntiInstrumentation", "CodeInjection", "ResourceProfiling", "VMChecks", "TimingAttacks"};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

bool contains_ci(std::string_view haystack, std::string_view needle) {
  return lower(haystack).find(lower(needle)) != std::string::npos;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// --- rule construction helpers -------------------------------------------

ApiTrigger api(std::vector<std::string> names, std::optional<ArgMatch> arg = std::nullopt) {
  return ApiTrigger{std::move(names), std::move(arg)};
}

ArgMatch info_class(std::size_t index, std::vector<std::string> names, std::vector<std::uint64_t> ints) {
  ArgMatch m;
  m.index = index;
  m.equals = std::move(names);
  m.ints = std::move(ints);
  return m;
}

ArgMatch substrings(std::optional<std::size_t> index, std::vector<std::vector<std::string>> cnf) {
  ArgMatch m;
  m.index = index;
  m.all_of = std::move(cnf);
  return m;
}

ArgMatch flag_bits(std::size_t index, std::uint64_t bits) {
  ArgMatch m;
  m.index = index;
  m.bits_set = bits;
  return m;
}

TechniqueRule api_rule(std::string id, Category cat, std::vector<ApiTrigger> triggers, std::string description,
                       MitigationKind mitigation = MitigationKind::none) {
  TechniqueRule r;
  r.id = std::move(id);
  r.category = cat;
  r.trigger.kind = TriggerKind::api;
  r.trigger.apis = std::move(triggers);
  r.mitigation = mitigation;
  r.description = std::move(description);
  r.flags.native_api = std::all_of(r.trigger.apis.begin(), r.trigger.apis.end(), [](const ApiTrigger& t) {
    return std::all_of(t.names.begin(), t.names.end(),
                       [](const std::string& n) { return n.rfind("Nt", 0) == 0 || n.rfind("Zw", 0) == 0; });
  });
  return r;
}

TechniqueRule insn_rule(std::string id, Category cat, Mnemonic m, std::string description,
                        MitigationKind mitigation = MitigationKind::none,
                        std::optional<std::uint32_t> leaf = std::nullopt) {
  TechniqueRule r;
  r.id = std::move(id);
  r.category = cat;
  r.trigger.kind = TriggerKind::instruction;
  r.trigger.mnemonic = m;
  r.trigger.cpuid_leaf = leaf;
  r.mitigation = mitigation;
  r.description = std::move(description);
  return r;
}

TechniqueRule read_rule(std::string id, Category cat, std::vector<std::string> fields, std::string description,
                        MitigationKind mitigation = MitigationKind::none) {
  TechniqueRule r;
  r.id = std::move(id);
  r.category = cat;
  r.trigger.kind = TriggerKind::memory_read;
  r.trigger.fields = std::move(fields);
  r.mitigation = mitigation;
  r.description = std::move(description);
  return r;
}

TechniqueRule special_rule(std::string id, Category cat, TriggerKind kind, std::string description,
                           MitigationKind mitigation) {
  TechniqueRule r;
  r.id = std::move(id);
  r.category = cat;
  r.trigger.kind = kind;
  r.mitigation = mitigation;
  r.description = std::move(description);
  return r;
}

ArgMatch wmi(std::string cls, std::string property) {
  return substrings(0, {{std::move(cls)}, {std::move(property), "*"}});
}

std::vector<TechniqueRule> build_rules() {
  using C = Category;
  using M = MitigationKind;
  std::vector<TechniqueRule> rules;
  const auto& artifacts = hypervisor_artifacts();

  // Anti Debug (21)
  rules.push_back(api_rule("IsDebuggerPresentAPI", C::AntiDebug, {api({"IsDebuggerPresent"})},
                           "IsDebuggerPresent call"));
  rules.push_back(read_rule("IsDebuggerPresentPEB", C::AntiDebug, {"PEB.BeingDebugged"}, "read of PEB->BeingDebugged"));
  rules.push_back(api_rule("CheckRemoteDebuggerPresentAPI", C::AntiDebug, {api({"CheckRemoteDebuggerPresent"})},
                           "CheckRemoteDebuggerPresent call"));
  rules.push_back(api_rule("NSIT_ThreadHideFromDebugger", C::AntiDebug,
                           {api({"NtSetInformationThread", "ZwSetInformationThread"},
                                info_class(1, {"ThreadHideFromDebugger"}, {0x11}))},
                           "NtSetInformationThread(ThreadHideFromDebugger)"));
  rules.push_back(read_rule("NtGlobalFlag", C::AntiDebug, {"PEB.NtGlobalFlag"}, "read of PEB->NtGlobalFlag"));
  rules.push_back(api_rule("NQIP_ProcessDebugPort", C::AntiDebug,
                           {api({"NtQueryInformationProcess", "ZwQueryInformationProcess"},
                                info_class(1, {"ProcessDebugPort"}, {7}))},
                           "NtQueryInformationProcess(ProcessDebugPort)"));
  rules.push_back(api_rule("NQIP_ProcessDebugObject", C::AntiDebug,
                           {api({"NtQueryInformationProcess", "ZwQueryInformationProcess"},
                                info_class(1, {"ProcessDebugObject", "ProcessDebugObjectHandle"}, {0x1e}))},
                           "NtQueryInformationProcess(ProcessDebugObjectHandle)"));
  rules.push_back(api_rule("NQIP_ProcessDebugFlag", C::AntiDebug,
                           {api({"NtQueryInformationProcess", "ZwQueryInformationProcess"},
                                info_class(1, {"ProcessDebugFlag", "ProcessDebugFlags"}, {0x1f}))},
                           "NtQueryInformationProcess(ProcessDebugFlags)"));
  rules.push_back(api_rule("CanOpenCsrss", C::AntiDebug,
                           {api({"OpenProcess", "NtOpenProcess"}, substrings(std::nullopt, {{"csrss.exe"}}))},
                           "open csrss.exe to probe SeDebugPrivilege"));
  rules.push_back(api_rule("MemoryBreakpoints_PageGuard", C::AntiDebug,
                           {api({"VirtualProtect"}, flag_bits(2, 0x100)), api({"VirtualAlloc"}, flag_bits(3, 0x100))},
                           "PAGE_GUARD memory to provoke STATUS_GUARD_PAGE_VIOLATION", M::guard_page_exception));
  rules.push_back(insn_rule("Interrupt_0x2d", C::AntiDebug, Mnemonic::int2d, "int 2d exception probe"));
  rules.push_back(insn_rule("Interrupt_3", C::AntiDebug, Mnemonic::int3, "int 3 breakpoint exception probe"));
  rules.push_back(api_rule("HardwareBreakpoints", C::AntiDebug, {api({"GetThreadContext", "NtGetContextThread"})},
                           "debug register inspection"));
  rules.push_back(api_rule("NQSI_SystemKernelDebuggerInformation", C::AntiDebug,
                           {api({"NtQuerySystemInformation", "ZwQuerySystemInformation"},
                                info_class(0, {"SystemKernelDebuggerInformation"}, {0x23}))},
                           "NtQuerySystemInformation(SystemKernelDebuggerInformation)"));
  rules.push_back(read_rule("HeapFlags", C::AntiDebug, {"PEB.ProcessHeap.Flags"}, "read of ProcessHeap->Flags"));
  rules.push_back(
      read_rule("HeapForceFlags", C::AntiDebug, {"PEB.ProcessHeap.ForceFlags"}, "read of ProcessHeap->ForceFlags"));
  rules.push_back(read_rule("SharedUserData_KernelDebugger", C::AntiDebug, {"SharedUserData.KernelDebugger"},
                            "read of KUSER_SHARED_DATA->KernelDebugger"));
  rules.push_back(api_rule("VirtualAlloc_WriteWatch", C::AntiDebug, {api({"VirtualAlloc"}, flag_bits(2, 0x200000))},
                           "VirtualAlloc with MEM_WRITE_WATCH"));
  rules.push_back(api_rule("NQO_ObjectTypeInformation", C::AntiDebug,
                           {api({"NtQueryObject", "ZwQueryObject"}, info_class(1, {"ObjectTypeInformation"}, {2}))},
                           "NtQueryObject(ObjectTypeInformation)"));
  rules.push_back(api_rule("NQO_ObjectAllTypesInformation", C::AntiDebug,
                           {api({"NtQueryObject", "ZwQueryObject"}, info_class(1, {"ObjectAllTypesInformation"}, {3}))},
                           "NtQueryObject(ObjectAllTypesInformation)"));
  rules.push_back(api_rule("GetTickCount", C::AntiDebug, {api({"GetTickCount", "GetTickCount64"})},
                           "elapsed-time probe for debugger slowdown"));

  // Anti Dump (2)
  {
    auto r = special_rule("ErasePEHeader", C::AntiDump, TriggerKind::memory_write,
                          "value-changing write into the in-memory PE header", M::none);
    rules.push_back(r);
    auto s = special_rule("SizeOfImage", C::AntiDump, TriggerKind::memory_write,
                          "value-changing write to the SizeOfImage header field", M::none);
    s.trigger.size_of_image = true;
    rules.push_back(s);
  }

  // Code Injection (1)
  rules.push_back(special_rule("Shellcode_injected", C::CodeInjection, TriggerKind::injection,
                               "cross-process write or thread via NtWriteVirtualMemory, NtCreateThreadEx, "
                               "NtResumeThread or NtQueueApcThread",
                               M::honeypot));

  // Anti Instrumentation (1)
  rules.push_back(insn_rule("Check_EIP", C::AntiInstrumentation, Mnemonic::fpu_eip_leak,
                            "instruction pointer leak exposing the code cache", M::expected_eip));

  // Resource Profiling (6)
  rules.push_back(api_rule("process_enum", C::ResourceProfiling,
                           {api({"Process32First", "Process32FirstW", "Process32Next", "Process32NextW"})},
                           "running process enumeration", M::parent_cmd));
  rules.push_back(api_rule("memory_space", C::ResourceProfiling, {api({"GlobalMemoryStatusEx", "GlobalMemoryStatus"})},
                           "installed RAM size", M::ram_8gb));
  rules.push_back(api_rule("disk_size_getdiskfreespace", C::ResourceProfiling,
                           {api({"GetDiskFreeSpaceExA", "GetDiskFreeSpaceExW", "GetDiskFreeSpaceA", "GetDiskFreeSpaceW"})},
                           "disk size via GetDiskFreeSpaceEx", M::disk_800gb));
  {
    ArgMatch ioctl;
    ioctl.index = 1;
    ioctl.ints = {0x7405C, 0x70000, 0x700A0};
    rules.push_back(api_rule("dizk_size_deviceiocontrol", C::ResourceProfiling, {api({"DeviceIoControl"}, ioctl)},
                             "disk size via DeviceIoControl length/geometry IOCTL", M::disk_800gb));
  }
  {
    ArgMatch disk = substrings(0, {{"Win32_LogicalDisk", "Win32_DiskDrive"}, {"Size", "*"}});
    rules.push_back(api_rule("disk_size_wmi", C::ResourceProfiling, {api({"wmi_query"}, disk)},
                             "disk size via WMI", M::wmi_disabled));
  }
  rules.push_back(read_rule("NumberOfProcessors", C::ResourceProfiling,
                            {"PEB.NumberOfProcessors", "SYSTEM_INFO.dwNumberOfProcessors"},
                            "processor count read", M::four_processors));

  // VM Checks (20)
  {
    std::vector<std::string> value_tokens = artifacts;
    for (const char* v : {"SystemBiosVersion", "VideoBiosVersion", "SystemBiosDate"}) value_tokens.emplace_back(v);
    rules.push_back(api_rule("reg_keys", C::VMChecks,
                             {api({"RegOpenKeyExA", "RegOpenKeyExW", "RegOpenKeyA", "RegOpenKeyW", "NtOpenKey",
                                   "NtOpenKeyEx"},
                                  substrings(std::nullopt, {artifacts}))},
                             "hypervisor registry keys"));
    rules.push_back(api_rule("reg_key_value", C::VMChecks,
                             {api({"RegQueryValueExA", "RegQueryValueExW", "RegGetValueA", "RegGetValueW",
                                   "NtQueryValueKey"},
                                  substrings(std::nullopt, {value_tokens}))},
                             "hypervisor registry values"));
  }
  rules.push_back(insn_rule("ldt_trick", C::VMChecks, Mnemonic::sldt, "LDT location via sldt"));
  rules.push_back(insn_rule("idt_trick", C::VMChecks, Mnemonic::sidt, "IDT location via sidt"));
  rules.push_back(insn_rule("gdt_trick", C::VMChecks, Mnemonic::sgdt, "GDT location via sgdt"));
  rules.push_back(insn_rule("str_trick", C::VMChecks, Mnemonic::str, "task register via str"));
  rules.push_back(api_rule("vm_check_mac", C::VMChecks, {api({"GetAdaptersInfo", "GetAdaptersAddresses"})},
                           "adapter MAC vendor prefix"));
  {
    ArgMatch rsmb = info_class(0, {"RSMB"}, {0x52534D42});
    ArgMatch acpi = info_class(0, {"ACPI"}, {0x41435049});
    rules.push_back(api_rule("Firmware_RSMB", C::VMChecks, {api({"GetSystemFirmwareTable"}, rsmb)},
                             "SMBIOS firmware table artifacts", M::scrub_firmware));
    rules.push_back(api_rule("Firmware_ACPI", C::VMChecks, {api({"GetSystemFirmwareTable"}, acpi)},
                             "ACPI firmware table artifacts", M::scrub_firmware));
  }
  {
    std::vector<std::string> devices;
    for (const auto& a : artifacts) devices.push_back(a);
    rules.push_back(api_rule("Device_Artifacts", C::VMChecks,
                             {api({"CreateFileA", "CreateFileW", "NtCreateFile", "NtOpenFile"},
                                  substrings(0, {{"\\\\.\\"}, devices}))},
                             "hypervisor device objects"));
  }
  rules.push_back(insn_rule("cpuid_hypervisor_vendor", C::VMChecks, Mnemonic::cpuid,
                            "hypervisor vendor leaf 0x40000000", M::neutral_hypervisor_vendor, 0x40000000u));
  {
    auto r = insn_rule("cpuid_is_hypervisor", C::VMChecks, Mnemonic::cpuid, "hypervisor-present bit 31 of ECX, leaf 1",
                       M::clear_hypervisor_bit, 1u);
    r.fp_prone = true;
    rules.push_back(r);
  }
  {
    auto r = api_rule("mouse_movement", C::VMChecks, {api({"GetCursorPos"})}, "cursor position polling",
                      M::random_cursor);
    r.fp_prone = true;
    rules.push_back(r);
  }
  rules.push_back(api_rule("filesystem_artifacts", C::VMChecks,
                           {api({"GetFileAttributesA", "GetFileAttributesW", "PathFileExistsA", "PathFileExistsW",
                                 "NtQueryAttributesFile", "FindFirstFileA", "FindFirstFileW"},
                                substrings(0, {artifacts}))},
                           "hypervisor files on disk"));
  rules.push_back(api_rule("setupdi_diskdrive", C::VMChecks,
                           {api({"SetupDiGetDeviceRegistryPropertyW", "SetupDiGetDeviceRegistryPropertyA"})},
                           "disk drive friendly name", M::zero_buffer));
  rules.push_back(api_rule("manufacturer_computer_system_wmi", C::VMChecks,
                           {api({"wmi_query"}, wmi("Win32_ComputerSystem", "Manufacturer"))},
                           "Win32_ComputerSystem.Manufacturer"));
  rules.push_back(api_rule("model_computer_system_wmi", C::VMChecks,
                           {api({"wmi_query"}, wmi("Win32_ComputerSystem", "Model"))}, "Win32_ComputerSystem.Model"));
  rules.push_back(api_rule("vbox_mac_wmi", C::VMChecks,
                           {api({"wmi_query"}, wmi("Win32_NetworkAdapterConfiguration", "MACAddress"))},
                           "Win32_NetworkAdapterConfiguration.MACAddress"));
  rules.push_back(api_rule("process_id_processor_wmi", C::VMChecks,
                           {api({"wmi_query"}, wmi("Win32_Processor", "ProcessorId"))}, "Win32_Processor.ProcessorId"));
  rules.push_back(api_rule("serial_number_bios_wmi", C::VMChecks,
                           {api({"wmi_query"}, wmi("Win32_BIOS", "SerialNumber"))}, "Win32_BIOS.SerialNumber"));

  // Timing Attacks (2)
  rules.push_back(special_rule("time_stalling", C::TimingAttacks, TriggerKind::virtual_clock,
                               "long waits via NtDelayExecution, WaitForSingleObject, SetWaitableTimer, "
                               "TimeSetEvent or Sleep",
                               M::virtual_clock));
  rules.push_back(special_rule("RDTSC", C::TimingAttacks, TriggerKind::virtual_clock,
                               "rdtsc pair measuring elapsed time", M::virtual_clock));

  for (auto& r : rules)
    if (r.id == "GetTickCount" || r.id == "NumberOfProcessors") r.fp_prone = true;
  return rules;
}

std::string joined_strings(const std::vector<Value>& args) {
  std::string out;
  for (const auto& a : args) {
    if (!a.is_string()) continue;
    if (!out.empty()) out += '\n';
    out += a.text;
  }
  return out;
}

bool string_matches(const ArgMatch& m, std::string_view text) {
  if (!m.equals.empty()) {
    auto l = lower(text);
    for (const auto& e : m.equals)
      if (l == lower(e)) return true;
  }
  if (!m.all_of.empty()) {
    return std::all_of(m.all_of.begin(), m.all_of.end(), [&](const std::vector<std::string>& group) {
      return std::any_of(group.begin(), group.end(), [&](const std::string& tok) { return contains_ci(text, tok); });
    });
  }
  return false;
}

bool arg_matches(const ArgMatch& m, const std::vector<Value>& args) {
  if (!m.index) return string_matches(m, joined_strings(args));
  if (*m.index >= args.size()) return false;
  const auto& v = args[*m.index];
  if (v.is_string()) return string_matches(m, v.text);
  if (std::find(m.ints.begin(), m.ints.end(), v.raw) != m.ints.end()) return true;
  return m.bits_set != 0 && (v.raw & m.bits_set) == m.bits_set;
}

}  // namespace

std::string_view to_string(Category c) { return kCategoryNames[static_cast<std::size_t>(c)]; }

std::optional<Category> parse_category(std::string_view s) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i)
    if (kCategoryNames[i] == s) return static_cast<Category>(i);
  return std::nullopt;
}

std::string_view to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::api: return "api";
    case TriggerKind::instruction: return "instruction";
    case TriggerKind::memory_read: return "memory_read";
    case TriggerKind::memory_write: return "memory_write";
    case TriggerKind::virtual_clock: return "virtual_clock";
    case TriggerKind::injection: return "injection";
  }
  return {};
}

std::string_view to_string(MitigationKind k) {
  switch (k) {
    case MitigationKind::none: return "none";
    case MitigationKind::clear_hypervisor_bit: return "clear ECX bit 31";
    case MitigationKind::neutral_hypervisor_vendor: return "zero EBX/ECX/EDX vendor";
    case MitigationKind::random_cursor: return "random cursor position";
    case MitigationKind::four_processors: return "report 4 processors";
    case MitigationKind::ram_8gb: return "report 8 GB RAM";
    case MitigationKind::disk_800gb: return "report 800 GB disk";
    case MitigationKind::parent_cmd: return "parent pin.exe -> cmd.exe";
    case MitigationKind::scrub_firmware: return "scrub firmware table";
    case MitigationKind::zero_buffer: return "zero returned buffer";
    case MitigationKind::guard_page_exception: return "raise guard page exception";
    case MitigationKind::expected_eip: return "return expected EIP";
    case MitigationKind::wmi_disabled: return "WMI service disabled";
    case MitigationKind::virtual_clock: return "virtual clock";
    case MitigationKind::honeypot: return "honeypot process";
  }
  return {};
}

const std::vector<std::string>& hypervisor_artifacts() {
  static const std::vector<std::string> kArtifacts{
      "VBox", "VirtualBox", "VMware", "vmtools", "vmmouse", "vmhgfs", "vmci", "HGFS", "qemu",
      "bochs", "Xen",  "Parallels", "prl_", "Virtual HD", "Hyper-V", "Wine", "Sandboxie", "KVM"};
  return kArtifacts;
}

Catalog::Catalog() : rules_(build_rules()) {
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    const auto& r = rules_[i];
    if (!by_id_.emplace(r.id, i).second) throw std::logic_error("duplicate technique id " + r.id);
    for (const auto& f : r.trigger.fields) field_owner_[f] = r.id;
    for (const auto& t : r.trigger.apis)
      for (const auto& n : t.names) {
        auto& v = by_api_[n];
        if (std::find(v.begin(), v.end(), i) == v.end()) v.push_back(i);
      }
  }
}

const TechniqueRule* Catalog::find(std::string_view id) const {
  auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &rules_[it->second];
}

const TechniqueRule& Catalog::rule(std::string_view id) const {
  const auto* r = find(id);
  if (!r) throw UnknownTechnique(std::string(id));
  return *r;
}

std::string Catalog::field_owner(const std::string& struct_field) const {
  auto it = field_owner_.find(struct_field);
  return it == field_owner_.end() ? std::string{} : it->second;
}

std::vector<DetectionRecord> Catalog::match_event(const TraceEvent& ev, const MemoryTracker& tracker,
                                                  const MatchSignals& signals) const {
  std::vector<DetectionRecord> out;
  auto emit = [&](std::string_view id) {
    const auto& r = rule(id);
    DetectionRecord d;
    d.technique = r.id;
    d.category = r.category;
    d.seq = ev.seq;
    d.pid = ev.pid;
    d.tid = ev.tid;
    out.push_back(std::move(d));
  };

  switch (ev.kind) {
    case EventKind::api: {
      const auto& p = ev.api();
      if (!tracker.is_red(ev.pid, p.return_address)) return out;
      if (auto it = by_api_.find(p.name); it != by_api_.end()) {
        for (auto idx : it->second) {
          const auto& r = rules_[idx];
          bool hit = std::any_of(r.trigger.apis.begin(), r.trigger.apis.end(), [&](const ApiTrigger& t) {
            if (std::find(t.names.begin(), t.names.end(), p.name) == t.names.end()) return false;
            return !t.arg || arg_matches(*t.arg, p.args);
          });
          if (hit) emit(r.id);
        }
      }
      if (signals.stall_candidate) emit("time_stalling");
      if (signals.injection) emit("Shellcode_injected");
      break;
    }
    case EventKind::insn: {
      const auto& p = ev.insn();
      if (!tracker.is_red(ev.pid, p.address)) return out;
      if (p.mnemonic == Mnemonic::rdtsc) {
        if (signals.rdtsc_candidate) emit("RDTSC");
        break;
      }
      for (const auto& r : rules_) {
        if (r.trigger.kind != TriggerKind::instruction || r.trigger.mnemonic != p.mnemonic) continue;
        if (r.trigger.cpuid_leaf) {
          auto eax = p.in_regs.find("EAX");
          if (eax == p.in_regs.end() || eax->second != *r.trigger.cpuid_leaf) continue;
        }
        emit(r.id);
      }
      break;
    }
    case EventKind::mem_read: {
      const auto& p = ev.mem();
      if (!tracker.is_red(ev.pid, p.accessor_address)) return out;
      if (signals.watch_hit && !signals.watch_hit->technique.empty() && find(signals.watch_hit->technique))
        emit(signals.watch_hit->technique);
      break;
    }
    case EventKind::mem_write: {
      const auto& p = ev.mem();
      if (!tracker.is_red(ev.pid, p.accessor_address)) return out;
      if (signals.pe_write && signals.pe_write->changed)
        emit(signals.pe_write->size_of_image ? "SizeOfImage" : "ErasePEHeader");
      break;
    }
    default:
      break;
  }
  return out;
}

ApiTraits Catalog::api_traits(std::string_view name) const {
  static const std::map<std::string, ApiTraits, std::less<>> kTraits{
      {"WriteFile", {true, false, false}},
      {"NtWriteFile", {true, false, false}},
      {"DeleteFileA", {true, false, false}},
      {"DeleteFileW", {true, false, false}},
      {"NtDeleteFile", {true, false, false}},
      {"MoveFileExW", {true, false, false}},
      {"RegSetValueExA", {true, false, false}},
      {"RegSetValueExW", {true, false, false}},
      {"NtSetValueKey", {true, false, false}},
      {"RegCreateKeyExA", {true, false, false}},
      {"RegCreateKeyExW", {true, false, false}},
      {"RegDeleteKeyW", {true, false, false}},
      {"connect", {true, true, false}},
      {"WSAConnect", {true, true, false}},
      {"send", {true, true, false}},
      {"InternetOpenUrlA", {true, true, false}},
      {"InternetOpenUrlW", {true, true, false}},
      {"InternetConnectA", {true, true, false}},
      {"InternetConnectW", {true, true, false}},
      {"HttpSendRequestA", {true, true, false}},
      {"HttpSendRequestW", {true, true, false}},
      {"URLDownloadToFileA", {true, true, false}},
      {"URLDownloadToFileW", {true, true, false}},
      {"CreateProcessA", {true, false, true}},
      {"CreateProcessW", {true, false, true}},
      {"CreateProcessInternalW", {true, false, true}},
      {"NtCreateUserProcess", {true, false, true}},
      {"ShellExecuteExW", {true, false, true}},
      {"WinExec", {true, false, true}},
  };
  auto it = kTraits.find(name);
  return it == kTraits.end() ? ApiTraits{} : it->second;
}

Value apply_mitigation(const TechniqueRule& rule, const TraceEvent& ev, const MitigationContext& ctx) {
  if (!rule.has_mitigation()) throw MitigationError("technique " + rule.id + " has no mitigation");
  if (ctx.override_value) return *ctx.override_value;

  auto ret_text = [&]() -> std::string {
    if (ev.kind == EventKind::api && ev.api().ret && ev.api().ret->is_string()) return ev.api().ret->text;
    return {};
  };

  switch (rule.mitigation) {
    case MitigationKind::clear_hypervisor_bit: {
      const auto& regs = ev.insn().out_regs;
      auto it = regs.find("ECX");
      std::uint64_t ecx = it == regs.end() ? 0 : it->second;
      return Value::integer(static_cast<std::int64_t>(ecx & ~(1ull << 31)));
    }
    case MitigationKind::neutral_hypervisor_vendor:
      return Value::string("EBX=0x0;ECX=0x0;EDX=0x0");
    case MitigationKind::random_cursor: {
      std::uint64_t r = splitmix64(ctx.seed ^ splitmix64(ev.seq) ^ (static_cast<std::uint64_t>(ev.tid) << 32));
      return Value::string(std::to_string(r % 1920) + "," + std::to_string((r >> 32) % 1080));
    }
    case MitigationKind::four_processors:
      return Value::integer(4);
    case MitigationKind::ram_8gb:
      return Value::length(8 * kGiB);
    case MitigationKind::disk_800gb:
      return Value::length(800 * kGiB);
    case MitigationKind::parent_cmd: {
      auto text = ret_text();
      if (text.empty()) return Value::string("cmd.exe");
      auto l = lower(text);
      for (auto pos = l.find("pin.exe"); pos != std::string::npos; pos = l.find("pin.exe", pos + 7)) {
        text.replace(pos, 7, "cmd.exe");
      }
      return Value::string(text);
    }
    case MitigationKind::scrub_firmware: {
      auto text = ret_text();
      auto l = lower(text);
      for (const auto& a : hypervisor_artifacts()) {
        auto la = lower(a);
        for (auto pos = l.find(la); pos != std::string::npos; pos = l.find(la, pos + la.size()))
          std::fill_n(text.begin() + static_cast<std::ptrdiff_t>(pos), la.size(), '*');
      }
      return Value::string(text);
    }
    case MitigationKind::zero_buffer:
      return Value::string("");
    case MitigationKind::guard_page_exception:
      return Value::integer(0x80000001);  // STATUS_GUARD_PAGE_VIOLATION
    case MitigationKind::expected_eip:
      return Value::address(ev.insn().address);
    case MitigationKind::wmi_disabled:
      return Value::integer(0x80041001);  // WBEM_E_FAILED
    case MitigationKind::virtual_clock:
      if (!ctx.clock_value) throw MitigationError(rule.id + " needs a virtual clock value");
      return *ctx.clock_value;
    case MitigationKind::honeypot:
      return Value::integer(ctx.honeypot_pid);
    case MitigationKind::none:
      break;
  }
  throw MitigationError("technique " + rule.id + " has no mitigation");
}

}  // namespace evprof
