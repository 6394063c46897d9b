#include "evprof/memory.hpp"

#include <algorithm>

namespace evprof {

namespace {

std::string describe(const MemoryRegion& r) {
  std::string s = std::string(to_string(r.kind)) + "[" + hex_u64(r.base) + "," + hex_u64(r.end()) + ")";
  if (!r.name.empty()) s += " '" + r.name + "'";
  return s;
}

bool overlaps(Address a, std::uint64_t a_len, Address b, std::uint64_t b_len) {
  return a < b + b_len && b < a + a_len;
}

}  // namespace

bool is_red_kind(RegionKind k) {
  switch (k) {
    case RegionKind::main_image:
    case RegionKind::custom_library:
    case RegionKind::exec_alloc:
    case RegionKind::injected:
    case RegionKind::honeypot_image:
      return true;
    default:
      return false;
  }
}

RegionOverlap::RegionOverlap(const MemoryRegion& added, const MemoryRegion& existing)
    : std::runtime_error("region " + describe(added) + " overlaps " + describe(existing) + " in pid " +
                         std::to_string(added.pid)),
      added_(added),
      existing_(existing) {}

MemoryTracker::MemoryTracker(FieldOwner owner) : owner_(std::move(owner)) {}

void MemoryTracker::register_region(const MemoryRegion& region) {
  if (region.size == 0) throw std::invalid_argument("zero-sized region " + describe(region));
  auto& table = regions_[region.pid];
  auto next = table.lower_bound(region.base);
  if (next != table.end() && next->second.base < region.end()) throw RegionOverlap(region, next->second);
  if (next != table.begin()) {
    auto prev = std::prev(next);
    if (prev->second.end() > region.base) throw RegionOverlap(region, prev->second);
  }
  table.emplace(region.base, region);
}

bool MemoryTracker::free_region(Pid pid, Address base) {
  auto it = regions_.find(pid);
  if (it == regions_.end()) return false;
  if (it->second.erase(base) == 0) return false;
  auto hit = headers_.find(pid);
  if (hit != headers_.end())
    std::erase_if(hit->second, [base](const PeHeader& h) { return h.base == base; });
  return true;
}

const MemoryRegion* MemoryTracker::find_region(Pid pid, Address address) const {
  auto it = regions_.find(pid);
  if (it == regions_.end()) return nullptr;
  const auto& table = it->second;
  auto r = table.upper_bound(address);
  if (r == table.begin()) return nullptr;
  --r;
  return r->second.contains(address) ? &r->second : nullptr;
}

bool MemoryTracker::is_red(Pid pid, Address address) const {
  const auto* r = find_region(pid, address);
  return r != nullptr && is_red_kind(r->kind);
}

std::vector<MemoryRegion> MemoryTracker::regions(Pid pid) const {
  std::vector<MemoryRegion> out;
  auto it = regions_.find(pid);
  if (it == regions_.end()) return out;
  for (const auto& [_, r] : it->second) out.push_back(r);
  return out;
}

std::vector<WatchPoint> MemoryTracker::install_watchpoints(Pid pid, const LayoutDecl& layout,
                                                           std::vector<std::string>* diagnostics) {
  std::vector<WatchPoint> installed;
  auto& index = live_index_[pid];
  for (const auto& field : layout.fields) {
    WatchPoint wp;
    wp.pid = pid;
    wp.address = layout.base + field.offset;
    wp.width = field.width;
    max_width_ = std::max(max_width_, wp.width);
    wp.field = layout.struct_name + "." + field.name;
    wp.technique = owner_ ? owner_(wp.field) : std::string{};
    auto existing = index.find(wp.address);
    if (existing != index.end()) {
      auto& old = watchpoints_[existing->second];
      old.live = false;
      if (diagnostics)
        diagnostics->push_back("watchpoint " + old.field + " at " + hex_u64(wp.address) + " replaced by " + wp.field);
    }
    index[wp.address] = watchpoints_.size();
    watchpoints_.push_back(wp);
    installed.push_back(wp);
  }
  return installed;
}

std::optional<WatchPoint> MemoryTracker::resolve_access(Pid pid, EventKind kind, const MemPayload& access) {
  auto it = live_index_.find(pid);
  if (it == live_index_.end()) return std::nullopt;
  auto& index = it->second;
  // Anything overlapping starts within [address - max_width, address + size).
  Address lo = access.address >= max_width_ ? access.address - max_width_ : 0;
  auto cur = index.lower_bound(lo);
  std::optional<WatchPoint> hit;
  while (cur != index.end() && cur->first < access.address + access.size) {
    auto& wp = watchpoints_[cur->second];
    if (!overlaps(wp.address, wp.width, access.address, access.size)) {
      ++cur;
      continue;
    }
    if (kind == EventKind::mem_write) {
      wp.live = false;
      cur = index.erase(cur);
      continue;
    }
    if (!hit) hit = wp;
    ++cur;
  }
  if (kind == EventKind::mem_write) return std::nullopt;
  return hit;
}

void MemoryTracker::load_pe_header(Pid pid, Address base, std::uint64_t size, std::string initial_bytes,
                                   std::optional<std::uint64_t> size_of_image_offset) {
  register_region(MemoryRegion{pid, base, size, RegionKind::pe_header, "PE_HEADER"});
  if (initial_bytes.size() < size) initial_bytes.resize(size, '\0');
  headers_[pid].push_back(PeHeader{base, std::move(initial_bytes), size_of_image_offset});
}

std::optional<PeWriteResult> MemoryTracker::pe_header_write(Pid pid, const MemPayload& write) {
  auto it = headers_.find(pid);
  if (it == headers_.end()) return std::nullopt;
  for (auto& h : it->second) {
    if (!overlaps(h.base, h.bytes.size(), write.address, write.size)) continue;
    PeWriteResult result;
    for (std::uint32_t i = 0; i < std::min<std::uint32_t>(write.size, 8); ++i) {
      Address a = write.address + i;
      if (a < h.base || a - h.base >= h.bytes.size()) continue;
      auto offset = a - h.base;
      auto byte = static_cast<char>((write.value >> (8 * i)) & 0xFF);
      if (h.bytes[offset] != byte) result.changed = true;
      h.bytes[offset] = byte;
    }
    if (h.size_of_image) result.size_of_image = overlaps(h.base + *h.size_of_image, 4, write.address, write.size);
    return result;
  }
  return std::nullopt;
}

std::optional<std::string> MemoryTracker::pe_header_bytes(Pid pid, Address base) const {
  auto it = headers_.find(pid);
  if (it == headers_.end()) return std::nullopt;
  for (const auto& h : it->second)
    if (h.base == base) return h.bytes;
  return std::nullopt;
}

}  // namespace evprof
