#pragma once

#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "evprof/trace.hpp"

namespace evprof {

struct MemoryRegion {
  Pid pid = 0;
  Address base = 0;
  std::uint64_t size = 0;
  RegionKind kind = RegionKind::data_alloc;
  std::string name;

  Address end() const { return base + size; }
  bool contains(Address a) const { return a >= base && a - base < size; }
  friend bool operator==(const MemoryRegion&, const MemoryRegion&) = default;
};

// Kinds whose code counts as malware-controlled.
bool is_red_kind(RegionKind k);

class RegionOverlap : public std::runtime_error {
 public:
  RegionOverlap(const MemoryRegion& added, const MemoryRegion& existing);
  const MemoryRegion& added() const { return added_; }
  const MemoryRegion& existing() const { return existing_; }

 private:
  MemoryRegion added_;
  MemoryRegion existing_;
};

struct WatchPoint {
  Pid pid = 0;
  Address address = 0;
  std::uint32_t width = 0;
  std::string field;      // "STRUCT.field"
  std::string technique;  // empty when the field has no owning technique
  bool live = true;
  friend bool operator==(const WatchPoint&, const WatchPoint&) = default;
};

struct PeWriteResult {
  bool changed = false;
  bool size_of_image = false;  // write overlapped the SizeOfImage field
};

// Maps "STRUCT.field" to the technique that owns reads of it.
using FieldOwner = std::function<std::string(const std::string& struct_field)>;

// Per-sample view of every process's regions, the red area, field
// watchpoints and the PE header byte shadow. Mutated in event order.
class MemoryTracker {
 public:
  explicit MemoryTracker(FieldOwner owner = {});

  void register_region(const MemoryRegion& region);
  // Removes the region starting at `base`; returns false if none.
  bool free_region(Pid pid, Address base);

  const MemoryRegion* find_region(Pid pid, Address address) const;
  bool is_red(Pid pid, Address address) const;
  std::vector<MemoryRegion> regions(Pid pid) const;

  // Installs one live watchpoint per declared field. A live watchpoint
  // already at the same address is replaced and reported in `diagnostics`.
  std::vector<WatchPoint> install_watchpoints(Pid pid, const LayoutDecl& layout,
                                              std::vector<std::string>* diagnostics = nullptr);

  // mem_read over a live watchpoint returns it; mem_write kills every
  // overlapping watchpoint and never returns a hit.
  std::optional<WatchPoint> resolve_access(Pid pid, EventKind kind, const MemPayload& access);

  // Registers a pe_header region and seeds its byte shadow.
  void load_pe_header(Pid pid, Address base, std::uint64_t size, std::string initial_bytes,
                      std::optional<std::uint64_t> size_of_image_offset);

  // Applies a write to the shadow. Returns nullopt when the write misses
  // every PE header of `pid`.
  std::optional<PeWriteResult> pe_header_write(Pid pid, const MemPayload& write);

  // Shadow bytes of the header at `base` (for verification).
  std::optional<std::string> pe_header_bytes(Pid pid, Address base) const;

  const std::vector<WatchPoint>& watchpoints() const { return watchpoints_; }

 private:
  struct PeHeader {
    Address base;
    std::string bytes;
    std::optional<std::uint64_t> size_of_image;
  };

  FieldOwner owner_;
  std::unordered_map<Pid, std::map<Address, MemoryRegion>> regions_;
  std::vector<WatchPoint> watchpoints_;
  std::unordered_map<Pid, std::map<Address, std::size_t>> live_index_;
  std::unordered_map<Pid, std::vector<PeHeader>> headers_;
  std::uint32_t max_width_ = 8;
};

}  // namespace evprof
