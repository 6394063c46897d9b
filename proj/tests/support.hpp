#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "evprof/catalog.hpp"
#include "evprof/report.hpp"

namespace evtest {

using namespace evprof;

// splitmix64, enough for property-test case generation.
struct Gen {
  std::uint64_t s;
  explicit Gen(std::uint64_t seed) : s(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (s += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  std::uint64_t below(std::uint64_t n) { return n ? next() % n : 0; }
  std::uint64_t range(std::uint64_t lo, std::uint64_t hi) { return lo + below(hi - lo + 1); }
  bool chance(unsigned pct) { return below(100) < pct; }
};

struct Hit {
  std::string technique;
  double pos;
};

inline const Catalog& catalog() {
  static const Catalog c;
  return c;
}

// Report shaped like the profiler's output for detections at the given
// positions (seq = 10 * pos). FP-prone techniques are kept as detections but
// left out of the verdict.
inline SampleReport make_report(const std::string& id, std::vector<Hit> hits, Labels labels = {},
                                bool started = true, bool active = true) {
  SampleReport r;
  r.sample_id = id;
  r.labels = std::move(labels);
  r.started = started;
  r.active = started && active;
  r.native_api_count = !started ? 0 : r.active ? 60 : 10;
  std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return a.pos < b.pos; });
  std::set<std::string> set;
  for (const auto& h : hits) {
    const auto& rule = catalog().rule(h.technique);
    DetectionRecord d;
    d.technique = h.technique;
    d.category = rule.category;
    d.seq = static_cast<std::uint64_t>(h.pos * 10);
    d.pid = 1000;
    d.tid = 1;
    d.normalized_pos = h.pos;
    r.detections.push_back(d);
    if (!rule.fp_prone) set.insert(h.technique);
  }
  r.technique_set.assign(set.begin(), set.end());
  r.techniques_count = set.size();
  r.evasive = started && !set.empty();
  for (const auto& d : r.detections) {
    if (!set.count(d.technique)) continue;
    if (!r.first_pos) r.first_pos = d.normalized_pos;
    r.last_pos = d.normalized_pos;
    if (std::find(r.categories_in_order.begin(), r.categories_in_order.end(), d.category) ==
        r.categories_in_order.end())
      r.categories_in_order.push_back(d.category);
  }
  return r;
}

}  // namespace evtest
