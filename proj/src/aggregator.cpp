#include "evprof/aggregator.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <json.hpp>

namespace evprof {

namespace {

std::optional<double> pct(std::uint64_t part, std::uint64_t whole) {
  if (whole == 0) return std::nullopt;
  return 100.0 * static_cast<double>(part) / static_cast<double>(whole);
}

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : "NA"; }

nlohmann::ordered_json jnum(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::size_t category_index(Category c) { return static_cast<std::size_t>(c); }

}  // namespace

std::optional<GroupBy> parse_group_by(std::string_view s) {
  if (s == "dataset") return GroupBy::dataset;
  if (s == "year") return GroupBy::year;
  if (s == "family") return GroupBy::family;
  return std::nullopt;
}

std::string_view to_string(GroupBy g) {
  switch (g) {
    case GroupBy::dataset: return "dataset";
    case GroupBy::year: return "year";
    case GroupBy::family: return "family";
  }
  return {};
}

std::map<std::string, LabelRow> parse_labels_csv(std::string_view text) {
  std::map<std::string, LabelRow> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  bool header = true;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (header) {
      header = false;
      if (cells.empty() || cells[0] != "sample_id")
        throw LabelError("line " + std::to_string(line_no) + ": expected header starting with sample_id");
      continue;
    }
    if (cells.size() != 5)
      throw LabelError("line " + std::to_string(line_no) + ": expected 5 fields, got " + std::to_string(cells.size()));
    if (cells[0].empty()) throw LabelError("line " + std::to_string(line_no) + ": empty sample_id");
    if (!out.emplace(cells[0], LabelRow{cells[1], cells[2], cells[3], cells[4]}).second)
      throw LabelError("line " + std::to_string(line_no) + ": duplicate sample_id '" + cells[0] + "'");
  }
  return out;
}

std::size_t apply_labels(std::vector<SampleReport>& reports, const std::map<std::string, LabelRow>& labels) {
  std::size_t missing = 0;
  for (auto& r : reports) {
    auto it = labels.find(r.sample_id);
    if (it == labels.end()) {
      ++missing;
      continue;
    }
    r.labels.family = it->second.family;
    r.labels.year = it->second.year;
    r.labels.packer = it->second.packer;
    r.labels.protector = it->second.protector;
  }
  return missing;
}

void GroupCounts::merge(const GroupCounts& o) {
  samples += o.samples;
  started += o.started;
  active += o.active;
  evasive += o.evasive;
  active_evasive += o.active_evasive;
  internet += o.internet;
  child_process += o.child_process;
  technique_sum += o.technique_sum;
  technique_sq_sum += o.technique_sq_sum;
  technique_max = std::max(technique_max, o.technique_max);
  packed += o.packed;
  packed_evasive += o.packed_evasive;
  protected_ += o.protected_;
  protected_evasive += o.protected_evasive;
  protected_technique_sum += o.protected_technique_sum;
  protected_technique_sq_sum += o.protected_technique_sq_sum;
  for (std::size_t c = 0; c < kCategoryCount; ++c) packed_with_category[c] += o.packed_with_category[c];
}

void Histogram::add(double pos) {
  auto bin = static_cast<std::int64_t>(std::floor(pos));
  bin = std::clamp<std::int64_t>(bin, 0, kHistogramBins - 1);
  ++bins[static_cast<std::size_t>(bin)];
  sum += pos;
  ++count;
}

void Histogram::merge(const Histogram& o) {
  for (std::size_t b = 0; b < kHistogramBins; ++b) bins[b] += o.bins[b];
  sum += o.sum;
  count += o.count;
}

std::string CorpusAccumulator::group_key(const SampleReport& r) const {
  const std::string* v = nullptr;
  switch (group_by_) {
    case GroupBy::dataset: v = &r.labels.dataset; break;
    case GroupBy::year: v = &r.labels.year; break;
    case GroupBy::family: v = &r.labels.family; break;
  }
  return v->empty() ? "(none)" : *v;
}

void CorpusAccumulator::add(const SampleReport& r) {
  ++reports_;
  std::array<bool, kCategoryCount> has_category{};
  for (auto c : r.categories_in_order) has_category[category_index(c)] = true;

  auto tally = [&](GroupCounts& g) {
    ++g.samples;
    if (!r.started) return;
    ++g.started;
    const bool ev = r.evasive;
    const std::uint64_t n = r.techniques_count;
    g.active += r.active;
    g.evasive += ev;
    g.active_evasive += r.active && ev;
    g.internet += r.internet;
    g.child_process += r.child_process;
    if (ev) {
      g.technique_sum += n;
      g.technique_sq_sum += n * n;
      g.technique_max = std::max(g.technique_max, n);
    }
    if (!r.labels.packer.empty()) {
      ++g.packed;
      g.packed_evasive += ev;
      for (std::size_t c = 0; c < kCategoryCount; ++c) g.packed_with_category[c] += has_category[c];
    }
    if (!r.labels.protector.empty()) {
      ++g.protected_;
      if (ev) {
        ++g.protected_evasive;
        g.protected_technique_sum += n;
        g.protected_technique_sq_sum += n * n;
      }
    }
  };
  tally(overall_);
  tally(groups_[group_key(r)]);
  if (!r.started) return;

  for (const auto& t : r.technique_set) ++technique_samples_[t];
  auto& y = years_[r.labels.year.empty() ? "(none)" : r.labels.year];
  ++y.started;
  for (std::size_t c = 0; c < kCategoryCount; ++c) y.with_category[c] += has_category[c];

  if (!r.evasive || !r.first_pos || !r.last_pos) return;
  ++timeline_samples_;
  first_.add(*r.first_pos);
  last_.add(*r.last_pos);
  diff_.add(*r.last_pos - *r.first_pos);
  first_in_head_ += timeline_slot(*r.first_pos) == TimeSlot::head;
  last_in_tail_ += timeline_slot(*r.last_pos) == TimeSlot::tail;

  std::array<bool, 3> slot_seen{};
  for (const auto& d : r.counted_detections()) {
    auto s = static_cast<std::size_t>(timeline_slot(d.normalized_pos));
    if (slot_seen[s]) continue;
    slot_seen[s] = true;
    ++slot_samples_[s];
    ++slot_first_[s][category_index(d.category)];
  }

  if (r.categories_in_order.size() >= 2) {
    ++multi_category_;
    auto first = r.categories_in_order.front();
    ++first_category_[category_index(first)];
    if (first != Category::AntiDebug) {
      ++not_antidebug_first_;
      ++first_category_not_antidebug_[category_index(first)];
    }
  }

  if (!r.labels.family.empty()) {
    auto& fp = footprints_[r.labels.family];
    std::set<std::string> mine(r.technique_set.begin(), r.technique_set.end());
    if (!fp) {
      fp = std::move(mine);
    } else {
      std::set<std::string> both;
      std::set_intersection(fp->begin(), fp->end(), mine.begin(), mine.end(), std::inserter(both, both.end()));
      fp = std::move(both);
    }
  }
}

void CorpusAccumulator::merge(const CorpusAccumulator& o) {
  if (o.group_by_ != group_by_) throw std::invalid_argument("cannot merge accumulators with different grouping");
  reports_ += o.reports_;
  overall_.merge(o.overall_);
  for (const auto& [k, g] : o.groups_) groups_[k].merge(g);
  for (const auto& [t, c] : o.technique_samples_) technique_samples_[t] += c;
  first_.merge(o.first_);
  last_.merge(o.last_);
  diff_.merge(o.diff_);
  timeline_samples_ += o.timeline_samples_;
  first_in_head_ += o.first_in_head_;
  last_in_tail_ += o.last_in_tail_;
  for (std::size_t s = 0; s < 3; ++s) {
    slot_samples_[s] += o.slot_samples_[s];
    for (std::size_t c = 0; c < kCategoryCount; ++c) slot_first_[s][c] += o.slot_first_[s][c];
  }
  multi_category_ += o.multi_category_;
  not_antidebug_first_ += o.not_antidebug_first_;
  for (std::size_t c = 0; c < kCategoryCount; ++c) {
    first_category_[c] += o.first_category_[c];
    first_category_not_antidebug_[c] += o.first_category_not_antidebug_[c];
  }
  for (const auto& [family, theirs] : o.footprints_) {
    auto& mine = footprints_[family];
    if (!theirs) continue;
    if (!mine) {
      mine = theirs;
      continue;
    }
    std::set<std::string> both;
    std::set_intersection(mine->begin(), mine->end(), theirs->begin(), theirs->end(),
                          std::inserter(both, both.end()));
    mine = std::move(both);
  }
  for (const auto& [year, yc] : o.years_) {
    auto& y = years_[year];
    y.started += yc.started;
    for (std::size_t c = 0; c < kCategoryCount; ++c) y.with_category[c] += yc.with_category[c];
  }
}

std::optional<double> mean_of(std::uint64_t sum, std::uint64_t n) {
  if (n == 0) return std::nullopt;
  return static_cast<double>(sum) / static_cast<double>(n);
}

std::optional<double> population_std(std::uint64_t sum, std::uint64_t sq_sum, std::uint64_t n) {
  if (n == 0) return std::nullopt;
  // n*sq - sum^2 is exact in integers (non-negative by Cauchy-Schwarz).
  auto nn = static_cast<long double>(n);
  auto var = (nn * static_cast<long double>(sq_sum) - static_cast<long double>(sum) * static_cast<long double>(sum)) /
             (nn * nn);
  return static_cast<double>(std::sqrt(std::max<long double>(var, 0)));
}

std::vector<Share> rank_shares(const std::map<std::string, std::uint64_t>& counts, std::uint64_t denominator,
                               std::size_t top_n) {
  std::vector<Share> out;
  for (const auto& [name, c] : counts)
    if (c > 0) out.push_back(Share{name, c, denominator ? 100.0 * double(c) / double(denominator) : 0.0});
  std::stable_sort(out.begin(), out.end(), [](const Share& a, const Share& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.name < b.name;
  });
  if (top_n > 0 && out.size() > top_n) out.resize(top_n);
  return out;
}

namespace {

GroupRow make_row(const std::string& name, const GroupCounts& g) {
  GroupRow row;
  row.group = name;
  row.counts = g;
  row.active_pct = pct(g.active, g.started);
  row.evasive_pct = pct(g.evasive, g.started);
  row.active_evasive_pct = pct(g.active_evasive, g.started);
  row.internet_pct = pct(g.internet, g.started);
  row.child_process_pct = pct(g.child_process, g.started);
  row.avg_techniques = mean_of(g.technique_sum, g.evasive);
  row.std_techniques = population_std(g.technique_sum, g.technique_sq_sum, g.evasive);
  row.max_techniques = g.technique_max;
  row.packed_pct = pct(g.packed, g.started);
  row.evasive_of_packed_pct = pct(g.packed_evasive, g.packed);
  row.protected_pct = pct(g.protected_, g.started);
  row.evasive_of_protected_pct = pct(g.protected_evasive, g.protected_);
  row.protected_avg_techniques = mean_of(g.protected_technique_sum, g.protected_evasive);
  row.protected_std_techniques =
      population_std(g.protected_technique_sum, g.protected_technique_sq_sum, g.protected_evasive);
  for (std::size_t c = 0; c < kCategoryCount; ++c) row.packed_category_pct[c] = pct(g.packed_with_category[c], g.packed);
  return row;
}

std::map<std::string, std::uint64_t> by_category(const std::array<std::uint64_t, kCategoryCount>& counts) {
  std::map<std::string, std::uint64_t> m;
  for (std::size_t c = 0; c < kCategoryCount; ++c) m[std::string(to_string(static_cast<Category>(c)))] = counts[c];
  return m;
}

}  // namespace

CorpusAggregate finalize(const CorpusAccumulator& acc, std::size_t top_n) {
  CorpusAggregate agg;
  agg.group_by = acc.group_by();
  agg.overall = make_row("(all)", acc.overall());
  if (acc.overall().started == 0) agg.diagnostics.push_back("no started samples; ratios undefined");
  for (const auto& [name, g] : acc.groups()) {
    if (g.started == 0) {
      agg.diagnostics.push_back("group '" + name + "' has no started samples; omitted");
      continue;
    }
    agg.groups.push_back(make_row(name, g));
  }
  agg.technique_ranking = rank_shares(acc.technique_samples(), acc.overall().started, top_n);

  agg.first_in_head_pct = pct(acc.first_in_head(), acc.timeline_samples());
  agg.last_in_tail_pct = pct(acc.last_in_tail(), acc.timeline_samples());
  auto mean = [](const Histogram& h) -> std::optional<double> {
    if (h.count == 0) return std::nullopt;
    return h.sum / static_cast<double>(h.count);
  };
  agg.mean_first = mean(acc.first_hist());
  agg.mean_last = mean(acc.last_hist());
  agg.mean_diff = mean(acc.diff_hist());
  for (std::size_t s = 0; s < 3; ++s)
    agg.slot_top[s] = rank_shares(by_category(acc.slot_first()[s]), acc.slot_samples()[s], 3);

  agg.no_multi_category = acc.multi_category() == 0;
  agg.first_category_shares = rank_shares(by_category(acc.first_category()), acc.multi_category());
  agg.first_category_when_not_antidebug =
      rank_shares(by_category(acc.first_category_not_antidebug()), acc.not_antidebug_first());

  std::uint64_t families = 0, nonempty = 0;
  for (const auto& [family, fp] : acc.footprints()) {
    if (!fp) continue;
    ++families;
    nonempty += !fp->empty();
    agg.footprints[family] = std::vector<std::string>(fp->begin(), fp->end());
  }
  agg.nonempty_footprint_pct = pct(nonempty, families);

  for (const auto& [year, y] : acc.years()) {
    auto& row = agg.category_by_year[year];
    for (std::size_t c = 0; c < kCategoryCount; ++c) row[c] = pct(y.with_category[c], y.started);
  }
  return agg;
}

CorpusAggregate corpus_stats(const std::vector<SampleReport>& reports, GroupBy group_by, std::size_t top_n) {
  CorpusAccumulator acc(group_by);
  for (const auto& r : reports) acc.add(r);
  return finalize(acc, top_n);
}

BehaviorDiff behavior_diff(const SampleReport& a, const SampleReport& b) {
  if (a.sample_id != b.sample_id)
    throw std::invalid_argument("behavior_diff of different samples '" + a.sample_id + "' and '" + b.sample_id + "'");
  BehaviorDiff d;
  d.same_techniques = a.technique_set == b.technique_set;
  auto va = a.externally_visible_apis;
  auto vb = b.externally_visible_apis;
  std::sort(va.begin(), va.end());
  std::sort(vb.begin(), vb.end());
  d.same_visible_effects = va == vb;
  return d;
}

namespace {

nlohmann::ordered_json shares_json(const std::vector<Share>& shares) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& s : shares) arr.push_back({{"name", s.name}, {"samples", s.count}, {"pct", s.pct}});
  return arr;
}

nlohmann::ordered_json row_json(const GroupRow& r) {
  nlohmann::ordered_json j;
  j["group"] = r.group;
  j["samples"] = r.counts.samples;
  j["started"] = r.counts.started;
  j["active"] = r.counts.active;
  j["evasive"] = r.counts.evasive;
  j["active_evasive"] = r.counts.active_evasive;
  j["active_pct"] = jnum(r.active_pct);
  j["evasive_pct"] = jnum(r.evasive_pct);
  j["active_evasive_pct"] = jnum(r.active_evasive_pct);
  j["avg_techniques"] = jnum(r.avg_techniques);
  j["std_techniques"] = jnum(r.std_techniques);
  j["max_techniques"] = r.max_techniques;
  j["internet_pct"] = jnum(r.internet_pct);
  j["child_process_pct"] = jnum(r.child_process_pct);
  j["packed"] = r.counts.packed;
  j["packed_pct"] = jnum(r.packed_pct);
  j["evasive_of_packed_pct"] = jnum(r.evasive_of_packed_pct);
  j["protected"] = r.counts.protected_;
  j["protected_pct"] = jnum(r.protected_pct);
  j["evasive_of_protected_pct"] = jnum(r.evasive_of_protected_pct);
  j["protected_avg_techniques"] = jnum(r.protected_avg_techniques);
  j["protected_std_techniques"] = jnum(r.protected_std_techniques);
  nlohmann::ordered_json cats;
  for (std::size_t c = 0; c < kCategoryCount; ++c)
    cats[std::string(to_string(static_cast<Category>(c)))] = jnum(r.packed_category_pct[c]);
  j["packed_category_pct"] = cats;
  return j;
}

}  // namespace

std::string write_summary_json(const CorpusAggregate& agg, const CorpusAccumulator& acc) {
  nlohmann::ordered_json j;
  j["group_by"] = std::string(to_string(agg.group_by));
  j["reports"] = acc.reports();
  j["overall"] = row_json(agg.overall);
  auto groups = nlohmann::ordered_json::array();
  for (const auto& g : agg.groups) groups.push_back(row_json(g));
  j["groups"] = groups;
  j["technique_ranking"] = shares_json(agg.technique_ranking);
  nlohmann::ordered_json tl;
  tl["samples"] = acc.timeline_samples();
  tl["first_in_head_pct"] = jnum(agg.first_in_head_pct);
  tl["last_in_tail_pct"] = jnum(agg.last_in_tail_pct);
  tl["mean_first_pos"] = jnum(agg.mean_first);
  tl["mean_last_pos"] = jnum(agg.mean_last);
  tl["mean_diff"] = jnum(agg.mean_diff);
  tl["first_pos_histogram"] = acc.first_hist().bins;
  tl["last_pos_histogram"] = acc.last_hist().bins;
  tl["diff_histogram"] = acc.diff_hist().bins;
  nlohmann::ordered_json slots;
  for (std::size_t s = 0; s < 3; ++s)
    slots[std::string(to_string(static_cast<TimeSlot>(s)))] = {{"samples", acc.slot_samples()[s]},
                                                               {"top", shares_json(agg.slot_top[s])}};
  tl["slots"] = slots;
  j["timeline"] = tl;
  nlohmann::ordered_json order;
  order["multi_category_samples"] = acc.multi_category();
  order["no_multi_category"] = agg.no_multi_category;
  order["first_category"] = shares_json(agg.first_category_shares);
  order["antidebug_not_first_samples"] = acc.not_antidebug_first();
  order["first_category_when_antidebug_not_first"] = shares_json(agg.first_category_when_not_antidebug);
  j["order"] = order;
  nlohmann::ordered_json fps;
  for (const auto& [family, fp] : agg.footprints) fps[family] = fp;
  j["footprints"] = fps;
  j["nonempty_footprint_pct"] = jnum(agg.nonempty_footprint_pct);
  nlohmann::ordered_json years;
  for (const auto& [year, row] : agg.category_by_year) {
    nlohmann::ordered_json y;
    for (std::size_t c = 0; c < kCategoryCount; ++c) y[std::string(to_string(static_cast<Category>(c)))] = jnum(row[c]);
    years[year] = y;
  }
  j["category_by_year"] = years;
  j["diagnostics"] = agg.diagnostics;
  return j.dump(2) + "\n";
}

std::map<std::string, std::string> write_tables_csv(const CorpusAggregate& agg, const CorpusAccumulator& acc) {
  std::map<std::string, std::string> t;
  std::vector<const GroupRow*> rows{&agg.overall};
  for (const auto& g : agg.groups) rows.push_back(&g);

  std::string& groups = t["groups.csv"];
  groups = std::string(to_string(agg.group_by)) +
           ",samples,started,active_pct,evasive_pct,active_evasive_pct,avg_techniques,std_techniques,max_techniques,"
           "internet_pct,child_process_pct\n";
  for (const auto* r : rows)
    groups += r->group + "," + std::to_string(r->counts.samples) + "," + std::to_string(r->counts.started) + "," +
              num(r->active_pct) + "," + num(r->evasive_pct) + "," + num(r->active_evasive_pct) + "," +
              num(r->avg_techniques) + "," + num(r->std_techniques) + "," + std::to_string(r->max_techniques) + "," +
              num(r->internet_pct) + "," + num(r->child_process_pct) + "\n";

  std::string& packers = t["packers.csv"];
  packers = std::string(to_string(agg.group_by)) +
            ",started,packed,packed_pct,evasive_of_packed_pct,protected,protected_pct,evasive_of_protected_pct,"
            "protected_avg_techniques,protected_std_techniques";
  for (std::size_t c = 0; c < kCategoryCount; ++c)
    packers += ",packed_" + std::string(to_string(static_cast<Category>(c))) + "_pct";
  packers += "\n";
  for (const auto* r : rows) {
    packers += r->group + "," + std::to_string(r->counts.started) + "," + std::to_string(r->counts.packed) + "," +
               num(r->packed_pct) + "," + num(r->evasive_of_packed_pct) + "," + std::to_string(r->counts.protected_) +
               "," + num(r->protected_pct) + "," + num(r->evasive_of_protected_pct) + "," +
               num(r->protected_avg_techniques) + "," + num(r->protected_std_techniques);
    for (const auto& p : r->packed_category_pct) packers += "," + num(p);
    packers += "\n";
  }

  std::string& ranking = t["ranking.csv"];
  ranking = "rank,technique,samples,share_pct\n";
  for (std::size_t k = 0; k < agg.technique_ranking.size(); ++k) {
    const auto& s = agg.technique_ranking[k];
    ranking += std::to_string(k + 1) + "," + s.name + "," + std::to_string(s.count) + "," + num(s.pct) + "\n";
  }

  std::string& slots = t["slots.csv"];
  slots = "slot,samples,rank,category,first_in_slot,share_pct\n";
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t k = 0; k < agg.slot_top[s].size(); ++k) {
      const auto& sh = agg.slot_top[s][k];
      slots += std::string(to_string(static_cast<TimeSlot>(s))) + "," + std::to_string(acc.slot_samples()[s]) + "," +
               std::to_string(k + 1) + "," + sh.name + "," + std::to_string(sh.count) + "," + num(sh.pct) + "\n";
    }

  std::string& order = t["order.csv"];
  order = "scope,category,samples,share_pct\n";
  for (const auto& s : agg.first_category_shares)
    order += "multi_category," + s.name + "," + std::to_string(s.count) + "," + num(s.pct) + "\n";
  for (const auto& s : agg.first_category_when_not_antidebug)
    order += "antidebug_not_first," + s.name + "," + std::to_string(s.count) + "," + num(s.pct) + "\n";

  std::string& fps = t["footprints.csv"];
  fps = "family,size,footprint\n";
  for (const auto& [family, fp] : agg.footprints) {
    std::string joined;
    for (const auto& id : fp) joined += (joined.empty() ? "" : ";") + id;
    fps += family + "," + std::to_string(fp.size()) + "," + joined + "\n";
  }

  std::string& years = t["category_year.csv"];
  years = "year";
  for (std::size_t c = 0; c < kCategoryCount; ++c) years += "," + std::string(to_string(static_cast<Category>(c)));
  years += "\n";
  for (const auto& [year, row] : agg.category_by_year) {
    years += year;
    for (const auto& v : row) years += "," + num(v);
    years += "\n";
  }

  std::string& hist = t["histograms.csv"];
  hist = "bin_start,first_pos,last_pos,diff\n";
  for (std::size_t b = 0; b < kHistogramBins; ++b)
    hist += std::to_string(b) + "," + std::to_string(acc.first_hist().bins[b]) + "," +
            std::to_string(acc.last_hist().bins[b]) + "," + std::to_string(acc.diff_hist().bins[b]) + "\n";
  return t;
}

}  // namespace evprof
