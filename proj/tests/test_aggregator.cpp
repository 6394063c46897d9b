#include <doctest.h>

#include <json.hpp>

#include "evprof/aggregator.hpp"
#include "evprof/generator.hpp"
#include "evprof/profiler.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace evprof;
using evtest::Hit;
using evtest::make_report;

namespace {

const char* const kByCategory[] = {"IsDebuggerPresentAPI", "ErasePEHeader", "Check_EIP", "Shellcode_injected",
                                   "memory_space",         "reg_keys",      "RDTSC"};

std::string tech(Category c) { return kByCategory[static_cast<int>(c)]; }

std::vector<SampleReport> random_reports(evtest::Gen& g, std::size_t n) {
  static const char* fams[] = {"a", "b", "c", "d", ""};
  static const char* sets[] = {"vx", "vs", "goodware", ""};
  const auto& rules = evtest::catalog().rules();
  std::vector<SampleReport> out;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<Hit> hits;
    for (auto m = g.below(6); m > 0; --m)
      hits.push_back({rules[g.below(rules.size())].id, static_cast<double>(g.below(10001)) / 100.0});
    Labels l;
    l.family = fams[g.below(5)];
    l.dataset = sets[g.below(4)];
    l.year = g.chance(90) ? std::to_string(2015 + g.below(6)) : "";
    if (g.chance(30)) l.packer = "UPX";
    if (g.chance(20)) l.protector = "Themida";
    auto r = make_report("r" + std::to_string(k), hits, l, g.chance(90), g.chance(80));
    r.internet = r.started && g.chance(20);
    r.child_process = r.started && g.chance(15);
    out.push_back(r);
  }
  return out;
}

void check_oracle(const std::vector<SampleReport>& rs, GroupBy by) {
  CorpusAccumulator acc(by);
  for (const auto& r : rs) acc.add(r);
  auto agg = finalize(acc);
  auto bad = evtest::oracle_mismatches(rs, by, agg, acc);
  CHECK_MESSAGE(bad.empty(), (bad.empty() ? std::string() : bad.front()), " (", bad.size(), " mismatches)");
}

// Accumulators equal up to floating-point summation order of positions.
bool same_accumulator(const CorpusAccumulator& a, const CorpusAccumulator& b) {
  auto hist_eq = [](const Histogram& x, const Histogram& y) {
    return x.bins == y.bins && x.count == y.count && std::fabs(x.sum - y.sum) < 1e-6;
  };
  return a.reports() == b.reports() && a.overall() == b.overall() && a.groups() == b.groups() &&
         a.technique_samples() == b.technique_samples() && hist_eq(a.first_hist(), b.first_hist()) &&
         hist_eq(a.last_hist(), b.last_hist()) && hist_eq(a.diff_hist(), b.diff_hist()) &&
         a.timeline_samples() == b.timeline_samples() && a.first_in_head() == b.first_in_head() &&
         a.last_in_tail() == b.last_in_tail() && a.slot_samples() == b.slot_samples() &&
         a.slot_first() == b.slot_first() && a.multi_category() == b.multi_category() &&
         a.first_category() == b.first_category() && a.not_antidebug_first() == b.not_antidebug_first() &&
         a.first_category_not_antidebug() == b.first_category_not_antidebug() && a.footprints() == b.footprints() &&
         a.years() == b.years();
}

const Share* share_of(const std::vector<Share>& v, const std::string& name) {
  for (const auto& s : v)
    if (s.name == name) return &s;
  return nullptr;
}

}  // namespace

TEST_CASE("aggregates equal a brute-force recount on random corpora") {
  evtest::Gen g(314);
  for (int round = 0; round < 40; ++round) {
    auto rs = random_reports(g, 1 + g.below(80));
    for (auto by : {GroupBy::dataset, GroupBy::year, GroupBy::family}) check_oracle(rs, by);
  }
}

TEST_CASE("aggregates equal a brute-force recount on the profiled fixture corpus") {
  auto corpus = gen_corpus(preset("fixture60", 0, evtest::catalog()), evtest::catalog());
  std::vector<SampleReport> rs;
  for (const auto& c : corpus) rs.push_back(run_sample(c.trace, evtest::catalog()));
  auto labels = parse_labels_csv(write_labels_csv(corpus));
  CHECK(apply_labels(rs, labels) == 0);
  for (auto by : {GroupBy::dataset, GroupBy::year, GroupBy::family}) check_oracle(rs, by);
}

TEST_CASE("merging partial accumulators equals one pass") {
  evtest::Gen g(2718);
  for (int round = 0; round < 30; ++round) {
    auto rs = random_reports(g, g.below(60));
    CorpusAccumulator whole(GroupBy::family), left(GroupBy::family), right(GroupBy::family), mid(GroupBy::family);
    auto cut1 = g.below(rs.size() + 1), cut2 = cut1 + g.below(rs.size() - cut1 + 1);
    for (std::size_t k = 0; k < rs.size(); ++k) {
      whole.add(rs[k]);
      (k < cut1 ? left : k < cut2 ? mid : right).add(rs[k]);
    }
    CorpusAccumulator lm = left, mr = mid;
    lm.merge(mid);
    lm.merge(right);  // (L + M) + R
    mr.merge(right);
    CorpusAccumulator l2 = left;
    l2.merge(mr);  // L + (M + R)
    CHECK(same_accumulator(lm, whole));
    CHECK(same_accumulator(l2, whole));
  }
  CorpusAccumulator a(GroupBy::year), b(GroupBy::family);
  CHECK_THROWS(a.merge(b));
}

TEST_CASE("average and population deviation of technique counts") {
  std::vector<SampleReport> rs{make_report("a", {{"RDTSC", 5}}),
                               make_report("b", {{"RDTSC", 5}, {"reg_keys", 6}}),
                               make_report("c", {{"RDTSC", 5}, {"reg_keys", 6}, {"ErasePEHeader", 7}})};
  auto agg = corpus_stats(rs, GroupBy::dataset);
  CHECK(*agg.overall.avg_techniques == doctest::Approx(2.0));
  CHECK(*agg.overall.std_techniques == doctest::Approx(0.8165).epsilon(1e-4));
  CHECK(agg.overall.max_techniques == 3);
  CHECK(*mean_of(6, 3) == 2.0);
  CHECK(*population_std(6, 14, 3) == doctest::Approx(std::sqrt(2.0 / 3.0)));
  CHECK_FALSE(mean_of(0, 0));
}

TEST_CASE("a corpus with nothing started has only undefined ratios") {
  std::vector<SampleReport> rs{make_report("a", {}, {}, false), make_report("b", {}, {}, false)};
  auto agg = corpus_stats(rs, GroupBy::dataset);
  CHECK(agg.overall.counts.started == 0);
  CHECK(agg.overall.counts.samples == 2);
  CHECK_FALSE(agg.overall.active_pct);
  CHECK_FALSE(agg.overall.evasive_pct);
  CHECK_FALSE(agg.overall.avg_techniques);
  CHECK(agg.groups.empty());
  CHECK_FALSE(agg.diagnostics.empty());
  CHECK(agg.technique_ranking.empty());
}

TEST_CASE("percentages are over started samples") {
  std::vector<SampleReport> rs;
  for (int k = 0; k < 10; ++k) {
    Labels l;
    if (k < 2) l.packer = "UPX";
    rs.push_back(make_report("s" + std::to_string(k), k == 0 ? std::vector<Hit>{{"RDTSC", 4}} : std::vector<Hit>{}, l));
  }
  rs.push_back(make_report("dead", {}, Labels{"", "", "UPX", "", ""}, false));
  auto agg = corpus_stats(rs, GroupBy::dataset);
  CHECK(*agg.overall.packed_pct == doctest::Approx(20.0));
  CHECK(*agg.overall.evasive_of_packed_pct == doctest::Approx(50.0));
  CHECK(*agg.overall.evasive_pct == doctest::Approx(10.0));
}

TEST_CASE("technique ranking") {
  std::vector<SampleReport> rs;
  for (int k = 0; k < 1000; ++k) {
    std::vector<Hit> hits;
    if (k < 89) hits.push_back({"ErasePEHeader", 50});
    if (k < 120) hits.push_back({"IsDebuggerPresentAPI", 10});
    if (k >= 500 && k < 530) hits.push_back({"reg_keys", 60});
    if (k >= 600 && k < 630) hits.push_back({"RDTSC", 60});
    if (k < 300) hits.push_back({"GetTickCount", 1});  // FP-prone, never ranked
    rs.push_back(make_report("s" + std::to_string(k), hits));
  }
  auto agg = corpus_stats(rs, GroupBy::dataset);
  REQUIRE(agg.technique_ranking.size() == 4);
  CHECK(agg.technique_ranking[0].name == "IsDebuggerPresentAPI");
  CHECK(agg.technique_ranking[1].name == "ErasePEHeader");
  CHECK(agg.technique_ranking[1].pct == doctest::Approx(8.9));
  CHECK(agg.technique_ranking[2].name == "RDTSC");  // tie with reg_keys broken by name
  CHECK(agg.technique_ranking[3].name == "reg_keys");
  CHECK(corpus_stats(rs, GroupBy::dataset, 2).technique_ranking.size() == 2);

  auto single = corpus_stats({make_report("x", {{"Check_EIP", 30}})}, GroupBy::dataset);
  REQUIRE(single.technique_ranking.size() == 1);
  CHECK(single.technique_ranking[0].pct == 100.0);
}

TEST_CASE("timeline statistics") {
  auto one = corpus_stats({make_report("x", {{"RDTSC", 5}, {"reg_keys", 50}})}, GroupBy::dataset);
  CHECK(*one.mean_first == 5.0);
  CHECK(*one.mean_last == 50.0);
  CHECK(*one.mean_diff == 45.0);

  std::vector<SampleReport> rs;
  for (int k = 0; k < 100; ++k) {
    double first = k < 47 ? 3.0 + k % 7 : 30.0 + k % 50;
    double last = k < 34 ? 95.0 : 70.0;
    auto c = k < 60 ? "IsDebuggerPresentAPI" : k < 80 ? "reg_keys" : "RDTSC";
    rs.push_back(make_report("s" + std::to_string(k), {{c, first}, {"ErasePEHeader", last}}));
  }
  CorpusAccumulator acc;
  for (const auto& r : rs) acc.add(r);
  auto agg = finalize(acc);
  CHECK(*agg.first_in_head_pct == doctest::Approx(47.0));
  CHECK(*agg.last_in_tail_pct == doctest::Approx(34.0));
  REQUIRE_FALSE(agg.slot_top[0].empty());
  CHECK(agg.slot_top[0][0].name == "AntiDebug");
  CHECK(agg.slot_top[0][0].pct == doctest::Approx(100.0));
  CHECK(agg.slot_top[1].size() <= 3);
  CHECK(acc.first_hist().count == 100);
  CHECK(evtest::oracle_mismatches(rs, GroupBy::dataset, agg, acc).empty());
}

TEST_CASE("first category among multi-category samples") {
  std::vector<SampleReport> rs;
  for (int k = 0; k < 10; ++k) {
    auto first = k < 8 ? Category::AntiDebug : Category::VMChecks;
    rs.push_back(make_report("s" + std::to_string(k), {{tech(first), 1}, {tech(Category::TimingAttacks), 2}}));
  }
  rs.push_back(make_report("single", {{tech(Category::AntiDump), 1}}));
  auto agg = corpus_stats(rs, GroupBy::dataset);
  CHECK(share_of(agg.first_category_shares, "AntiDebug")->pct == doctest::Approx(80.0));

  auto lone = corpus_stats({make_report("t", {{"RDTSC", 1}, {"IsDebuggerPresentAPI", 2}})}, GroupBy::dataset);
  REQUIRE(lone.first_category_shares.size() == 1);
  CHECK(lone.first_category_shares[0].name == "TimingAttacks");
  CHECK(lone.first_category_shares[0].pct == 100.0);

  auto none = corpus_stats({make_report("u", {{"RDTSC", 1}})}, GroupBy::dataset);
  CHECK(none.no_multi_category);
  CHECK(none.first_category_shares.empty());

  std::vector<SampleReport> split;
  auto add = [&](Category c, int n) {
    for (int k = 0; k < n; ++k)
      split.push_back(make_report(std::string(to_string(c)) + std::to_string(k),
                                  {{tech(c), 1}, {tech(Category::AntiDebug), 2}}));
  };
  add(Category::TimingAttacks, 44);
  add(Category::VMChecks, 38);
  add(Category::AntiDump, 15);
  add(Category::ResourceProfiling, 3);
  for (int k = 0; k < 300; ++k)
    split.push_back(make_report("ad" + std::to_string(k), {{tech(Category::AntiDebug), 1}, {"reg_keys", 2}}));
  auto s = corpus_stats(split, GroupBy::dataset);
  const auto& cond = s.first_category_when_not_antidebug;
  REQUIRE(cond.size() == 4);
  CHECK(cond[0].name == "TimingAttacks");
  CHECK(cond[0].pct == doctest::Approx(44.0));
  CHECK(cond[1].pct == doctest::Approx(38.0));
  CHECK(cond[2].pct == doctest::Approx(15.0));
  CHECK(share_of(s.first_category_shares, "AntiDebug")->pct == doctest::Approx(75.0));
}

TEST_CASE("evasive footprints") {
  auto fam = [](const std::string& f) { return Labels{f, "", "", "", ""}; };
  std::vector<SampleReport> rs{
      make_report("1", {{"RDTSC", 1}, {"reg_keys", 2}}, fam("ab")),
      make_report("2", {{"RDTSC", 1}, {"Check_EIP", 2}}, fam("ab")),
      make_report("3", {}, fam("ab")),  // not evasive, ignored
      make_report("4", {{"RDTSC", 1}}, fam("split")),
      make_report("5", {{"reg_keys", 1}}, fam("split")),
      make_report("6", {}, fam("quiet")),
  };
  auto agg = corpus_stats(rs, GroupBy::family);
  CHECK(agg.footprints.at("ab") == std::vector<std::string>{"RDTSC"});
  CHECK(agg.footprints.at("split").empty());
  CHECK_FALSE(agg.footprints.count("quiet"));
  CHECK(*agg.nonempty_footprint_pct == doctest::Approx(50.0));

  std::vector<SampleReport> ten;
  for (int f = 0; f < 10; ++f)
    for (int k = 0; k < 3; ++k) {
      std::vector<Hit> hits{{k == 0 ? "RDTSC" : "reg_keys", 5}};
      if (f < 5) hits.push_back({"Check_EIP", 9});
      ten.push_back(make_report(std::to_string(f * 10 + k), hits, fam("f" + std::to_string(f))));
    }
  CHECK(*corpus_stats(ten, GroupBy::family).nonempty_footprint_pct == doctest::Approx(50.0));
}

TEST_CASE("adding an evasive sample never grows a footprint") {
  evtest::Gen g(8);
  auto rs = random_reports(g, 300);
  CorpusAccumulator acc(GroupBy::family);
  for (const auto& r : rs) {
    auto before = acc.footprints();
    acc.add(r);
    for (const auto& [f, fp] : before) {
      if (!fp) continue;
      const auto& now = *acc.footprints().at(f);
      CHECK(std::includes(fp->begin(), fp->end(), now.begin(), now.end()));
    }
  }
}

TEST_CASE("packer and protector ratios") {
  std::vector<SampleReport> rs;
  for (int k = 0; k < 20; ++k) {
    std::vector<Hit> hits{{"IsDebuggerPresentAPI", 5}};
    if (k != 0) hits.push_back({"ErasePEHeader", 60});
    rs.push_back(make_report("p" + std::to_string(k), hits, Labels{"", "", "UPX", "", ""}));
  }
  const int counts[] = {1, 1, 2, 3, 4, 4, 5, 6, 7, 8};
  const auto& rules = evtest::catalog().rules();
  for (int k = 0; k < 10; ++k) {
    std::vector<Hit> hits;
    for (int t = 0; t < counts[k]; ++t) hits.push_back({rules[t].id, 10.0 + t});
    rs.push_back(make_report("t" + std::to_string(k), hits, Labels{"", "", "", "Themida", ""}));
  }
  rs.push_back(make_report("t_clean", {}, Labels{"", "", "", "Themida", ""}));
  auto agg = corpus_stats(rs, GroupBy::dataset);
  CHECK(*agg.overall.packed_category_pct[static_cast<int>(Category::AntiDump)] == doctest::Approx(95.0));
  CHECK(*agg.overall.protected_avg_techniques == doctest::Approx(4.1));
  CHECK(*agg.overall.protected_std_techniques == doctest::Approx(2.3));
  CHECK(*agg.overall.evasive_of_protected_pct == doctest::Approx(100.0 * 10 / 11));
}

TEST_CASE("label files") {
  auto l = parse_labels_csv("sample_id,family,year,packer,protector\r\na,zeus,2016,UPX,\nb,,2017,,Themida\n\n");
  CHECK(l.size() == 2);
  CHECK(l.at("a").packer == "UPX");
  CHECK(l.at("b").protector == "Themida");
  CHECK_THROWS_AS(parse_labels_csv("id,family\n"), LabelError);
  CHECK_THROWS_AS(parse_labels_csv("sample_id,family,year,packer,protector\na,b\n"), LabelError);
  CHECK_THROWS_AS(parse_labels_csv("sample_id,family,year,packer,protector\na,,,,\na,,,,\n"), LabelError);

  std::vector<SampleReport> rs{make_report("a", {}), make_report("zz", {})};
  CHECK(apply_labels(rs, l) == 1);
  CHECK(rs[0].labels.family == "zeus");
  CHECK(rs[0].labels.year == "2016");
}

TEST_CASE("behavior diff") {
  auto a = make_report("x", {{"RDTSC", 5}});
  auto b = a;
  a.externally_visible_apis = {"WriteFile", "connect", "WriteFile"};
  b.externally_visible_apis = {"connect", "WriteFile", "WriteFile"};
  auto d = behavior_diff(a, b);
  CHECK(d.same_techniques);
  CHECK(d.same_visible_effects);
  b.externally_visible_apis.pop_back();
  CHECK_FALSE(behavior_diff(a, b).same_visible_effects);
  b.technique_set.clear();
  CHECK_FALSE(behavior_diff(a, b).same_techniques);
  auto c = make_report("y", {});
  CHECK_THROWS_AS(behavior_diff(a, c), std::invalid_argument);
}

TEST_CASE("summary document and tables") {
  evtest::Gen g(1);
  auto rs = random_reports(g, 50);
  CorpusAccumulator acc;
  for (const auto& r : rs) acc.add(r);
  auto agg = finalize(acc);
  auto j = nlohmann::json::parse(write_summary_json(agg, acc));
  CHECK(j.at("overall").at("started").get<std::uint64_t>() == agg.overall.counts.started);
  auto tables = write_tables_csv(agg, acc);
  for (auto name : {"groups.csv", "ranking.csv", "slots.csv", "order.csv", "footprints.csv", "category_year.csv",
                    "histograms.csv", "packers.csv"})
    CHECK_MESSAGE(tables.count(name), name);
  CHECK(tables.at("histograms.csv").find("\n99,") != std::string::npos);

  auto empty = corpus_stats({make_report("a", {}, {}, false)}, GroupBy::dataset);
  CorpusAccumulator acc2;
  acc2.add(make_report("a", {}, {}, false));
  CHECK(write_tables_csv(empty, acc2).at("groups.csv").find("NA") != std::string::npos);
}

TEST_CASE("the recount notices perturbed statistics") {
  evtest::Gen g(55);
  auto rs = random_reports(g, 80);
  CorpusAccumulator acc(GroupBy::family);
  for (const auto& r : rs) acc.add(r);
  const auto good = finalize(acc);
  REQUIRE(evtest::oracle_mismatches(rs, GroupBy::family, good, acc).empty());
  auto flagged = [&](auto mutate) {
    auto bad = good;
    mutate(bad);
    return !evtest::oracle_mismatches(rs, GroupBy::family, bad, acc).empty();
  };
  CHECK(flagged([](CorpusAggregate& a) { *a.overall.active_pct += 1e-6; }));
  CHECK(flagged([](CorpusAggregate& a) { a.groups.back().counts.evasive += 1; }));
  CHECK(flagged([](CorpusAggregate& a) { std::swap(a.technique_ranking[0], a.technique_ranking[1]); }));
  CHECK(flagged([](CorpusAggregate& a) { a.slot_top[1].pop_back(); }));
  CHECK(flagged([](CorpusAggregate& a) { a.footprints.begin()->second.push_back("zzz"); }));
  CHECK(flagged([](CorpusAggregate& a) { *a.overall.protected_std_techniques *= 1.001; }));
  CHECK(flagged([](CorpusAggregate& a) { a.first_category_shares.clear(); }));
}
