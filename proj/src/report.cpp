#include "evprof/report.hpp"

#include <algorithm>
#include <json.hpp>

namespace evprof {

using Json = nlohmann::ordered_json;

namespace {

Json labels_json(const Labels& l) {
  return Json{{"family", l.family}, {"year", l.year}, {"packer", l.packer}, {"protector", l.protector},
              {"dataset", l.dataset}};
}

Json optional_pos(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

Category category_from(const Json& j) {
  auto c = parse_category(j.get<std::string>());
  if (!c) throw ReportError("unknown category '" + j.get<std::string>() + "'");
  return *c;
}

std::optional<double> pos_from(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

std::vector<DetectionRecord> SampleReport::counted_detections() const {
  std::vector<DetectionRecord> out;
  for (const auto& d : detections)
    if (std::binary_search(technique_set.begin(), technique_set.end(), d.technique)) out.push_back(d);
  return out;
}

std::string write_report(const SampleReport& r) {
  Json j;
  j["sample_id"] = r.sample_id;
  j["labels"] = labels_json(r.labels);
  j["started"] = r.started;
  j["active"] = r.active;
  j["native_api_count"] = r.native_api_count;
  j["total_event_count"] = r.total_event_count;
  j["evasive"] = r.evasive;
  j["fp_prone_included"] = r.fp_prone_included;
  j["technique_set"] = r.technique_set;
  j["techniques_count"] = r.techniques_count;
  j["first_pos"] = optional_pos(r.first_pos);
  j["last_pos"] = optional_pos(r.last_pos);
  Json cats = Json::array();
  for (auto c : r.categories_in_order) cats.push_back(std::string(to_string(c)));
  j["categories_in_order"] = cats;
  if (r.externally_visible_split) {
    const auto& s = *r.externally_visible_split;
    j["externally_visible_split"] = Json{{"before_first_pct", s.before_first_pct},
                                         {"after_last_pct", s.after_last_pct},
                                         {"no_visible_events", s.no_visible_events}};
  } else {
    j["externally_visible_split"] = nullptr;
  }
  j["externally_visible_apis"] = r.externally_visible_apis;
  j["internet"] = r.internet;
  j["child_process"] = r.child_process;

  Json dets = Json::array();
  for (const auto& d : r.detections) {
    Json e;
    e["technique"] = d.technique;
    e["category"] = std::string(to_string(d.category));
    e["seq"] = d.seq;
    e["pid"] = d.pid;
    e["tid"] = d.tid;
    e["normalized_pos"] = d.normalized_pos;
    e["mitigated"] = d.mitigated;
    e["substituted_value"] = d.substituted_value ? Json(to_string(*d.substituted_value)) : Json(nullptr);
    dets.push_back(std::move(e));
  }
  j["detections"] = dets;

  Json rw = Json::array();
  for (const auto& w : r.rewrites)
    rw.push_back(Json{{"seq", w.seq}, {"target", w.target}, {"original", to_string(w.original)},
                      {"value", to_string(w.value)}});
  j["rewrites"] = rw;

  Json inj = Json::array();
  for (const auto& p : r.injections) {
    Json e{{"seq", p.seq}, {"api", p.api}, {"source", p.source}, {"original_target", p.original_target}};
    e["address"] = p.address ? Json(hex_u64(*p.address)) : Json(nullptr);
    e["length"] = p.length ? Json(*p.length) : Json(nullptr);
    inj.push_back(std::move(e));
  }
  j["injections"] = inj;

  Json diags = Json::array();
  for (const auto& d : r.diagnostics) diags.push_back(Json{{"seq", d.seq}, {"reason", d.reason}});
  j["diagnostics"] = diags;
  return j.dump(2) + "\n";
}

SampleReport read_report(std::string_view document) {
  SampleReport r;
  try {
    auto j = Json::parse(document);
    r.sample_id = j.at("sample_id").get<std::string>();
    const auto& l = j.at("labels");
    r.labels = Labels{l.at("family").get<std::string>(), l.at("year").get<std::string>(),
                      l.at("packer").get<std::string>(), l.at("protector").get<std::string>(),
                      l.at("dataset").get<std::string>()};
    r.started = j.at("started").get<bool>();
    r.active = j.at("active").get<bool>();
    r.native_api_count = j.at("native_api_count").get<std::uint64_t>();
    r.total_event_count = j.at("total_event_count").get<std::uint64_t>();
    r.evasive = j.at("evasive").get<bool>();
    r.fp_prone_included = j.at("fp_prone_included").get<bool>();
    r.technique_set = j.at("technique_set").get<std::vector<std::string>>();
    r.techniques_count = j.at("techniques_count").get<std::uint64_t>();
    r.first_pos = pos_from(j.at("first_pos"));
    r.last_pos = pos_from(j.at("last_pos"));
    for (const auto& c : j.at("categories_in_order")) r.categories_in_order.push_back(category_from(c));
    if (const auto& s = j.at("externally_visible_split"); !s.is_null())
      r.externally_visible_split = VisibleSplit{s.at("before_first_pct").get<double>(),
                                                s.at("after_last_pct").get<double>(),
                                                s.at("no_visible_events").get<bool>()};
    r.externally_visible_apis = j.at("externally_visible_apis").get<std::vector<std::string>>();
    r.internet = j.at("internet").get<bool>();
    r.child_process = j.at("child_process").get<bool>();
    for (const auto& e : j.at("detections")) {
      DetectionRecord d;
      d.technique = e.at("technique").get<std::string>();
      d.category = category_from(e.at("category"));
      d.seq = e.at("seq").get<std::uint64_t>();
      d.pid = e.at("pid").get<Pid>();
      d.tid = e.at("tid").get<Tid>();
      d.normalized_pos = e.at("normalized_pos").get<double>();
      d.mitigated = e.at("mitigated").get<bool>();
      if (!e.at("substituted_value").is_null())
        d.substituted_value = parse_value(e.at("substituted_value").get<std::string>());
      r.detections.push_back(std::move(d));
    }
    for (const auto& e : j.at("rewrites"))
      r.rewrites.push_back(Rewrite{e.at("seq").get<std::uint64_t>(), e.at("target").get<std::string>(),
                                   parse_value(e.at("original").get<std::string>()),
                                   parse_value(e.at("value").get<std::string>())});
    for (const auto& e : j.at("injections")) {
      InjectedPayload p;
      p.seq = e.at("seq").get<std::uint64_t>();
      p.api = e.at("api").get<std::string>();
      p.source = e.at("source").get<Pid>();
      p.original_target = e.at("original_target").get<Pid>();
      if (!e.at("address").is_null()) p.address = parse_u64(e.at("address").get<std::string>());
      if (!e.at("length").is_null()) p.length = e.at("length").get<std::uint64_t>();
      r.injections.push_back(std::move(p));
    }
    for (const auto& e : j.at("diagnostics"))
      r.diagnostics.push_back(Diagnostic{e.at("seq").get<std::uint64_t>(), e.at("reason").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw ReportError(std::string("malformed report: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ReportError(std::string("malformed report: ") + e.what());
  }
  return r;
}

}  // namespace evprof
