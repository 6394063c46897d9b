#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "evprof/aggregator.hpp"
#include "evprof/catalog.hpp"
#include "evprof/generator.hpp"
#include "evprof/profiler.hpp"
#include "evprof/report.hpp"
#include "evprof/trace.hpp"

namespace fs = std::filesystem;
using namespace evprof;

namespace {

enum Exit { kOk = 0, kUsage = 2, kParse = 3, kRuntime = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, std::string_view content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << content;
  if (!out) throw IoError("write failed for " + p.string());
}

// "on", "off", sizes like "5GB"/"512MB", plain integers or typed values.
MitigationOverride parse_override_value(const std::string& v) {
  MitigationOverride o;
  if (v == "on") return o;
  if (v == "off") {
    o.enabled = false;
    return o;
  }
  auto unit = [&](std::string_view suffix, std::uint64_t scale) -> bool {
    if (v.size() <= suffix.size() || v.compare(v.size() - suffix.size(), suffix.size(), suffix) != 0) return false;
    o.value = Value::length(parse_u64(std::string_view(v).substr(0, v.size() - suffix.size())) * scale);
    return true;
  };
  try {
    if (unit("GB", kGiB) || unit("MB", 1024ull * 1024) || unit("KB", 1024)) return o;
    if (v.find(':') != std::string::npos) {
      o.value = parse_value(v);
    } else {
      o.value = Value::integer(static_cast<std::int64_t>(parse_u64(v)));
    }
  } catch (const std::invalid_argument& e) {
    throw UsageError("bad override value '" + v + "': " + e.what());
  }
  return o;
}

struct RunFlags {
  std::string config_path;
  bool mitigate = false;
  bool no_mitigate = false;
  bool include_fp = false;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run configuration (flags take precedence)");
    app->add_flag("--mitigate", mitigate, "apply mitigations (default)");
    app->add_flag("--no-mitigate", no_mitigate, "record detections without mitigating them");
    app->add_flag("--include-fp-prone", include_fp, "count the four FP-prone techniques toward verdicts");
    app->add_option("--override", overrides, "technique=on|off|<value>, e.g. memory_space=1GB");
    app->add_option("--seed", seed, "seed for randomized substitutions");
  }

  RunConfig build(const Catalog& catalog) const {
    RunConfig cfg;
    if (!config_path.empty()) {
      try {
        auto j = nlohmann::json::parse(read_file(config_path));
        if (j.contains("mitigate")) cfg.mitigate = j.at("mitigate").get<bool>();
        if (j.contains("include_fp_prone")) cfg.exclude_fp_prone = !j.at("include_fp_prone").get<bool>();
        if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("clock")) {
          const auto& c = j.at("clock");
          if (c.contains("stall_threshold_ms")) cfg.clock.stall_threshold_ms = c.at("stall_threshold_ms").get<std::uint64_t>();
          if (c.contains("infinite_wait_cap_ms"))
            cfg.clock.infinite_wait_cap_ms = c.at("infinite_wait_cap_ms").get<std::uint64_t>();
          if (c.contains("tick_rate")) cfg.clock.tick_rate = c.at("tick_rate").get<std::uint64_t>();
          if (c.contains("sandwich_window")) cfg.clock.sandwich_window = c.at("sandwich_window").get<std::uint64_t>();
          if (c.contains("rdtsc_requires_sandwich"))
            cfg.clock.rdtsc_requires_sandwich = c.at("rdtsc_requires_sandwich").get<bool>();
        }
        if (j.contains("overrides"))
          for (const auto& [id, v] : j.at("overrides").items())
            cfg.overrides[id] = parse_override_value(v.get<std::string>());
      } catch (const nlohmann::json::exception& e) {
        throw UsageError("config " + config_path + ": " + e.what());
      }
    }
    if (mitigate && no_mitigate) throw UsageError("--mitigate and --no-mitigate are exclusive");
    if (mitigate) cfg.mitigate = true;
    if (no_mitigate) cfg.mitigate = false;
    if (include_fp) cfg.exclude_fp_prone = false;
    if (seed) cfg.seed = *seed;
    for (const auto& o : overrides) {
      auto eq = o.find('=');
      if (eq == std::string::npos) throw UsageError("override '" + o + "' is not technique=value");
      cfg.overrides[o.substr(0, eq)] = parse_override_value(o.substr(eq + 1));
    }
    try {
      check_config(cfg, catalog);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    return cfg;
  }
};

SampleReport analyze_file(const fs::path& path, const Catalog& catalog, const RunConfig& cfg) {
  auto trace = parse_trace(read_file(path));
  return run_sample(trace, catalog, cfg);
}

std::vector<fs::path> list_files(const fs::path& dir, std::string_view suffix) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    auto name = e.path().filename().string();
    if (e.is_regular_file() && name.size() >= suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string report_name(const fs::path& trace) {
  auto stem = trace.filename().string();
  if (stem.size() > 6 && stem.ends_with(".trace")) stem.resize(stem.size() - 6);
  return stem + ".report.json";
}

void warn_diagnostics(const std::string& where, const SampleReport& r) {
  for (const auto& d : r.diagnostics) std::cerr << "warning: " << where << ": seq " << d.seq << ": " << d.reason << "\n";
}

int cmd_analyze(const std::string& path, const std::string& out, const RunFlags& flags, const Catalog& catalog) {
  auto cfg = flags.build(catalog);
  auto report = analyze_file(path, catalog, cfg);
  warn_diagnostics(path, report);
  auto doc = write_report(report);
  if (out.empty())
    std::cout << doc;
  else
    write_file(out, doc);
  return kOk;
}

int cmd_batch(const std::string& dir, const std::string& out, unsigned jobs, const RunFlags& flags,
              const Catalog& catalog) {
  auto cfg = flags.build(catalog);
  auto traces = list_files(dir, ".trace");
  if (traces.empty()) throw IoError("no .trace files in " + dir);
  fs::path out_dir = out.empty() ? fs::path(dir) / "reports" : fs::path(out);
  fs::create_directories(out_dir);

  std::vector<std::string> errors(traces.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < traces.size(); k = next++) {
      try {
        auto report = analyze_file(traces[k], catalog, cfg);
        write_file(out_dir / report_name(traces[k]), write_report(report));
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    }
  };
  jobs = std::max(1u, jobs);
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::size_t failed = 0;
  for (std::size_t k = 0; k < traces.size(); ++k)
    if (!errors[k].empty()) {
      ++failed;
      std::cerr << "failed: " << traces[k].filename().string() << ": " << errors[k] << "\n";
    }
  std::cout << "batch: " << traces.size() << " traces, " << traces.size() - failed << " reports, " << failed
            << " failures -> " << out_dir.string() << "\n";
  return failed ? kRuntime : kOk;
}

std::string text_summary(const CorpusAggregate& agg, const CorpusAccumulator& acc) {
  std::ostringstream os;
  auto p = [](const std::optional<double>& v) {
    if (!v) return std::string("n/a");
    std::ostringstream s;
    s << std::fixed << std::setprecision(1) << *v << "%";
    return s.str();
  };
  auto f = [](const std::optional<double>& v) {
    if (!v) return std::string("n/a");
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << *v;
    return s.str();
  };
  os << "reports: " << acc.reports() << "  grouped by " << to_string(agg.group_by) << "\n\n";
  std::vector<const GroupRow*> rows{&agg.overall};
  for (const auto& g : agg.groups) rows.push_back(&g);
  os << "group           started  active  evasive  act&eva  avg±std        max  internet  child\n";
  for (const auto* r : rows) {
    os << std::left << std::setw(16) << r->group << std::setw(9) << r->counts.started << std::setw(8)
       << p(r->active_pct) << std::setw(9) << p(r->evasive_pct) << std::setw(9) << p(r->active_evasive_pct)
       << std::setw(15) << (f(r->avg_techniques) + "±" + f(r->std_techniques)) << std::setw(5) << r->max_techniques
       << std::setw(10) << p(r->internet_pct) << p(r->child_process_pct) << "\n";
  }
  os << "\ntop techniques (share of started samples):\n";
  for (std::size_t k = 0; k < agg.technique_ranking.size() && k < 10; ++k)
    os << "  " << k + 1 << ". " << agg.technique_ranking[k].name << " " << p(agg.technique_ranking[k].pct) << "\n";
  os << "\nfirst technique in [0-10]: " << p(agg.first_in_head_pct)
     << "   last technique in [90-100]: " << p(agg.last_in_tail_pct) << "\n";
  for (std::size_t s = 0; s < 3; ++s) {
    os << "slot " << to_string(static_cast<TimeSlot>(s)) << ":";
    for (const auto& sh : agg.slot_top[s]) os << " " << sh.name << " " << p(sh.pct);
    os << "\n";
  }
  os << "\nfirst category among multi-category samples:";
  if (agg.no_multi_category) os << " none";
  for (const auto& sh : agg.first_category_shares) os << " " << sh.name << " " << p(sh.pct);
  os << "\nwhen AntiDebug is not first:";
  for (const auto& sh : agg.first_category_when_not_antidebug) os << " " << sh.name << " " << p(sh.pct);
  os << "\n\nevasive footprints (" << p(agg.nonempty_footprint_pct) << " non-empty):\n";
  for (const auto& [family, fp] : agg.footprints) {
    os << "  " << family << ":";
    for (const auto& id : fp) os << " " << id;
    if (fp.empty()) os << " (empty)";
    os << "\n";
  }
  os << "\npackers/protectors:\n";
  for (const auto* r : rows)
    os << "  " << r->group << ": packed/started " << p(r->packed_pct) << ", evasive/packed "
       << p(r->evasive_of_packed_pct) << ", protected/started " << p(r->protected_pct) << ", evasive/protected "
       << p(r->evasive_of_protected_pct) << ", protected techniques " << f(r->protected_avg_techniques) << "±"
       << f(r->protected_std_techniques) << "\n";
  for (const auto& d : agg.diagnostics) os << "note: " << d << "\n";
  return os.str();
}

int cmd_aggregate(const std::string& dir, const std::string& labels_path, const std::string& group_by,
                  const std::string& format, const std::string& out, std::size_t top_n) {
  auto gb = parse_group_by(group_by);
  if (!gb) throw UsageError("--group-by must be dataset, year or family");
  if (format != "text" && format != "csv" && format != "json") throw UsageError("--format must be text, csv or json");
  auto files = list_files(dir, ".json");
  std::vector<SampleReport> reports;
  for (const auto& f : files) {
    if (f.filename() == "summary.json" || f.filename() == "manifest.json") continue;
    try {
      reports.push_back(read_report(read_file(f)));
    } catch (const ReportError& e) {
      throw ReportError(f.string() + ": " + e.what());
    }
  }
  if (reports.empty()) throw IoError("no reports in " + dir);
  if (!labels_path.empty()) {
    auto labels = parse_labels_csv(read_file(labels_path));
    auto missing = apply_labels(reports, labels);
    if (missing) std::cerr << "warning: " << missing << " report(s) without a label row\n";
  }
  CorpusAccumulator acc(*gb);
  for (const auto& r : reports) acc.add(r);
  auto agg = finalize(acc, top_n);
  auto summary = write_summary_json(agg, acc);
  auto tables = write_tables_csv(agg, acc);
  if (!out.empty()) {
    fs::create_directories(out);
    write_file(fs::path(out) / "summary.json", summary);
    for (const auto& [name, content] : tables) write_file(fs::path(out) / name, content);
  }
  if (format == "json")
    std::cout << summary;
  else if (format == "csv")
    for (const auto& [name, content] : tables) std::cout << "# " << name << "\n" << content;
  else
    std::cout << text_summary(agg, acc);
  return kOk;
}

int cmd_gen(const std::string& preset_name, const std::string& spec_path, const std::string& technique,
            const std::string& origin, const std::string& variant, std::uint64_t seed, const std::string& out,
            const Catalog& catalog) {
  int sources = !preset_name.empty() + !spec_path.empty() + !technique.empty();
  if (sources != 1) throw UsageError("gen needs exactly one of --preset, --spec, --technique");
  if (out.empty()) throw UsageError("gen needs --out");
  std::vector<GeneratedSample> corpus;
  if (!technique.empty()) {
    if (origin != "red" && origin != "benign") throw UsageError("--origin must be red or benign");
    corpus.push_back(gen_technique_trace(technique, origin == "red" ? Origin::red : Origin::benign, seed, catalog,
                                         variant));
  } else {
    auto specs = preset_name.empty() ? parse_gen_specs(read_file(spec_path)) : preset(preset_name, seed, catalog);
    corpus = gen_corpus(specs, catalog);
  }
  fs::path dir(out);
  fs::create_directories(dir);
  std::vector<GenSpec> specs;
  for (const auto& g : corpus) {
    write_file(dir / (g.spec.sample_id + ".trace"), serialize_trace(g.trace));
    specs.push_back(g.spec);
  }
  write_file(dir / "manifest.json", write_manifest(corpus));
  write_file(dir / "labels.csv", write_labels_csv(corpus));
  write_file(dir / "specs.gen", serialize_gen_specs(specs));
  std::cout << "gen: " << corpus.size() << " traces -> " << dir.string() << "\n";
  return kOk;
}

int cmd_catalog(const std::string& format, const Catalog& catalog) {
  if (format == "csv") {
    std::cout << "id,category,trigger,mitigated,fp_prone,mitigation\n";
    for (const auto& r : catalog.rules())
      std::cout << r.id << "," << to_string(r.category) << "," << to_string(r.trigger.kind) << ","
                << (r.has_mitigation() ? "yes" : "no") << "," << (r.fp_prone ? "yes" : "no") << ","
                << (r.has_mitigation() ? std::string(to_string(r.mitigation)) : "") << "\n";
    return kOk;
  }
  if (format != "text") throw UsageError("--format must be text or csv");
  std::cout << std::left << std::setw(38) << "id" << std::setw(21) << "category" << std::setw(15) << "trigger"
            << std::setw(10) << "mitigated" << "fp_prone\n";
  for (const auto& r : catalog.rules())
    std::cout << std::setw(38) << r.id << std::setw(21) << to_string(r.category) << std::setw(15)
              << to_string(r.trigger.kind) << std::setw(10) << (r.has_mitigation() ? "yes" : "no")
              << (r.fp_prone ? "yes" : "no") << "\n";
  return kOk;
}

int cmd_diff(const std::string& a, const std::string& b) {
  auto d = behavior_diff(read_report(read_file(a)), read_report(read_file(b)));
  std::cout << "same_techniques=" << (d.same_techniques ? "true" : "false")
            << " same_visible_effects=" << (d.same_visible_effects ? "true" : "false") << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trace-driven evasion profiler and corpus aggregator"};
  app.require_subcommand(1);

  RunFlags run_flags;
  std::string path, out, labels, group_by = "dataset", format = "text", preset_name, spec_path, technique,
                                 origin = "red", variant, other;
  unsigned jobs = std::max(1u, std::thread::hardware_concurrency());
  std::uint64_t seed = 0;
  std::size_t top_n = 0;

  auto* analyze = app.add_subcommand("analyze", "profile one trace and write its report");
  analyze->add_option("trace", path, "trace file")->required();
  analyze->add_option("--out", out, "report path (stdout if omitted)");
  run_flags.attach(analyze);

  auto* batch = app.add_subcommand("batch", "profile every .trace file in a directory");
  batch->add_option("dir", path, "directory of traces")->required();
  batch->add_option("--out", out, "report directory (default <dir>/reports)");
  batch->add_option("--jobs", jobs, "worker threads");
  run_flags.attach(batch);

  auto* aggregate = app.add_subcommand("aggregate", "corpus statistics over a report directory");
  aggregate->add_option("dir", path, "directory of reports")->required();
  aggregate->add_option("--labels,--families", labels, "label file: sample_id,family,year,packer,protector");
  aggregate->add_option("--group-by", group_by, "dataset, year or family");
  aggregate->add_option("--format", format, "text, csv or json");
  aggregate->add_option("--out", out, "directory for summary.json and CSV tables");
  aggregate->add_option("--top", top_n, "limit the technique ranking");

  auto* gen = app.add_subcommand("gen", "generate synthetic traces with an expectation manifest");
  gen->add_option("--preset", preset_name, "one of: roundtrip, thresholds, stall, locky, themida, injection, fixture60, all");
  gen->add_option("--spec", spec_path, "spec file");
  gen->add_option("--technique", technique, "single technique trace");
  gen->add_option("--origin", origin, "red or benign (with --technique)");
  gen->add_option("--variant", variant, "same_value or write_before_read (with --technique)");
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--out", out, "output directory");

  auto* catalog_cmd = app.add_subcommand("catalog", "list the technique catalog");
  catalog_cmd->add_option("--format", format, "text or csv");

  auto* diff = app.add_subcommand("diff", "compare two reports of one sample");
  diff->add_option("a", path, "first report")->required();
  diff->add_option("b", other, "second report")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const Catalog catalog;
    if (*analyze) return cmd_analyze(path, out, run_flags, catalog);
    if (*batch) return cmd_batch(path, out, jobs, run_flags, catalog);
    if (*aggregate) return cmd_aggregate(path, labels, group_by, format, out, top_n);
    if (*gen) return cmd_gen(preset_name, spec_path, technique, origin, variant, seed, out, catalog);
    if (*catalog_cmd) return cmd_catalog(format, catalog);
    if (*diff) return cmd_diff(path, other);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const TraceError& e) {
    std::cerr << "parse error: " << path << ": " << e.what() << "\n";
    return kParse;
  } catch (const ReportError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kParse;
  } catch (const LabelError& e) {
    std::cerr << "parse error: " << labels << ": " << e.what() << "\n";
    return kParse;
  } catch (const GenError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kParse;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
