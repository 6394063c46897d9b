#include <doctest.h>

#include <sstream>

#include "evprof/generator.hpp"
#include "evprof/profiler.hpp"
#include "support.hpp"

using namespace evprof;
using evtest::catalog;

namespace {

// Hand-written trace: preamble, then `body` lines numbered from seq 3.
struct TraceText {
  std::ostringstream os;
  std::uint64_t seq = 0;
  std::uint64_t insn = 0;

  TraceText() {
    os << "seq=0 kind=meta pid=1 tid=1 insn_index=0 sample_id=hand family=fam\n"
       << "seq=1 kind=image_load pid=1 tid=1 insn_index=0 region=main_image base=0x401000 size=0x1000 name=a.exe\n"
       << "seq=2 kind=image_load pid=1 tid=1 insn_index=0 region=standard_library base=0x76000000 size=0x1000 "
          "name=kernel32.dll\n";
    seq = 2;
  }
  TraceText& api(const std::string& name, const std::string& rest = "", bool native = false, bool red = true) {
    os << "seq=" << ++seq << " kind=api pid=1 tid=1 insn_index=" << (insn += 7) << " name=" << name << " " << rest
       << (rest.empty() ? "" : " ") << "return_address=" << (red ? "0x401100" : "0x76000100")
       << " native=" << (native ? 1 : 0) << "\n";
    return *this;
  }
  TraceText& natives(int n) {
    for (int k = 0; k < n; ++k) api("NtClose", "args=i:4 ret=i:0", true);
    return *this;
  }
  Trace trace() const { return parse_trace(os.str()); }
};

}  // namespace

TEST_CASE("started and active follow the native call count") {
  for (auto [n, started, active] : {std::tuple{0, false, false}, std::tuple{1, true, false},
                                    std::tuple{49, true, false}, std::tuple{50, true, true}}) {
    TraceText t;
    t.natives(n).api("GetTickCount", "ret=i:5");  // non-native call does not count
    auto r = run_sample(t.trace(), catalog());
    CHECK(r.native_api_count == static_cast<std::uint64_t>(n));
    CHECK(r.started == started);
    CHECK(r.active == active);
  }
}

TEST_CASE("empty trace gives an unstarted report") {
  auto r = run_sample(parse_trace("seq=0 kind=meta pid=1 tid=1 insn_index=0 sample_id=e\n"), catalog());
  CHECK_FALSE(r.started);
  CHECK_FALSE(r.evasive);
  CHECK(r.sample_id == "e");
}

TEST_CASE("positions are seq over the last seq") {
  TraceText t;
  t.natives(10);                                 // seq 3..12
  t.api("IsDebuggerPresent", "ret=i:1");         // seq 13
  t.natives(5);                                  // 14..18
  t.api("CheckRemoteDebuggerPresent", "args=i:-1,a:0x12f000 ret=i:1");  // 19
  t.natives(1);                                  // 20
  auto r = run_sample(t.trace(), catalog());
  REQUIRE(r.detections.size() == 2);
  CHECK(r.detections[0].normalized_pos == doctest::Approx(65.0));
  CHECK(r.detections[1].normalized_pos == doctest::Approx(95.0));
  CHECK(*r.first_pos == doctest::Approx(65.0));
  CHECK(*r.last_pos == doctest::Approx(95.0));
  CHECK(r.evasive);
  CHECK(r.techniques_count == 2);
  CHECK(r.categories_in_order == std::vector<Category>{Category::AntiDebug});
}

TEST_CASE("FP-prone techniques alone do not make a sample evasive") {
  TraceText t;
  t.natives(50).api("GetTickCount", "ret=i:5").api("GetCursorPos", "args=a:0x12f000 ret=s:1%2C2");
  auto r = run_sample(t.trace(), catalog());
  CHECK(r.active);
  CHECK(r.detections.size() == 2);
  CHECK_FALSE(r.evasive);
  CHECK(r.technique_set.empty());
  CHECK_FALSE(r.first_pos);

  RunConfig include;
  include.exclude_fp_prone = false;
  auto r2 = run_sample(t.trace(), catalog(), include);
  CHECK(r2.evasive);
  CHECK(r2.technique_set == std::vector<std::string>{"GetTickCount", "mouse_movement"});
  CHECK(r2.fp_prone_included);
}

TEST_CASE("calls from system libraries never count") {
  TraceText t;
  t.natives(50);
  t.api("IsDebuggerPresent", "ret=i:1", false, false);
  t.api("WriteFile", "args=i:4 ret=i:1", false, false);
  t.api("connect", "args=i:4 ret=i:0", false, false);
  auto r = run_sample(t.trace(), catalog());
  CHECK_FALSE(r.evasive);
  CHECK(r.externally_visible_apis.empty());
  CHECK_FALSE(r.internet);
}

TEST_CASE("externally visible calls are split around the detections") {
  TraceText t;
  t.natives(1).api("WriteFile", "args=i:4 ret=i:1");
  t.api("IsDebuggerPresent", "ret=i:1");
  t.api("RegSetValueExW", "args=i:4 ret=i:0").natives(1);
  t.api("IsDebuggerPresent", "ret=i:1");
  for (int k = 0; k < 7; ++k) t.api("WriteFile", "args=i:4 ret=i:1");
  t.api("connect", "args=i:4 ret=i:0").api("CreateProcessW", "args=s:x ret=i:1");
  auto r = run_sample(t.trace(), catalog());
  REQUIRE(r.externally_visible_split);
  CHECK(r.externally_visible_apis.size() == 11);
  CHECK(r.externally_visible_split->before_first_pct == doctest::Approx(100.0 / 11));
  CHECK(r.externally_visible_split->after_last_pct == doctest::Approx(900.0 / 11));
  CHECK(r.internet);
  CHECK(r.child_process);
}

TEST_CASE("visible split by hand") {
  std::vector<std::uint64_t> seqs{5, 20, 21, 22, 23, 24, 25, 26, 27, 15};
  auto s = externally_visible_split(seqs, 10, 19);
  CHECK(s.before_first_pct == doctest::Approx(10.0));
  CHECK(s.after_last_pct == doctest::Approx(80.0));
  auto all_after = externally_visible_split({30, 31}, 10, 19);
  CHECK(all_after.before_first_pct == 0.0);
  CHECK(all_after.after_last_pct == 100.0);
  auto none = externally_visible_split({}, 1, 2);
  CHECK(none.no_visible_events);
  CHECK(none.before_first_pct == 0.0);
}

TEST_CASE("slot boundaries") {
  CHECK(timeline_slot(0.0) == TimeSlot::head);
  CHECK(timeline_slot(10.0) == TimeSlot::head);
  CHECK(timeline_slot(10.9) == TimeSlot::head);
  CHECK(timeline_slot(11.0) == TimeSlot::middle);
  CHECK(timeline_slot(25.0) == TimeSlot::middle);
  CHECK(timeline_slot(89.99) == TimeSlot::middle);
  CHECK(timeline_slot(90.0) == TimeSlot::tail);
  CHECK(timeline_slot(95.5) == TimeSlot::tail);
  CHECK(to_string(TimeSlot::middle) == "[11-89]");
}

TEST_CASE("mitigation switches") {
  TraceText t;
  t.natives(50).api("GlobalMemoryStatusEx", "args=a:0x12eb00 ret=n:2147483648");
  t.api("NtDelayExecution", "args=i:0,ms:60000 ret=i:0", true);
  t.api("GetTickCount", "ret=i:1000");

  auto on = run_sample(t.trace(), catalog());
  REQUIRE(on.detections.size() == 3);
  CHECK(on.detections[0].mitigated);
  CHECK(on.detections[0].substituted_value == Value::length(8 * kGiB));
  CHECK(on.detections[1].technique == "time_stalling");
  REQUIRE(on.rewrites.size() == 2);
  CHECK(on.rewrites[0].value == Value::duration(0));
  CHECK(on.rewrites[1].target == "ret");
  CHECK(on.rewrites[1].value == Value::integer(61'000));

  RunConfig off;
  off.mitigate = false;
  auto r_off = run_sample(t.trace(), catalog(), off);
  CHECK(r_off.technique_set == on.technique_set);
  for (const auto& d : r_off.detections) CHECK_FALSE(d.mitigated);
  CHECK(r_off.rewrites.empty());

  RunConfig partial;
  partial.overrides["memory_space"] = MitigationOverride{false, {}};
  partial.overrides["time_stalling"] = MitigationOverride{true, {}};
  auto r_partial = run_sample(t.trace(), catalog(), partial);
  CHECK_FALSE(r_partial.detections[0].mitigated);
  CHECK(r_partial.detections[1].mitigated);

  RunConfig value;
  value.overrides["memory_space"] = MitigationOverride{true, Value::length(kGiB)};
  CHECK(run_sample(t.trace(), catalog(), value).detections[0].substituted_value == Value::length(kGiB));
}

TEST_CASE("configuration is checked against the catalog") {
  RunConfig c;
  c.overrides["nope"] = {};
  CHECK_THROWS_AS(check_config(c, catalog()), ConfigError);
  RunConfig d;
  d.overrides["IsDebuggerPresentAPI"] = MitigationOverride{true, Value::integer(0)};
  CHECK_THROWS_AS(check_config(d, catalog()), ConfigError);
  RunConfig e;
  e.overrides["IsDebuggerPresentAPI"] = MitigationOverride{false, {}};
  CHECK_NOTHROW(check_config(e, catalog()));
}

TEST_CASE("watchpoint variants end to end") {
  auto r = [](const std::string& variant) {
    auto s = gen_technique_trace("IsDebuggerPresentPEB", Origin::red, 4, catalog(), variant);
    return run_sample(s.trace, catalog()).detections.size();
  };
  CHECK(r("") == 1);
  CHECK(r("write_before_read") == 0);
  auto pe = [](const std::string& id, const std::string& variant) {
    auto s = gen_technique_trace(id, Origin::red, 4, catalog(), variant);
    return run_sample(s.trace, catalog()).detections.size();
  };
  CHECK(pe("ErasePEHeader", "") == 1);
  CHECK(pe("ErasePEHeader", "same_value") == 0);
  CHECK(pe("SizeOfImage", "") == 1);
  CHECK(pe("SizeOfImage", "same_value") == 0);
}

TEST_CASE("reports are deterministic and survive the report format") {
  for (const auto& spec : preset("all", 17, catalog())) {
    auto s = generate(spec, catalog());
    auto a = run_sample(s.trace, catalog());
    auto b = run_sample(s.trace, catalog());
    auto text = write_report(a);
    CHECK(text == write_report(b));
    auto back = read_report(text);
    CHECK_MESSAGE(back == a, spec.sample_id);
    CHECK(write_report(back) == text);
  }
  CHECK_THROWS_AS(read_report("{"), ReportError);
  CHECK_THROWS_AS(read_report("{\"sample_id\": 3}"), ReportError);
}

TEST_CASE("report invariants hold on generated corpora") {
  for (const auto& spec : preset("fixture60", 8, catalog())) {
    auto r = run_sample(generate(spec, catalog()).trace, catalog());
    CHECK(r.started == (r.native_api_count >= 1));
    CHECK(r.active == (r.native_api_count >= 50));
    CHECK(r.evasive == !r.technique_set.empty());
    CHECK(r.techniques_count == r.technique_set.size());
    CHECK(std::is_sorted(r.detections.begin(), r.detections.end(),
                         [](const auto& x, const auto& y) { return x.seq < y.seq; }));
    for (const auto& d : r.detections) {
      CHECK(d.normalized_pos >= 0.0);
      CHECK(d.normalized_pos <= 100.0);
      if (d.mitigated) CHECK(catalog().rule(d.technique).has_mitigation());
    }
    if (r.evasive) CHECK(*r.first_pos <= *r.last_pos);
  }
}
