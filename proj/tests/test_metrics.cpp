#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "hetflow/kfusion/pipeline.hpp"
#include "hetflow/metrics.hpp"

using namespace hetflow;
using namespace hetflow::metrics;

namespace {

// Minimal XML well-formedness check: one root, balanced and properly nested
// tags, quoted attributes, no stray '<' or unescaped '&' in text.
bool well_formed_xml(const std::string& s, std::string* why = nullptr) {
  auto bad = [&](const std::string& m) {
    if (why) *why = m;
    return false;
  };
  std::vector<std::string> stack;
  std::size_t i = 0, roots = 0;
  auto is_name = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == ':' || c == '.'; };
  while (i < s.size()) {
    if (s[i] == '&') {
      const std::size_t semi = s.find(';', i);
      if (semi == std::string::npos) return bad("unterminated entity");
      const std::string ent = s.substr(i, semi - i + 1);
      if (ent != "&amp;" && ent != "&lt;" && ent != "&gt;" && ent != "&quot;" && ent != "&apos;") return bad("entity " + ent);
      i = semi + 1;
      continue;
    }
    if (s[i] != '<') {
      if (stack.empty() && !std::isspace(static_cast<unsigned char>(s[i]))) return bad("text outside root");
      ++i;
      continue;
    }
    if (s.compare(i, 2, "<?") == 0) {
      const std::size_t e = s.find("?>", i);
      if (e == std::string::npos) return bad("unterminated declaration");
      i = e + 2;
      continue;
    }
    if (s.compare(i, 2, "</") == 0) {
      std::size_t j = i + 2;
      while (j < s.size() && is_name(s[j])) ++j;
      const std::string name = s.substr(i + 2, j - i - 2);
      if (j >= s.size() || s[j] != '>') return bad("bad close tag");
      if (stack.empty() || stack.back() != name) return bad("mismatched </" + name + ">");
      stack.pop_back();
      i = j + 1;
      continue;
    }
    std::size_t j = i + 1;
    while (j < s.size() && is_name(s[j])) ++j;
    const std::string name = s.substr(i + 1, j - i - 1);
    if (name.empty()) return bad("empty tag name");
    if (stack.empty() && ++roots > 1) return bad("second root element");
    // attributes
    for (;;) {
      while (j < s.size() && std::isspace(static_cast<unsigned char>(s[j]))) ++j;
      if (j >= s.size()) return bad("unterminated tag");
      if (s[j] == '>') {
        stack.push_back(name);
        ++j;
        break;
      }
      if (s.compare(j, 2, "/>") == 0) {
        j += 2;
        break;
      }
      std::size_t k = j;
      while (k < s.size() && is_name(s[k])) ++k;
      if (k == j || k >= s.size() || s[k] != '=') return bad("bad attribute in <" + name + ">");
      const char q = s[k + 1];
      if (q != '"' && q != '\'') return bad("unquoted attribute");
      const std::size_t end = s.find(q, k + 2);
      if (end == std::string::npos) return bad("unterminated attribute");
      if (s.substr(k + 2, end - k - 2).find('<') != std::string::npos) return bad("'<' in attribute");
      j = end + 1;
    }
    i = j;
  }
  if (!stack.empty()) return bad("unclosed <" + stack.back() + ">");
  if (roots != 1) return bad("no root element");
  return true;
}

ExecutionReport fake_report(std::size_t launched, double per_task, std::size_t bytes) {
  ExecutionReport r;
  for (std::size_t i = 0; i < launched + 1; ++i) {
    TaskRecord t;
    t.task = i;
    t.kernel = i % 2 ? "k_odd" : "k_even";
    t.stage = i < 2 ? "preprocessing" : "tracking";
    t.launched = i < launched;  // the last one is guarded out
    t.wall = per_task;
    t.modeled = 2 * per_task;
    r.tasks.push_back(t);
  }
  r.launches = launched;
  r.launch_modeled = 2 * per_task * static_cast<double>(launched);
  r.bytes_to_device = bytes;
  return r;
}

RunReport random_report(std::mt19937_64& rng, std::size_t frames) {
  std::uniform_real_distribution<double> u(1e-4, 0.2);
  RunReport r;
  r.label = "random & <odd>";
  r.seed = rng();
  r.config = {{"width", "160"}, {"mu", "0.1"}};
  r.devices = "all:sim-accel,tracking=parallel-cpu:0";
  for (std::size_t f = 0; f < frames; ++f)
    r.frames.push_back({f, u(rng), u(rng), static_cast<std::size_t>(18 + rng() % 37), rng() % 100000, rng() % 2 == 0, rng()});
  r.stages = {{"tracking", {u(rng), u(rng)}}, {"raycast", {u(rng), u(rng)}}};
  r.kernels = {{"bilateral", {u(rng), u(rng)}}};
  r.bytes_to_device = rng() % 1000;
  r.bytes_to_host = rng() % 1000;
  r.ate = u(rng);
  return r;
}

}  // namespace

TEST(XmlChecker, RejectsBrokenDocuments) {
  EXPECT_TRUE(well_formed_xml("<a><b x=\"1\"/>t &amp; u</a>"));
  EXPECT_FALSE(well_formed_xml("<a><b></a></b>"));
  EXPECT_FALSE(well_formed_xml("<a x=1></a>"));
  EXPECT_FALSE(well_formed_xml("<a>&</a>"));
  EXPECT_FALSE(well_formed_xml("<a></a><b></b>"));
  EXPECT_FALSE(well_formed_xml("<a>"));
}

// --- recorder ---------------------------------------------------------------------

TEST(Recorder, AccumulatesRegisteredScopes) {
  Recorder r;
  r.register_scope("frame");
  r.record("frame", 1e-3);
  r.record("frame", 1e-3);
  EXPECT_DOUBLE_EQ(r.total("frame"), 2e-3);
  EXPECT_THROW(r.record("unknown", 1e-3), Error);
  EXPECT_THROW(r.total("unknown"), Error);
  EXPECT_THROW(r.record("frame", -1.0), Error);
  EXPECT_THROW(ScopedTimer(r, "unknown"), Error);
}

TEST(Recorder, NestedScopesSumBelowParent) {
  Recorder r;
  for (const char* s : {"outer", "a", "b"}) r.register_scope(s);
  {
    ScopedTimer outer(r, "outer");
    {
      ScopedTimer a(r, "a");
      std::this_thread::sleep_for(std::chrono::milliseconds(3));
    }
    {
      ScopedTimer b(r, "b");
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
  }
  EXPECT_GE(r.total("a"), 3e-3);
  EXPECT_LE(r.total("a") + r.total("b"), r.total("outer"));
}

TEST(Recorder, MergeAddsPerWorkerTotals) {
  Recorder a, b;
  a.register_scope("x");
  b.register_scope("x");
  b.register_scope("y");
  a.record("x", 0.5);
  b.record("x", 0.25);
  b.record("y", 1.0);
  a.merge(b);
  EXPECT_DOUBLE_EQ(a.total("x"), 0.75);
  EXPECT_DOUBLE_EQ(a.total("y"), 1.0);
}

// --- run report arithmetic ------------------------------------------------------------

TEST(RunReport, FoldsExecutionReports) {
  RunReport r;
  r.add_frame(fake_report(4, 0.01, 100), 0.05, 0.002, true, 7);
  r.add_frame(fake_report(6, 0.01, 50), 0.07);
  ASSERT_EQ(r.frames.size(), 2u);
  EXPECT_EQ(r.frames[1].frame, 1u);
  EXPECT_EQ(r.frames[0].kernels, 4u);
  EXPECT_EQ(r.frames[0].output_hash, 7u);
  EXPECT_EQ(r.total_kernels(), 10u);
  EXPECT_EQ(r.bytes_to_device, 150u);
  // launched tasks only: 2 preprocessing per frame, the rest tracking
  EXPECT_NEAR(r.stages.at("preprocessing").wall, 0.04, 1e-15);
  EXPECT_NEAR(r.stages.at("tracking").wall, 0.06, 1e-15);
  EXPECT_NEAR(r.stages.at("tracking").modeled, 0.12, 1e-15);
  EXPECT_DOUBLE_EQ(r.stages.at("acquisition").wall, 0.002);
  EXPECT_NEAR(r.kernels.at("k_odd").wall + r.kernels.at("k_even").wall, 0.1, 1e-15);
}

TEST(RunReport, ThroughputIdentities) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const RunReport r = random_report(rng, 1 + rng() % 40);
    double t = 0;
    std::size_t k = 0;
    for (const auto& f : r.frames) {
      t += f.wall;
      k += f.kernels;
    }
    const double n = static_cast<double>(r.frames.size());
    EXPECT_DOUBLE_EQ(r.mean_fps(), n / t);
    EXPECT_DOUBLE_EQ(r.kernels_per_second(), r.mean_fps() * (static_cast<double>(k) / n));
    EXPECT_NEAR(r.kernels_per_second(), static_cast<double>(k) / t, 1e-9 * static_cast<double>(k) / t);
  }
  const RunReport empty;
  EXPECT_EQ(empty.mean_fps(), 0.0);
  EXPECT_EQ(empty.kernels_per_second(), 0.0);
}

TEST(RunReport, JsonRoundTrip) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const RunReport r = random_report(rng, rng() % 30);
    EXPECT_EQ(parse_report(to_json(r).dump()), r);
    EXPECT_EQ(parse_report(to_json(r).dump(2)), r);
  }
  RunReport empty;
  EXPECT_EQ(parse_report(to_json(empty).dump()), empty);
  EXPECT_TRUE(to_json(empty).at("ate").is_null());
}

TEST(RunReport, JsonCarriesDerivedSummary) {
  std::mt19937_64 rng(5);
  const RunReport r = random_report(rng, 10);
  const auto j = to_json(r);
  EXPECT_EQ(j.at("summary").at("mean_fps").get<double>(), r.mean_fps());
  EXPECT_EQ(j.at("summary").at("kernels_per_second").get<double>(), r.kernels_per_second());
}

TEST(RunReport, MalformedJsonIsAFormatError) {
  try {
    parse_report("{\"label\": 3}");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::format);
  }
  EXPECT_THROW(parse_report("not json"), Error);
}

// --- speedups -----------------------------------------------------------------------

TEST(Speedup, IdenticalReportsGiveOne) {
  std::mt19937_64 rng(8);
  const RunReport r = random_report(rng, 4);
  const SpeedupTable t = speedup_table(r, r);
  ASSERT_EQ(t.rows.size(), 2u);
  for (const auto& row : t.rows) EXPECT_EQ(row.ratio, 1.0);
  EXPECT_DOUBLE_EQ(t.geomean, 1.0);
}

TEST(Speedup, HalfTimeGivesTwo) {
  std::mt19937_64 rng(9);
  const RunReport base = random_report(rng, 4);
  RunReport fast = base;
  for (auto& [k, t] : fast.stages) {
    t.wall /= 2;
    t.modeled /= 2;
  }
  for (TimeBase b : {TimeBase::wall, TimeBase::modeled}) {
    const SpeedupTable t = speedup_table(base, fast, b);
    for (const auto& row : t.rows) EXPECT_DOUBLE_EQ(row.ratio, 2.0);
    EXPECT_DOUBLE_EQ(t.geomean, 2.0);
  }
}

TEST(Speedup, RowsAreSharedStagesAndGeomeanMatchesOracle) {
  RunReport a, b;
  a.stages = {{"s1", {4.0, 0}}, {"s2", {9.0, 0}}, {"only_a", {1.0, 0}}, {"zero", {0.0, 0}}};
  b.stages = {{"s1", {1.0, 0}}, {"s2", {1.0, 0}}, {"only_b", {1.0, 0}}, {"zero", {1.0, 0}}};
  const SpeedupTable t = speedup_table(a, b);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_DOUBLE_EQ(t.geomean, 6.0);  // sqrt(4 * 9)
  const std::string csv = t.csv();
  EXPECT_EQ(csv, "stage,baseline_s,candidate_s,speedup\ns1,4,1,4\ns2,9,1,9\ngeomean,,,6\n");
  EXPECT_EQ(speedup_table(RunReport{}, RunReport{}).geomean, 0.0);
}

// --- files -----------------------------------------------------------------------------

TEST(Emit, SvgIsWellFormed) {
  std::mt19937_64 rng(12);
  std::string why;
  for (std::size_t n : {0u, 1u, 5u, 100u}) {
    const RunReport r = random_report(rng, n);
    EXPECT_TRUE(well_formed_xml(fps_svg(r), &why)) << n << ": " << why;
  }
  RunReport a, b;
  a.stages = {{"x<y & z", {2.0, 0}}};
  b.stages = {{"x<y & z", {1.0, 0}}};
  EXPECT_TRUE(well_formed_xml(speedup_svg(speedup_table(a, b)), &why)) << why;
  EXPECT_TRUE(well_formed_xml(speedup_svg(SpeedupTable{}), &why)) << why;
}

TEST(Emit, CsvHeadersAndRows) {
  std::mt19937_64 rng(13);
  const RunReport r = random_report(rng, 3);
  const std::string f = frames_csv(r);
  EXPECT_EQ(f.rfind("frame,wall_s,fps,kernels,kernels_per_s,modeled_s,bytes,converged\n", 0), 0u);
  EXPECT_EQ(std::count(f.begin(), f.end(), '\n'), 4);
  EXPECT_EQ(frames_csv(RunReport{}), "frame,wall_s,fps,kernels,kernels_per_s,modeled_s,bytes,converged\n");
  EXPECT_EQ(stages_csv(RunReport{}), "stage,wall_s,modeled_s\n");
}

TEST(Emit, WritesRequestedFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "hetflow_metrics_emit";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(14);
  const RunReport r = random_report(rng, 6);
  const auto paths = emit(r, dir.string(), {Format::json, Format::csv, Format::svg});
  EXPECT_EQ(paths.size(), 4u);
  std::ifstream in(dir / "report.json");
  const std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(parse_report(text), r);
  EXPECT_THROW(emit(r, (dir / "missing" / "deeper").string(), {Format::json}), Error);
  std::filesystem::remove_all(dir);
}

TEST(Emit, DotDelegatesToTaskGraph) {
  Runtime rt;
  const kfusion::Pipeline p(rt, kfusion::KFusionConfig{}, Mat4::identity());
  const DeviceMapping m = DeviceMapping::uniform(p.bootstrap_graph(), kHost);
  EXPECT_EQ(graph_dot(p.bootstrap_graph()), to_dot(p.bootstrap_graph()));
  EXPECT_EQ(graph_dot(p.bootstrap_graph(), &m), to_dot(p.bootstrap_graph(), &m));
  EXPECT_EQ(graph_dot(p.tracking_graph()).rfind("digraph", 0), 0u);
}
