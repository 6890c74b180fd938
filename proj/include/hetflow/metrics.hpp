#pragma once

// Run reports: per-frame series, per-stage and per-kernel times, transfer
// totals. JSON is the complete record; CSV and SVG are views of it.

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hetflow/config.hpp"
#include "hetflow/error.hpp"
#include "hetflow/runtime.hpp"
#include "hetflow/taskgraph.hpp"

namespace hetflow::metrics {

struct Times {
  double wall = 0.0;
  double modeled = 0.0;
  friend bool operator==(const Times&, const Times&) = default;
};

struct FrameMetrics {
  std::size_t frame = 0;
  double wall = 0.0;      // seconds, acquisition included
  double modeled = 0.0;   // launches + transfers
  std::size_t kernels = 0;
  std::size_t bytes = 0;  // all transfers of the frame
  bool converged = true;
  std::uint64_t output_hash = 0;

  double fps() const { return wall > 0 ? 1.0 / wall : 0.0; }
  friend bool operator==(const FrameMetrics&, const FrameMetrics&) = default;
};

struct RunReport {
  std::string label;
  std::uint64_t seed = 0;
  KeyValues config;
  std::string devices;
  std::vector<FrameMetrics> frames;
  std::map<std::string, Times> stages;
  std::map<std::string, Times> kernels;
  std::size_t bytes_to_device = 0, bytes_to_host = 0, bytes_between = 0;
  std::optional<double> ate;

  friend bool operator==(const RunReport&, const RunReport&) = default;

  /// Folds one executed frame graph into the report. `acquisition` is the
  /// host-side input write, booked under its own stage.
  void add_frame(const ExecutionReport& r, double wall, double acquisition = 0.0, bool converged = true,
                 std::uint64_t output_hash = 0) {
    FrameMetrics f;
    f.frame = frames.size();
    f.wall = wall;
    f.modeled = r.modeled_total();
    f.kernels = r.launches;
    f.bytes = r.bytes_total();
    f.converged = converged;
    f.output_hash = output_hash;
    frames.push_back(f);
    for (const TaskRecord& t : r.tasks) {
      if (!t.launched) continue;
      stages[t.stage].wall += t.wall;
      stages[t.stage].modeled += t.modeled;
      kernels[t.kernel].wall += t.wall;
      kernels[t.kernel].modeled += t.modeled;
    }
    if (acquisition > 0) stages["acquisition"].wall += acquisition;
    bytes_to_device += r.bytes_to_device;
    bytes_to_host += r.bytes_to_host;
    bytes_between += r.bytes_between;
  }

  double total_wall() const {
    double s = 0;
    for (const FrameMetrics& f : frames) s += f.wall;
    return s;
  }
  std::size_t total_kernels() const {
    std::size_t k = 0;
    for (const FrameMetrics& f : frames) k += f.kernels;
    return k;
  }
  /// Frame count over summed frame time.
  double mean_fps() const {
    const double t = total_wall();
    return t > 0 ? static_cast<double>(frames.size()) / t : 0.0;
  }
  double mean_kernels_per_frame() const {
    return frames.empty() ? 0.0 : static_cast<double>(total_kernels()) / static_cast<double>(frames.size());
  }
  /// FPS x kernels/frame.
  double kernels_per_second() const { return mean_fps() * mean_kernels_per_frame(); }
  std::size_t bytes_total() const { return bytes_to_device + bytes_to_host + bytes_between; }
};

// --- JSON ---------------------------------------------------------------------------

inline nlohmann::json to_json(const RunReport& r) {
  using nlohmann::json;
  auto times = [](const std::map<std::string, Times>& m) {
    json j = json::object();
    for (const auto& [k, t] : m) j[k] = {{"wall", t.wall}, {"modeled", t.modeled}};
    return j;
  };
  json frames = json::array();
  for (const FrameMetrics& f : r.frames)
    frames.push_back({{"frame", f.frame},
                      {"wall", f.wall},
                      {"modeled", f.modeled},
                      {"kernels", f.kernels},
                      {"bytes", f.bytes},
                      {"converged", f.converged},
                      {"output_hash", f.output_hash}});
  json j = {{"label", r.label},
            {"seed", r.seed},
            {"config", r.config},
            {"devices", r.devices},
            {"frames", frames},
            {"stages", times(r.stages)},
            {"kernels", times(r.kernels)},
            {"bytes_to_device", r.bytes_to_device},
            {"bytes_to_host", r.bytes_to_host},
            {"bytes_between", r.bytes_between},
            {"ate", r.ate ? json(*r.ate) : json(nullptr)}};
  // Derived values, for readers; ignored when parsing.
  j["summary"] = {{"frames", r.frames.size()},
                  {"mean_fps", r.mean_fps()},
                  {"kernels_per_frame", r.mean_kernels_per_frame()},
                  {"kernels_per_second", r.kernels_per_second()}};
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  try {
    RunReport r;
    r.label = j.at("label").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config = j.at("config").get<KeyValues>();
    r.devices = j.at("devices").get<std::string>();
    for (const auto& f : j.at("frames")) {
      FrameMetrics m;
      m.frame = f.at("frame").get<std::size_t>();
      m.wall = f.at("wall").get<double>();
      m.modeled = f.at("modeled").get<double>();
      m.kernels = f.at("kernels").get<std::size_t>();
      m.bytes = f.at("bytes").get<std::size_t>();
      m.converged = f.at("converged").get<bool>();
      m.output_hash = f.at("output_hash").get<std::uint64_t>();
      r.frames.push_back(m);
    }
    for (auto [key, dst] : {std::pair{"stages", &r.stages}, std::pair{"kernels", &r.kernels}})
      for (const auto& [k, t] : j.at(key).items()) (*dst)[k] = Times{t.at("wall").get<double>(), t.at("modeled").get<double>()};
    r.bytes_to_device = j.at("bytes_to_device").get<std::size_t>();
    r.bytes_to_host = j.at("bytes_to_host").get<std::size_t>();
    r.bytes_between = j.at("bytes_between").get<std::size_t>();
    if (!j.at("ate").is_null()) r.ate = j.at("ate").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("run report: ") + e.what());
  }
}

inline RunReport parse_report(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("run report: ") + e.what());
  }
  return report_from_json(j);
}

// --- scoped timing ------------------------------------------------------------------

/// Accumulates durations per named scope. Each worker keeps its own and
/// they are merged at the end.
class Recorder {
 public:
  void register_scope(const std::string& scope) { totals_.try_emplace(scope, 0.0); }
  bool has_scope(const std::string& scope) const { return totals_.contains(scope); }

  void record(const std::string& scope, double seconds) {
    auto it = totals_.find(scope);
    require(it != totals_.end(), ErrorCode::invalid_argument, "scope '" + scope + "' is not registered");
    require(std::isfinite(seconds) && seconds >= 0, ErrorCode::invalid_argument, "duration must be finite and >= 0");
    it->second += seconds;
  }

  double total(const std::string& scope) const {
    auto it = totals_.find(scope);
    require(it != totals_.end(), ErrorCode::invalid_argument, "scope '" + scope + "' is not registered");
    return it->second;
  }

  void merge(const Recorder& other) {
    for (const auto& [k, v] : other.totals_) totals_[k] += v;
  }

  const std::map<std::string, double>& totals() const { return totals_; }

 private:
  std::map<std::string, double> totals_;
};

class ScopedTimer {
 public:
  ScopedTimer(Recorder& r, std::string scope) : r_(r), scope_(std::move(scope)) {
    require(r_.has_scope(scope_), ErrorCode::invalid_argument, "scope '" + scope_ + "' is not registered");
  }
  ScopedTimer(const ScopedTimer&) = delete;
  ScopedTimer& operator=(const ScopedTimer&) = delete;
  ~ScopedTimer() { r_.record(scope_, std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count()); }

 private:
  Recorder& r_;
  std::string scope_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// --- speedups -----------------------------------------------------------------------

enum class TimeBase { wall, modeled };

struct SpeedupRow {
  std::string stage;
  double baseline = 0, candidate = 0, ratio = 0;
};

struct SpeedupTable {
  std::vector<SpeedupRow> rows;
  double geomean = 0;  // 0 when there are no rows

  std::string csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "stage,baseline_s,candidate_s,speedup\n";
    for (const SpeedupRow& r : rows) os << r.stage << ',' << r.baseline << ',' << r.candidate << ',' << r.ratio << '\n';
    os << "geomean,,," << geomean << '\n';
    return os.str();
  }
};

/// Per-stage baseline/candidate ratios over the stages both reports timed
/// (non-zero on both sides), plus their geometric mean.
inline SpeedupTable speedup_table(const RunReport& baseline, const RunReport& candidate, TimeBase base = TimeBase::wall) {
  auto pick = [base](const Times& t) { return base == TimeBase::wall ? t.wall : t.modeled; };
  SpeedupTable t;
  double log_sum = 0;
  for (const auto& [stage, bt] : baseline.stages) {
    auto it = candidate.stages.find(stage);
    if (it == candidate.stages.end()) continue;
    const double b = pick(bt), c = pick(it->second);
    if (!(b > 0) || !(c > 0)) continue;
    t.rows.push_back({stage, b, c, b / c});
    log_sum += std::log(b / c);
  }
  if (!t.rows.empty()) t.geomean = std::exp(log_sum / static_cast<double>(t.rows.size()));
  return t;
}

// --- CSV / SVG / DOT -------------------------------------------------------------------

inline std::string frames_csv(const RunReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << "frame,wall_s,fps,kernels,kernels_per_s,modeled_s,bytes,converged\n";
  for (const FrameMetrics& f : r.frames)
    os << f.frame << ',' << f.wall << ',' << f.fps() << ',' << f.kernels << ',' << f.fps() * static_cast<double>(f.kernels)
       << ',' << f.modeled << ',' << f.bytes << ',' << (f.converged ? 1 : 0) << '\n';
  return os.str();
}

inline std::string stages_csv(const RunReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << "stage,wall_s,modeled_s\n";
  for (const auto& [k, t] : r.stages) os << k << ',' << t.wall << ',' << t.modeled << '\n';
  return os.str();
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// Bar chart with one bar per value and a y axis from zero to the maximum.
inline std::string bar_svg(const std::string& title, const std::string& y_label, const std::vector<std::string>& labels,
                           const std::vector<double>& values) {
  const double W = 640, H = 360, left = 60, right = 20, top = 40, bottom = 60;
  double vmax = 0;
  for (double v : values) vmax = std::max(vmax, v);
  if (!(vmax > 0)) vmax = 1;
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' '
     << H << "\">\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << xml_escape(title) << "</text>\n"
     << "<text x=\"14\" y=\"" << (top + H - bottom) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
     << (top + H - bottom) / 2 << ")\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n"
     << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << left - 4 << "\" y=\"" << top + 4 << "\" font-size=\"10\" text-anchor=\"end\">" << num(vmax)
     << "</text>\n"
     << "<text x=\"" << left - 4 << "\" y=\"" << H - bottom << "\" font-size=\"10\" text-anchor=\"end\">0</text>\n";
  const double plot_w = W - left - right, plot_h = H - top - bottom;
  const double slot = values.empty() ? plot_w : plot_w / static_cast<double>(values.size());
  // Label every bar when there are few, otherwise about ten ticks.
  const std::size_t every = values.size() <= 12 ? 1 : (values.size() + 9) / 10;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double h = std::max(0.0, values[i]) / vmax * plot_h;
    const double x = left + slot * static_cast<double>(i);
    os << "<rect x=\"" << num(x + slot * 0.1) << "\" y=\"" << num(top + plot_h - h) << "\" width=\"" << num(slot * 0.8)
       << "\" height=\"" << num(h) << "\" fill=\"steelblue\"><title>" << xml_escape(labels[i]) << ": " << num(values[i])
       << "</title></rect>\n";
    if (i % every == 0)
      os << "<text x=\"" << num(x + slot / 2) << "\" y=\"" << H - bottom + 14 << "\" font-size=\"10\" text-anchor=\"middle\">"
         << xml_escape(labels[i]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace detail

inline std::string fps_svg(const RunReport& r) {
  std::vector<std::string> labels;
  std::vector<double> values;
  for (const FrameMetrics& f : r.frames) {
    labels.push_back(std::to_string(f.frame));
    values.push_back(f.fps());
  }
  return detail::bar_svg("Frames per second" + (r.label.empty() ? "" : " (" + r.label + ")"), "FPS", labels, values);
}

inline std::string speedup_svg(const SpeedupTable& t) {
  std::vector<std::string> labels;
  std::vector<double> values;
  for (const SpeedupRow& row : t.rows) {
    labels.push_back(row.stage);
    values.push_back(row.ratio);
  }
  return detail::bar_svg("Per-stage speedup (geomean " + detail::num(t.geomean) + ")", "speedup", labels, values);
}

inline std::string graph_dot(const TaskGraph& g, const DeviceMapping* mapping = nullptr) { return to_dot(g, mapping); }

enum class Format { json, csv, svg };

/// Writes report.json, frames.csv, stages.csv and fps.svg (as requested)
/// under `dir`; returns the paths written.
inline std::vector<std::string> emit(const RunReport& r, const std::string& dir, const std::vector<Format>& formats) {
  std::vector<std::string> written;
  auto put = [&](const std::string& name, const std::string& text) {
    const std::string path = dir + "/" + name;
    std::ofstream f(path, std::ios::binary);
    require(f.good(), ErrorCode::io, "cannot write '" + path + "'");
    f << text;
    require(f.good(), ErrorCode::io, "write to '" + path + "' failed");
    written.push_back(path);
  };
  for (Format fmt : formats) {
    switch (fmt) {
      case Format::json: put("report.json", to_json(r).dump(2) + "\n"); break;
      case Format::csv:
        put("frames.csv", frames_csv(r));
        put("stages.csv", stages_csv(r));
        break;
      case Format::svg: put("fps.svg", fps_svg(r)); break;
    }
  }
  return written;
}

}  // namespace hetflow::metrics
