#pragma once

// Command-line front end: gen, run, bench, inject, graph, devices.
// Exit codes: 0 ok, 1 a --check threshold failed, 2 usage error (bad or
// conflicting flags, missing or malformed files), 3 runtime failure.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "hetflow/config.hpp"
#include "hetflow/dataset.hpp"
#include "hetflow/faultlab.hpp"
#include "hetflow/kfusion/image.hpp"
#include "hetflow/kfusion/pipeline.hpp"
#include "hetflow/metrics.hpp"

namespace hetflow::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheck = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFailure = 3;

/// `all:<device>` default plus `stage=<device>` overrides, comma separated.
struct DeviceSpec {
  DeviceId fallback = kHost;
  std::map<std::string, DeviceId> stages;

  std::vector<DeviceId> all() const {
    std::vector<DeviceId> out{fallback};
    for (const auto& [s, d] : stages) out.push_back(d);
    return out;
  }
};

inline DeviceSpec parse_device_spec(const std::string& text) {
  DeviceSpec spec;
  bool have_all = false;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    require(!item.empty(), ErrorCode::invalid_argument, "empty entry in device spec '" + text + "'");
    if (item.rfind("all:", 0) == 0) {
      require(!have_all, ErrorCode::invalid_argument, "device spec sets 'all:' twice");
      spec.fallback = DeviceId::parse(item.substr(4));
      have_all = true;
      continue;
    }
    const auto eq = item.find('=');
    require(eq != std::string::npos, ErrorCode::invalid_argument,
            "device spec entry '" + item + "' is neither all:<device> nor <stage>=<device>");
    const std::string stage = trim(item.substr(0, eq));
    const auto& names = kfusion::stage_names();
    require(std::find(names.begin(), names.end(), stage) != names.end(), ErrorCode::invalid_argument,
            "unknown stage '" + stage + "'");
    require(!spec.stages.contains(stage), ErrorCode::invalid_argument, "stage '" + stage + "' mapped twice");
    spec.stages[stage] = DeviceId::parse(trim(item.substr(eq + 1)));
  }
  return spec;
}

/// Registers devices until every id in `spec` exists.
inline void provision(Runtime& rt, const DeviceSpec& spec, unsigned workers) {
  for (DeviceId id : spec.all())
    while (!rt.has_device(id)) {
      switch (id.kind) {
        case DeviceKind::serial_cpu: rt.add_serial_cpu(); break;
        case DeviceKind::parallel_cpu: rt.add_parallel_cpu(workers); break;
        case DeviceKind::sim_accel: rt.add_sim_accel({}, workers); break;
      }
    }
}

namespace detail {

inline unsigned default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec && std::filesystem::is_directory(dir), ErrorCode::io, "cannot create output directory '" + dir + "'");
}

inline void write_text(const std::string& path, const std::string& text) { kfusion::write_file(path, text); }

struct ConfigSource {
  kfusion::KFusionConfig cfg;
  KeyValues overrides;
};

inline ConfigSource load_config(const std::string& path) {
  ConfigSource c;
  if (!path.empty()) {
    c.overrides = load_key_values(path);
    c.cfg.apply(c.overrides);
  }
  return c;
}

// Depth frames plus (optional) ground truth, from a file or generated.
struct Input {
  std::vector<dataset::DepthFrame> frames;
  dataset::Trajectory truth;
};

inline Input load_input(ConfigSource& conf, const std::string& sequence, const std::string& truth, std::size_t frames,
                        std::uint64_t seed) {
  Input in;
  if (sequence.empty()) {
    conf.cfg.validate();
    dataset::SyntheticScene scene;
    scene.seed = seed;
    dataset::SyntheticSequence s = dataset::generate_synthetic(scene, conf.cfg.intrinsics(), frames);
    in.frames = std::move(s.frames);
    in.truth = std::move(s.truth);
    return in;
  }
  dataset::SequenceReader reader(sequence);
  const auto& h = reader.header();
  if (conf.overrides.contains("width") || conf.overrides.contains("height"))
    require(conf.cfg.width == h.width && conf.cfg.height == h.height, ErrorCode::invalid_argument,
            "config size " + std::to_string(conf.cfg.width) + "x" + std::to_string(conf.cfg.height) +
                " does not match the sequence (" + std::to_string(h.width) + "x" + std::to_string(h.height) + ")");
  conf.cfg.width = h.width;
  conf.cfg.height = h.height;
  conf.cfg.validate();
  while (in.frames.size() < frames)
    if (auto f = reader.next()) in.frames.push_back(std::move(*f));
    else break;
  if (!truth.empty()) {
    in.truth = dataset::load_trajectory(truth);
    require(in.truth.size() >= in.frames.size(), ErrorCode::invalid_argument,
            "trajectory has fewer poses than the sequence has frames");
    in.truth.resize(in.frames.size());
  }
  return in;
}

struct RunResult {
  metrics::RunReport report;
  dataset::Trajectory estimate;
  std::vector<std::uint64_t> hashes;
  std::vector<kfusion::FrameResult> frames;
  std::array<kfusion::RgbaImage, 3> renders;  // depth, track, volume of the last frame
};

inline RunResult run_pipeline(const kfusion::KFusionConfig& cfg, const DeviceSpec& devices, const std::string& device_text,
                              const Input& in, std::uint64_t seed, unsigned workers, const std::string& label) {
  Runtime rt;
  provision(rt, devices, workers);
  const Mat4 start = in.truth.empty() ? Mat4::identity() : in.truth[0].pose().to_mat();
  kfusion::Pipeline p(rt, cfg, start);
  p.set_mapping(devices.stages, devices.fallback);
  RunResult r;
  r.report.label = label;
  r.report.seed = seed;
  r.report.config = cfg.snapshot();
  r.report.devices = device_text;
  for (const auto& frame : in.frames) {
    ExecuteOptions opts;
    opts.workers = cfg.executor_workers;
    opts.seed = seed;
    kfusion::FrameResult f = p.process(frame, opts);
    r.report.add_frame(f.report, f.wall, f.acquisition_wall, f.converged, f.output_hash);
    r.estimate.push_back(dataset::make_entry(f.frame, dataset::Pose::from_mat(f.pose)));
    r.hashes.push_back(f.output_hash);
    r.frames.push_back(std::move(f));
  }
  if (!in.truth.empty() && !in.frames.empty()) r.report.ate = dataset::ate_rmse(r.estimate, in.truth);
  const auto& b = p.buffers();
  const BufferId images[3] = {b.render_depth, b.render_track, b.render_volume};
  for (std::size_t i = 0; i < 3; ++i) r.renders[i] = {cfg.width, cfg.height, p.pull<std::uint8_t>(images[i])};
  return r;
}

inline void print_summary(std::ostream& out, const metrics::RunReport& r) {
  out << "frames: " << r.frames.size() << "\n"
      << "mean fps: " << r.mean_fps() << "\n"
      << "kernels/frame: " << r.mean_kernels_per_frame() << "\n"
      << "kernels/s: " << r.kernels_per_second() << "\n"
      << "bytes transferred: " << r.bytes_total() << " (to device " << r.bytes_to_device << ", to host "
      << r.bytes_to_host << ", between " << r.bytes_between << ")\n";
  if (r.ate) out << "ate rmse (m): " << *r.ate << "\n";
}

// Acceptance thresholds for a pipeline run; returns the number of failures.
inline int check_run(std::ostream& out, const kfusion::KFusionConfig& cfg, const RunResult& r) {
  int failures = 0;
  auto line = [&](const std::string& what, bool ok, const std::string& detail) {
    out << "check " << what << ": " << (ok ? "PASS" : "FAIL") << " (" << detail << ")\n";
    if (!ok) ++failures;
  };
  std::size_t diverged = 0, outside = 0;
  const kfusion::KernelBand band = kfusion::kernel_band(cfg);
  for (const auto& f : r.frames) {
    if (!f.converged) ++diverged;
    if (!band.contains(f.kernels)) ++outside;
  }
  line("converged", diverged == 0, std::to_string(diverged) + " frames diverged");
  line("kernel band", outside == 0,
       std::to_string(outside) + " frames outside [" + std::to_string(band.min()) + ", " + std::to_string(band.max) + "]");
  if (r.report.ate) {
    const double limit = 2.0 * static_cast<double>(cfg.voxel_size());
    std::ostringstream d;
    d << "ate " << *r.report.ate << " m, limit " << limit << " m";
    line("ate", *r.report.ate <= limit, d.str());
  }
  return failures;
}

inline void write_run_artifacts(const std::string& dir, const RunResult& r, bool renders) {
  metrics::emit(r.report, dir, {metrics::Format::json, metrics::Format::csv, metrics::Format::svg});
  dataset::save_trajectory(dir + "/trajectory.txt", r.estimate);
  if (!renders || r.frames.empty()) return;
  const char* names[3] = {"render_depth", "render_track", "render_volume"};
  for (std::size_t i = 0; i < 3; ++i) {
    kfusion::write_file(dir + "/" + names[i] + ".pam", kfusion::encode_pam(r.renders[i]));
    kfusion::write_file(dir + "/" + names[i] + ".ppm", kfusion::encode_ppm(r.renders[i]));
  }
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"hetflow: task-graph KinectFusion with device mapping, benchmarks and fault campaigns"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  std::string config, out_dir, devices = "all:serial-cpu", sequence, truth, model = "transient", target;
  std::uint64_t seed = 1;
  // default_val() assigns at declaration time, so each subcommand owns its frame count.
  std::size_t gen_frames = 100, run_frames = 100, bench_frames = 10, inject_frames = 5, runs = 100, frame_index = 1;
  unsigned workers = detail::default_workers();
  bool fuse = false, check = false, renders = true;
  double noise = 0.0;

  auto* gen = app.add_subcommand("gen", "Write a synthetic depth sequence, its trajectory and camera config");
  gen->add_option("--frames", gen_frames, "Frame count")->capture_default_str();
  gen->add_option("--seed", seed, "Scene seed (drives noise)")->default_val(1);
  gen->add_option("--noise", noise, "Depth noise sigma in mm")->default_val(0.0)->check(CLI::NonNegativeNumber);
  gen->add_option("--config", config, "Config file (width, height, intrinsics)")->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto add_workload = [&](CLI::App* sub, std::size_t& frames) {
    auto* seq = sub->add_option("--sequence", sequence, "Depth sequence file (default: synthetic)")->check(CLI::ExistingFile);
    sub->add_option("--truth", truth, "Ground-truth trajectory for the sequence")->check(CLI::ExistingFile)->needs(seq);
    sub->add_option("--frames", frames, "Frames to process")->capture_default_str();
    sub->add_option("--seed", seed, "Seed (synthetic scene and run)")->default_val(1);
    sub->add_option("--config", config, "Pipeline config file (key = value)")->check(CLI::ExistingFile);
    sub->add_option("--workers", workers, "Threads for parallel devices")->default_val(detail::default_workers())
        ->check(CLI::PositiveNumber);
  };

  auto* run = app.add_subcommand("run", "Run the pipeline over a sequence");
  add_workload(run, run_frames);
  run->add_option("--devices", devices, "Device mapping: all:<device>,<stage>=<device>,...")->default_val("all:serial-cpu");
  run->add_flag("--fuse-preprocess", fuse, "Fuse depth scaling into the bilateral filter");
  run->add_flag("--check", check, "Exit 1 unless every frame converges, kernel counts stay in band and ATE <= 2 voxels");
  run->add_flag("!--no-renders", renders, "Skip writing the last frame's renders");
  run->add_option("--out", out_dir, "Output directory")->required();

  auto* bench = app.add_subcommand("bench", "Same workload on serial, parallel and sim-accel mappings");
  add_workload(bench, bench_frames);
  bench->add_flag("--fuse-preprocess", fuse, "Fuse depth scaling into the bilateral filter");
  bench->add_flag("--check", check, "Exit 1 unless all mappings give identical outputs");
  bench->add_option("--out", out_dir, "Output directory")->required();

  auto* inject = app.add_subcommand("inject", "Fault-injection campaign over the 32x24 desk workload");
  inject->add_option("--runs", runs, "Number of seeded runs")->default_val(100);
  inject->add_option("--seed", seed, "Base seed")->default_val(1);
  inject->add_option("--model", model, "transient | intermittent | permanent | multi")->default_val("transient")
      ->check(CLI::IsMember({"transient", "intermittent", "permanent", "multi"}));
  inject->add_option("--target", target, "Buffer name (default: drawn per run)");
  inject->add_option("--frames", inject_frames, "Workload frames")->capture_default_str()->check(CLI::PositiveNumber);
  inject->add_option("--workers", workers, "Campaign threads")->default_val(detail::default_workers())
      ->check(CLI::PositiveNumber);
  inject->add_flag("--check", check, "Exit 1 unless counts sum to --runs and every dead-bit fault is masked");
  inject->add_option("--out", out_dir, "Output directory")->required();

  auto* graph = app.add_subcommand("graph", "Emit one frame's task graph as DOT");
  graph->add_option("--frame", frame_index, "0 for the bootstrap frame, otherwise a tracking frame")->default_val(1);
  graph->add_option("--devices", devices, "Device mapping (colours the nodes)")->default_val("all:serial-cpu");
  graph->add_flag("--fuse-preprocess", fuse, "Fuse depth scaling into the bilateral filter");
  graph->add_option("--config", config, "Pipeline config file")->check(CLI::ExistingFile);
  graph->add_option("--out", out_dir, "Output directory (default: stdout)");

  auto* devs = app.add_subcommand("devices", "List device kinds");
  (void)devs;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      detail::ConfigSource conf = detail::load_config(config);
      conf.cfg.validate();
      dataset::SyntheticScene scene;
      scene.seed = seed;
      scene.noise_sigma_mm = noise;
      const dataset::SyntheticSequence s = dataset::generate_synthetic(scene, conf.cfg.intrinsics(), gen_frames);
      detail::ensure_dir(out_dir);
      dataset::write_sequence(out_dir + "/depth.bin", static_cast<std::uint32_t>(conf.cfg.width),
                              static_cast<std::uint32_t>(conf.cfg.height), s.frames);
      dataset::save_trajectory(out_dir + "/trajectory.txt", s.truth);
      const kfusion::CameraIntrinsics k = conf.cfg.intrinsics();
      std::ostringstream cam;
      cam.precision(9);
      cam << "# camera for depth.bin\nwidth = " << k.width << "\nheight = " << k.height << "\nfx = " << k.fx
          << "\nfy = " << k.fy << "\ncx = " << k.cx << "\ncy = " << k.cy << "\n";
      detail::write_text(out_dir + "/camera.cfg", cam.str());
      out << "wrote " << gen_frames << " frames (" << k.width << "x" << k.height << ") to " << out_dir << "\n";
      return kExitOk;
    }

    if (*run) {
      detail::ConfigSource conf = detail::load_config(config);
      if (fuse) conf.cfg.fuse_preprocess = true;
      const DeviceSpec spec = parse_device_spec(devices);
      const detail::Input in = detail::load_input(conf, sequence, truth, run_frames, seed);
      detail::ensure_dir(out_dir);
      const detail::RunResult r = detail::run_pipeline(conf.cfg, spec, devices, in, seed, workers, "run");
      detail::write_run_artifacts(out_dir, r, renders);
      detail::print_summary(out, r.report);
      if (check && detail::check_run(out, conf.cfg, r) > 0) return kExitCheck;
      return kExitOk;
    }

    if (*bench) {
      detail::ConfigSource conf = detail::load_config(config);
      if (fuse) conf.cfg.fuse_preprocess = true;
      const detail::Input in = detail::load_input(conf, sequence, truth, bench_frames, seed);
      detail::ensure_dir(out_dir);
      const std::vector<std::pair<std::string, std::string>> mappings = {
          {"serial-cpu", "all:serial-cpu"}, {"parallel-cpu", "all:parallel-cpu"}, {"sim-accel", "all:sim-accel"}};
      std::vector<detail::RunResult> results;
      for (const auto& [name, text] : mappings) {
        results.push_back(detail::run_pipeline(conf.cfg, parse_device_spec(text), text, in, seed, workers, name));
        kfusion::write_file(out_dir + "/bench_" + name + ".json", metrics::to_json(results.back().report).dump(2) + "\n");
      }
      // CPU devices report wall time as modeled time, so the modeled base
      // compares like with like for all three.
      bool identical = true;
      for (std::size_t i = 1; i < results.size(); ++i) {
        const metrics::SpeedupTable t = metrics::speedup_table(results[0].report, results[i].report,
                                                                i == 2 ? metrics::TimeBase::modeled : metrics::TimeBase::wall);
        const std::string& name = mappings[i].first;
        kfusion::write_file(out_dir + "/speedup_" + name + ".csv", t.csv());
        kfusion::write_file(out_dir + "/speedup_" + name + ".svg", metrics::speedup_svg(t));
        out << name << " vs serial-cpu (" << (i == 2 ? "modeled" : "wall") << "):\n" << t.csv();
        if (results[i].hashes != results[0].hashes) identical = false;
      }
      out << "outputs identical across mappings: " << (identical ? "yes" : "no") << "\n";
      if (check && !identical) return kExitCheck;
      return kExitOk;
    }

    if (*inject) {
      const faultlab::Workload w = faultlab::desk_workload(inject_frames);
      faultlab::FaultArgs templ;
      templ.model = faultlab::parse_model(model);
      if (templ.model == faultlab::FaultModel::multi) {
        require(target.empty(), ErrorCode::invalid_argument, "--target does not apply to --model multi");
        templ.subs = {faultlab::FaultArgs{.model = faultlab::FaultModel::transient},
                      faultlab::FaultArgs{.model = faultlab::FaultModel::intermittent},
                      faultlab::FaultArgs{.model = faultlab::FaultModel::permanent}};
      } else {
        templ.target = target;
      }
      detail::ensure_dir(out_dir);
      const faultlab::CampaignResult c = faultlab::campaign(runs, seed, templ, w, workers);
      kfusion::write_file(out_dir + "/campaign.jsonl", faultlab::campaign_log(c));
      kfusion::write_file(out_dir + "/histogram.csv", faultlab::histogram_csv(c));
      out << faultlab::histogram_csv(c);
      std::size_t dead = 0, dead_unmasked = 0;
      for (const auto& r : c.records)
        if (r.dead) {
          ++dead;
          if (r.outcome.cls != faultlab::OutcomeClass::masked) ++dead_unmasked;
        }
      out << "dead-bit injections: " << dead << " (" << dead_unmasked << " not masked)\n";
      const std::size_t total = c.count(faultlab::OutcomeClass::masked) + c.count(faultlab::OutcomeClass::sdc) +
                                c.count(faultlab::OutcomeClass::detected);
      if (check && (total != runs || dead_unmasked > 0)) return kExitCheck;
      return kExitOk;
    }

    if (*graph) {
      detail::ConfigSource conf = detail::load_config(config);
      if (fuse) conf.cfg.fuse_preprocess = true;
      conf.cfg.validate();
      const DeviceSpec spec = parse_device_spec(devices);
      Runtime rt;
      provision(rt, spec, 1);
      kfusion::Pipeline p(rt, conf.cfg, Mat4::identity());
      p.set_mapping(spec.stages, spec.fallback);
      const std::string dot = metrics::graph_dot(p.graph_for(frame_index), &p.mapping_for(frame_index));
      if (out_dir.empty()) {
        out << dot;
      } else {
        detail::ensure_dir(out_dir);
        kfusion::write_file(out_dir + "/graph.dot", dot);
      }
      return kExitOk;
    }

    // devices
    out << "serial-cpu    host executor, one thread (serial-cpu:0 is the host)\n"
        << "parallel-cpu  thread pool, " << detail::default_workers() << " workers by default\n"
        << "sim-accel     simulated accelerator: " << SimAccelDevice(0, {}).config_string() << "\n";
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    switch (e.code()) {
      case ErrorCode::invalid_argument:
      case ErrorCode::format:
      case ErrorCode::io:
      case ErrorCode::unknown_buffer: return kExitUsage;
      default: return kExitFailure;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace hetflow::cli
