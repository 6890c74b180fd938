#pragma once

// Seeded fault injection over the pipeline's task buffers. Time is measured
// in ticks: the number of tasks completed since the start of the workload,
// counted across frames. Faults land on inter-task boundaries of a serial
// host execution, so every run sees the same sequence of buffer states.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "hetflow/dataset.hpp"
#include "hetflow/hash.hpp"
#include "hetflow/kfusion/pipeline.hpp"

namespace hetflow::faultlab {

enum class FaultModel { transient, intermittent, permanent, multi };

inline const char* to_string(FaultModel m) {
  switch (m) {
    case FaultModel::transient: return "transient";
    case FaultModel::intermittent: return "intermittent";
    case FaultModel::permanent: return "permanent";
    case FaultModel::multi: return "multi";
  }
  return "?";
}

inline FaultModel parse_model(const std::string& s) {
  for (FaultModel m : {FaultModel::transient, FaultModel::intermittent, FaultModel::permanent, FaultModel::multi})
    if (s == to_string(m)) return m;
  fail(ErrorCode::invalid_argument, "unknown fault model '" + s + "'");
}

inline constexpr std::uint64_t kForever = std::numeric_limits<std::uint64_t>::max();

struct Window {
  std::uint64_t t0 = 0, t1 = 0;
  friend bool operator==(const Window&, const Window&) = default;
};

/// What the caller asks for. Unset fields are drawn from `seed`.
struct FaultArgs {
  FaultModel model = FaultModel::transient;
  std::string target;  // buffer name; empty picks one
  std::optional<std::size_t> element;
  std::optional<unsigned> bit;
  std::optional<Window> window;  // default: the whole workload
  std::optional<int> stuck;
  std::uint64_t seed = 0;
  std::vector<FaultArgs> subs;  // multi only
};

/// A fully resolved fault. For transients start == end is the flip tick;
/// stuck-at faults hold `stuck` on every boundary in [start, end].
struct FaultSpec {
  FaultModel model = FaultModel::transient;
  std::string target;
  std::size_t element = 0;
  unsigned bit = 0;
  Window window;
  int stuck = -1;  // -1 for a flip
  std::uint64_t seed = 0;
  std::uint64_t start = 0, end = 0;
  std::vector<FaultSpec> subs;

  friend bool operator==(const FaultSpec&, const FaultSpec&) = default;
};

/// Injectable buffers and the workload's length in ticks.
struct TargetSpace {
  struct Target {
    std::string name;
    std::size_t elements = 0;
    unsigned bits = 0;
  };
  std::vector<Target> targets;
  std::uint64_t ticks = 0;

  static TargetSpace from(const BufferTable& table, std::uint64_t ticks) {
    TargetSpace s;
    s.ticks = ticks;
    for (const BufferDesc& d : table.all())
      s.targets.push_back({d.name, d.count(), static_cast<unsigned>(element_size(d.element) * 8)});
    return s;
  }

  const Target& find(const std::string& name) const {
    for (const Target& t : targets)
      if (t.name == name) return t;
    fail(ErrorCode::unknown_buffer, "no injectable buffer named '" + name + "'");
  }
};

namespace detail {

inline FaultSpec resolve(const FaultArgs& a, const TargetSpace& space, Window fallback) {
  const Window w = a.window.value_or(fallback);
  require(w.t0 <= w.t1, ErrorCode::invalid_argument,
          "fault window [" + std::to_string(w.t0) + ", " + std::to_string(w.t1) + "] is inverted");
  require(space.ticks == 0 || w.t1 <= space.ticks, ErrorCode::invalid_argument,
          "fault window ends after the workload (" + std::to_string(space.ticks) + " ticks)");
  require(!space.targets.empty(), ErrorCode::invalid_argument, "no injectable buffers");
  SplitMix64 rng(a.seed);
  FaultSpec s;
  s.model = a.model;
  s.window = w;
  s.seed = a.seed;

  if (a.model == FaultModel::multi) {
    require(!a.subs.empty(), ErrorCode::invalid_argument, "multi fault needs at least one sub-fault");
    for (FaultArgs sub : a.subs) {
      require(sub.model != FaultModel::multi, ErrorCode::invalid_argument, "multi faults do not nest");
      sub.seed = rng.next();
      s.subs.push_back(resolve(sub, space, w));
    }
    return s;
  }
  require(a.subs.empty(), ErrorCode::invalid_argument, "only multi faults take sub-faults");

  const TargetSpace::Target& t =
      a.target.empty() ? space.targets[rng.below(space.targets.size())] : space.find(a.target);
  s.target = t.name;
  if (a.element) {
    require(*a.element < t.elements, ErrorCode::invalid_argument, "element out of range for '" + t.name + "'");
    s.element = *a.element;
  } else {
    s.element = rng.below(t.elements);
  }
  if (a.bit) {
    require(*a.bit < t.bits, ErrorCode::invalid_argument,
            "bit " + std::to_string(*a.bit) + " out of range for " + std::to_string(t.bits) + "-bit elements");
    s.bit = *a.bit;
  } else {
    s.bit = static_cast<unsigned>(rng.below(t.bits));
  }
  if (a.stuck) require(*a.stuck == 0 || *a.stuck == 1, ErrorCode::invalid_argument, "stuck value must be 0 or 1");

  switch (a.model) {
    case FaultModel::transient:
      require(!a.stuck, ErrorCode::invalid_argument, "a transient fault flips; it has no stuck value");
      s.start = s.end = rng.between(w.t0, w.t1);
      break;
    case FaultModel::intermittent:
      s.start = rng.between(w.t0, w.t1);
      s.end = rng.between(s.start, w.t1);
      s.stuck = a.stuck ? *a.stuck : static_cast<int>(rng.below(2));
      break;
    case FaultModel::permanent:
      s.start = w.t0;
      s.end = kForever;
      s.stuck = a.stuck ? *a.stuck : static_cast<int>(rng.below(2));
      break;
    case FaultModel::multi: break;
  }
  return s;
}

inline void flatten(const FaultSpec& s, std::vector<FaultSpec>& out) {
  if (s.model != FaultModel::multi) {
    out.push_back(s);
    return;
  }
  for (const FaultSpec& sub : s.subs) flatten(sub, out);
}

}  // namespace detail

inline FaultSpec fault_model(const FaultArgs& args, const TargetSpace& space) {
  return detail::resolve(args, space, Window{0, space.ticks});
}

/// The single-model faults a spec expands to (one, or the subs of a multi).
inline std::vector<FaultSpec> injections(const FaultSpec& spec) {
  std::vector<FaultSpec> out;
  detail::flatten(spec, out);
  return out;
}

// --- injection ---------------------------------------------------------------------

inline void flip_bit(std::span<std::byte> bytes, std::size_t element, std::size_t element_bytes, unsigned bit) {
  bytes[element * element_bytes + bit / 8] ^= std::byte{static_cast<unsigned char>(1u << (bit % 8))};
}

inline void force_bit(std::span<std::byte> bytes, std::size_t element, std::size_t element_bytes, unsigned bit,
                      int value) {
  std::byte& b = bytes[element * element_bytes + bit / 8];
  const std::byte mask{static_cast<unsigned char>(1u << (bit % 8))};
  b = value ? (b | mask) : (b & ~mask);
}

/// Applies resolved faults to the runtime's buffers at each tick.
class Injector {
 public:
  Injector(Runtime& rt, std::vector<FaultSpec> leaves) : rt_(rt), leaves_(std::move(leaves)) {
    for (const FaultSpec& f : leaves_) {
      require(f.model != FaultModel::multi, ErrorCode::invalid_argument, "injector takes flattened faults");
      const auto b = rt_.buffers().find(f.target);
      require(b.has_value(), ErrorCode::unknown_buffer, "no buffer named '" + f.target + "'");
      ids_.push_back(*b);
    }
    fired_.assign(leaves_.size(), false);
  }

  void at_tick(std::uint64_t tick) {
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      const FaultSpec& f = leaves_[i];
      const std::size_t esize = element_size(rt_.buffers().at(ids_[i]).element);
      if (f.model == FaultModel::transient) {
        if (tick != f.start || fired_[i]) continue;
        fired_[i] = true;
        for (auto bytes : rt_.valid_copies(ids_[i])) flip_bit(bytes, f.element, esize, f.bit);
        ++events_;
      } else if (tick >= f.start && tick <= f.end) {
        for (auto bytes : rt_.valid_copies(ids_[i])) force_bit(bytes, f.element, esize, f.bit, f.stuck);
        ++events_;
      }
    }
  }

  std::size_t events() const { return events_; }

 private:
  Runtime& rt_;
  std::vector<FaultSpec> leaves_;
  std::vector<BufferId> ids_;
  std::vector<bool> fired_;
  std::size_t events_ = 0;
};

// --- workload ----------------------------------------------------------------------

struct Workload {
  kfusion::KFusionConfig cfg;
  Mat4 initial;
  std::vector<dataset::DepthFrame> frames;
  dataset::Trajectory truth;
};

/// Small synthetic sphere-room sequence for campaigns: 32x24 depth, 32^3 volume.
inline Workload desk_workload(std::size_t frames = 5, std::uint64_t seed = 1) {
  Workload w;
  w.cfg.width = 32;
  w.cfg.height = 24;
  w.cfg.volume_resolution = 32;
  w.cfg.validate();
  dataset::SyntheticScene scene;
  scene.seed = seed;
  dataset::SyntheticSequence seq = dataset::generate_synthetic(scene, w.cfg.intrinsics(), frames);
  w.frames = std::move(seq.frames);
  w.truth = std::move(seq.truth);
  w.initial = w.truth.empty() ? Mat4::identity() : w.truth[0].pose().to_mat();
  return w;
}

/// Tick layout of a workload: frame f covers ticks [offset[f], offset[f] +
/// sizes[f]]. The boundary shared by two frames belongs to the earlier one,
/// before its outputs are read back and the next depth frame is written.
class Schedule {
 public:
  Schedule(const kfusion::Pipeline& p, std::size_t frames) : pipeline_(&p), buffers_(p.buffers()) {
    std::uint64_t t = 0;
    for (std::size_t f = 0; f < frames; ++f) {
      offsets_.push_back(t);
      t += p.graph_for(f).size();
    }
    ticks_ = t;
    host_reads_ = p.result_buffers();
    host_reads_.push_back(buffers_.state);
    host_reads_.push_back(buffers_.pose);
  }

  std::uint64_t ticks() const { return ticks_; }
  std::size_t frames() const { return offsets_.size(); }
  std::uint64_t offset(std::size_t frame) const { return offsets_.at(frame); }

  /// Global tick for a boundary callback, or nothing for the duplicate
  /// first boundary of a later frame.
  std::optional<std::uint64_t> tick(std::size_t frame, std::size_t local) const {
    if (frame > 0 && local == 0) return std::nullopt;
    return offsets_.at(frame) + local;
  }

  /// True when some task or host read-back can observe `b` after a write at
  /// `tick`, before a full overwrite. Guards count as reads; a guarded-out
  /// task still counts, so this over-approximates.
  bool live(BufferId b, std::uint64_t tick) const {
    if (offsets_.empty() || tick > ticks_) return false;
    std::size_t f = 0;
    while (f + 1 < offsets_.size() && offsets_[f + 1] < tick) ++f;
    std::size_t local = static_cast<std::size_t>(tick - offsets_[f]);
    for (;; ++f, local = 0) {
      const TaskGraph& g = pipeline_->graph_for(f);
      for (std::size_t j = local; j < g.size(); ++j)
        if (g.task(j).reads_buffer(b)) return true;
      for (BufferId h : host_reads_)
        if (h == b) return true;
      if (f + 1 == offsets_.size()) return false;
      if (b == buffers_.depth_raw) return false;  // next acquisition overwrites all of it
    }
  }

  /// A fault is dead when none of the ticks it writes at is live.
  bool dead(const FaultSpec& spec, const BufferTable& table) const {
    for (const FaultSpec& f : injections(spec)) {
      const BufferId b = *table.find(f.target);
      if (f.model == FaultModel::transient) {
        if (live(b, f.start)) return false;
        continue;
      }
      const std::uint64_t last = std::min(f.end, ticks_);
      for (std::uint64_t t = f.start; t <= last; ++t)
        if (live(b, t)) return false;
    }
    return true;
  }

 private:
  const kfusion::Pipeline* pipeline_;
  kfusion::FrameBuffers buffers_;
  std::vector<std::uint64_t> offsets_;
  std::vector<BufferId> host_reads_;
  std::uint64_t ticks_ = 0;
};

// --- runs and outcomes ------------------------------------------------------------

struct RunTrace {
  std::vector<std::uint64_t> hashes;  // per completed frame
  std::vector<Mat4> poses;
  bool aborted = false;
  std::string reason;
  std::size_t events = 0;
};

/// One serial host execution of the workload with `spec` injected (an
/// empty spec list gives the golden run).
inline RunTrace execute(const Workload& w, const std::vector<FaultSpec>& leaves) {
  Runtime rt;
  kfusion::Pipeline p(rt, w.cfg, w.initial);
  const Schedule sched(p, w.frames.size());
  Injector inj(rt, leaves);
  RunTrace r;
  for (std::size_t f = 0; f < w.frames.size(); ++f) {
    ExecuteOptions opts;
    opts.workers = 1;
    if (!leaves.empty())
      opts.on_boundary = [&, f](std::size_t local) {
        if (auto t = sched.tick(f, local)) inj.at_tick(*t);
      };
    try {
      const kfusion::FrameResult fr = p.process(w.frames[f], opts);
      if (!fr.pose.finite()) {
        r.aborted = true;
        r.reason = "frame " + std::to_string(f) + ": non-finite pose";
      } else if (!is_rigid(fr.pose)) {
        r.aborted = true;
        r.reason = "frame " + std::to_string(f) + ": pose is not rigid";
      }
      if (r.aborted) break;
      r.hashes.push_back(fr.output_hash);
      r.poses.push_back(fr.pose);
    } catch (const Error& e) {
      r.aborted = true;
      r.reason = "frame " + std::to_string(f) + ": " + e.what();
      break;
    }
  }
  r.events = inj.events();
  return r;
}

enum class OutcomeClass { masked, sdc, detected };

inline const char* to_string(OutcomeClass c) {
  switch (c) {
    case OutcomeClass::masked: return "masked";
    case OutcomeClass::sdc: return "sdc";
    case OutcomeClass::detected: return "detected";
  }
  return "?";
}

struct Outcome {
  OutcomeClass cls = OutcomeClass::masked;
  std::vector<bool> hash_equal;   // per frame the faulty run completed
  std::optional<double> ate_delta;  // meters, faulty minus golden; absent when detected
  std::string reason;             // detected only
};

inline dataset::Trajectory trajectory(const std::vector<Mat4>& poses) {
  dataset::Trajectory t;
  for (std::size_t i = 0; i < poses.size(); ++i) t.push_back(dataset::make_entry(i, dataset::Pose::from_mat(poses[i])));
  return t;
}

inline Outcome monitor(const RunTrace& faulty, const RunTrace& golden, const dataset::Trajectory& truth) {
  Outcome o;
  for (std::size_t f = 0; f < faulty.hashes.size(); ++f)
    o.hash_equal.push_back(f < golden.hashes.size() && faulty.hashes[f] == golden.hashes[f]);
  if (faulty.aborted) {
    o.cls = OutcomeClass::detected;
    o.reason = faulty.reason;
    return o;
  }
  const bool same = faulty.hashes.size() == golden.hashes.size() &&
                    std::all_of(o.hash_equal.begin(), o.hash_equal.end(), [](bool b) { return b; });
  o.cls = same ? OutcomeClass::masked : OutcomeClass::sdc;
  if (truth.size() == faulty.poses.size() && truth.size() == golden.poses.size())
    o.ate_delta = dataset::ate_rmse(trajectory(faulty.poses), truth) - dataset::ate_rmse(trajectory(golden.poses), truth);
  return o;
}

// --- campaigns -----------------------------------------------------------------------

struct RunRecord {
  std::uint64_t run = 0;
  FaultSpec spec;
  Outcome outcome;
  bool dead = false;  // provably unobservable per the read-set trace
};

struct CampaignResult {
  std::array<std::size_t, 3> histogram{};  // indexed by OutcomeClass
  std::vector<RunRecord> records;
  RunTrace golden;

  std::size_t count(OutcomeClass c) const { return histogram[static_cast<std::size_t>(c)]; }
};

/// Tick count and injectable buffers of a workload, without running it.
inline TargetSpace target_space(const Workload& w) {
  Runtime rt;
  kfusion::Pipeline p(rt, w.cfg, w.initial);
  return TargetSpace::from(rt.buffers(), Schedule(p, w.frames.size()).ticks());
}

/// `n` seeded runs; run i resolves `templ` with seed base_seed ^ i. Results
/// are stored by run index, so the worker count never changes the output.
inline CampaignResult campaign(std::size_t n, std::uint64_t base_seed, const FaultArgs& templ, const Workload& w,
                               unsigned workers = 1) {
  CampaignResult out;
  Runtime probe_rt;
  kfusion::Pipeline probe(probe_rt, w.cfg, w.initial);
  const Schedule sched(probe, w.frames.size());
  const TargetSpace space = TargetSpace::from(probe_rt.buffers(), sched.ticks());

  // Resolve everything up front so argument errors surface before any run.
  out.records.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    FaultArgs a = templ;
    a.seed = base_seed ^ static_cast<std::uint64_t>(i);
    out.records[i].run = i;
    out.records[i].spec = fault_model(a, space);
    out.records[i].dead = sched.dead(out.records[i].spec, probe_rt.buffers());
  }
  if (n == 0) return out;
  out.golden = execute(w, {});
  require(!out.golden.aborted, ErrorCode::kernel_failure, "golden run failed: " + out.golden.reason);

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex m;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        RunRecord& r = out.records[i];
        r.outcome = monitor(execute(w, injections(r.spec)), out.golden, w.truth);
      } catch (...) {
        std::lock_guard lock(m);
        if (!error) error = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < std::max(1u, workers); ++t) pool.emplace_back(work);
  }
  if (error) std::rethrow_exception(error);
  for (const RunRecord& r : out.records) ++out.histogram[static_cast<std::size_t>(r.outcome.cls)];
  return out;
}

// --- output ---------------------------------------------------------------------------

inline nlohmann::json to_json(const FaultSpec& s) {
  nlohmann::json j;
  j["model"] = to_string(s.model);
  j["seed"] = s.seed;
  j["window"] = {s.window.t0, s.window.t1};
  if (s.model == FaultModel::multi) {
    j["subs"] = nlohmann::json::array();
    for (const FaultSpec& sub : s.subs) j["subs"].push_back(to_json(sub));
    return j;
  }
  j["target"] = s.target;
  j["element"] = s.element;
  j["bit"] = s.bit;
  j["start"] = s.start;
  j["end"] = s.end == kForever ? nlohmann::json(nullptr) : nlohmann::json(s.end);
  if (s.stuck >= 0) j["stuck"] = s.stuck;
  return j;
}

inline nlohmann::json to_json(const Outcome& o) {
  nlohmann::json j;
  j["class"] = to_string(o.cls);
  j["hash_equal"] = o.hash_equal;
  j["ate_delta"] = o.ate_delta ? nlohmann::json(*o.ate_delta) : nlohmann::json(nullptr);
  if (o.cls == OutcomeClass::detected) j["reason"] = o.reason;
  return j;
}

/// One JSON object per line, in run order.
inline std::string campaign_log(const CampaignResult& c) {
  std::string out;
  for (const RunRecord& r : c.records) {
    nlohmann::json j;
    j["run"] = r.run;
    j["spec"] = to_json(r.spec);
    j["outcome"] = to_json(r.outcome);
    j["dead"] = r.dead;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::string histogram_csv(const CampaignResult& c) {
  std::ostringstream os;
  os << "class,count\n";
  for (OutcomeClass k : {OutcomeClass::masked, OutcomeClass::sdc, OutcomeClass::detected})
    os << to_string(k) << ',' << c.count(k) << '\n';
  return os.str();
}

}  // namespace hetflow::faultlab
