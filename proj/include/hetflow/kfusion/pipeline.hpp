#pragma once

// Frame graphs and the frame loop. Acquisition is a host write of the raw
// depth buffer; everything after it is one task graph per frame. ICP control
// flow (early exit, convergence, pose revert) stays on the device through
// guard flags in the ICP control block, so no intermediate data has to be
// read back between tasks.

#include <array>
#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hetflow/hash.hpp"
#include "hetflow/kfusion/config.hpp"
#include "hetflow/kfusion/kernels.hpp"
#include "hetflow/runtime.hpp"

namespace hetflow::kfusion {

inline constexpr const char* kStagePreprocessing = "preprocessing";
inline constexpr const char* kStageTracking = "tracking";
inline constexpr const char* kStageIntegration = "integration";
inline constexpr const char* kStageRaycast = "raycast";
inline constexpr const char* kStageRendering = "rendering";
inline constexpr const char* kStageAcquisition = "acquisition";

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {kStageAcquisition, kStagePreprocessing, kStageTracking,
                                                 kStageIntegration, kStageRaycast, kStageRendering};
  return names;
}

struct FrameBuffers {
  BufferId depth_raw, depth_scaled;
  std::array<BufferId, kMaxLevels> depth{}, vertex{}, normal{}, track{}, scratch{};
  BufferId ref_vertex, ref_normal, pose, ref_pose, state, tsdf, weight;
  BufferId render_depth, render_track, render_volume;
};

/// Launch counts per frame implied by the configuration.
struct KernelBand {
  std::size_t bootstrap = 0;       // first frame, no tracking
  std::size_t abort_min = 0;       // singular system on the first ICP step
  std::size_t converged_min = 0;   // one iteration per level, then integrate
  std::size_t max = 0;             // every iteration cap consumed

  std::size_t min() const { return std::min(bootstrap, abort_min); }
  bool contains(std::size_t k) const { return k >= min() && k <= max; }
};

inline KernelBand kernel_band(const KFusionConfig& cfg) {
  const std::size_t levels = cfg.pyramid_levels;
  const std::size_t front = (cfg.fuse_preprocess ? 1 : 2) + (levels - 1) + 2 * levels;
  const std::size_t tail = 1 + 3;  // raycast + renders
  std::size_t caps = 0;
  for (std::size_t l = 0; l < levels; ++l) caps += cfg.icp_iterations[l];
  KernelBand b;
  b.bootstrap = front + 1 + tail;
  b.abort_min = front + 2 + tail;
  b.converged_min = front + 2 * levels + 1 + tail;
  b.max = front + 2 * caps + 1 + tail;
  return b;
}

struct FrameResult {
  std::size_t frame = 0;
  bool bootstrap = false;
  std::size_t kernels = 0;
  bool converged = false;
  bool singular = false;
  float rmse = 0.0f;
  float matched = 0.0f;
  std::array<std::size_t, kMaxLevels> iterations{};
  Mat4 pose;
  ExecutionReport report;
  std::uint64_t output_hash = 0;
  double acquisition_wall = 0.0;
  double wall = 0.0;  // acquisition + graph execution
};

class Pipeline {
 public:
  Pipeline(Runtime& rt, KFusionConfig cfg, const Mat4& initial_pose) : rt_(rt), cfg_(cfg) {
    cfg_.validate();
    require(is_rigid(initial_pose), ErrorCode::not_rigid, "initial pose is not rigid");
    register_kfusion_kernels(rt_.registry());
    declare_buffers();
    reset_state(initial_pose);
    bootstrap_ = build_graph(true);
    tracking_ = build_graph(false);
    set_mapping({}, kHost);
  }

  const KFusionConfig& config() const { return cfg_; }
  const FrameBuffers& buffers() const { return b_; }
  const TaskGraph& bootstrap_graph() const { return *bootstrap_; }
  const TaskGraph& tracking_graph() const { return *tracking_; }
  const TaskGraph& graph_for(std::size_t frame) const { return frame == 0 ? *bootstrap_ : *tracking_; }
  const DeviceMapping& mapping_for(std::size_t frame) const { return frame == 0 ? bootstrap_map_ : tracking_map_; }
  std::size_t frame_index() const { return frame_; }
  KernelBand band() const { return kernel_band(cfg_); }

  /// Stage-level device assignment, applied to both frame graphs.
  void set_mapping(const std::map<std::string, DeviceId>& stages, DeviceId fallback) {
    DeviceMapping boot = DeviceMapping::by_stage(*bootstrap_, stages, fallback);
    DeviceMapping track = DeviceMapping::by_stage(*tracking_, stages, fallback);
    for (const DeviceMapping* m : {&boot, &track})
      for (DeviceId d : m->assignment())
        require(rt_.has_device(d), ErrorCode::invalid_argument, "device " + d.str() + " not registered");
    set_mappings(std::move(boot), std::move(track));
  }
  void set_mappings(DeviceMapping bootstrap, DeviceMapping tracking) {
    bootstrap_map_ = std::move(bootstrap);
    tracking_map_ = std::move(tracking);
  }

  /// Host overwrite of the camera pose before the next frame.
  void set_pose(const Mat4& pose) {
    require(is_rigid(pose), ErrorCode::not_rigid, "pose is not rigid");
    const auto a = pose.to_array();
    rt_.host_write(b_.pose, std::span<const float>(a));
  }

  /// Replaces the raycast reference with the last frame's own level-0
  /// vertex/normal maps placed at `pose` (tracking against exact data).
  void reference_from_live(const Mat4& pose) {
    require(is_rigid(pose), ErrorCode::not_rigid, "reference pose is not rigid");
    std::vector<float> v = pull<float>(b_.vertex[0]), n = pull<float>(b_.normal[0]);
    for (std::size_t i = 0; i < v.size() / 4; ++i) {
      const Float4 p = load4(std::span<const float>(v), i), q = load4(std::span<const float>(n), i);
      store4(std::span<float>(v), i, is_valid(p) ? transform_point(pose, p) : kInvalid);
      store4(std::span<float>(n), i, is_valid(q) ? rotate(pose, q) : kInvalid);
    }
    rt_.host_write(b_.ref_vertex, std::span<const float>(v));
    rt_.host_write(b_.ref_normal, std::span<const float>(n));
    const auto a = pose.to_array();
    rt_.host_write(b_.ref_pose, std::span<const float>(a));
  }

  FrameResult process(std::span<const std::uint16_t> raw) {
    ExecuteOptions opts;
    opts.workers = cfg_.executor_workers;
    return process(raw, opts);
  }

  FrameResult process(std::span<const std::uint16_t> raw, const ExecuteOptions& options) {
    require(raw.size() == cfg_.width * cfg_.height, ErrorCode::invalid_argument,
            "frame has " + std::to_string(raw.size()) + " pixels, expected " + std::to_string(cfg_.width * cfg_.height));
    FrameResult r;
    r.frame = frame_;
    r.bootstrap = frame_ == 0;
    const auto start = std::chrono::steady_clock::now();
    rt_.host_write(b_.depth_raw, raw);
    r.acquisition_wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    r.report = rt_.run(graph_for(frame_), mapping_for(frame_), options);
    r.wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.kernels = r.report.launches;

    const auto st = rt_.host_view<float>(b_.state);
    r.pose = load_pose(rt_.host_view<float>(b_.pose));
    if (r.bootstrap) {
      r.converged = true;
    } else {
      r.converged = st[icp_state::converged] != 0.0f;
      r.singular = st[icp_state::singular] != 0.0f;
      r.rmse = st[icp_state::rmse];
      r.matched = st[icp_state::matched];
      for (std::size_t l = 0; l < cfg_.pyramid_levels; ++l) {
        const float it = st[icp_state::iterations + l];
        r.iterations[l] = it >= 0.0f && it < 1e6f ? static_cast<std::size_t>(it) : 0;
      }
    }
    r.output_hash = output_hash();
    ++frame_;
    return r;
  }

  /// Buffers that define a frame's result (the stream-out set minus any
  /// fusable intermediate).
  std::vector<BufferId> result_buffers() const {
    return {b_.depth[0], b_.pose, b_.state, b_.render_depth, b_.render_track, b_.render_volume};
  }

  std::uint64_t output_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (BufferId b : result_buffers()) h = fnv1a(rt_.host_read(b), h);
    return h;
  }

  /// Latest contents of any pipeline buffer, copied back to the host first
  /// when needed.
  template <class T>
  std::vector<T> pull(BufferId b) {
    if (!rt_.residency().valid(b, kHost)) rt_.copy(b, *rt_.residency().owner(b), kHost);
    const auto v = rt_.host_view<T>(b);
    return {v.begin(), v.end()};
  }

  Mat4 pose() const { return load_pose(rt_.host_view<float>(b_.pose)); }

 private:
  void declare_buffers() {
    const std::size_t w = cfg_.width, h = cfg_.height, n = cfg_.volume_resolution;
    b_.depth_raw = rt_.declare("depth_raw", ElementType::u16, {h, w});
    b_.depth_scaled = rt_.declare("depth_scaled", ElementType::f32, {h, w});
    for (std::size_t l = 0; l < cfg_.pyramid_levels; ++l) {
      const std::size_t wl = w >> l, hl = h >> l;
      const std::string s = std::to_string(l);
      b_.depth[l] = rt_.declare(l == 0 ? "depth_filtered" : "depth_l" + s, ElementType::f32, {hl, wl});
      b_.vertex[l] = rt_.declare("vertex_l" + s, ElementType::f32, {hl, wl, 4});
      b_.normal[l] = rt_.declare("normal_l" + s, ElementType::f32, {hl, wl, 4});
      b_.track[l] = rt_.declare("track_l" + s, ElementType::f32, {hl, wl, kTrackStride});
      b_.scratch[l] = rt_.declare("reduce_l" + s, ElementType::u8, {blocks(l) * kPartialStride * sizeof(double)});
    }
    b_.ref_vertex = rt_.declare("ref_vertex", ElementType::f32, {h, w, 4});
    b_.ref_normal = rt_.declare("ref_normal", ElementType::f32, {h, w, 4});
    b_.pose = rt_.declare("pose", ElementType::f32, {16});
    b_.ref_pose = rt_.declare("ref_pose", ElementType::f32, {16});
    b_.state = rt_.declare("icp_state", ElementType::f32, {icp_state::size});
    b_.tsdf = rt_.declare("tsdf", ElementType::f32, {n, n, n});
    b_.weight = rt_.declare("weight", ElementType::f32, {n, n, n});
    b_.render_depth = rt_.declare("render_depth", ElementType::u8, {h, w, 4});
    b_.render_track = rt_.declare("render_track", ElementType::u8, {h, w, 4});
    b_.render_volume = rt_.declare("render_volume", ElementType::u8, {h, w, 4});
  }

  std::size_t blocks(std::size_t level) const {
    const std::size_t px = (cfg_.width >> level) * (cfg_.height >> level);
    return (px + kReduceBlock - 1) / kReduceBlock;
  }

  void zero(BufferId b) { rt_.host_write(b, std::vector<std::byte>(rt_.buffers().at(b).bytes())); }
  void fill(BufferId b, float v) {
    std::vector<float> x(rt_.buffers().at(b).count(), v);
    rt_.host_write(b, std::span<const float>(x));
  }
  void fill_invalid(BufferId b) {
    std::vector<float> x(rt_.buffers().at(b).count(), 0.0f);
    for (std::size_t i = 3; i < x.size(); i += 4) x[i] = -1.0f;
    rt_.host_write(b, std::span<const float>(x));
  }

  void reset_state(const Mat4& initial_pose) {
    zero(b_.depth_raw);
    zero(b_.depth_scaled);
    for (std::size_t l = 0; l < cfg_.pyramid_levels; ++l) {
      zero(b_.depth[l]);
      fill_invalid(b_.vertex[l]);
      fill_invalid(b_.normal[l]);
      zero(b_.track[l]);
      zero(b_.scratch[l]);
    }
    fill_invalid(b_.ref_vertex);
    fill_invalid(b_.ref_normal);
    const auto a = initial_pose.to_array();
    rt_.host_write(b_.pose, std::span<const float>(a));
    rt_.host_write(b_.ref_pose, std::span<const float>(a));
    zero(b_.state);
    fill(b_.tsdf, 1.0f);
    fill(b_.weight, 0.0f);
    zero(b_.render_depth);
    zero(b_.render_track);
    zero(b_.render_volume);
  }

  Task task(const std::string& kernel, std::vector<BufferId> reads, std::vector<BufferId> writes, IndexSpace space,
            std::vector<double> params, const char* stage) const {
    Task t;
    t.kernel = kernel;
    t.reads = std::move(reads);
    t.writes = std::move(writes);
    t.space = space;
    t.params = std::move(params);
    t.meta.stage = stage;
    t.meta.profile = true;
    return t;
  }

  std::optional<TaskGraph> build_graph(bool bootstrap) const {
    const KFusionConfig& c = cfg_;
    const CameraIntrinsics k0 = c.intrinsics();
    const std::size_t levels = c.pyramid_levels;
    TaskGraph g = rt_.new_graph();
    const IndexSpace full{c.height, c.width};
    auto level_space = [&](std::size_t l) { return IndexSpace{c.height >> l, c.width >> l}; };

    g.add_task(task("mm2meters", {b_.depth_raw}, {b_.depth_scaled}, full, {}, kStagePreprocessing));
    g.add_task(task("bilateral_filter", {b_.depth_scaled}, {b_.depth[0]}, full,
                    {static_cast<double>(c.bilateral_radius), c.sigma_spatial, c.sigma_range}, kStagePreprocessing));
    for (std::size_t l = 1; l < levels; ++l)
      g.add_task(task("pyramid_down", {b_.depth[l - 1]}, {b_.depth[l]}, level_space(l), {}, kStageTracking));
    for (std::size_t l = 0; l < levels; ++l) {
      const CameraIntrinsics kl = k0.level(l);
      g.add_task(task("depth2vertex", {b_.depth[l]}, {b_.vertex[l]}, level_space(l), {kl.fx, kl.fy, kl.cx, kl.cy},
                      kStageTracking));
    }
    for (std::size_t l = 0; l < levels; ++l)
      g.add_task(task("vertex2normal", {b_.vertex[l]}, {b_.normal[l]}, level_space(l), {}, kStageTracking));

    if (!bootstrap) {
      for (std::size_t lv = levels; lv-- > 0;) {
        const std::size_t cap = c.icp_iterations[lv];
        const std::size_t pixels = (c.width >> lv) * (c.height >> lv);
        for (std::size_t it = 0; it < cap; ++it) {
          const bool first = lv == levels - 1 && it == 0;
          Task tr = task("icp_track",
                         {b_.vertex[lv], b_.normal[lv], b_.ref_vertex, b_.ref_normal, b_.pose, b_.ref_pose, b_.state,
                          b_.track[lv]},
                         {b_.track[lv]}, level_space(lv),
                         {k0.fx, k0.fy, k0.cx, k0.cy, static_cast<double>(c.width), static_cast<double>(c.height),
                          c.icp_dist, c.icp_normal},
                         kStageTracking);
          Task rd = task("icp_reduce", {b_.track[lv], b_.state, b_.pose, b_.scratch[lv]},
                         {b_.scratch[lv], b_.pose, b_.state}, IndexSpace{blocks(lv)},
                         {static_cast<double>(lv), static_cast<double>(it), static_cast<double>(cap), first ? 1.0 : 0.0,
                          static_cast<double>(levels), c.icp_twist_eps, c.rmse_max, c.matched_min,
                          static_cast<double>(pixels)},
                         kStageTracking);
          if (!first) {
            tr.guard = Guard{b_.state, icp_state::level_done + lv, false};
            rd.guard = Guard{b_.state, icp_state::level_done + lv, false};
          }
          g.add_task(std::move(tr));
          g.add_task(std::move(rd));
        }
      }
    }

    Task integ = task("integrate", {b_.depth[0], b_.pose, b_.state, b_.tsdf, b_.weight}, {b_.tsdf, b_.weight},
                      IndexSpace{c.volume_resolution, c.volume_resolution, c.volume_resolution},
                      {k0.fx, k0.fy, k0.cx, k0.cy, static_cast<double>(c.width), static_cast<double>(c.height),
                       static_cast<double>(c.volume_resolution), c.volume_size, c.mu, c.w_max},
                      kStageIntegration);
    if (!bootstrap) integ.guard = Guard{b_.state, icp_state::converged, true};
    g.add_task(std::move(integ));
    g.add_task(task("raycast", {b_.tsdf, b_.pose}, {b_.ref_vertex, b_.ref_normal, b_.ref_pose}, full,
                    {k0.fx, k0.fy, k0.cx, k0.cy, static_cast<double>(c.volume_resolution), c.volume_size, c.near_plane,
                     c.far_plane, c.step()},
                    kStageRaycast));
    g.add_task(task("render_depth", {b_.depth[0]}, {b_.render_depth}, full, {c.near_plane, c.far_plane},
                    kStageRendering));
    g.add_task(task("render_track", {b_.track[0]}, {b_.render_track}, full, {}, kStageRendering));
    g.add_task(task("render_volume", {b_.ref_vertex, b_.ref_normal, b_.pose}, {b_.render_volume}, full, {},
                    kStageRendering));

    for (BufferId o : {b_.render_depth, b_.render_track, b_.render_volume, b_.pose, b_.state, b_.depth[0],
                       b_.depth_scaled})
      g.add_output(o);
    g = infer_dependencies(std::move(g));
    if (c.fuse_preprocess) g = fuse(g, 0, 1);
    return g;
  }

  Runtime& rt_;
  KFusionConfig cfg_;
  FrameBuffers b_;
  std::optional<TaskGraph> bootstrap_, tracking_;
  DeviceMapping bootstrap_map_, tracking_map_;
  std::size_t frame_ = 0;
};

}  // namespace hetflow::kfusion
