#pragma once

// Per-frame KinectFusion kernels. Every body is a pure function of its read
// slots and params over a linear index space; images are row-major [h, w]
// (index space {h, w}), volumes are x-fastest [n, n, n].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "hetflow/kernel.hpp"
#include "hetflow/veclib.hpp"

namespace hetflow::kfusion {

enum class TrackCode : int { ok = 0, no_input = 1, out_of_frame = 2, dist_reject = 3, normal_reject = 4 };
inline constexpr int kTrackCodeCount = 5;
inline constexpr std::size_t kTrackStride = 8;  // J[6], residual, code
inline constexpr std::size_t kReduceBlock = 256;
inline constexpr std::size_t kPartialStride = 32;

inline const char* to_string(TrackCode c) {
  switch (c) {
    case TrackCode::ok: return "ok";
    case TrackCode::no_input: return "no-input";
    case TrackCode::out_of_frame: return "out-of-frame";
    case TrackCode::dist_reject: return "dist-reject";
    case TrackCode::normal_reject: return "normal-reject";
  }
  return "?";
}

/// Layout of the on-device ICP control block (f32).
namespace icp_state {
inline constexpr std::size_t prev_pose = 0;  // 16 floats
inline constexpr std::size_t level_done = 16;  // one per level
inline constexpr std::size_t converged = 20;
inline constexpr std::size_t singular = 21;
inline constexpr std::size_t rmse = 22;
inline constexpr std::size_t matched = 23;
inline constexpr std::size_t ok_count = 24;
inline constexpr std::size_t valid_count = 25;
inline constexpr std::size_t iterations = 26;  // one per level
inline constexpr std::size_t twist = 30;
inline constexpr std::size_t size = 32;
}  // namespace icp_state

// Partial sums written by the reduce body, one block per 256 pixels.
namespace partial {
inline constexpr std::size_t jtj = 0;   // 21, upper triangle row-major
inline constexpr std::size_t jtr = 21;  // 6
inline constexpr std::size_t err = 27;
inline constexpr std::size_t ok = 28;
inline constexpr std::size_t valid = 29;
}  // namespace partial

/// Track code stored in a float slot; anything unrecognised maps to -1.
inline int code_of(float f) { return f >= 0.0f && f < static_cast<float>(kTrackCodeCount) ? static_cast<int>(f) : -1; }

inline constexpr Float4 kInvalid{0.0f, 0.0f, 0.0f, -1.0f};

inline bool is_valid(const Float4& v) { return v.w() != -1.0f; }

inline Float4 load4(std::span<const float> s, std::size_t i) {
  return Float4{s[4 * i], s[4 * i + 1], s[4 * i + 2], s[4 * i + 3]};
}
inline void store4(std::span<float> s, std::size_t i, const Float4& v) {
  s[4 * i] = v.x();
  s[4 * i + 1] = v.y();
  s[4 * i + 2] = v.z();
  s[4 * i + 3] = v.w();
}

inline Mat4 load_pose(std::span<const float> s, std::size_t offset = 0) { return Mat4::from_array(s.data() + offset); }
inline void store_pose(std::span<float> s, const Mat4& m, std::size_t offset = 0) {
  const auto a = m.to_array();
  std::copy(a.begin(), a.end(), s.begin() + static_cast<std::ptrdiff_t>(offset));
}

/// Nearest pixel for a projected coordinate, or false when outside. NaN
/// fails every comparison and lands in the false branch.
inline bool pixel_of(float u, float v, std::size_t w, std::size_t h, std::size_t& px, std::size_t& py) {
  if (!(u >= -0.5f && u < static_cast<float>(w) - 0.5f && v >= -0.5f && v < static_cast<float>(h) - 0.5f)) return false;
  px = static_cast<std::size_t>(std::floor(u + 0.5f));
  py = static_cast<std::size_t>(std::floor(v + 0.5f));
  return px < w && py < h;
}

inline float mm_to_meters(std::uint16_t mm) { return static_cast<float>(mm) / 1000.0f; }

/// Gaussian-weighted average over the (2r+1)^2 window; `depth_at(x, y)`
/// supplies the neighbour values so the fused kernel can scale on the fly.
template <class DepthAt>
float bilateral_pixel(DepthAt depth_at, std::size_t x, std::size_t y, std::size_t w, std::size_t h, int r, float sigma_s,
                      float sigma_r) {
  const float centre = depth_at(x, y);
  if (!(centre > 0.0f)) return 0.0f;
  const float inv_s = 1.0f / (2.0f * sigma_s * sigma_s);
  const float inv_r = 1.0f / (2.0f * sigma_r * sigma_r);
  double sum = 0.0, norm = 0.0;
  for (int dy = -r; dy <= r; ++dy) {
    const long long yy = static_cast<long long>(y) + dy;
    if (yy < 0 || yy >= static_cast<long long>(h)) continue;
    for (int dx = -r; dx <= r; ++dx) {
      const long long xx = static_cast<long long>(x) + dx;
      if (xx < 0 || xx >= static_cast<long long>(w)) continue;
      const float d = depth_at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy));
      if (!(d > 0.0f)) continue;
      const float diff = d - centre;
      const float wgt = std::exp(-static_cast<float>(dx * dx + dy * dy) * inv_s - diff * diff * inv_r);
      sum += static_cast<double>(wgt) * d;
      norm += wgt;
    }
  }
  return static_cast<float>(sum / norm);
}

inline float pyramid_pixel(std::span<const float> in, std::size_t in_w, std::size_t x, std::size_t y) {
  float sum = 0.0f;
  int count = 0;
  for (std::size_t dy = 0; dy < 2; ++dy)
    for (std::size_t dx = 0; dx < 2; ++dx) {
      const float d = in[(2 * y + dy) * in_w + 2 * x + dx];
      if (d > 0.0f) {
        sum += d;
        ++count;
      }
    }
  return count ? sum / static_cast<float>(count) : 0.0f;
}

/// Whole-image 2x2 reduction; both dimensions must be even.
inline std::vector<float> pyramid_down(std::span<const float> in, std::size_t w, std::size_t h) {
  require(in.size() == w * h, ErrorCode::invalid_argument, "image size does not match its dimensions");
  require(w % 2 == 0 && h % 2 == 0 && w > 0 && h > 0, ErrorCode::invalid_argument,
          "pyramid_down needs even dimensions, got " + std::to_string(w) + "x" + std::to_string(h));
  std::vector<float> out(w / 2 * (h / 2));
  for (std::size_t y = 0; y < h / 2; ++y)
    for (std::size_t x = 0; x < w / 2; ++x) out[y * (w / 2) + x] = pyramid_pixel(in, w, x, y);
  return out;
}

inline Float4 depth_to_vertex(float d, std::size_t x, std::size_t y, float fx, float fy, float cx, float cy) {
  if (!(d > 0.0f)) return kInvalid;
  return Float4::point(d * ((static_cast<float>(x) - cx) / fx), d * ((static_cast<float>(y) - cy) / fy), d);
}

/// Camera-facing normal from central differences; borders and invalid
/// neighbours are invalid.
inline Float4 vertex_normal(std::span<const float> vertex, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  if (x == 0 || y == 0 || x + 1 >= w || y + 1 >= h) return kInvalid;
  const Float4 l = load4(vertex, y * w + x - 1), r = load4(vertex, y * w + x + 1);
  const Float4 u = load4(vertex, (y - 1) * w + x), d = load4(vertex, (y + 1) * w + x);
  if (!is_valid(l) || !is_valid(r) || !is_valid(u) || !is_valid(d)) return kInvalid;
  const auto n = try_normalize3(cross3(d - u, r - l));
  return n ? *n : kInvalid;
}

struct TrackParams {
  float fx, fy, cx, cy;  // reference (level 0) intrinsics
  std::size_t ref_w, ref_h;
  float dist, normal;
};

/// One projective-association row: J = [n_ref, v x n_ref], r = n_ref . (v_ref - v).
inline void track_pixel(const Float4& v, const Float4& n, const Mat4& pose, const Mat4& inv_ref,
                        std::span<const float> ref_vertex, std::span<const float> ref_normal, const TrackParams& p,
                        float* out) {
  std::fill(out, out + kTrackStride, 0.0f);
  auto code = [&](TrackCode c) { out[7] = static_cast<float>(static_cast<int>(c)); };
  if (!is_valid(v) || !is_valid(n)) return code(TrackCode::no_input);
  const Float4 vw = transform_point(pose, v);
  const Float4 nw = rotate(pose, n);
  const Float4 pr = transform_point(inv_ref, vw);
  if (!(pr.z() > 0.0f)) return code(TrackCode::out_of_frame);
  std::size_t px = 0, py = 0;
  if (!pixel_of(p.fx * pr.x() / pr.z() + p.cx, p.fy * pr.y() / pr.z() + p.cy, p.ref_w, p.ref_h, px, py))
    return code(TrackCode::out_of_frame);
  const std::size_t ri = py * p.ref_w + px;
  const Float4 rn = load4(ref_normal, ri);
  if (!is_valid(rn)) return code(TrackCode::out_of_frame);
  const Float4 rv = load4(ref_vertex, ri);
  const Float4 diff = rv - vw;
  if (!(length3(diff) <= p.dist)) return code(TrackCode::dist_reject);
  if (!(dot3(nw, rn) >= p.normal)) return code(TrackCode::normal_reject);
  const Float4 c = cross3(vw, rn);
  out[0] = rn.x();
  out[1] = rn.y();
  out[2] = rn.z();
  out[3] = c.x();
  out[4] = c.y();
  out[5] = c.z();
  out[6] = dot3(rn, diff);
  code(TrackCode::ok);
}

/// Sums one block of track rows in a fixed order.
inline void reduce_block(std::span<const float> track, std::size_t begin, std::size_t end, double* out) {
  std::fill(out, out + kPartialStride, 0.0);
  for (std::size_t i = begin; i < end; ++i) {
    const float* row = track.data() + i * kTrackStride;
    const int code = code_of(row[7]);
    if (code == static_cast<int>(TrackCode::no_input)) continue;
    out[partial::valid] += 1.0;
    if (code != static_cast<int>(TrackCode::ok)) continue;
    out[partial::ok] += 1.0;
    double j[6];
    for (int k = 0; k < 6; ++k) j[k] = row[k];
    const double r = row[6];
    std::size_t idx = partial::jtj;
    for (int a = 0; a < 6; ++a)
      for (int b = a; b < 6; ++b) out[idx++] += j[a] * j[b];
    for (int a = 0; a < 6; ++a) out[partial::jtr + a] += j[a] * r;
    out[partial::err] += r * r;
  }
}

/// Solves the 6x6 normal equations by Cholesky; false when not positive
/// definite (relative pivot below 1e-9 of the largest diagonal).
inline bool solve_normal_equations(const double* sums, std::array<double, 6>& x) {
  double a[6][6];
  std::size_t idx = partial::jtj;
  for (int r = 0; r < 6; ++r)
    for (int c = r; c < 6; ++c) a[r][c] = a[c][r] = sums[idx++];
  double max_diag = 0.0;
  for (int i = 0; i < 6; ++i) max_diag = std::max(max_diag, a[i][i]);
  if (!(max_diag > 0.0) || !std::isfinite(max_diag)) return false;
  double l[6][6] = {};
  for (int j = 0; j < 6; ++j) {
    double d = a[j][j];
    for (int k = 0; k < j; ++k) d -= l[j][k] * l[j][k];
    if (!(d > 1e-9 * max_diag)) return false;
    l[j][j] = std::sqrt(d);
    for (int i = j + 1; i < 6; ++i) {
      double s = a[i][j];
      for (int k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      l[i][j] = s / l[j][j];
    }
  }
  double y[6];
  for (int i = 0; i < 6; ++i) {
    double s = sums[partial::jtr + i];
    for (int k = 0; k < i; ++k) s -= l[i][k] * y[k];
    y[i] = s / l[i][i];
  }
  for (int i = 5; i >= 0; --i) {
    double s = y[i];
    for (int k = i + 1; k < 6; ++k) s -= l[k][i] * x[k];
    x[i] = s / l[i][i];
  }
  for (double v : x)
    if (!std::isfinite(v)) return false;
  return true;
}

/// Left-multiplies the pose by the small-angle increment (I + [w]x, t) and
/// re-orthonormalises the rotation (Gram-Schmidt on columns, in double).
inline Mat4 apply_twist(const Mat4& pose, const std::array<double, 6>& x) {
  const double t[3] = {x[0], x[1], x[2]};
  const double w[3] = {x[3], x[4], x[5]};
  const double inc[3][3] = {{1.0, -w[2], w[1]}, {w[2], 1.0, -w[0]}, {-w[1], w[0], 1.0}};
  double r[3][3], tr[3];
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      r[i][j] = 0.0;
      for (int k = 0; k < 3; ++k) r[i][j] += inc[i][k] * pose.at(k, j);
    }
    tr[i] = t[i];
    for (int k = 0; k < 3; ++k) tr[i] += inc[i][k] * pose.at(k, 3);
  }
  double c[3][3];  // c[col][row]
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 3; ++i) c[j][i] = r[i][j];
  auto norm = [](double* v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (int i = 0; i < 3; ++i) v[i] /= n;
  };
  norm(c[0]);
  const double d01 = c[0][0] * c[1][0] + c[0][1] * c[1][1] + c[0][2] * c[1][2];
  for (int i = 0; i < 3; ++i) c[1][i] -= d01 * c[0][i];
  norm(c[1]);
  c[2][0] = c[0][1] * c[1][2] - c[0][2] * c[1][1];
  c[2][1] = c[0][2] * c[1][0] - c[0][0] * c[1][2];
  c[2][2] = c[0][0] * c[1][1] - c[0][1] * c[1][0];
  std::array<float, 9> rot{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) rot[static_cast<std::size_t>(3 * i + j)] = static_cast<float>(c[j][i]);
  return Mat4::rigid(rot, Float4::point(static_cast<float>(tr[0]), static_cast<float>(tr[1]), static_cast<float>(tr[2])));
}

struct VolumeParams {
  std::size_t n;
  float size;

  float voxel() const { return size / static_cast<float>(n); }
};

/// Trilinear TSDF sample at a world point; outside the volume reads as
/// empty space (+1).
inline float sample_tsdf(std::span<const float> tsdf, const VolumeParams& vp, const Float4& p) {
  const float inv = static_cast<float>(vp.n) / vp.size;
  const float gx = p.x() * inv - 0.5f, gy = p.y() * inv - 0.5f, gz = p.z() * inv - 0.5f;
  const float hi = static_cast<float>(vp.n) - 1.0f;
  if (!(gx >= 0.0f && gy >= 0.0f && gz >= 0.0f && gx < hi && gy < hi && gz < hi)) return 1.0f;
  const auto ix = static_cast<std::size_t>(gx), iy = static_cast<std::size_t>(gy), iz = static_cast<std::size_t>(gz);
  const float fx = gx - static_cast<float>(ix), fy = gy - static_cast<float>(iy), fz = gz - static_cast<float>(iz);
  const std::size_t n = vp.n;
  auto at = [&](std::size_t x, std::size_t y, std::size_t z) { return tsdf[(z * n + y) * n + x]; };
  const float c00 = at(ix, iy, iz) * (1 - fx) + at(ix + 1, iy, iz) * fx;
  const float c10 = at(ix, iy + 1, iz) * (1 - fx) + at(ix + 1, iy + 1, iz) * fx;
  const float c01 = at(ix, iy, iz + 1) * (1 - fx) + at(ix + 1, iy, iz + 1) * fx;
  const float c11 = at(ix, iy + 1, iz + 1) * (1 - fx) + at(ix + 1, iy + 1, iz + 1) * fx;
  const float c0 = c00 * (1 - fy) + c10 * fy;
  const float c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

struct IntegrateParams {
  float fx, fy, cx, cy;
  std::size_t w, h;
  VolumeParams vol;
  float mu, w_max;
};

inline void integrate_voxel(std::size_t i, std::span<const float> depth, const Mat4& inv_pose, const IntegrateParams& p,
                            float& tsdf, float& weight) {
  const std::size_t n = p.vol.n;
  const float vs = p.vol.voxel();
  const std::size_t x = i % n, y = (i / n) % n, z = i / (n * n);
  const Float4 world = Float4::point((static_cast<float>(x) + 0.5f) * vs, (static_cast<float>(y) + 0.5f) * vs,
                                     (static_cast<float>(z) + 0.5f) * vs);
  const Float4 cam = transform_point(inv_pose, world);
  if (!(cam.z() > 0.0f)) return;
  std::size_t px = 0, py = 0;
  if (!pixel_of(p.fx * cam.x() / cam.z() + p.cx, p.fy * cam.y() / cam.z() + p.cy, p.w, p.h, px, py)) return;
  const float d = depth[py * p.w + px];
  if (!(d > 0.0f)) return;
  const float sdf = d - cam.z();
  if (!(sdf > -p.mu)) return;
  const float t = std::clamp(sdf / p.mu, -1.0f, 1.0f);
  tsdf = (tsdf * weight + t) / (weight + 1.0f);
  weight = std::min(weight + 1.0f, p.w_max);
}

struct RaycastParams {
  float fx, fy, cx, cy;
  VolumeParams vol;
  float near_plane, far_plane, step;
};

/// Marches one pixel's ray; writes a world-space vertex and tsdf-gradient
/// normal, or the invalid marker for both. The ray is parameterised by
/// camera depth, so near/far/step are z distances like the input frames.
inline void raycast_pixel(std::size_t x, std::size_t y, std::span<const float> tsdf, const Mat4& pose,
                          const RaycastParams& p, Float4& vertex, Float4& normal) {
  vertex = kInvalid;
  normal = kInvalid;
  const Float4 origin = pose.translation_part();
  const Float4 dir_cam = Float4::point((static_cast<float>(x) - p.cx) / p.fx, (static_cast<float>(y) - p.cy) / p.fy, 1.0f);
  const Float4 dir = rotate(pose, dir_cam);
  if (!dir.finite() || !origin.finite()) return;
  float t = p.near_plane;
  float f_prev = sample_tsdf(tsdf, p.vol, origin + dir * t);
  const auto steps = static_cast<std::size_t>((p.far_plane - p.near_plane) / p.step);
  for (std::size_t s = 0; s < steps; ++s) {
    const float t_next = t + p.step;
    const float f = sample_tsdf(tsdf, p.vol, origin + dir * t_next);
    if (f_prev > 0.0f && f < 0.0f) {
      const float t_hit = t + p.step * f_prev / (f_prev - f);
      const Float4 hit = origin + dir * t_hit;
      const float h = p.vol.voxel();
      auto s3 = [&](float dx, float dy, float dz) { return sample_tsdf(tsdf, p.vol, hit + Float4::point(dx, dy, dz)); };
      const Float4 grad = Float4::point(s3(h, 0, 0) - s3(-h, 0, 0), s3(0, h, 0) - s3(0, -h, 0), s3(0, 0, h) - s3(0, 0, -h));
      const auto n = try_normalize3(grad);
      if (!n) return;
      vertex = hit;
      normal = *n;
      return;
    }
    f_prev = f;
    t = t_next;
  }
}

struct Rgba {
  std::uint8_t r, g, b, a;
  friend bool operator==(const Rgba&, const Rgba&) = default;
};

inline constexpr Rgba kBackground{0, 0, 0, 255};

inline Rgba track_color(int code) {
  switch (static_cast<TrackCode>(code)) {
    case TrackCode::ok: return {128, 128, 128, 255};
    case TrackCode::no_input: return {0, 0, 0, 255};
    case TrackCode::out_of_frame: return {0, 0, 255, 255};
    case TrackCode::dist_reject: return {0, 255, 0, 255};
    case TrackCode::normal_reject: return {255, 255, 0, 255};
  }
  return {255, 0, 255, 255};
}

inline Rgba depth_color(float d, float near_plane, float far_plane) {
  if (!(d > 0.0f)) return kBackground;
  const float s = std::clamp((d - near_plane) / (far_plane - near_plane), 0.0f, 1.0f);
  const auto g = static_cast<std::uint8_t>(255.0f * (1.0f - s) + 0.5f);
  return {g, g, g, 255};
}

inline Rgba shade(const Float4& vertex, const Float4& normal, const Float4& eye) {
  if (!is_valid(normal)) return kBackground;
  const auto l = try_normalize3(eye - vertex);
  const float diffuse = l ? std::max(0.0f, dot3(normal, *l)) : 0.0f;
  const auto g = static_cast<std::uint8_t>(40.0f + 215.0f * diffuse + 0.5f);
  return {g, g, g, 255};
}

inline void store_rgba(std::span<std::uint8_t> out, std::size_t i, Rgba c) {
  out[4 * i] = c.r;
  out[4 * i + 1] = c.g;
  out[4 * i + 2] = c.b;
  out[4 * i + 3] = c.a;
}

// --- Registration ----------------------------------------------------------------

namespace detail {

inline std::size_t width_of(const KernelArgs& a) { return a.space.dims >= 2 ? a.space.extents[1] : a.space.extents[0]; }
inline std::size_t height_of(const KernelArgs& a) { return a.space.dims >= 2 ? a.space.extents[0] : 1; }

/// Reduce epilogue: combine block partials, solve, update pose and the
/// ICP control block.
inline void icp_update(const KernelArgs& a) {
  const auto scratch = as_span<double>(a.writes[0]);
  const std::size_t blocks = a.space.size();
  std::vector<std::array<double, kPartialStride>> parts(blocks);
  for (std::size_t b = 0; b < blocks; ++b)
    std::copy_n(scratch.data() + b * kPartialStride, kPartialStride, parts[b].begin());
  const auto total = tree_reduce(std::span(parts), [](const auto& x, const auto& y) {
    std::array<double, kPartialStride> s;
    for (std::size_t i = 0; i < kPartialStride; ++i) s[i] = x[i] + y[i];
    return s;
  });

  auto pose = a.out<float>(1);
  auto st = a.out<float>(2);
  const std::size_t level = a.parami(0), iteration = a.parami(1), cap = a.parami(2), levels = a.parami(4);
  const bool first = a.param(3) != 0.0;
  const float twist_eps = a.paramf(5), rmse_max = a.paramf(6), matched_min = a.paramf(7);

  if (first) {
    std::copy_n(pose.begin(), 16, st.begin() + icp_state::prev_pose);
    for (std::size_t l = 0; l < 4; ++l) {
      st[icp_state::level_done + l] = 0.0f;
      st[icp_state::iterations + l] = 0.0f;
    }
    st[icp_state::converged] = 0.0f;
    st[icp_state::singular] = 0.0f;
  }
  st[icp_state::iterations + level] += 1.0f;

  const double ok = total[partial::ok], valid = total[partial::valid];
  const double rmse = ok > 0 ? std::sqrt(total[partial::err] / ok) : std::numeric_limits<double>::infinity();
  const double frac = valid > 0 ? ok / valid : 0.0;
  st[icp_state::rmse] = static_cast<float>(rmse);
  st[icp_state::matched] = static_cast<float>(frac);
  st[icp_state::ok_count] = static_cast<float>(ok);
  st[icp_state::valid_count] = static_cast<float>(valid);

  auto revert = [&] { std::copy_n(st.begin() + icp_state::prev_pose, 16, pose.begin()); };

  std::array<double, 6> x{};
  if (ok < 6 || !solve_normal_equations(total.data(), x)) {
    st[icp_state::singular] = 1.0f;
    for (std::size_t l = 0; l < levels; ++l) st[icp_state::level_done + l] = 1.0f;
    st[icp_state::converged] = 0.0f;
    st[icp_state::twist] = 0.0f;
    revert();
    return;
  }
  const Mat4 current = load_pose(std::span<const float>(pose.data(), 16));
  store_pose(pose, apply_twist(current, x));
  double twist = 0.0;
  for (double v : x) twist += v * v;
  twist = std::sqrt(twist);
  st[icp_state::twist] = static_cast<float>(twist);

  if (twist < twist_eps || iteration + 1 >= cap) st[icp_state::level_done + level] = 1.0f;
  if (level == 0 && st[icp_state::level_done] != 0.0f) {
    const bool converged = rmse < rmse_max && frac > matched_min;
    st[icp_state::converged] = converged ? 1.0f : 0.0f;
    if (!converged) revert();
  }
}

}  // namespace detail

inline void register_kfusion_kernels(KernelRegistry& reg) {
  if (reg.find("mm2meters")) return;

  reg.register_kernel("mm2meters", {1, 1, 0, true, 1.0}, [](const KernelArgs& a, std::size_t b, std::size_t e) {
    const auto in = a.in<std::uint16_t>(0);
    const auto out = a.out<float>(0);
    for (std::size_t i = b; i < e; ++i) out[i] = mm_to_meters(in[i]);
  });

  // One output per pixel over the same index space as mm2meters, so the
  // pair is fusable; the fused body rescales each tap from the raw frame.
  const double bilateral_ops = 25.0 * 8.0;
  reg.register_kernel("bilateral_filter", {1, 1, 3, true, bilateral_ops},
                      [](const KernelArgs& a, std::size_t b, std::size_t e) {
                        const auto in = a.in<float>(0);
                        const auto out = a.out<float>(0);
                        const std::size_t w = detail::width_of(a), h = detail::height_of(a);
                        auto at = [&](std::size_t x, std::size_t y) { return in[y * w + x]; };
                        for (std::size_t i = b; i < e; ++i)
                          out[i] = bilateral_pixel(at, i % w, i / w, w, h, static_cast<int>(a.parami(0)), a.paramf(1),
                                                   a.paramf(2));
                      });
  reg.register_kernel("mm2meters_bilateral", {1, 1, 3, true, bilateral_ops + 25.0},
                      [](const KernelArgs& a, std::size_t b, std::size_t e) {
                        const auto in = a.in<std::uint16_t>(0);
                        const auto out = a.out<float>(0);
                        const std::size_t w = detail::width_of(a), h = detail::height_of(a);
                        auto at = [&](std::size_t x, std::size_t y) { return mm_to_meters(in[y * w + x]); };
                        for (std::size_t i = b; i < e; ++i)
                          out[i] = bilateral_pixel(at, i % w, i / w, w, h, static_cast<int>(a.parami(0)), a.paramf(1),
                                                   a.paramf(2));
                      });
  reg.register_fusion("mm2meters", "bilateral_filter", "mm2meters_bilateral");

  reg.register_kernel("pyramid_down", {1, 1, 0, false, 8.0}, [](const KernelArgs& a, std::size_t b, std::size_t e) {
    const auto in = a.in<float>(0);
    const auto out = a.out<float>(0);
    const std::size_t w = detail::width_of(a);
    require(in.size() == 4 * a.space.size(), ErrorCode::invalid_argument, "pyramid_down input is not 2x the output");
    for (std::size_t i = b; i < e; ++i) out[i] = pyramid_pixel(in, 2 * w, i % w, i / w);
  });

  reg.register_kernel("depth2vertex", {1, 1, 4, true, 6.0}, [](const KernelArgs& a, std::size_t b, std::size_t e) {
    const auto in = a.in<float>(0);
    const auto out = a.out<float>(0);
    const std::size_t w = detail::width_of(a);
    for (std::size_t i = b; i < e; ++i)
      store4(out, i, depth_to_vertex(in[i], i % w, i / w, a.paramf(0), a.paramf(1), a.paramf(2), a.paramf(3)));
  });

  reg.register_kernel("vertex2normal", {1, 1, 0, false, 20.0}, [](const KernelArgs& a, std::size_t b, std::size_t e) {
    const auto in = a.in<float>(0);
    const auto out = a.out<float>(0);
    const std::size_t w = detail::width_of(a), h = detail::height_of(a);
    for (std::size_t i = b; i < e; ++i) store4(out, i, vertex_normal(in, i % w, i / w, w, h));
  });

  // reads: vertex, normal, ref_vertex, ref_normal, pose, ref_pose, state, track
  reg.register_kernel("icp_track", {8, 1, 8, false, 60.0}, [](const KernelArgs& a, std::size_t b, std::size_t e) {
    const auto vertex = a.in<float>(0), normal = a.in<float>(1);
    const Mat4 pose = load_pose(a.in<float>(4));
    const Mat4 inv_ref = rigid_inverse(load_pose(a.in<float>(5)));
    const TrackParams p{a.paramf(0), a.paramf(1), a.paramf(2), a.paramf(3), a.parami(4), a.parami(5), a.paramf(6), a.paramf(7)};
    const auto out = a.out<float>(0);
    for (std::size_t i = b; i < e; ++i)
      track_pixel(load4(vertex, i), load4(normal, i), pose, inv_ref, a.in<float>(2), a.in<float>(3), p,
                  out.data() + i * kTrackStride);
  });

  // reads: track, state, pose, scratch; writes: scratch, pose, state.
  // Index space = blocks of 256 pixels; params: level, iteration, cap,
  // first, levels, twist_eps, rmse_max, matched_min, pixels.
  reg.register_kernel(
      "icp_reduce", {4, 3, 9, false, 30.0 * kReduceBlock},
      [](const KernelArgs& a, std::size_t b, std::size_t e) {
        const auto track = a.in<float>(0);
        const std::size_t pixels = a.parami(8);
        const auto scratch = as_span<double>(a.writes[0]);
        for (std::size_t blk = b; blk < e; ++blk)
          reduce_block(track, blk * kReduceBlock, std::min(pixels, (blk + 1) * kReduceBlock),
                       scratch.data() + blk * kPartialStride);
      },
      detail::icp_update);

  // reads: depth, pose, state, tsdf, weight; writes: tsdf, weight.
  reg.register_kernel("integrate", {5, 2, 10, false, 40.0}, [](const KernelArgs& a, std::size_t b, std::size_t e) {
    const auto depth = a.in<float>(0);
    const Mat4 inv_pose = rigid_inverse(load_pose(a.in<float>(1)));
    const IntegrateParams p{a.paramf(0), a.paramf(1), a.paramf(2), a.paramf(3), a.parami(4), a.parami(5),
                            VolumeParams{a.parami(6), a.paramf(7)}, a.paramf(8), a.paramf(9)};
    const auto tsdf = a.out<float>(0), weight = a.out<float>(1);
    for (std::size_t i = b; i < e; ++i) integrate_voxel(i, depth, inv_pose, p, tsdf[i], weight[i]);
  });

  // reads: tsdf, pose; writes: ref_vertex, ref_normal, ref_pose.
  reg.register_kernel(
      "raycast", {2, 3, 9, false, 600.0},
      [](const KernelArgs& a, std::size_t b, std::size_t e) {
        const auto tsdf = a.in<float>(0);
        const Mat4 pose = load_pose(a.in<float>(1));
        const RaycastParams p{a.paramf(0), a.paramf(1), a.paramf(2), a.paramf(3), VolumeParams{a.parami(4), a.paramf(5)},
                              a.paramf(6), a.paramf(7), a.paramf(8)};
        const std::size_t w = detail::width_of(a);
        const auto vout = a.out<float>(0), nout = a.out<float>(1);
        for (std::size_t i = b; i < e; ++i) {
          Float4 v, n;
          raycast_pixel(i % w, i / w, tsdf, pose, p, v, n);
          store4(vout, i, v);
          store4(nout, i, n);
        }
      },
      [](const KernelArgs& a) {
        const auto pose = a.in<float>(1);
        std::copy_n(pose.begin(), 16, a.out<float>(2).begin());
      });

  reg.register_kernel("render_depth", {1, 1, 2, true, 4.0}, [](const KernelArgs& a, std::size_t b, std::size_t e) {
    const auto depth = a.in<float>(0);
    const auto out = a.out<std::uint8_t>(0);
    for (std::size_t i = b; i < e; ++i) store_rgba(out, i, depth_color(depth[i], a.paramf(0), a.paramf(1)));
  });

  reg.register_kernel("render_track", {1, 1, 0, true, 2.0}, [](const KernelArgs& a, std::size_t b, std::size_t e) {
    const auto track = a.in<float>(0);
    const auto out = a.out<std::uint8_t>(0);
    for (std::size_t i = b; i < e; ++i) store_rgba(out, i, track_color(code_of(track[i * kTrackStride + 7])));
  });

  // reads: ref_vertex, ref_normal, pose.
  reg.register_kernel("render_volume", {3, 1, 0, true, 12.0}, [](const KernelArgs& a, std::size_t b, std::size_t e) {
    const auto vertex = a.in<float>(0), normal = a.in<float>(1);
    const Float4 eye = load_pose(a.in<float>(2)).translation_part();
    const auto out = a.out<std::uint8_t>(0);
    for (std::size_t i = b; i < e; ++i) store_rgba(out, i, shade(load4(vertex, i), load4(normal, i), eye));
  });
}

}  // namespace hetflow::kfusion
