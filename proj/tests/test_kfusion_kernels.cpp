#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <map>
#include <random>

#include "hetflow/kfusion/image.hpp"
#include "kfusion_oracle.hpp"

using namespace hetflow;
using namespace hetflow::kfusion;
using namespace hetflow::testing;

namespace {

constexpr std::size_t W = 32, H = 24;

std::vector<double> widen(const std::vector<float>& v) { return {v.begin(), v.end()}; }

// Frontal wall at `depth` meters seen from a camera at (2.4, 2.4, 0) looking +z.
Mat4 wall_camera() { return Mat4::translation(2.4f, 2.4f, 0.0f); }

std::vector<double> integrate_params(const CameraIntrinsics& k, std::size_t n, float size, float mu, float w_max) {
  return {k.fx, k.fy, k.cx, k.cy, static_cast<double>(k.width), static_cast<double>(k.height), static_cast<double>(n),
          size, mu, w_max};
}

std::vector<double> raycast_params(const CameraIntrinsics& k, std::size_t n, float size, float mu) {
  return {k.fx, k.fy, k.cx, k.cy, static_cast<double>(n), size, 0.4, 4.0, mu / 2};
}

struct Volume {
  KernelHarness& h;
  CameraIntrinsics k;
  std::size_t n;
  float size, mu, w_max;
  BufferId depth, pose, state, tsdf, weight, rv, rn, rp;

  Volume(KernelHarness& harness, CameraIntrinsics k_, std::size_t n_, float size_, float mu_, float w_max_ = 100.0f)
      : h(harness), k(k_), n(n_), size(size_), mu(mu_), w_max(w_max_) {
    depth = h.f32("depth", {k.height, k.width});
    pose = h.f32("pose", {16});
    state = h.f32("state", {icp_state::size});
    tsdf = h.f32("tsdf", {n, n, n}, 1.0f);
    weight = h.f32("weight", {n, n, n}, 0.0f);
    rv = h.f32("rv", {k.height, k.width, 4});
    rn = h.f32("rn", {k.height, k.width, 4});
    rp = h.f32("rp", {16});
  }
  void set_pose(const Mat4& m) {
    const auto a = m.to_array();
    h.rt.host_write(pose, std::span<const float>(a));
  }
  void integrate(const std::vector<float>& d) {
    h.rt.host_write(depth, std::span<const float>(d));
    h.launch("integrate", {depth, pose, state, tsdf, weight}, {tsdf, weight}, IndexSpace{n, n, n},
             integrate_params(k, n, size, mu, w_max));
  }
  void raycast() { h.launch("raycast", {tsdf, pose}, {rv, rn, rp}, IndexSpace{k.height, k.width}, raycast_params(k, n, size, mu)); }
};

}  // namespace

// --- mm2meters ----------------------------------------------------------------------

TEST(Mm2Meters, ScalesAndKeepsInvalidZero) {
  KernelHarness h;
  std::vector<std::uint16_t> raw(W * H, 1234);
  raw[0] = 2000;
  raw[1] = 0;
  const BufferId in = h.make("raw", ElementType::u16, {H, W}, raw);
  const BufferId out = h.f32("m", {H, W});
  h.launch("mm2meters", {in}, {out}, IndexSpace{H, W});
  const auto m = h.get<float>(out);
  EXPECT_EQ(m[0], 2.0f);
  EXPECT_EQ(m[1], 0.0f);
  for (std::size_t i = 2; i < m.size(); ++i) ASSERT_EQ(m[i], 1.234f);
}

// --- bilateral ----------------------------------------------------------------------

TEST(Bilateral, ConstantFrameIsUnchangedWithinOneUlp) {
  KernelHarness h;
  const BufferId in = h.f32("d", {H, W}, 1.7f);
  const BufferId out = h.f32("f", {H, W});
  h.launch("bilateral_filter", {in}, {out}, IndexSpace{H, W}, {2, 1.5, 0.1});
  for (float v : h.get<float>(out)) ASSERT_LE(std::abs(v - 1.7f), std::nextafter(1.7f, 2.0f) - 1.7f);
}

TEST(Bilateral, StepEdgeKeepsEachPlateau) {
  KernelHarness h;
  std::vector<float> d(W * H);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) d[y * W + x] = x < W / 2 ? 1.0f : 2.0f;
  const BufferId in = h.f32("d", {H, W}, d);
  const BufferId out = h.f32("f", {H, W});
  h.launch("bilateral_filter", {in}, {out}, IndexSpace{H, W}, {2, 1.5, 0.1});
  const auto f = h.get<float>(out);
  for (std::size_t i = 0; i < f.size(); ++i) ASSERT_NEAR(f[i], d[i], 0.01) << "pixel " << i;
  // At the edge itself the oracle agrees too.
  const auto dd = widen(d);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = W / 2 - 2; x < W / 2 + 2; ++x)
      EXPECT_NEAR(f[y * W + x], bilateral_oracle(dd, W, H, x, y, 2, 1.5, 0.1), 1e-6);
}

TEST(Bilateral, IsolatedInvalidPixelStaysInvalid) {
  KernelHarness h;
  std::mt19937 rng(3);
  std::uniform_real_distribution<float> u(1.0f, 1.05f);
  std::vector<float> d(W * H);
  for (float& v : d) v = u(rng);
  const std::size_t hole = 10 * W + 12;
  d[hole] = 0.0f;
  const BufferId in = h.f32("d", {H, W}, d);
  const BufferId out = h.f32("f", {H, W});
  h.launch("bilateral_filter", {in}, {out}, IndexSpace{H, W}, {2, 1.5, 0.1});
  const auto f = h.get<float>(out);
  EXPECT_EQ(f[hole], 0.0f);
  const auto dd = widen(d);
  for (std::size_t y = 8; y <= 12; ++y)
    for (std::size_t x = 10; x <= 14; ++x) {
      if (y * W + x == hole) continue;
      EXPECT_GT(f[y * W + x], 0.0f);
      EXPECT_NEAR(f[y * W + x], bilateral_oracle(dd, W, H, x, y, 2, 1.5, 0.1), 1e-6);
    }
}

TEST(Bilateral, RandomFrameMatchesDoubleOracle) {
  KernelHarness h;
  std::mt19937 rng(11);
  std::uniform_real_distribution<float> u(0.5f, 3.0f);
  std::bernoulli_distribution hole(0.1);
  std::vector<float> d(W * H);
  for (float& v : d) v = hole(rng) ? 0.0f : u(rng);
  const BufferId in = h.f32("d", {H, W}, d);
  const BufferId out = h.f32("f", {H, W});
  h.launch("bilateral_filter", {in}, {out}, IndexSpace{H, W}, {3, 2.0, 0.3});
  const auto f = h.get<float>(out);
  const auto dd = widen(d);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      ASSERT_NEAR(f[y * W + x], bilateral_oracle(dd, W, H, x, y, 3, 2.0, 0.3), 1e-5) << x << "," << y;
}

// --- pyramid ------------------------------------------------------------------------

TEST(Pyramid, ConstantFrameHalves) {
  KernelHarness h;
  const BufferId in = h.f32("d", {H, W}, 2.5f);
  const BufferId out = h.f32("p", {H / 2, W / 2});
  h.launch("pyramid_down", {in}, {out}, IndexSpace{H / 2, W / 2});
  for (float v : h.get<float>(out)) ASSERT_EQ(v, 2.5f);
}

TEST(Pyramid, CheckerboardOfValueAndInvalidGivesValue) {
  std::vector<float> d(W * H);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) d[y * W + x] = (x + y) % 2 ? 0.0f : 1.25f;
  const auto p = pyramid_down(std::span<const float>(d), W, H);
  ASSERT_EQ(p.size(), W * H / 4);
  for (float v : p) ASSERT_EQ(v, 1.25f);
}

TEST(Pyramid, BlockAverageOverValidPixels) {
  const std::vector<float> m = {1.0f, 0.0f, 5.0f, 5.0f,  //
                                2.0f, 4.0f, 0.0f, 0.0f};
  const auto q = pyramid_down(std::span<const float>(m), 4, 2);
  ASSERT_EQ(q.size(), 2u);
  EXPECT_FLOAT_EQ(q[0], (1.0f + 2.0f + 4.0f) / 3.0f);
  EXPECT_FLOAT_EQ(q[1], 5.0f);
  const std::vector<float> z(4, 0.0f);
  EXPECT_EQ(pyramid_down(std::span<const float>(z), 2, 2)[0], 0.0f);
}

TEST(Pyramid, OddDimensionIsAnError) {
  const std::vector<float> d(5 * 4, 1.0f);
  try {
    pyramid_down(std::span<const float>(d), 5, 4);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_argument);
  }
  KernelHarness h;
  const BufferId in = h.f32("d", {4, 5}, 1.0f);
  const BufferId out = h.f32("p", {2, 2});
  EXPECT_THROW(h.launch("pyramid_down", {in}, {out}, IndexSpace{2, 2}), Error);
}

// --- depth2vertex -------------------------------------------------------------------

TEST(Depth2Vertex, PrincipalRayAndUnitTangent) {
  const Float4 c = depth_to_vertex(1.0f, 16, 12, 20.0f, 20.0f, 16.0f, 12.0f);
  EXPECT_EQ(c, Float4(0, 0, 1, 0));
  const Float4 t = depth_to_vertex(1.0f, 36, 12, 20.0f, 20.0f, 16.0f, 12.0f);
  EXPECT_EQ(t, Float4(1, 0, 1, 0));
  EXPECT_EQ(depth_to_vertex(0.0f, 3, 3, 20.0f, 20.0f, 16.0f, 12.0f), kInvalid);
}

TEST(Depth2Vertex, RandomFrameMatchesDoubleOracle) {
  KernelHarness h;
  const auto k = CameraIntrinsics::for_size(W, H);
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(0.3f, 5.0f);
  std::bernoulli_distribution hole(0.05);
  std::vector<float> d(W * H);
  for (float& v : d) v = hole(rng) ? 0.0f : u(rng);
  const BufferId in = h.f32("d", {H, W}, d);
  const BufferId out = h.f32("v", {H, W, 4});
  h.launch("depth2vertex", {in}, {out}, IndexSpace{H, W}, {k.fx, k.fy, k.cx, k.cy});
  const auto v = h.get<float>(out);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t i = y * W + x;
      const Float4 got = load4(std::span<const float>(v), i);
      if (d[i] == 0.0f) {
        ASSERT_EQ(got, kInvalid);
        continue;
      }
      const Vec3d want = backproject_oracle(d[i], static_cast<double>(x), static_cast<double>(y), k.fx, k.fy, k.cx, k.cy);
      ASSERT_NEAR(got.x(), want.x, 1e-5);
      ASSERT_NEAR(got.y(), want.y, 1e-5);
      ASSERT_NEAR(got.z(), want.z, 1e-5);
      ASSERT_EQ(got.w(), 0.0f);
    }
}

// --- vertex2normal ------------------------------------------------------------------

TEST(Vertex2Normal, PlanarWallGivesPlaneNormalAndInvalidBorders) {
  KernelHarness h;
  const auto k = CameraIntrinsics::for_size(W, H);
  // Plane n.X = c with n tilted away from the optical axis.
  const Vec3d n = unit({0.3, -0.2, -1.0});
  const double c = -2.0;
  std::vector<float> verts(W * H * 4);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const Vec3d ray = backproject_oracle(1.0, static_cast<double>(x), static_cast<double>(y), k.fx, k.fy, k.cx, k.cy);
      const double d = c / dot(n, ray);
      store4(std::span<float>(verts), y * W + x,
             Float4::point(static_cast<float>(ray.x * d), static_cast<float>(ray.y * d), static_cast<float>(d)));
    }
  const BufferId in = h.f32("v", {H, W, 4}, verts);
  const BufferId out = h.f32("n", {H, W, 4});
  h.launch("vertex2normal", {in}, {out}, IndexSpace{H, W});
  const auto got = h.get<float>(out);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const Float4 g = load4(std::span<const float>(got), y * W + x);
      if (x == 0 || y == 0 || x == W - 1 || y == H - 1) {
        ASSERT_EQ(g, kInvalid) << x << "," << y;
        continue;
      }
      ASSERT_NEAR(g.x(), n.x, 1e-3);
      ASSERT_NEAR(g.y(), n.y, 1e-3);
      ASSERT_NEAR(g.z(), n.z, 1e-3);
    }
}

TEST(Vertex2Normal, InvalidNeighbourInvalidatesNormal) {
  std::vector<float> v(5 * 5 * 4);
  for (std::size_t i = 0; i < 25; ++i)
    store4(std::span<float>(v), i, Float4::point(static_cast<float>(i % 5), static_cast<float>(i / 5), 2.0f));
  EXPECT_TRUE(is_valid(vertex_normal(std::span<const float>(v), 2, 2, 5, 5)));
  store4(std::span<float>(v), 2 * 5 + 3, kInvalid);
  EXPECT_EQ(vertex_normal(std::span<const float>(v), 2, 2, 5, 5), kInvalid);
}

TEST(Vertex2Normal, SphereNormalsWithinTwoDegrees) {
  const std::size_t w = 160, hgt = 120;
  const auto k = CameraIntrinsics::for_size(w, hgt);
  dataset::SyntheticScene scene;
  const dataset::Pose cam = scene.pose(0);
  const auto depth = exact_depth(scene, k, cam);
  std::vector<float> verts(w * hgt * 4);
  for (std::size_t i = 0; i < w * hgt; ++i)
    store4(std::span<float>(verts), i, depth_to_vertex(depth[i], i % w, i / w, k.fx, k.fy, k.cx, k.cy));
  // Sphere centre in camera coordinates.
  const dataset::Pose inv = cam.inverse();
  const auto cc = inv.apply(scene.sphere_center);
  const Vec3d centre{cc[0], cc[1], cc[2]};
  auto on_sphere = [&](std::size_t x, std::size_t y) {
    const Float4 p = load4(std::span<const float>(verts), y * w + x);
    return is_valid(p) && std::abs(norm(sub(to_vec(p), centre)) - scene.sphere_radius) < 1e-3;
  };
  std::size_t checked = 0;
  for (std::size_t y = 1; y + 1 < hgt; ++y)
    for (std::size_t x = 1; x + 1 < w; ++x) {
      if (!on_sphere(x, y) || !on_sphere(x - 1, y) || !on_sphere(x + 1, y) || !on_sphere(x, y - 1) ||
          !on_sphere(x, y + 1))
        continue;
      const Float4 n = vertex_normal(std::span<const float>(verts), x, y, w, hgt);
      ASSERT_TRUE(is_valid(n));
      const Vec3d p = to_vec(load4(std::span<const float>(verts), y * w + x));
      // Skip the grazing rim, where neighbours straddle a large arc.
      if (angle_deg(sub(p, centre), {-p.x, -p.y, -p.z}) > 75.0) continue;
      ASSERT_LT(angle_deg(to_vec(n), sub(p, centre)), 2.0) << x << "," << y;
      ASSERT_LT(dot(to_vec(n), p), 0.0) << "normal faces the camera";
      ++checked;
    }
  EXPECT_GT(checked, 1000u);
}

// --- ICP pieces ---------------------------------------------------------------------

TEST(IcpTrack, CodesAndRowMatchFormula) {
  const auto k = CameraIntrinsics::for_size(W, H);
  const TrackParams p{k.fx, k.fy, k.cx, k.cy, W, H, 0.1f, 0.8f};
  std::vector<float> rv(W * H * 4), rn(W * H * 4);
  for (std::size_t i = 0; i < W * H; ++i) {
    const Float4 v = depth_to_vertex(2.0f, i % W, i / W, k.fx, k.fy, k.cx, k.cy);
    store4(std::span<float>(rv), i, v);
    store4(std::span<float>(rn), i, Float4::point(0, 0, -1));
  }
  const Mat4 id = Mat4::identity();
  float row[kTrackStride];
  auto run = [&](Float4 v, Float4 n, const Mat4& pose) {
    track_pixel(v, n, pose, id, std::span<const float>(rv), std::span<const float>(rn), p, row);
    return code_of(row[7]);
  };
  const Float4 v = depth_to_vertex(2.03f, 10, 7, k.fx, k.fy, k.cx, k.cy);
  const Float4 n = Float4::point(0, 0, -1);
  EXPECT_EQ(run(kInvalid, n, id), static_cast<int>(TrackCode::no_input));
  EXPECT_EQ(run(v, kInvalid, id), static_cast<int>(TrackCode::no_input));
  EXPECT_EQ(run(v, n, Mat4::translation(0, 0, -5)), static_cast<int>(TrackCode::out_of_frame));
  EXPECT_EQ(run(v, n, Mat4::translation(50, 0, 0)), static_cast<int>(TrackCode::out_of_frame));
  EXPECT_EQ(run(v, n, Mat4::translation(0, 0, 0.5f)), static_cast<int>(TrackCode::dist_reject));
  EXPECT_EQ(run(v, Float4::point(1, 0, 0), id), static_cast<int>(TrackCode::normal_reject));
  ASSERT_EQ(run(v, n, id), static_cast<int>(TrackCode::ok));
  // J = [n_ref, v x n_ref], r = n_ref . (v_ref - v)
  const std::size_t px = static_cast<std::size_t>(std::floor(k.fx * v.x() / v.z() + k.cx + 0.5f));
  const std::size_t py = static_cast<std::size_t>(std::floor(k.fy * v.y() / v.z() + k.cy + 0.5f));
  const Vec3d vr = to_vec(load4(std::span<const float>(rv), py * W + px));
  const Vec3d nr{0, 0, -1};
  const Vec3d vv = to_vec(v);
  const Vec3d c = cross(vv, nr);
  const double want[7] = {nr.x, nr.y, nr.z, c.x, c.y, c.z, dot(nr, sub(vr, vv))};
  for (int i = 0; i < 7; ++i) EXPECT_NEAR(row[i], want[i], 1e-6) << i;
  // Invalid reference normal counts as out of frame.
  store4(std::span<float>(rn), py * W + px, kInvalid);
  EXPECT_EQ(run(v, n, id), static_cast<int>(TrackCode::out_of_frame));
  EXPECT_EQ(code_of(std::nanf("")), -1);
  EXPECT_EQ(code_of(7.0f), -1);
}

TEST(IcpReduce, BlockSumsMatchOracle) {
  std::mt19937 rng(9);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::uniform_int_distribution<int> code(0, 4);
  const std::size_t n = 300;
  std::vector<float> track(n * kTrackStride);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 7; ++k) track[i * kTrackStride + k] = u(rng);
    track[i * kTrackStride + 7] = static_cast<float>(code(rng));
  }
  double out[kPartialStride];
  reduce_block(std::span<const float>(track), 0, n, out);
  double jtj[6][6] = {}, jtr[6] = {}, err = 0, ok = 0, valid = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* r = &track[i * kTrackStride];
    if (r[7] == 1.0f) continue;
    ++valid;
    if (r[7] != 0.0f) continue;
    ++ok;
    for (int a = 0; a < 6; ++a) {
      for (int b = 0; b < 6; ++b) jtj[a][b] += static_cast<double>(r[a]) * r[b];
      jtr[a] += static_cast<double>(r[a]) * r[6];
    }
    err += static_cast<double>(r[6]) * r[6];
  }
  std::size_t idx = 0;
  for (int a = 0; a < 6; ++a)
    for (int b = a; b < 6; ++b) EXPECT_NEAR(out[idx++], jtj[a][b], 1e-12);
  for (int a = 0; a < 6; ++a) EXPECT_NEAR(out[partial::jtr + a], jtr[a], 1e-12);
  EXPECT_NEAR(out[partial::err], err, 1e-12);
  EXPECT_EQ(out[partial::ok], ok);
  EXPECT_EQ(out[partial::valid], valid);
}

TEST(IcpReduce, CholeskySolvesSpdAndRejectsSingular) {
  std::mt19937 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    double m[6][6], a[6][6] = {}, b[6];
    for (auto& row : m)
      for (double& x : row) x = g(rng);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) {
        for (int k = 0; k < 6; ++k) a[i][j] += m[k][i] * m[k][j];
        if (i == j) a[i][j] += 0.1;
      }
    for (double& x : b) x = g(rng);
    double sums[kPartialStride] = {};
    std::size_t idx = 0;
    for (int i = 0; i < 6; ++i)
      for (int j = i; j < 6; ++j) sums[idx++] = a[i][j];
    for (int i = 0; i < 6; ++i) sums[partial::jtr + i] = b[i];
    std::array<double, 6> x{};
    ASSERT_TRUE(solve_normal_equations(sums, x));
    for (int i = 0; i < 6; ++i) {
      double s = 0;
      for (int j = 0; j < 6; ++j) s += a[i][j] * x[static_cast<std::size_t>(j)];
      ASSERT_NEAR(s, b[i], 1e-8);
    }
  }
  double rank_deficient[kPartialStride] = {};
  rank_deficient[0] = 1.0;  // only J0 observed
  std::array<double, 6> x{};
  EXPECT_FALSE(solve_normal_equations(rank_deficient, x));
  double zero[kPartialStride] = {};
  EXPECT_FALSE(solve_normal_equations(zero, x));
}

TEST(IcpUpdate, TwistKeepsPoseRigid) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g(0.0, 0.02);
  Mat4 pose = Mat4::translation(1, 2, 3);
  for (int i = 0; i < 500; ++i) {
    pose = apply_twist(pose, {g(rng), g(rng), g(rng), g(rng), g(rng), g(rng)});
    ASSERT_LT(orthonormality_error(pose), 1e-5f) << "step " << i;
    ASSERT_TRUE(is_rigid(pose));
  }
  const Mat4 p = Mat4::translation(0.5f, 0, 0);
  EXPECT_EQ(apply_twist(p, {0, 0, 0, 0, 0, 0}), p);
}

// --- integrate ----------------------------------------------------------------------

TEST(Integrate, FrontalWallZeroCrossingWithinOneVoxel) {
  KernelHarness h;
  const auto k = CameraIntrinsics::for_size(W, H);
  Volume vol(h, k, 64, 4.8f, 0.1f);
  vol.set_pose(wall_camera());
  const double wall = 2.0;
  vol.integrate(std::vector<float>(W * H, static_cast<float>(wall)));
  const auto t = h.get<float>(vol.tsdf);
  const double vs = 4.8 / 64;
  // Columns around the principal ray (x, y voxel centres near 2.4).
  for (std::size_t ix : {31u, 32u})
    for (std::size_t iy : {31u, 32u}) {
      bool found = false;
      for (std::size_t iz = 0; iz + 1 < 64; ++iz) {
        const float a = t[(iz * 64 + iy) * 64 + ix], b = t[((iz + 1) * 64 + iy) * 64 + ix];
        if (a > 0 && b <= 0) {
          const double za = (static_cast<double>(iz) + 0.5) * vs;
          const double z0 = za + vs * a / (a - b);
          EXPECT_NEAR(z0, wall, vs);
          found = true;
          break;
        }
      }
      EXPECT_TRUE(found) << ix << "," << iy;
    }
}

TEST(Integrate, SameFrameTwiceKeepsTsdfAndDoublesWeight) {
  KernelHarness h;
  const auto k = CameraIntrinsics::for_size(W, H);
  Volume vol(h, k, 32, 4.8f, 0.3f);
  vol.set_pose(wall_camera());
  std::mt19937 rng(8);
  std::uniform_real_distribution<float> u(1.5f, 3.0f);
  std::vector<float> d(W * H);
  for (float& v : d) v = u(rng);
  vol.integrate(d);
  const auto t1 = h.get<float>(vol.tsdf);
  const auto w1 = h.get<float>(vol.weight);
  vol.integrate(d);
  const auto t2 = h.get<float>(vol.tsdf);
  const auto w2 = h.get<float>(vol.weight);
  std::size_t touched = 0;
  for (std::size_t i = 0; i < t1.size(); ++i) {
    ASSERT_EQ(std::bit_cast<std::uint32_t>(t1[i]), std::bit_cast<std::uint32_t>(t2[i])) << i;
    ASSERT_EQ(w2[i], 2 * w1[i]);
    touched += w1[i] > 0;
  }
  EXPECT_GT(touched, 100u);
}

TEST(Integrate, EmptyFrameLeavesVolumeUnchanged) {
  KernelHarness h;
  const auto k = CameraIntrinsics::for_size(W, H);
  Volume vol(h, k, 32, 4.8f, 0.3f);
  vol.set_pose(wall_camera());
  vol.integrate(std::vector<float>(W * H, 2.0f));
  const auto t1 = h.get<std::uint8_t>(vol.tsdf);
  const auto w1 = h.get<std::uint8_t>(vol.weight);
  vol.integrate(std::vector<float>(W * H, 0.0f));
  EXPECT_EQ(h.get<std::uint8_t>(vol.tsdf), t1);
  EXPECT_EQ(h.get<std::uint8_t>(vol.weight), w1);
}

TEST(Integrate, ClampAndMonotoneWeightsUnderRandomFrames) {
  KernelHarness h;
  const auto k = CameraIntrinsics::for_size(W, H);
  Volume vol(h, k, 24, 4.8f, 0.2f, 3.0f);
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<float> u(0.5f, 4.5f);
  std::bernoulli_distribution hole(0.2);
  std::vector<float> prev_w = h.get<float>(vol.weight);
  for (int frame = 0; frame < 6; ++frame) {
    const auto pose = dataset::SyntheticScene{}.pose(static_cast<std::size_t>(frame) * 40);
    vol.set_pose(pose.to_mat());
    std::vector<float> d(W * H);
    for (float& v : d) v = hole(rng) ? 0.0f : u(rng);
    vol.integrate(d);
    const auto t = h.get<float>(vol.tsdf);
    const auto w = h.get<float>(vol.weight);
    for (std::size_t i = 0; i < t.size(); ++i) {
      ASSERT_GE(t[i], -1.0f);
      ASSERT_LE(t[i], 1.0f);
      ASSERT_GE(w[i], prev_w[i]);
      ASSERT_LE(w[i], 3.0f);
    }
    prev_w = w;
  }
  EXPECT_EQ(*std::max_element(prev_w.begin(), prev_w.end()), 3.0f);
}

// --- raycast ------------------------------------------------------------------------

TEST(Raycast, WallRoundtripWithinHalfMu) {
  KernelHarness h;
  const auto k = CameraIntrinsics::for_size(W, H);
  Volume vol(h, k, 64, 4.8f, 0.1f);
  vol.set_pose(wall_camera());
  vol.integrate(std::vector<float>(W * H, 2.0f));
  vol.raycast();
  const auto v = h.get<float>(vol.rv);
  std::size_t good = 0;
  for (std::size_t i = 0; i < W * H; ++i) {
    const Float4 p = load4(std::span<const float>(v), i);
    if (is_valid(p) && std::abs(p.z() - 2.0f) <= 0.05f) ++good;
  }
  EXPECT_GE(good, W * H * 95 / 100);
  // The epilogue records the pose the reference was rendered from.
  EXPECT_EQ(h.get<float>(vol.rp), h.get<float>(vol.pose));
}

TEST(Raycast, EmptyVolumeIsAllInvalid) {
  KernelHarness h;
  const auto k = CameraIntrinsics::for_size(W, H);
  Volume vol(h, k, 32, 4.8f, 0.1f);
  vol.set_pose(wall_camera());
  vol.raycast();
  const auto v = h.get<float>(vol.rv), n = h.get<float>(vol.rn);
  for (std::size_t i = 0; i < W * H; ++i) {
    ASSERT_EQ(load4(std::span<const float>(v), i), kInvalid);
    ASSERT_EQ(load4(std::span<const float>(n), i), kInvalid);
  }
  // The volume render of an empty reference is background everywhere.
  const BufferId img = h.u8("img", W * H * 4);
  h.launch("render_volume", {vol.rv, vol.rn, vol.pose}, {img}, IndexSpace{H, W});
  const auto rgba = h.get<std::uint8_t>(img);
  for (std::size_t i = 0; i < W * H; ++i) {
    ASSERT_EQ(rgba[4 * i], kBackground.r);
    ASSERT_EQ(rgba[4 * i + 3], kBackground.a);
  }
}

TEST(Raycast, SampleOutsideVolumeReadsEmpty) {
  const std::vector<float> t(8 * 8 * 8, -0.5f);
  const VolumeParams vp{8, 1.0f};
  EXPECT_EQ(sample_tsdf(std::span<const float>(t), vp, Float4::point(-0.1f, 0.5f, 0.5f)), 1.0f);
  EXPECT_EQ(sample_tsdf(std::span<const float>(t), vp, Float4::point(0.5f, 0.5f, 2.0f)), 1.0f);
  EXPECT_EQ(sample_tsdf(std::span<const float>(t), vp, Float4::point(std::nanf(""), 0.5f, 0.5f)), 1.0f);
  EXPECT_FLOAT_EQ(sample_tsdf(std::span<const float>(t), vp, Float4::point(0.5f, 0.5f, 0.5f)), -0.5f);
}

// --- renders ------------------------------------------------------------------------

TEST(Render, ConstantDepthIsConstantGray) {
  KernelHarness h;
  const BufferId d = h.f32("d", {H, W}, 1.3f);
  const BufferId img = h.u8("img", W * H * 4);
  h.launch("render_depth", {d}, {img}, IndexSpace{H, W}, {0.4, 4.0});
  const auto rgba = h.get<std::uint8_t>(img);
  for (std::size_t i = 0; i < W * H; ++i) {
    ASSERT_EQ(rgba[4 * i], rgba[0]);
    ASSERT_EQ(rgba[4 * i + 1], rgba[0]);
    ASSERT_EQ(rgba[4 * i + 2], rgba[0]);
    ASSERT_EQ(rgba[4 * i + 3], 255);
  }
  EXPECT_NE(rgba[0], 0);
  EXPECT_EQ(depth_color(0.0f, 0.4f, 4.0f), kBackground);
}

TEST(Render, TrackColourHistogramMatchesCodeHistogram) {
  KernelHarness h;
  std::mt19937 rng(13);
  std::uniform_int_distribution<int> code(0, kTrackCodeCount - 1);
  std::vector<float> track(W * H * kTrackStride, 0.0f);
  std::map<int, std::size_t> codes;
  for (std::size_t i = 0; i < W * H; ++i) {
    const int c = code(rng);
    track[i * kTrackStride + 7] = static_cast<float>(c);
    ++codes[c];
  }
  const BufferId t = h.f32("t", {H, W, kTrackStride}, track);
  const BufferId img = h.u8("img", W * H * 4);
  h.launch("render_track", {t}, {img}, IndexSpace{H, W});
  const auto rgba = h.get<std::uint8_t>(img);
  std::map<std::array<std::uint8_t, 4>, std::size_t> colours;
  for (std::size_t i = 0; i < W * H; ++i) ++colours[{rgba[4 * i], rgba[4 * i + 1], rgba[4 * i + 2], rgba[4 * i + 3]}];
  ASSERT_EQ(colours.size(), codes.size());
  for (const auto& [c, count] : codes) {
    const Rgba col = track_color(c);
    EXPECT_EQ((colours[{col.r, col.g, col.b, col.a}]), count) << "code " << c;
  }
}

TEST(Render, PamRoundTripAndPpmDropsAlpha) {
  RgbaImage img{3, 2, {}};
  for (std::size_t i = 0; i < 24; ++i) img.rgba.push_back(static_cast<std::uint8_t>(i * 10));
  EXPECT_EQ(decode_pam(encode_pam(img)), img);
  const std::string ppm = encode_ppm(img);
  const std::string header = "P6\n3 2\n255\n";
  ASSERT_EQ(ppm.size(), header.size() + 18);
  EXPECT_EQ(ppm.substr(0, header.size()), header);
  EXPECT_EQ(static_cast<std::uint8_t>(ppm[header.size() + 3]), 40);  // second pixel's red
  EXPECT_THROW(decode_pam("P6\n"), Error);
  EXPECT_THROW(encode_pam(RgbaImage{2, 2, {1, 2, 3}}), Error);
}
