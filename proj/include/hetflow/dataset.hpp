#pragma once

// Depth sequences ("BHDR" container), trajectories, the synthetic
// sphere-in-a-room generator and absolute trajectory error.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hetflow/error.hpp"
#include "hetflow/hash.hpp"
#include "hetflow/kfusion/config.hpp"
#include "hetflow/veclib.hpp"

namespace hetflow::dataset {

// --- Rigid transforms in double ---------------------------------------------------

struct Pose {
  std::array<double, 9> r{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> t{0, 0, 0};

  static Pose from_mat(const Mat4& m) {
    Pose p;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) p.r[static_cast<std::size_t>(3 * i + j)] = m.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      p.t[static_cast<std::size_t>(i)] = m.at(static_cast<std::size_t>(i), 3);
    }
    return p;
  }
  Mat4 to_mat() const {
    std::array<float, 9> rf{};
    for (std::size_t i = 0; i < 9; ++i) rf[i] = static_cast<float>(r[i]);
    return Mat4::rigid(rf, Float4::point(static_cast<float>(t[0]), static_cast<float>(t[1]), static_cast<float>(t[2])));
  }

  Pose operator*(const Pose& o) const {
    Pose p;
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 3; ++k) s += r[3 * i + k] * o.r[3 * k + j];
        p.r[3 * i + j] = s;
      }
      double s = t[i];
      for (std::size_t k = 0; k < 3; ++k) s += r[3 * i + k] * o.t[k];
      p.t[i] = s;
    }
    return p;
  }
  Pose inverse() const {
    Pose p;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) p.r[3 * i + j] = r[3 * j + i];
    for (std::size_t i = 0; i < 3; ++i) p.t[i] = -(p.r[3 * i] * t[0] + p.r[3 * i + 1] * t[1] + p.r[3 * i + 2] * t[2]);
    return p;
  }
  std::array<double, 3> apply(const std::array<double, 3>& x) const {
    std::array<double, 3> y{};
    for (std::size_t i = 0; i < 3; ++i) y[i] = r[3 * i] * x[0] + r[3 * i + 1] * x[1] + r[3 * i + 2] * x[2] + t[i];
    return y;
  }

  /// Unit quaternion (x, y, z, w) of the rotation.
  std::array<double, 4> quaternion() const {
    const double tr = r[0] + r[4] + r[8];
    double qx, qy, qz, qw;
    if (tr > 0) {
      const double s = std::sqrt(tr + 1.0) * 2;
      qw = 0.25 * s;
      qx = (r[7] - r[5]) / s;
      qy = (r[2] - r[6]) / s;
      qz = (r[3] - r[1]) / s;
    } else if (r[0] > r[4] && r[0] > r[8]) {
      const double s = std::sqrt(1.0 + r[0] - r[4] - r[8]) * 2;
      qw = (r[7] - r[5]) / s;
      qx = 0.25 * s;
      qy = (r[1] + r[3]) / s;
      qz = (r[2] + r[6]) / s;
    } else if (r[4] > r[8]) {
      const double s = std::sqrt(1.0 + r[4] - r[0] - r[8]) * 2;
      qw = (r[2] - r[6]) / s;
      qx = (r[1] + r[3]) / s;
      qy = 0.25 * s;
      qz = (r[5] + r[7]) / s;
    } else {
      const double s = std::sqrt(1.0 + r[8] - r[0] - r[4]) * 2;
      qw = (r[3] - r[1]) / s;
      qx = (r[2] + r[6]) / s;
      qy = (r[5] + r[7]) / s;
      qz = 0.25 * s;
    }
    const double n = std::sqrt(qx * qx + qy * qy + qz * qz + qw * qw);
    return {qx / n, qy / n, qz / n, qw / n};
  }

  static Pose from_quaternion(const std::array<double, 4>& q, const std::array<double, 3>& t) {
    const double x = q[0], y = q[1], z = q[2], w = q[3];
    Pose p;
    p.r = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
           2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
           2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
    p.t = t;
    return p;
  }
};

// --- Trajectories ------------------------------------------------------------------

struct TrajectoryEntry {
  std::size_t index = 0;
  std::array<double, 3> t{};
  std::array<double, 4> q{0, 0, 0, 1};  // x y z w

  Pose pose() const { return Pose::from_quaternion(q, t); }
};

using Trajectory = std::vector<TrajectoryEntry>;

inline TrajectoryEntry make_entry(std::size_t index, const Pose& p) { return {index, p.t, p.quaternion()}; }

inline std::string format_trajectory(const Trajectory& traj) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (const auto& e : traj)
    os << e.index << ' ' << e.t[0] << ' ' << e.t[1] << ' ' << e.t[2] << ' ' << e.q[0] << ' ' << e.q[1] << ' ' << e.q[2]
       << ' ' << e.q[3] << '\n';
  return os.str();
}

inline Trajectory parse_trajectory(const std::string& text) {
  Trajectory traj;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    TrajectoryEntry e;
    if (!(ls >> e.index >> e.t[0] >> e.t[1] >> e.t[2] >> e.q[0] >> e.q[1] >> e.q[2] >> e.q[3]))
      fail(ErrorCode::format, "trajectory line " + std::to_string(line_no) + ": expected 'idx tx ty tz qx qy qz qw'");
    const double n = std::sqrt(e.q[0] * e.q[0] + e.q[1] * e.q[1] + e.q[2] * e.q[2] + e.q[3] * e.q[3]);
    require(std::fabs(n - 1.0) <= 1e-6, ErrorCode::format,
            "trajectory line " + std::to_string(line_no) + ": quaternion is not unit length");
    traj.push_back(e);
  }
  return traj;
}

inline void save_trajectory(const std::string& path, const Trajectory& traj) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io, "cannot write '" + path + "'");
  f << format_trajectory(traj);
}

inline Trajectory load_trajectory(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io, "cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_trajectory(ss.str());
}

/// RMSE of translation error after aligning the estimate's first pose onto
/// the truth's; the anchor frame itself is excluded since alignment zeroes
/// it by construction.
inline double ate_rmse(const Trajectory& estimated, const Trajectory& truth) {
  require(estimated.size() == truth.size(), ErrorCode::invalid_argument, "trajectories differ in length");
  for (std::size_t i = 0; i < truth.size(); ++i)
    require(estimated[i].index == truth[i].index, ErrorCode::invalid_argument, "trajectories are not frame aligned");
  if (truth.size() < 2) return 0.0;
  const Pose align = truth[0].pose() * estimated[0].pose().inverse();
  double sum = 0.0;
  for (std::size_t i = 1; i < truth.size(); ++i) {
    const Pose e = align * estimated[i].pose();
    const auto& g = truth[i].t;
    const double dx = e.t[0] - g[0], dy = e.t[1] - g[1], dz = e.t[2] - g[2];
    sum += dx * dx + dy * dy + dz * dz;
  }
  return std::sqrt(sum / static_cast<double>(truth.size() - 1));
}

// --- Sequence container ------------------------------------------------------------

inline constexpr char kMagic[4] = {'B', 'H', 'D', 'R'};
inline constexpr std::uint32_t kVersion = 1;

struct SequenceHeader {
  std::uint32_t version = kVersion;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t frame_count = 0;

  std::size_t frame_pixels() const { return static_cast<std::size_t>(width) * height; }
  friend bool operator==(const SequenceHeader&, const SequenceHeader&) = default;
};

using DepthFrame = std::vector<std::uint16_t>;

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
}  // namespace detail

inline std::string encode_sequence(std::uint32_t width, std::uint32_t height, const std::vector<DepthFrame>& frames) {
  std::string out(kMagic, 4);
  detail::put_u32(out, kVersion);
  detail::put_u32(out, width);
  detail::put_u32(out, height);
  detail::put_u32(out, static_cast<std::uint32_t>(frames.size()));
  for (const DepthFrame& f : frames) {
    require(f.size() == static_cast<std::size_t>(width) * height, ErrorCode::invalid_argument, "frame size mismatch");
    for (std::uint16_t v : f) {
      out.push_back(static_cast<char>(v & 0xff));
      out.push_back(static_cast<char>(v >> 8));
    }
  }
  return out;
}

inline void write_sequence(const std::string& path, std::uint32_t width, std::uint32_t height,
                           const std::vector<DepthFrame>& frames) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io, "cannot write '" + path + "'");
  const std::string bytes = encode_sequence(width, height, frames);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), ErrorCode::io, "write to '" + path + "' failed");
}

/// Streaming reader; frames are validated one at a time as they are read.
class SequenceReader {
 public:
  explicit SequenceReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    require(in_.good(), ErrorCode::io, "cannot open sequence '" + path + "'");
    unsigned char head[20];
    in_.read(reinterpret_cast<char*>(head), sizeof head);
    require(in_.gcount() == static_cast<std::streamsize>(sizeof head), ErrorCode::format,
            "'" + path + "': truncated header");
    require(std::memcmp(head, kMagic, 4) == 0, ErrorCode::format, "'" + path + "': bad magic (expected BHDR)");
    header_.version = detail::get_u32(head + 4);
    header_.width = detail::get_u32(head + 8);
    header_.height = detail::get_u32(head + 12);
    header_.frame_count = detail::get_u32(head + 16);
    require(header_.version == kVersion, ErrorCode::format,
            "'" + path + "': unsupported version " + std::to_string(header_.version));
    require(header_.frame_count == 0 || header_.frame_pixels() > 0, ErrorCode::format, "'" + path + "': zero-sized frames");
  }

  const SequenceHeader& header() const { return header_; }
  std::size_t position() const { return next_; }

  /// Next frame, or nullopt at end of stream.
  std::optional<DepthFrame> next() {
    if (next_ >= header_.frame_count) return std::nullopt;
    std::vector<unsigned char> raw(header_.frame_pixels() * 2);
    in_.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    require(in_.gcount() == static_cast<std::streamsize>(raw.size()), ErrorCode::format,
            "'" + path_ + "': frame " + std::to_string(next_) + " is truncated");
    DepthFrame f(header_.frame_pixels());
    for (std::size_t i = 0; i < f.size(); ++i)
      f[i] = static_cast<std::uint16_t>(raw[2 * i] | static_cast<unsigned>(raw[2 * i + 1]) << 8);
    ++next_;
    return f;
  }

  std::vector<DepthFrame> read_all() {
    std::vector<DepthFrame> out;
    while (auto f = next()) out.push_back(std::move(*f));
    return out;
  }

 private:
  std::ifstream in_;
  std::string path_;
  SequenceHeader header_;
  std::size_t next_ = 0;
};

// --- Synthetic scene ---------------------------------------------------------------

struct SyntheticScene {
  std::array<double, 3> sphere_center{2.4, 2.4, 2.4};
  double sphere_radius = 0.6;
  std::array<double, 3> room_min{0.3, 0.3, 0.3};
  std::array<double, 3> room_max{4.5, 4.5, 4.5};
  double orbit_radius = 1.5;
  double orbit_height = 0.25;  // amplitude of the vertical bob
  double angular_step = 0.01;  // radians per frame
  double far_plane = 4.0;      // beyond this depth reads as invalid
  double noise_sigma_mm = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    for (int i = 0; i < 3; ++i)
      require(room_min[static_cast<std::size_t>(i)] < room_max[static_cast<std::size_t>(i)], ErrorCode::invalid_argument,
              "room box is empty");
    require(sphere_radius > 0 && orbit_radius > sphere_radius, ErrorCode::invalid_argument,
            "orbit must stay outside the sphere");
    require(noise_sigma_mm >= 0 && far_plane > 0, ErrorCode::invalid_argument, "bad noise or far plane");
  }

  /// Camera-to-world pose for frame i: on a circle around the sphere,
  /// looking at its centre, image y pointing down.
  Pose pose(std::size_t frame) const {
    const double a = angular_step * static_cast<double>(frame);
    const std::array<double, 3> eye{sphere_center[0] + orbit_radius * std::cos(a),
                                    sphere_center[1] + orbit_height * std::sin(3.0 * a),
                                    sphere_center[2] + orbit_radius * std::sin(a)};
    std::array<double, 3> z{sphere_center[0] - eye[0], sphere_center[1] - eye[1], sphere_center[2] - eye[2]};
    auto normalize = [](std::array<double, 3>& v) {
      const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      for (double& x : v) x /= n;
    };
    normalize(z);
    // y = -up made orthogonal to z; x = y cross z keeps the frame right-handed.
    std::array<double, 3> y{0.0 + z[1] * z[0], -1.0 + z[1] * z[1], 0.0 + z[1] * z[2]};
    normalize(y);
    const std::array<double, 3> x{y[1] * z[2] - y[2] * z[1], y[2] * z[0] - y[0] * z[2], y[0] * z[1] - y[1] * z[0]};
    Pose p;
    for (std::size_t i = 0; i < 3; ++i) {
      p.r[3 * i] = x[i];
      p.r[3 * i + 1] = y[i];
      p.r[3 * i + 2] = z[i];
    }
    p.t = eye;
    return p;
  }

  /// Distance along the camera z axis to the first surface hit by the ray
  /// through pixel (u, v), or 0 when nothing is hit within the far plane.
  double depth(const Pose& cam, const kfusion::CameraIntrinsics& k, double u, double v) const {
    const std::array<double, 3> dc{(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0};
    std::array<double, 3> d{};
    for (std::size_t i = 0; i < 3; ++i) d[i] = cam.r[3 * i] * dc[0] + cam.r[3 * i + 1] * dc[1] + cam.r[3 * i + 2] * dc[2];
    const auto& o = cam.t;
    double best = std::numeric_limits<double>::infinity();
    // Sphere: |o + s d - c|^2 = r^2.
    std::array<double, 3> oc{o[0] - sphere_center[0], o[1] - sphere_center[1], o[2] - sphere_center[2]};
    const double a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    const double b = 2 * (oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2]);
    const double c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - sphere_radius * sphere_radius;
    const double disc = b * b - 4 * a * c;
    if (disc >= 0) {
      const double s = (-b - std::sqrt(disc)) / (2 * a);
      if (s > 0) best = s;
    }
    // Room walls seen from inside: nearest exit plane.
    for (std::size_t i = 0; i < 3; ++i) {
      if (d[i] > 0) best = std::min(best, (room_max[i] - o[i]) / d[i]);
      else if (d[i] < 0) best = std::min(best, (room_min[i] - o[i]) / d[i]);
    }
    // d has unit z in camera space, so the ray parameter is the depth.
    if (!std::isfinite(best) || best > far_plane) return 0.0;
    return best;
  }
};

inline DepthFrame render_depth(const SyntheticScene& scene, const kfusion::CameraIntrinsics& k, const Pose& cam,
                               std::mt19937_64* noise_rng = nullptr) {
  DepthFrame f(k.width * k.height);
  std::normal_distribution<double> noise(0.0, scene.noise_sigma_mm > 0 ? scene.noise_sigma_mm : 1.0);
  for (std::size_t y = 0; y < k.height; ++y)
    for (std::size_t x = 0; x < k.width; ++x) {
      const double z = scene.depth(cam, k, static_cast<double>(x), static_cast<double>(y));
      if (z <= 0) continue;
      double mm = z * 1000.0;
      if (noise_rng && scene.noise_sigma_mm > 0) mm += noise(*noise_rng);
      f[y * k.width + x] = static_cast<std::uint16_t>(std::clamp(std::round(mm), 1.0, 65535.0));
    }
  return f;
}

struct SyntheticSequence {
  SequenceHeader header;
  std::vector<DepthFrame> frames;
  Trajectory truth;
};

inline SyntheticSequence generate_synthetic(const SyntheticScene& scene, const kfusion::CameraIntrinsics& k,
                                            std::size_t n_frames) {
  scene.validate();
  k.validate();
  SyntheticSequence s;
  s.header.width = static_cast<std::uint32_t>(k.width);
  s.header.height = static_cast<std::uint32_t>(k.height);
  s.header.frame_count = static_cast<std::uint32_t>(n_frames);
  std::mt19937_64 rng(scene.seed);
  for (std::size_t i = 0; i < n_frames; ++i) {
    const Pose p = scene.pose(i);
    s.frames.push_back(render_depth(scene, k, p, &rng));
    s.truth.push_back(make_entry(i, p));
  }
  return s;
}

}  // namespace hetflow::dataset
