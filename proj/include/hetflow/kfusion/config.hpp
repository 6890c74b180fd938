#pragma once

#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "hetflow/config.hpp"
#include "hetflow/error.hpp"

namespace hetflow::kfusion {

inline constexpr std::size_t kMaxLevels = 4;

struct CameraIntrinsics {
  float fx = 0, fy = 0, cx = 0, cy = 0;
  std::size_t width = 0, height = 0;

  /// Default pinhole scaled from a 640-wide sensor with f = 525 px.
  static CameraIntrinsics for_size(std::size_t w, std::size_t h) {
    CameraIntrinsics k;
    k.width = w;
    k.height = h;
    k.fx = k.fy = static_cast<float>(static_cast<double>(w) * 525.0 / 640.0);
    k.cx = static_cast<float>(w) / 2.0f;
    k.cy = static_cast<float>(h) / 2.0f;
    return k;
  }

  void validate() const {
    require(fx > 0 && fy > 0, ErrorCode::invalid_argument, "focal lengths must be positive");
    require(width > 0 && height > 0, ErrorCode::invalid_argument, "image size must be positive");
    require(cx >= 0 && cx < static_cast<float>(width) && cy >= 0 && cy < static_cast<float>(height),
            ErrorCode::invalid_argument, "principal point outside the image");
  }

  /// Intrinsics of pyramid level `l` (each level halves the resolution;
  /// pixel centres shift by half a pixel).
  CameraIntrinsics level(std::size_t l) const {
    CameraIntrinsics k = *this;
    for (std::size_t i = 0; i < l; ++i) {
      k.fx /= 2;
      k.fy /= 2;
      k.cx = (k.cx + 0.5f) / 2 - 0.5f;
      k.cy = (k.cy + 0.5f) / 2 - 0.5f;
      k.width /= 2;
      k.height /= 2;
    }
    return k;
  }

  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

struct KFusionConfig {
  std::size_t width = 160;
  std::size_t height = 120;
  // Zero means "derive from the image size".
  float fx = 0, fy = 0, cx = 0, cy = 0;

  std::size_t pyramid_levels = 3;
  std::array<std::size_t, kMaxLevels> icp_iterations{10, 5, 4, 4};  // fine to coarse
  float icp_dist = 0.1f;
  float icp_normal = 0.8f;
  float icp_twist_eps = 1e-5f;
  float rmse_max = 2e-2f;
  float matched_min = 0.1f;

  std::size_t volume_resolution = 64;
  float volume_size = 4.8f;
  float mu = 0.1f;
  float w_max = 100.0f;

  float raycast_step = 0.0f;  // zero: mu / 2
  float near_plane = 0.4f;
  float far_plane = 4.0f;

  int bilateral_radius = 2;
  float sigma_spatial = 1.5f;
  float sigma_range = 0.1f;

  bool fuse_preprocess = false;
  unsigned executor_workers = 1;

  CameraIntrinsics intrinsics() const {
    CameraIntrinsics k = CameraIntrinsics::for_size(width, height);
    if (fx > 0) k.fx = fx;
    if (fy > 0) k.fy = fy;
    if (cx > 0) k.cx = cx;
    if (cy > 0) k.cy = cy;
    return k;
  }

  float step() const { return raycast_step > 0 ? raycast_step : mu * 0.5f; }
  float voxel_size() const { return volume_size / static_cast<float>(volume_resolution); }

  void validate() const {
    intrinsics().validate();
    require(pyramid_levels >= 1 && pyramid_levels <= kMaxLevels, ErrorCode::invalid_argument,
            "pyramid_levels must be in [1, " + std::to_string(kMaxLevels) + "]");
    const std::size_t div = std::size_t{1} << (pyramid_levels - 1);
    require(width % div == 0 && height % div == 0, ErrorCode::invalid_argument,
            "image size must be divisible by 2^(levels-1) for the pyramid");
    for (std::size_t l = 0; l < pyramid_levels; ++l)
      require(icp_iterations[l] >= 1, ErrorCode::invalid_argument, "ICP iteration caps must be >= 1");
    require(volume_resolution >= 2 && volume_size > 0 && mu > 0 && w_max >= 1, ErrorCode::invalid_argument,
            "bad volume parameters");
    require(near_plane > 0 && far_plane > near_plane && step() > 0, ErrorCode::invalid_argument, "bad raycast range");
    require(bilateral_radius >= 1 && sigma_spatial > 0 && sigma_range > 0, ErrorCode::invalid_argument,
            "bilateral radius must be >= 1 and sigmas > 0");
    require(icp_dist > 0 && icp_twist_eps > 0 && rmse_max > 0, ErrorCode::invalid_argument, "bad ICP thresholds");
    require(executor_workers >= 1, ErrorCode::invalid_argument, "executor_workers must be >= 1");
  }

  /// Applies overrides; unknown keys are rejected.
  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) {
      auto u = [&] {
        const long long x = parse_int(k, v);
        require(x >= 0, ErrorCode::format, "'" + k + "' must be non-negative");
        return static_cast<std::size_t>(x);
      };
      auto f = [&] { return static_cast<float>(parse_double(k, v)); };
      if (k == "width") width = u();
      else if (k == "height") height = u();
      else if (k == "fx") fx = f();
      else if (k == "fy") fy = f();
      else if (k == "cx") cx = f();
      else if (k == "cy") cy = f();
      else if (k == "pyramid_levels") pyramid_levels = u();
      else if (k == "icp_iterations") {
        std::istringstream in(v);
        std::string part;
        std::size_t l = 0;
        while (std::getline(in, part, ',')) {
          require(l < kMaxLevels, ErrorCode::format, "too many icp_iterations entries");
          icp_iterations[l++] = static_cast<std::size_t>(parse_int(k, trim(part)));
        }
      } else if (k == "icp_dist") icp_dist = f();
      else if (k == "icp_normal") icp_normal = f();
      else if (k == "icp_twist_eps") icp_twist_eps = f();
      else if (k == "rmse_max") rmse_max = f();
      else if (k == "matched_min") matched_min = f();
      else if (k == "volume_resolution") volume_resolution = u();
      else if (k == "volume_size") volume_size = f();
      else if (k == "mu") mu = f();
      else if (k == "w_max") w_max = f();
      else if (k == "raycast_step") raycast_step = f();
      else if (k == "near_plane") near_plane = f();
      else if (k == "far_plane") far_plane = f();
      else if (k == "bilateral_radius") bilateral_radius = static_cast<int>(parse_int(k, v));
      else if (k == "sigma_spatial") sigma_spatial = f();
      else if (k == "sigma_range") sigma_range = f();
      else if (k == "fuse_preprocess") fuse_preprocess = parse_bool(k, v);
      else if (k == "executor_workers") executor_workers = static_cast<unsigned>(u());
      else fail(ErrorCode::format, "unknown config key '" + k + "'");
    }
  }

  /// Every setting as key/value text, suitable for echoing into reports.
  KeyValues snapshot() const {
    auto num = [](double x) {
      std::ostringstream os;
      os.precision(9);
      os << x;
      return os.str();
    };
    const CameraIntrinsics k = intrinsics();
    std::string iters;
    for (std::size_t l = 0; l < pyramid_levels; ++l) iters += (l ? "," : "") + std::to_string(icp_iterations[l]);
    return {{"width", std::to_string(width)},
            {"height", std::to_string(height)},
            {"fx", num(k.fx)},
            {"fy", num(k.fy)},
            {"cx", num(k.cx)},
            {"cy", num(k.cy)},
            {"pyramid_levels", std::to_string(pyramid_levels)},
            {"icp_iterations", iters},
            {"icp_dist", num(icp_dist)},
            {"icp_normal", num(icp_normal)},
            {"icp_twist_eps", num(icp_twist_eps)},
            {"rmse_max", num(rmse_max)},
            {"matched_min", num(matched_min)},
            {"volume_resolution", std::to_string(volume_resolution)},
            {"volume_size", num(volume_size)},
            {"mu", num(mu)},
            {"w_max", num(w_max)},
            {"raycast_step", num(step())},
            {"near_plane", num(near_plane)},
            {"far_plane", num(far_plane)},
            {"bilateral_radius", std::to_string(bilateral_radius)},
            {"sigma_spatial", num(sigma_spatial)},
            {"sigma_range", num(sigma_range)},
            {"fuse_preprocess", fuse_preprocess ? "true" : "false"},
            {"executor_workers", std::to_string(executor_workers)}};
  }
};

}  // namespace hetflow::kfusion
