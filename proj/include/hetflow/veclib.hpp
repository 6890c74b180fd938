#pragma once

// Immutable 4-lane single-precision vectors and column-major 4x4 matrices.
//
// Every value is immutable once constructed; there are no mutating members.
// Three-component quantities (points, directions) keep lane 3 at exactly 0.
// The arithmetic is written lane-wise so the compiler can map it onto one
// 128-bit register, but nothing here depends on SIMD for correctness.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string_view>
#include <variant>

#include "hetflow/error.hpp"

namespace hetflow {

class alignas(16) Float4 {
 public:
  constexpr Float4() = default;
  constexpr Float4(float x, float y, float z, float w) : lanes_{x, y, z, w} {}
  constexpr explicit Float4(const std::array<float, 4>& lanes) : lanes_(lanes) {}

  /// A 3-component point or direction; lane 3 is zero.
  static constexpr Float4 point(float x, float y, float z) { return {x, y, z, 0.0f}; }
  static constexpr Float4 splat(float v) { return {v, v, v, v}; }

  constexpr float x() const { return lanes_[0]; }
  constexpr float y() const { return lanes_[1]; }
  constexpr float z() const { return lanes_[2]; }
  constexpr float w() const { return lanes_[3]; }
  constexpr float operator[](std::size_t i) const { return lanes_[i]; }
  constexpr const std::array<float, 4>& lanes() const { return lanes_; }

  bool finite() const {
    return std::isfinite(lanes_[0]) && std::isfinite(lanes_[1]) && std::isfinite(lanes_[2]) &&
           std::isfinite(lanes_[3]);
  }

  friend constexpr bool operator==(const Float4&, const Float4&) = default;

 private:
  std::array<float, 4> lanes_{};
};

static_assert(sizeof(Float4) == 16, "Float4 must be exactly 128 bits");

inline constexpr Float4 add(Float4 a, Float4 b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]}; }
inline constexpr Float4 sub(Float4 a, Float4 b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]}; }
inline constexpr Float4 mul_elem(Float4 a, Float4 b) { return {a[0] * b[0], a[1] * b[1], a[2] * b[2], a[3] * b[3]}; }
inline constexpr Float4 scale(Float4 a, float s) { return {a[0] * s, a[1] * s, a[2] * s, a[3] * s}; }
inline constexpr float dot3(Float4 a, Float4 b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline constexpr float dot4(Float4 a, Float4 b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]; }

inline constexpr Float4 cross3(Float4 a, Float4 b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0], 0.0f};
}

inline float length3(Float4 a) { return std::sqrt(dot3(a, a)); }

/// Unit vector in the direction of `a`, or nothing when |a| <= 1e-12.
inline std::optional<Float4> try_normalize3(Float4 a) {
  const float len = length3(a);
  if (!(len > 1e-12f)) return std::nullopt;
  return Float4{a[0] / len, a[1] / len, a[2] / len, 0.0f};
}

inline Float4 normalize3(Float4 a) {
  auto n = try_normalize3(a);
  if (!n) fail(ErrorCode::degenerate_input, "normalize3 of a near-zero vector");
  return *n;
}

inline constexpr Float4 operator+(Float4 a, Float4 b) { return add(a, b); }
inline constexpr Float4 operator-(Float4 a, Float4 b) { return sub(a, b); }
inline constexpr Float4 operator*(Float4 a, float s) { return scale(a, s); }
inline constexpr Float4 operator*(float s, Float4 a) { return scale(a, s); }

/// Column-major 4x4 matrix; column j is a Float4.
class Mat4 {
 public:
  constexpr Mat4() = default;
  constexpr Mat4(Float4 c0, Float4 c1, Float4 c2, Float4 c3) : cols_{c0, c1, c2, c3} {}

  static constexpr Mat4 identity() {
    return {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
  }

  /// Row-major element list, convenient for literals in tests.
  static constexpr Mat4 from_rows(const std::array<float, 16>& r) {
    return {{r[0], r[4], r[8], r[12]}, {r[1], r[5], r[9], r[13]}, {r[2], r[6], r[10], r[14]}, {r[3], r[7], r[11], r[15]}};
  }

  static constexpr Mat4 translation(float x, float y, float z) {
    return {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {x, y, z, 1}};
  }

  /// Rigid transform from a row-major 3x3 rotation and a translation.
  static constexpr Mat4 rigid(const std::array<float, 9>& rot, Float4 t) {
    return {{rot[0], rot[3], rot[6], 0}, {rot[1], rot[4], rot[7], 0}, {rot[2], rot[5], rot[8], 0}, {t[0], t[1], t[2], 1}};
  }

  constexpr Float4 col(std::size_t j) const { return cols_[j]; }
  constexpr float at(std::size_t row, std::size_t c) const { return cols_[c][row]; }
  constexpr Float4 translation_part() const { return Float4::point(cols_[3][0], cols_[3][1], cols_[3][2]); }

  /// 16 floats, column-major, the in-buffer layout used by the pipeline.
  constexpr std::array<float, 16> to_array() const {
    std::array<float, 16> out{};
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t r = 0; r < 4; ++r) out[c * 4 + r] = cols_[c][r];
    return out;
  }
  static constexpr Mat4 from_array(const float* colmajor) {
    return {{colmajor[0], colmajor[1], colmajor[2], colmajor[3]},
            {colmajor[4], colmajor[5], colmajor[6], colmajor[7]},
            {colmajor[8], colmajor[9], colmajor[10], colmajor[11]},
            {colmajor[12], colmajor[13], colmajor[14], colmajor[15]}};
  }

  bool finite() const { return cols_[0].finite() && cols_[1].finite() && cols_[2].finite() && cols_[3].finite(); }

  friend constexpr bool operator==(const Mat4&, const Mat4&) = default;

 private:
  std::array<Float4, 4> cols_{};
};

inline constexpr Float4 mvmul(const Mat4& m, Float4 v) {
  return m.col(0) * v[0] + m.col(1) * v[1] + m.col(2) * v[2] + m.col(3) * v[3];
}

inline constexpr Mat4 mmmul(const Mat4& a, const Mat4& b) {
  return {mvmul(a, b.col(0)), mvmul(a, b.col(1)), mvmul(a, b.col(2)), mvmul(a, b.col(3))};
}

inline constexpr Mat4 transpose(const Mat4& m) {
  return {{m.at(0, 0), m.at(0, 1), m.at(0, 2), m.at(0, 3)},
          {m.at(1, 0), m.at(1, 1), m.at(1, 2), m.at(1, 3)},
          {m.at(2, 0), m.at(2, 1), m.at(2, 2), m.at(2, 3)},
          {m.at(3, 0), m.at(3, 1), m.at(3, 2), m.at(3, 3)}};
}

inline constexpr Mat4 scale_mat(const Mat4& m, float s) { return {m.col(0) * s, m.col(1) * s, m.col(2) * s, m.col(3) * s}; }

inline constexpr Mat4 operator*(const Mat4& a, const Mat4& b) { return mmmul(a, b); }
inline constexpr Float4 operator*(const Mat4& m, Float4 v) { return mvmul(m, v); }

/// Rotation part only (translation ignored): R * v.
inline constexpr Float4 rotate(const Mat4& m, Float4 v) {
  return m.col(0) * v[0] + m.col(1) * v[1] + m.col(2) * v[2];
}

/// Point transform: R * p + t, lane 3 stays zero.
inline constexpr Float4 transform_point(const Mat4& m, Float4 p) {
  const Float4 r = rotate(m, p) + m.col(3);
  return Float4::point(r[0], r[1], r[2]);
}

/// max |RᵀR - I| over the upper-left 3x3 block.
inline float orthonormality_error(const Mat4& m) {
  float worst = 0.0f;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const float d = dot3(m.col(i), m.col(j)) - (i == j ? 1.0f : 0.0f);
      worst = std::fmax(worst, std::fabs(d));
    }
  return worst;
}

inline bool is_rigid(const Mat4& m, float tol = 1e-5f) {
  if (!m.finite()) return false;
  if (m.at(3, 0) != 0.0f || m.at(3, 1) != 0.0f || m.at(3, 2) != 0.0f || m.at(3, 3) != 1.0f) return false;
  return orthonormality_error(m) < tol;
}

/// Inverse of a rigid transform as (Rᵀ, -Rᵀt); never a general inversion.
inline Mat4 rigid_inverse(const Mat4& m) {
  if (!is_rigid(m)) fail(ErrorCode::not_rigid, "rigid_inverse requires an orthonormal rotation and (0,0,0,1) bottom row");
  const Float4 r0 = Float4::point(m.at(0, 0), m.at(1, 0), m.at(2, 0));
  const Float4 r1 = Float4::point(m.at(0, 1), m.at(1, 1), m.at(2, 1));
  const Float4 r2 = Float4::point(m.at(0, 2), m.at(1, 2), m.at(2, 2));
  const Float4 t = m.translation_part();
  const Float4 ti = Float4::point(-dot3(r0, t), -dot3(r1, t), -dot3(r2, t));
  return {Float4::point(r0[0], r1[0], r2[0]), Float4::point(r0[1], r1[1], r2[1]), Float4::point(r0[2], r1[2], r2[2]),
          Float4{ti[0], ti[1], ti[2], 1.0f}};
}

// --- Operation catalog -----------------------------------------------------

/// The frozen set of 13 vector and matrix operations.
enum class OpKind {
  add,
  sub,
  mul_elem,
  scale,
  dot3,
  dot4,
  cross3,
  length3,
  normalize3,
  mvmul,
  mmmul,
  transpose,
  scale_mat,
};

inline constexpr std::size_t kOpCount = 13;

struct OpInfo {
  OpKind kind;
  std::string_view name;
  bool matrix;
};

inline constexpr std::array<OpInfo, kOpCount> op_catalog() {
  return {{{OpKind::add, "add", false},
           {OpKind::sub, "sub", false},
           {OpKind::mul_elem, "mul_elem", false},
           {OpKind::scale, "scale", false},
           {OpKind::dot3, "dot3", false},
           {OpKind::dot4, "dot4", false},
           {OpKind::cross3, "cross3", false},
           {OpKind::length3, "length3", false},
           {OpKind::normalize3, "normalize3", false},
           {OpKind::mvmul, "mvmul", true},
           {OpKind::mmmul, "mmmul", true},
           {OpKind::transpose, "transpose", true},
           {OpKind::scale_mat, "scale_mat", true}}};
}

using VecOperand = std::variant<Float4, float>;
using VecResult = std::variant<Float4, float>;
using MatOperand = std::variant<std::monostate, Mat4, Float4, float>;
using MatResult = std::variant<Mat4, Float4>;

namespace detail {
inline bool finite_operand(const VecOperand& v) {
  return std::visit([](auto x) {
    if constexpr (std::is_same_v<decltype(x), float>) return std::isfinite(x);
    else return x.finite();
  }, v);
}
template <class T>
T operand_as(const auto& v, std::string_view op) {
  if (const T* p = std::get_if<T>(&v)) return *p;
  fail(ErrorCode::invalid_argument, std::string("wrong operand type for ") + std::string(op));
}
}  // namespace detail

/// Checked dispatch over the vector half of the catalog. Unary kinds ignore `b`.
inline VecResult vector_op(OpKind kind, Float4 a, VecOperand b = Float4{}) {
  if (!a.finite() || !detail::finite_operand(b)) fail(ErrorCode::non_finite, "vector_op input");
  switch (kind) {
    case OpKind::add: return add(a, detail::operand_as<Float4>(b, "add"));
    case OpKind::sub: return sub(a, detail::operand_as<Float4>(b, "sub"));
    case OpKind::mul_elem: return mul_elem(a, detail::operand_as<Float4>(b, "mul_elem"));
    case OpKind::scale: return scale(a, detail::operand_as<float>(b, "scale"));
    case OpKind::dot3: return dot3(a, detail::operand_as<Float4>(b, "dot3"));
    case OpKind::dot4: return dot4(a, detail::operand_as<Float4>(b, "dot4"));
    case OpKind::cross3: return cross3(a, detail::operand_as<Float4>(b, "cross3"));
    case OpKind::length3: return length3(a);
    case OpKind::normalize3: return normalize3(a);
    default: fail(ErrorCode::invalid_argument, "matrix kind passed to vector_op");
  }
}

inline MatResult matrix_op(OpKind kind, const Mat4& m, MatOperand x = std::monostate{}) {
  const bool finite = m.finite() && std::visit([](const auto& v) {
    using V = std::decay_t<decltype(v)>;
    if constexpr (std::is_same_v<V, std::monostate>) return true;
    else if constexpr (std::is_same_v<V, float>) return static_cast<bool>(std::isfinite(v));
    else return v.finite();
  }, x);
  if (!finite) fail(ErrorCode::non_finite, "matrix_op input");
  switch (kind) {
    case OpKind::mvmul: return mvmul(m, detail::operand_as<Float4>(x, "mvmul"));
    case OpKind::mmmul: return mmmul(m, detail::operand_as<Mat4>(x, "mmmul"));
    case OpKind::transpose: return transpose(m);
    case OpKind::scale_mat: return scale_mat(m, detail::operand_as<float>(x, "scale_mat"));
    default: fail(ErrorCode::invalid_argument, "vector kind passed to matrix_op");
  }
}

}  // namespace hetflow
