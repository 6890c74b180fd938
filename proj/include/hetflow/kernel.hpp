#pragma once

// Kernel registry: named host functions over a linearised index space.
//
// A kernel body is a pure function of (index range, read buffers, params) that
// writes only its write buffers. Every index in a write-only buffer's range
// must be written by the body; guarded and partially-writing kernels must list
// the buffer in both their read and write sets.

#include <algorithm>
#include <array>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hetflow/buffer.hpp"
#include "hetflow/error.hpp"

namespace hetflow {

/// 1 to 3 extents, each >= 1. Linear index = x + ex*(y + ey*z).
struct IndexSpace {
  std::array<std::size_t, 3> extents{1, 1, 1};
  std::size_t dims = 1;

  IndexSpace() = default;
  IndexSpace(std::initializer_list<std::size_t> e) {
    require(e.size() >= 1 && e.size() <= 3, ErrorCode::invalid_argument, "index space needs 1 to 3 extents");
    dims = e.size();
    std::copy(e.begin(), e.end(), extents.begin());
  }
  explicit IndexSpace(const std::vector<std::size_t>& e) {
    require(e.size() >= 1 && e.size() <= 3, ErrorCode::invalid_argument, "index space needs 1 to 3 extents");
    dims = e.size();
    std::copy(e.begin(), e.end(), extents.begin());
  }

  std::size_t size() const { return extents[0] * extents[1] * extents[2]; }
  bool valid() const { return extents[0] >= 1 && extents[1] >= 1 && extents[2] >= 1; }
  friend bool operator==(const IndexSpace&, const IndexSpace&) = default;
};

/// What a kernel sees during one launch.
struct KernelArgs {
  std::span<const std::span<const std::byte>> reads;
  std::span<const std::span<std::byte>> writes;
  std::span<const double> params;
  IndexSpace space;

  template <class T>
  std::span<const T> in(std::size_t slot) const { return as_span<T>(reads[slot]); }
  template <class T>
  std::span<T> out(std::size_t slot) const { return as_span<T>(writes[slot]); }
  double param(std::size_t i) const { return params[i]; }
  float paramf(std::size_t i) const { return static_cast<float>(params[i]); }
  std::size_t parami(std::size_t i) const { return static_cast<std::size_t>(params[i]); }
};

using KernelBody = std::function<void(const KernelArgs&, std::size_t begin, std::size_t end)>;
/// Runs once, single-threaded, after every index has been processed.
using KernelEpilogue = std::function<void(const KernelArgs&)>;

struct KernelContract {
  std::size_t reads = 0;
  std::size_t writes = 0;
  std::size_t params = 0;
  /// One independent output per index with identical index space to its
  /// producer; required for fusion.
  bool elementwise = false;
  /// Modeled work per index, used by the simulated accelerator cost model.
  double ops_per_item = 1.0;
};

struct KernelEntry {
  std::string name;
  KernelContract contract;
  KernelBody body;
  KernelEpilogue epilogue;
};

class KernelRegistry {
 public:
  void register_kernel(const std::string& name, KernelContract contract, KernelBody body, KernelEpilogue epilogue = {}) {
    require(!frozen_, ErrorCode::busy, "registry is frozen; cannot register '" + name + "'");
    require(!name.empty(), ErrorCode::invalid_argument, "kernel name is empty");
    require(static_cast<bool>(body), ErrorCode::invalid_argument, "kernel '" + name + "' has no body");
    require(!kernels_.contains(name), ErrorCode::duplicate, "kernel '" + name + "' already registered");
    kernels_.emplace(name, KernelEntry{name, contract, std::move(body), std::move(epilogue)});
  }

  /// Declares that `fused` computes `second(first(...))` with the fused slot
  /// layout: first's reads, then second's reads minus the intermediate;
  /// second's writes; first's params then second's params.
  void register_fusion(const std::string& first, const std::string& second, const std::string& fused) {
    require(!frozen_, ErrorCode::busy, "registry is frozen");
    at(first);
    at(second);
    at(fused);
    require(!fusions_.contains({first, second}), ErrorCode::duplicate, "fusion " + first + "+" + second);
    fusions_.emplace(std::pair{first, second}, fused);
  }

  const KernelEntry* find(const std::string& name) const {
    auto it = kernels_.find(name);
    return it == kernels_.end() ? nullptr : &it->second;
  }

  const KernelEntry& at(const std::string& name) const {
    const KernelEntry* k = find(name);
    if (!k) fail(ErrorCode::unknown_kernel, "'" + name + "'");
    return *k;
  }

  std::optional<std::string> fused_of(const std::string& first, const std::string& second) const {
    auto it = fusions_.find({first, second});
    if (it == fusions_.end()) return std::nullopt;
    return it->second;
  }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  std::size_t size() const { return kernels_.size(); }

 private:
  std::map<std::string, KernelEntry> kernels_;
  std::map<std::pair<std::string, std::string>, std::string> fusions_;
  bool frozen_ = false;
};

/// In-place pairwise reduction with a fixed combination tree: at stride s,
/// element i absorbs element i+s for every i that is a multiple of 2s. The
/// tree depends only on the partial count, never on how many workers filled
/// the partials, so the result is bitwise reproducible.
template <class T, class Combine>
T tree_reduce(std::span<T> partials, Combine combine) {
  require(!partials.empty(), ErrorCode::invalid_argument, "tree_reduce of nothing");
  const std::size_t n = partials.size();
  for (std::size_t stride = 1; stride < n; stride *= 2)
    for (std::size_t i = 0; i + stride < n; i += 2 * stride) partials[i] = combine(partials[i], partials[i + stride]);
  return partials[0];
}

}  // namespace hetflow
