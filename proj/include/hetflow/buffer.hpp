#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <new>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hetflow/error.hpp"

namespace hetflow {

enum class ElementType : std::uint8_t { u8, u16, f32 };

inline constexpr std::size_t element_size(ElementType t) {
  switch (t) {
    case ElementType::u8: return 1;
    case ElementType::u16: return 2;
    case ElementType::f32: return 4;
  }
  return 0;
}

inline constexpr const char* to_string(ElementType t) {
  switch (t) {
    case ElementType::u8: return "u8";
    case ElementType::u16: return "u16";
    case ElementType::f32: return "f32";
  }
  return "?";
}

/// Opaque, dense buffer handle. Values are assigned 0..n-1 by BufferTable.
struct BufferId {
  std::uint32_t value = 0;
  friend constexpr auto operator<=>(BufferId, BufferId) = default;
};

struct BufferDesc {
  BufferId id;
  std::string name;
  ElementType element = ElementType::f32;
  std::vector<std::size_t> extents;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto e : extents) n *= e;
    return n;
  }
  std::size_t bytes() const { return count() * element_size(element); }
};

class BufferTable {
 public:
  BufferId declare(std::string name, ElementType element, std::vector<std::size_t> extents) {
    require(!extents.empty() && extents.size() <= 3, ErrorCode::invalid_argument,
            "buffer '" + name + "' needs 1 to 3 extents");
    for (auto e : extents) require(e > 0, ErrorCode::invalid_argument, "buffer '" + name + "' has a zero extent");
    require(!by_name_.contains(name), ErrorCode::duplicate, "buffer '" + name + "' already declared");
    const BufferId id{static_cast<std::uint32_t>(descs_.size())};
    by_name_.emplace(name, id);
    descs_.push_back(BufferDesc{id, std::move(name), element, std::move(extents)});
    return id;
  }

  bool contains(BufferId id) const { return id.value < descs_.size(); }

  const BufferDesc& at(BufferId id) const {
    require(contains(id), ErrorCode::unknown_buffer, "buffer id " + std::to_string(id.value));
    return descs_[id.value];
  }

  std::optional<BufferId> find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const { return descs_.size(); }
  const std::vector<BufferDesc>& all() const { return descs_; }

 private:
  std::vector<BufferDesc> descs_;
  std::unordered_map<std::string, BufferId> by_name_;
};

/// Zero-initialised, 64-byte aligned byte storage for one buffer on one device.
class AlignedBytes {
 public:
  AlignedBytes() = default;
  explicit AlignedBytes(std::size_t n) : size_(n), data_(allocate(n)) { std::memset(data_.get(), 0, n); }

  std::span<std::byte> span() { return {data_.get(), size_}; }
  std::span<const std::byte> span() const { return {data_.get(), size_}; }
  std::size_t size() const { return size_; }

 private:
  struct Free {
    void operator()(std::byte* p) const { ::operator delete[](p, std::align_val_t{64}); }
  };
  static std::byte* allocate(std::size_t n) {
    return static_cast<std::byte*>(::operator new[](n == 0 ? 1 : n, std::align_val_t{64}));
  }

  std::size_t size_ = 0;
  std::unique_ptr<std::byte[], Free> data_;
};

/// Typed views over raw buffer bytes.
template <class T>
std::span<T> as_span(std::span<std::byte> bytes) {
  return {reinterpret_cast<T*>(bytes.data()), bytes.size() / sizeof(T)};
}
template <class T>
std::span<const T> as_span(std::span<const std::byte> bytes) {
  return {reinterpret_cast<const T*>(bytes.data()), bytes.size() / sizeof(T)};
}

}  // namespace hetflow
