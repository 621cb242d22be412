#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <new>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cta/errors.hpp"
#include "cta/rng.hpp"

namespace cta {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "f32 or f64 only");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline void check_extents(const Shape& shape) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("zero extent in shape " + to_string(shape));
}

/// Row-major strides (last axis contiguous).
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

/// Checked conversion from signed extents, as read from configs and files.
inline Shape make_shape(std::initializer_list<long long> extents) {
  Shape s;
  for (auto e : extents) {
    if (e <= 0) throw ShapeError("non-positive extent " + std::to_string(e));
    s.push_back(static_cast<std::size_t>(e));
  }
  return s;
}

/// Dense row-major array owning its buffer. Copies are deep.
/// 64-byte aligned storage. Vectorized kernels choose their peeling from
/// the buffer address, so a fixed alignment keeps results bit-reproducible
/// across runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(numel_of(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}

  Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (numel_of(shape_) != data_.size())
      throw ShapeError("buffer of " + std::to_string(data_.size()) + " elements for shape " +
                       to_string(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor constant(Shape shape, T c) { return Tensor(std::move(shape), c); }

  static Tensor uniform(Shape shape, double lo, double hi, std::uint64_t seed) {
    Tensor t(std::move(shape));
    CounterRng rng(seed);
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape shape, double mean, double stddev, std::uint64_t seed) {
    Tensor t(std::move(shape));
    CounterRng rng(seed);
    for (auto& v : t.data_) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T> vec() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same buffer under a new shape of equal element count.
  Tensor reshaped(Shape shape) const {
    check_extents(shape);
    if (numel_of(shape) != data_.size())
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, Buffer<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Bitwise equality of shape and payload.
  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i >= shape_[axis]) throw ShapeError("index out of range");
      off = off * shape_[axis++] + i;
    }
    return off;
  }

  Shape shape_;
  Buffer<T> data_;
};

// Little-endian serialization: u8 dtype tag, u32 rank, u64 extents, raw payload.
namespace io {

template <typename U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  if constexpr (std::endian::native == std::endian::big && sizeof(U) > 1) {
    auto bytes = std::bit_cast<std::array<char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(U));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
}

template <typename U>
U read_le(std::istream& is, const char* what) {
  std::array<char, sizeof(U)> bytes{};
  if (!is.read(bytes.data(), sizeof(U)))
    throw FormatError(std::string("truncated input while reading ") + what);
  if constexpr (std::endian::native == std::endian::big && sizeof(U) > 1)
    std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<U>(bytes);
}

}  // namespace io

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) io::write_le<std::uint64_t>(os, e);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  } else {
    for (auto v : t.span()) io::write_le<T>(os, v);
  }
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  const auto tag = io::read_le<std::uint8_t>(is, "tensor dtype");
  if (tag > 1) throw FormatError("unknown tensor dtype tag " + std::to_string(tag));
  const auto rank = io::read_le<std::uint32_t>(is, "tensor rank");
  if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = io::read_le<std::uint64_t>(is, "tensor extent");
    if (e == 0 || e > (std::uint64_t{1} << 40)) throw FormatError("invalid tensor extent");
  }
  const std::size_t n = numel_of(shape);
  Buffer<T> data(n);
  auto read_payload = [&](auto tag_type) {
    using S = decltype(tag_type);
    std::vector<S> raw(n);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(S))))
      throw FormatError("truncated tensor payload");
    if constexpr (std::endian::native == std::endian::big) {
      for (auto& v : raw) {
        auto b = std::bit_cast<std::array<char, sizeof(S)>>(v);
        std::reverse(b.begin(), b.end());
        v = std::bit_cast<S>(b);
      }
    }
    std::copy(raw.begin(), raw.end(), data.begin());
  };
  if (tag == 0) read_payload(float{});
  else read_payload(double{});
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace cta
