#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cta/errors.hpp"
#include "cta/rng.hpp"
#include "cta/tensor.hpp"

namespace cta {

enum class DatasetKind { cifar10, cifar100, synthetic };
enum class Split { train, test };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::cifar100: return "cifar100";
    case DatasetKind::synthetic: return "synthetic";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "cifar10") return DatasetKind::cifar10;
  if (s == "cifar100") return DatasetKind::cifar100;
  if (s == "synthetic" || s == "synth") return DatasetKind::synthetic;
  throw ConfigError("unknown dataset kind '" + s + "' (expected cifar10, cifar100, synthetic)");
}

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train or test)");
}

/// Images stored planar per sample: [n, channels, size, size], values in [0, 1].
struct Dataset {
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::size_t num_classes = 10;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * image_size * image_size; }
  std::span<const float> image(std::size_t i) const { return {pixels.data() + i * image_numel(), image_numel()}; }
};

template <typename T>
struct ImageBatch {
  Tensor<T> images;  // [B, C, H, W]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

template <typename T>
ImageBatch<T> gather(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("empty batch");
  const std::size_t per = ds.image_numel();
  ImageBatch<T> b{Tensor<T>({indices.size(), ds.channels, ds.image_size, ds.image_size}), {}};
  b.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto i = indices[k];
    if (i >= ds.size()) throw DataError("sample index " + std::to_string(i) + " out of range");
    const auto src = ds.image(i);
    std::copy(src.begin(), src.end(), b.images.data() + k * per);
    b.labels.push_back(ds.labels[i]);
  }
  return b;
}

// ---------------------------------------------------------------------------
// CIFAR binary format

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;

inline std::size_t cifar_record_size(DatasetKind kind) {
  return kind == DatasetKind::cifar100 ? kCifarPixels + 2 : kCifarPixels + 1;
}

/// Appends every record of one CIFAR binary file. A record is the label byte
/// (CIFAR-100: coarse byte then fine byte, fine is kept) followed by 3072 pixel
/// bytes in R, G, B planes of 32x32 row-major.
inline void read_cifar_file(const std::filesystem::path& path, DatasetKind kind, Dataset& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t rec = cifar_record_size(kind);
  if (bytes.size() % rec != 0) {
    const std::size_t offset = bytes.size() / rec * rec;
    throw FormatError(path.string() + ": truncated record at byte offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() - offset) + " trailing bytes, record size " + std::to_string(rec) + ")");
  }
  const std::size_t labels_per = rec - kCifarPixels;
  const int classes = kind == DatasetKind::cifar100 ? 100 : 10;
  const std::size_t n = bytes.size() / rec;
  out.pixels.reserve(out.pixels.size() + n * kCifarPixels);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* p = bytes.data() + r * rec;
    const int label = p[labels_per - 1];
    if (label >= classes)
      throw FormatError(path.string() + ": label " + std::to_string(label) + " out of range at byte offset " +
                        std::to_string(r * rec + labels_per - 1));
    out.labels.push_back(label);
    for (std::size_t k = 0; k < kCifarPixels; ++k) out.pixels.push_back(static_cast<float>(p[labels_per + k]) / 255.0f);
  }
}

/// `<root>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin` or
/// `<root>/cifar-100-binary/{train,test}.bin`.
inline std::vector<std::filesystem::path> cifar_files(const std::filesystem::path& root, DatasetKind kind, Split split) {
  std::vector<std::filesystem::path> files;
  if (kind == DatasetKind::cifar10) {
    const auto dir = root / "cifar-10-batches-bin";
    if (split == Split::train)
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
      files.push_back(dir / "test_batch.bin");
  } else if (kind == DatasetKind::cifar100) {
    files.push_back(root / "cifar-100-binary" / (split == Split::train ? "train.bin" : "test.bin"));
  } else {
    throw ConfigError("cifar_files called for a synthetic dataset");
  }
  return files;
}

inline Dataset load_cifar(const std::filesystem::path& root, DatasetKind kind, Split split) {
  Dataset ds;
  ds.num_classes = kind == DatasetKind::cifar100 ? 100 : 10;
  for (const auto& f : cifar_files(root, kind, split)) {
    if (!std::filesystem::exists(f)) throw DataError("missing dataset file " + f.string());
    read_cifar_file(f, kind, ds);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Class means lie on a circle around mid-grey, evenly spaced in hue.
inline std::array<double, 3> synth_class_color(std::size_t cls, std::size_t num_classes) {
  std::array<double, 3> c{};
  const double phase = static_cast<double>(cls) / static_cast<double>(num_classes);
  for (std::size_t ch = 0; ch < 3; ++ch)
    c[ch] = 0.5 + 0.35 * std::cos(2.0 * std::numbers::pi * (phase + static_cast<double>(ch) / 3.0));
  return c;
}

/// Class-conditional images: per-class mean colour, a per-image brightness
/// shift, per-pixel Gaussian noise (sd 0.1), clamped to [0, 1]. Labels cycle
/// through the classes.
inline Dataset synth_dataset(std::size_t num_classes, std::size_t n, std::size_t image_size, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (n < num_classes) throw ConfigError("synthetic dataset needs n >= num_classes");
  Dataset ds;
  ds.num_classes = num_classes;
  ds.image_size = image_size;
  ds.pixels.resize(n * ds.image_numel());
  ds.labels.resize(n);
  const std::size_t hw = image_size * image_size;
  for (std::size_t i = 0; i < n; ++i) {
    const auto cls = i % num_classes;
    ds.labels[i] = static_cast<int>(cls);
    CounterRng rng(CounterRng::derive(seed, i));
    const auto color = synth_class_color(cls, num_classes);
    const double shift = rng.uniform(-0.05, 0.05);
    float* img = ds.pixels.data() + i * ds.image_numel();
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t k = 0; k < hw; ++k)
        img[ch * hw + k] = static_cast<float>(std::clamp(color[ch] + shift + rng.normal(0.0, 0.1), 0.0, 1.0));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Subsets and batching

/// `size` samples with per-class quotas size/K (the first size%K classes get
/// one more), drawn by a seeded shuffle within each class; original order kept.
inline Dataset stratified_subset(const Dataset& ds, std::size_t size, std::uint64_t seed) {
  if (size > ds.size())
    throw DataError("subset size " + std::to_string(size) + " exceeds dataset size " + std::to_string(ds.size()));
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    const std::size_t quota = size / ds.num_classes + (c < size % ds.num_classes ? 1 : 0);
    auto& idx = by_class[c];
    if (quota > idx.size())
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " samples, subset needs " +
                      std::to_string(quota));
    CounterRng rng(CounterRng::derive(seed, c));
    for (std::size_t i = 0; i < quota; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(quota));
  }
  std::sort(keep.begin(), keep.end());
  Dataset out;
  out.channels = ds.channels;
  out.image_size = ds.image_size;
  out.num_classes = ds.num_classes;
  out.pixels.reserve(keep.size() * ds.image_numel());
  for (auto i : keep) {
    const auto img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

/// Index lists for one epoch; the final batch may be short. Without a seed the
/// order is 0..n-1.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                           std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle_seed) {
    CounterRng rng(*shuffle_seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  return out;
}

template <typename T>
std::vector<ImageBatch<T>> batch_iter(const Dataset& ds, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed) {
  std::vector<ImageBatch<T>> out;
  for (const auto& idx : batch_indices(ds.size(), batch_size, shuffle_seed)) out.push_back(gather<T>(ds, idx));
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation and resizing

struct AugmentFlags {
  bool crop = false;
  bool flip = false;
  bool rotate = false;
  bool jitter = false;
  std::size_t pad = 4;
  double flip_prob = 0.5;
  double max_rotation_deg = 15.0;
  double jitter_lo = 0.8;
  double jitter_hi = 1.2;

  static AugmentFlags all() { return {true, true, true, true}; }
  bool any() const { return crop || flip || rotate || jitter; }
};

namespace detail {

inline std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

/// Bilinear sample of one plane at (y, x); zero outside [0, h-1] x [0, w-1].
template <typename T>
T bilinear_zero(const T* plane, std::size_t h, std::size_t w, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double ty = y - fy, tx = x - fx;
  auto at = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
    return static_cast<double>(plane[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)]);
  };
  return static_cast<T>((1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                        ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1)));
}

}  // namespace detail

/// Mirrors every image left-right.
template <typename T>
Tensor<T> hflip(const Tensor<T>& images) {
  Tensor<T> out = images;
  const std::size_t w = images.dim(3), rows = images.numel() / w;
  for (std::size_t r = 0; r < rows; ++r) std::reverse(out.data() + r * w, out.data() + (r + 1) * w);
  return out;
}

/// Fixed order: reflect-pad + random crop, horizontal flip, rotation (bilinear,
/// zero fill), per-channel colour scale clamped to [0, 1]. Image k draws from
/// stream derive(seed, k).
template <typename T>
ImageBatch<T> augment(const ImageBatch<T>& batch, const AugmentFlags& flags, std::uint64_t seed) {
  ImageBatch<T> out = batch;
  if (!flags.any()) return out;
  auto& img = out.images;
  const std::size_t b = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3), hw = h * w;
  std::vector<T> scratch(c * hw);
  for (std::size_t k = 0; k < b; ++k) {
    CounterRng rng(CounterRng::derive(seed, k));
    T* base = img.data() + k * c * hw;
    if (flags.crop) {
      const long pad = static_cast<long>(flags.pad);
      const long oy = static_cast<long>(rng.below(2 * flags.pad + 1)) - pad;
      const long ox = static_cast<long>(rng.below(2 * flags.pad + 1)) - pad;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            scratch[ch * hw + y * w + x] = base[ch * hw + detail::reflect_index(static_cast<long>(y) + oy, static_cast<long>(h)) * w +
                                                detail::reflect_index(static_cast<long>(x) + ox, static_cast<long>(w))];
      std::copy(scratch.begin(), scratch.end(), base);
    }
    if (flags.flip && rng.next_double() < flags.flip_prob)
      for (std::size_t r = 0; r < c * h; ++r) std::reverse(base + r * w, base + (r + 1) * w);
    if (flags.rotate) {
      const double theta = rng.uniform(-flags.max_rotation_deg, flags.max_rotation_deg) * std::numbers::pi / 180.0;
      const double cs = std::cos(theta), sn = std::sin(theta);
      const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            // inverse map output pixel to its source
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            const double sy = cy + cs * dy - sn * dx, sx = cx + sn * dy + cs * dx;
            scratch[ch * hw + y * w + x] = detail::bilinear_zero(base + ch * hw, h, w, sy, sx);
          }
      std::copy(scratch.begin(), scratch.end(), base);
    }
    if (flags.jitter)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double s = rng.uniform(flags.jitter_lo, flags.jitter_hi);
        for (std::size_t i = 0; i < hw; ++i)
          base[ch * hw + i] = static_cast<T>(std::clamp(static_cast<double>(base[ch * hw + i]) * s, 0.0, 1.0));
      }
  }
  return out;
}

/// Corner-aligned bilinear resize: output pixel i samples source coordinate
/// i * (in - 1) / (out - 1).
template <typename T>
Tensor<T> resize(const Tensor<T>& images, std::size_t target) {
  if (images.rank() != 4) throw ShapeError("resize expects [B,C,H,W]");
  if (target == 0) throw ConfigError("resize target must be >= 1");
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (h == target && w == target) return images;
  Tensor<T> out({b, c, target, target});
  auto coord = [target](std::size_t i, std::size_t in) {
    return target == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(target - 1);
  };
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    const T* src = images.data() + plane * h * w;
    T* dst = out.data() + plane * target * target;
    for (std::size_t y = 0; y < target; ++y)
      for (std::size_t x = 0; x < target; ++x) {
        const double sy = coord(y, h), sx = coord(x, w);
        const std::size_t y0 = std::min(static_cast<std::size_t>(sy), h - 1), x0 = std::min(static_cast<std::size_t>(sx), w - 1);
        const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        const double ty = sy - static_cast<double>(y0), tx = sx - static_cast<double>(x0);
        const double v = (1 - ty) * ((1 - tx) * src[y0 * w + x0] + tx * src[y0 * w + x1]) +
                         ty * ((1 - tx) * src[y1 * w + x0] + tx * src[y1 * w + x1]);
        dst[y * target + x] = static_cast<T>(v);
      }
  }
  return out;
}

template <typename T>
ImageBatch<T> resize(const ImageBatch<T>& batch, std::size_t target) {
  return {resize(batch.images, target), batch.labels};
}

// ---------------------------------------------------------------------------
// Dataset specification

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic;
  std::string root = "data";
  std::optional<std::size_t> subset_size;
  AugmentFlags augment;
  std::uint64_t seed = 0;
  // synthetic only
  std::size_t synth_train = 500;
  std::size_t synth_test = 200;
  std::size_t synth_classes = 10;
};

/// Loads one split; subsetting applies to the train split only.
inline Dataset load_dataset(const DatasetSpec& spec, Split split) {
  Dataset ds;
  if (spec.kind == DatasetKind::synthetic) {
    const auto n = split == Split::train ? spec.synth_train : spec.synth_test;
    // disjoint noise streams for the two splits
    ds = synth_dataset(spec.synth_classes, n, 32, CounterRng::derive(spec.seed, split == Split::train ? 1 : 2));
  } else {
    ds = load_cifar(spec.root, spec.kind, split);
  }
  if (split == Split::train && spec.subset_size) ds = stratified_subset(ds, *spec.subset_size, spec.seed);
  return ds;
}

}  // namespace cta
