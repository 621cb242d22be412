#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "cta/data.hpp"

using namespace cta;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("cta_data_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> record(std::vector<unsigned char> label_bytes, unsigned char fill) {
  label_bytes.resize(label_bytes.size() + kCifarPixels, fill);
  return label_bytes;
}

}  // namespace

TEST(Cifar, SingleRecordAllWhite) {
  TempDir dir;
  const auto f = dir.path() / "one.bin";
  write_bytes(f, record({7}, 255));
  Dataset ds;
  read_cifar_file(f, DatasetKind::cifar10, ds);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.labels[0], 7);
  for (float v : ds.pixels) EXPECT_EQ(v, 1.0f);
}

TEST(Cifar, TwoRecordsInFileOrderPlanarLayout) {
  TempDir dir;
  auto bytes = record({3}, 0);
  for (std::size_t k = 0; k < kCifarPixels; ++k) bytes[1 + k] = static_cast<unsigned char>((k * 7) % 256);
  auto second = record({9}, 128);
  bytes.insert(bytes.end(), second.begin(), second.end());
  const auto f = dir.path() / "two.bin";
  write_bytes(f, bytes);
  Dataset ds;
  read_cifar_file(f, DatasetKind::cifar10, ds);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 9}));
  // byte k of the pixel block is channel k / 1024, row (k % 1024) / 32, column k % 32
  for (std::size_t k = 0; k < kCifarPixels; ++k) ASSERT_EQ(ds.image(0)[k], static_cast<float>((k * 7) % 256) / 255.0f);
  EXPECT_EQ(ds.image(1)[0], 128.0f / 255.0f);
}

TEST(Cifar, HundredUsesFineLabel) {
  TempDir dir;
  write_bytes(dir.path() / "cifar-100-binary" / "test.bin", record({4, 87}, 51));
  auto ds = load_cifar(dir.path(), DatasetKind::cifar100, Split::test);
  EXPECT_EQ(ds.num_classes, 100u);
  EXPECT_EQ(ds.labels, (std::vector<int>{87}));
  EXPECT_EQ(ds.pixels[5], 0.2f);
}

TEST(Cifar, TruncatedFileNamesOffset) {
  TempDir dir;
  auto bytes = record({1}, 10);
  bytes.resize(bytes.size() + 3000, 0);
  const auto f = dir.path() / "bad.bin";
  write_bytes(f, bytes);
  Dataset ds;
  try {
    read_cifar_file(f, DatasetKind::cifar10, ds);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 3073"), std::string::npos) << e.what();
  }
}

TEST(Cifar, MissingFilesAreDataErrors) {
  TempDir dir;
  EXPECT_THROW(load_cifar(dir.path(), DatasetKind::cifar10, Split::train), DataError);
  write_bytes(dir.path() / "cifar-10-batches-bin" / "test_batch.bin", record({2}, 0));
  EXPECT_EQ(load_cifar(dir.path(), DatasetKind::cifar10, Split::test).size(), 1u);
  DatasetSpec spec;
  spec.kind = DatasetKind::cifar10;
  spec.root = dir.path().string();
  EXPECT_THROW(load_dataset(spec, Split::train), DataError);
}

TEST(Synth, SeededAndDistinct) {
  auto a = synth_dataset(10, 50, 8, 3);
  auto b = synth_dataset(10, 50, 8, 3);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.pixels, synth_dataset(10, 50, 8, 4).pixels);
  for (float v : a.pixels) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      const auto ci = synth_class_color(i, 10), cj = synth_class_color(j, 10);
      double d = 0;
      for (int ch = 0; ch < 3; ++ch) d += (ci[ch] - cj[ch]) * (ci[ch] - cj[ch]);
      EXPECT_GT(std::sqrt(d), 0.2) << i << " vs " << j;
    }
  EXPECT_THROW(synth_dataset(10, 5, 8, 1), ConfigError);
}

TEST(Synth, MeanColourLinearProbeSeparates) {
  // nearest centroid on per-image mean colour is a linear classifier
  const std::size_t K = 10, n = 1000;
  auto ds = synth_dataset(K, n, 16, 11);
  const std::size_t hw = 16 * 16;
  std::vector<std::array<double, 3>> feat(n);
  std::vector<std::array<double, 3>> centroid(K, {0, 0, 0});
  std::vector<std::size_t> count(K, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto img = ds.image(i);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double s = 0;
      for (std::size_t k = 0; k < hw; ++k) s += img[ch * hw + k];
      feat[i][ch] = s / hw;
    }
    if (i < n / 2) {
      const auto c = static_cast<std::size_t>(ds.labels[i]);
      for (int ch = 0; ch < 3; ++ch) centroid[c][ch] += feat[i][ch];
      ++count[c];
    }
  }
  for (std::size_t c = 0; c < K; ++c)
    for (int ch = 0; ch < 3; ++ch) centroid[c][ch] /= static_cast<double>(count[c]);
  std::size_t correct = 0;
  for (std::size_t i = n / 2; i < n; ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < K; ++c) {
      double d = 0;
      for (int ch = 0; ch < 3; ++ch) d += (feat[i][ch] - centroid[c][ch]) * (feat[i][ch] - centroid[c][ch]);
      if (d < best_d) best_d = d, best = c;
    }
    correct += static_cast<int>(best) == ds.labels[i];
  }
  EXPECT_GE(static_cast<double>(correct) / (n / 2), 0.95);
}

TEST(Subset, StratifiedAndDeterministic) {
  auto ds = synth_dataset(10, 300, 4, 1);
  auto sub = stratified_subset(ds, 50, 9);
  ASSERT_EQ(sub.size(), 50u);
  std::vector<int> per(10, 0);
  for (int l : sub.labels) ++per[static_cast<std::size_t>(l)];
  for (int c : per) EXPECT_EQ(c, 5);
  EXPECT_EQ(stratified_subset(ds, 50, 9).pixels, sub.pixels);
  EXPECT_NE(stratified_subset(ds, 50, 10).pixels, sub.pixels);
  auto odd = stratified_subset(ds, 23, 1);
  std::fill(per.begin(), per.end(), 0);
  for (int l : odd.labels) ++per[static_cast<std::size_t>(l)];
  EXPECT_EQ(per[0], 3);
  EXPECT_EQ(per[9], 2);
  EXPECT_THROW(stratified_subset(ds, 301, 1), DataError);
}

TEST(Batching, ShortFinalBatchAndSeededPermutation) {
  auto b = batch_indices(10, 4, std::nullopt);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 4u);
  EXPECT_EQ(b[1].size(), 4u);
  EXPECT_EQ(b[2], (std::vector<std::size_t>{8, 9}));
  auto s1 = batch_indices(10, 4, 5), s2 = batch_indices(10, 4, 5), s3 = batch_indices(10, 4, 6);
  EXPECT_EQ(s1, s2);
  EXPECT_NE(s1, s3);
  std::set<std::size_t> seen;
  for (const auto& batch : s1) seen.insert(batch.begin(), batch.end());
  EXPECT_EQ(seen.size(), 10u);
  auto ds = synth_dataset(2, 10, 4, 1);
  auto batches = batch_iter<float>(ds, 4, 5);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[2].images.shape(), (Shape{2, 3, 4, 4}));
  EXPECT_EQ(batches[0].labels[0], ds.labels[s1[0][0]]);
  EXPECT_THROW(batch_indices(10, 0, std::nullopt), ConfigError);
}

TEST(Augment, FlagsOffIsIdentityAndSeeded) {
  auto ds = synth_dataset(4, 8, 8, 2);
  auto batch = batch_iter<float>(ds, 8, std::nullopt)[0];
  EXPECT_TRUE(augment(batch, AugmentFlags{}, 1).images.bit_equal(batch.images));
  auto a = augment(batch, AugmentFlags::all(), 7);
  auto b = augment(batch, AugmentFlags::all(), 7);
  EXPECT_TRUE(a.images.bit_equal(b.images));
  EXPECT_FALSE(a.images.bit_equal(batch.images));
  EXPECT_EQ(a.labels, batch.labels);
  for (float v : a.images.span()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Augment, ForcedFlipIsInvolution) {
  auto x = Tensor<float>::uniform({2, 3, 5, 6}, 0, 1, 3);
  AugmentFlags f;
  f.flip = true;
  f.flip_prob = 1.0;
  ImageBatch<float> batch{x, {0, 1}};
  auto once = augment(batch, f, 1);
  EXPECT_EQ(once.images.at({0, 1, 2, 0}), x.at({0, 1, 2, 5}));
  EXPECT_TRUE(augment(once, f, 2).images.bit_equal(x));
  EXPECT_TRUE(hflip(hflip(x)).bit_equal(x));
}

TEST(Augment, CropOfConstantImageIsConstant) {
  ImageBatch<float> batch{Tensor<float>::constant({3, 3, 8, 8}, 0.375f), {0, 1, 2}};
  AugmentFlags f;
  f.crop = true;
  for (std::uint64_t s = 0; s < 5; ++s) EXPECT_TRUE(augment(batch, f, s).images.bit_equal(batch.images));
}

TEST(Augment, CropIsReflectPaddedShift) {
  // 1-wide rows make the reflected shift easy to enumerate
  Tensor<float> x({1, 1, 1, 8});
  for (std::size_t i = 0; i < 8; ++i) x[i] = static_cast<float>(i);
  AugmentFlags f;
  f.crop = true;
  f.pad = 2;
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto y = augment(ImageBatch<float>{x, {0}}, f, s).images;
    // the output is x shifted by some o in [-2, 2] with mirror reflection at the ends
    bool matched = false;
    for (long o = -2; o <= 2 && !matched; ++o) {
      bool ok = true;
      for (long i = 0; i < 8; ++i) {
        long j = i + o;
        if (j < 0) j = -j;
        if (j > 7) j = 14 - j;
        ok = ok && y[static_cast<std::size_t>(i)] == x[static_cast<std::size_t>(j)];
      }
      matched = ok;
    }
    EXPECT_TRUE(matched) << s;
  }
}

TEST(Augment, RotationKeepsCentreAndZeroFillsCorners) {
  ImageBatch<float> batch{Tensor<float>::ones({1, 1, 9, 9}), {0}};
  AugmentFlags f;
  f.rotate = true;
  f.max_rotation_deg = 0.0;
  EXPECT_TRUE(augment(batch, f, 1).images.bit_equal(batch.images));
  f.max_rotation_deg = 15.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto y = augment(batch, f, s).images;
    EXPECT_FLOAT_EQ(y.at({0, 0, 4, 4}), 1.0f);
    EXPECT_LE(y.at({0, 0, 0, 0}), 1.0f);
  }
  // a 15 degree turn moves the corner source point outside the frame
  f.max_rotation_deg = 15.0;
  bool some_corner_filled = false;
  for (std::uint64_t s = 0; s < 10; ++s) some_corner_filled = some_corner_filled || augment(batch, f, s).images.at({0, 0, 0, 0}) < 1.0f;
  EXPECT_TRUE(some_corner_filled);
}

TEST(Augment, JitterScalesChannelsWithinRange) {
  ImageBatch<float> batch{Tensor<float>::constant({1, 3, 4, 4}, 0.5f), {0}};
  AugmentFlags f;
  f.jitter = true;
  auto y = augment(batch, f, 4).images;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const float v = y.at({0, ch, 0, 0});
    EXPECT_GE(v, 0.4f);
    EXPECT_LE(v, 0.6f);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y[ch * 16 + i], v);
  }
  ImageBatch<float> bright{Tensor<float>::ones({1, 3, 2, 2}), {0}};
  const auto out = augment(bright, f, 4).images;
  for (float v : out.span()) EXPECT_LE(v, 1.0f);
}

TEST(Resize, IdentityAndCornerAlignedBilinear) {
  auto x = Tensor<float>::uniform({2, 3, 5, 5}, 0, 1, 1);
  EXPECT_TRUE(resize(x, 5).bit_equal(x));
  Tensor<double> checker({1, 1, 2, 2}, std::vector<double>{0, 1, 1, 0});
  auto y = resize(checker, 3);
  // hand-evaluated: corners copy, edge midpoints average two corners, centre averages four
  const std::vector<double> want{0, 0.5, 1, 0.5, 0.5, 0.5, 1, 0.5, 0};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y[i], want[i]);
  auto up = resize(x, 7);
  EXPECT_EQ(up.shape(), (Shape{2, 3, 7, 7}));
  EXPECT_EQ(up.at({1, 2, 6, 6}), x.at({1, 2, 4, 4}));
}
