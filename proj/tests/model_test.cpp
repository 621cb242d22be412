#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "cta/model.hpp"
#include "oracles.hpp"

using namespace cta;
using namespace cta::testing;

namespace {

Tensor<double> eye(std::size_t n) {
  Tensor<double> t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at({i, i}) = 1.0;
  return t;
}

void zero(const LinearParams<double>& p) {
  assign(p.weight, Tensor<double>::zeros(p.weight.shape()));
  if (p.bias.defined()) assign(p.bias, Tensor<double>::zeros(p.bias.shape()));
}

void zero(const Conv2dParams<double>& p) {
  assign(p.weight, Tensor<double>::zeros(p.weight.shape()));
  if (p.bias.defined()) assign(p.bias, Tensor<double>::zeros(p.bias.shape()));
}

void identity(const LinearParams<double>& p) {
  assign(p.weight, eye(p.weight.dim(0)));
  if (p.bias.defined()) assign(p.bias, Tensor<double>::zeros(p.bias.shape()));
}

// 8px images in 2px patches: a 4x4 token grid, D=8, two heads.
ModelConfig small() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 2;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.kernel_scales = {1, 3};
  c.kv_reduction = 2;
  c.num_classes = 3;
  return c;
}

ModelConfig plain_attention(std::size_t d, std::size_t heads) {
  ModelConfig c = small();
  c.embed_dim = d;
  c.heads = heads;
  c.attention = AttentionKind::lmf_mhsa;
  c.kernel_scales = {};
  c.kv_reduction = 1;
  return c;
}

void expect_near(const Tensor<double>& a, const Tensor<double>& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

// ---------------------------------------------------------------------------
// Patch geometry

TEST(PatchEmbed, TokenCounts) {
  auto net = model_init<double>(ModelConfig::tiny(), 1);
  auto img = constant(rnd({2, 3, 32, 32}, 2));
  EXPECT_EQ(patch_embed(img, net).shape(), (Shape{2, 65, 64}));

  auto cfg = ModelConfig::tiny();
  cfg.use_class_token = false;
  EXPECT_EQ(patch_embed(img, model_init<double>(cfg, 1)).shape(), (Shape{2, 64, 64}));

  cfg = small();
  cfg.patch_size = 8;
  cfg.kernel_scales = {1};
  cfg.kv_reduction = 1;
  EXPECT_EQ(patch_embed(constant(rnd({1, 3, 8, 8}, 3)), model_init<double>(cfg, 1)).shape(), (Shape{1, 2, 8}));
}

TEST(PatchEmbed, IdentityConfigurationCopiesPixels) {
  ModelConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 1;
  cfg.embed_dim = 3;
  cfg.heads = 1;
  cfg.depth = 1;
  cfg.use_class_token = false;
  cfg.kernel_scales = {1, 3};
  auto net = model_init<double>(cfg, 5);
  identity(net.patch_proj);
  assign(net.pos_embed, Tensor<double>::zeros(net.pos_embed.shape()));
  auto img = rnd({1, 3, 4, 4}, 6);
  auto tok = patch_embed(constant(img), net).value();
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(tok.at({0, t, c}), img.at({0, c, t / 4, t % 4}));
}

TEST(PatchEmbed, WrongImageSizeIsShapeError) {
  auto net = model_init<double>(small(), 1);
  EXPECT_THROW(patch_embed(constant(rnd({1, 3, 16, 16}, 1)), net), ShapeError);
  EXPECT_THROW(patch_embed(constant(rnd({1, 1, 8, 8}, 1)), net), ShapeError);
}

TEST(Reconstruct, RowMajorContract) {
  auto p = constant(Tensor<double>({1, 1, 4, 1, 1}, std::vector<double>{1, 2, 3, 4}));
  auto y = reconstruct(p, 2, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.value().vec(), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_THROW(reconstruct(p, 2, 3), ShapeError);
}

TEST(Reconstruct, MatchesIndexArithmeticOracle) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto p = rnd({2, 3, 4, 2, 2}, s);
    auto y = reconstruct(constant(p), 4, 4).value();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t n = 0; n < 4; ++n)
          for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j)
              EXPECT_EQ(y.at({b, c, (n / 2) * 2 + i, (n % 2) * 2 + j}), p.at({b, c, n, i, j}));
  }
}

TEST(Reconstruct, InverseOfExtractionBitwise) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    CounterRng rng(s);
    const std::size_t p = 1 + rng.below(4), g = 1 + rng.below(4);
    auto x = rnd({2, 3, g * p, g * p}, s + 7);
    EXPECT_TRUE(reconstruct(extract_patches(constant(x), p), g * p, g * p).value().bit_equal(x));
    auto patches = rnd({1, 2, g * g, p, p}, s + 11);
    EXPECT_TRUE(extract_patches(reconstruct(constant(patches), g * p, g * p), p).value().bit_equal(patches));
  }
}

TEST(Reconstruct, GradientIsInverseMovement) {
  auto r = grad_check([](const Var<double>& v) { return probe(reconstruct(v, 4, 4), 3); }, rnd({1, 2, 4, 2, 2}, 1));
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST(ReverseEmbed, ShapeContract) {
  auto cfg = ModelConfig::tiny();
  ASSERT_EQ(cfg.rrcv_width(), 4u);
  SeedSequence seeds(1);
  auto p = RrcvParams<double>::init(cfg, seeds);
  EXPECT_EQ(reverse_embed(constant(rnd({2, 65, 64}, 1)), p, true).shape(), (Shape{2, 4, 32, 32}));
}

TEST(ReverseEmbed, IdentityMapPlacesTokensOnGrid) {
  RrcvParams<double> p;
  p.channels = 4;
  p.patch = 1;
  p.reverse = {parameter(eye(4)), parameter(Tensor<double>::zeros({4}))};
  auto x = rnd({1, 9, 4}, 2);
  auto f = reverse_embed(constant(x), p, false).value();
  ASSERT_EQ(f.shape(), (Shape{1, 4, 3, 3}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(f.at({0, c, i, j}), x.at({0, i * 3 + j, c}));
  EXPECT_THROW(reverse_embed(constant(rnd({1, 8, 4}, 2)), p, false), ShapeError);
}

// ---------------------------------------------------------------------------
// RRCV

TEST(Rrcv, ShapePreservedForAllVariants) {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.embed_dim = 32;
  for (auto v : {RrcvVariant::cnn, RrcvVariant::dwconv, RrcvVariant::resnet}) {
    cfg.rrcv = v;
    SeedSequence seeds(4);
    auto p = RrcvParams<double>::init(cfg, seeds);
    EXPECT_EQ(rrcv_forward(constant(rnd({1, 16, 32}, 1)), p, false).shape(), (Shape{1, 16, 32})) << to_string(v);
    EXPECT_EQ(rrcv_forward(constant(rnd({1, 17, 32}, 1)), p, true).shape(), (Shape{1, 17, 32})) << to_string(v);
  }
  cfg.rrcv = RrcvVariant::none;
  SeedSequence seeds(4);
  EXPECT_THROW(RrcvParams<double>::init(cfg, seeds), ConfigError);
  EXPECT_THROW(parse_rrcv("bogus"), ConfigError);
}

TEST(Rrcv, ResnetPassThroughIsIdentity) {
  auto cfg = small();  // D = 8 = C * p^2 with C = 2, p = 2
  ASSERT_EQ(cfg.rrcv_width() * 4, cfg.embed_dim);
  SeedSequence seeds(9);
  auto p = RrcvParams<double>::init(cfg, seeds);
  identity(p.reverse);
  identity(p.embed);
  for (const auto& c : p.body) zero(c);
  assign(p.pconv.weight, eye(2).reshaped({2, 2, 1, 1}));
  assign(p.pconv.bias, Tensor<double>::zeros({2}));
  auto x = rnd({2, 17, 8}, 3);
  auto y = rrcv_forward(constant(x), p, true).value();
  EXPECT_TRUE(y.bit_equal(x));
}

TEST(Rrcv, CnnZeroWeightsGiveConstantBiasTokens) {
  auto cfg = small();
  cfg.rrcv = RrcvVariant::cnn;
  SeedSequence seeds(10);
  auto p = RrcvParams<double>::init(cfg, seeds);
  identity(p.embed);
  for (const auto& c : p.body) zero(c);
  assign(p.pconv.weight, Tensor<double>::zeros({2, 2, 1, 1}));
  assign(p.pconv.bias, Tensor<double>({2}, std::vector<double>{0.25, -1.5}));
  auto y = rrcv_forward(constant(rnd({1, 17, 8}, 4)), p, true).value();
  // E(bias map): channel-major patch vector, four copies of each channel bias
  const std::vector<double> want{0.25, 0.25, 0.25, 0.25, -1.5, -1.5, -1.5, -1.5};
  for (std::size_t t = 1; t < 17; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(y.at({0, t, c}), want[c]);
}

TEST(Rrcv, ClassTokenBypass) {
  for (auto v : {RrcvVariant::cnn, RrcvVariant::dwconv, RrcvVariant::resnet}) {
    auto cfg = small();
    cfg.rrcv = v;
    SeedSequence seeds(11);
    auto p = RrcvParams<double>::init(cfg, seeds);
    auto x = rnd({2, 17, 8}, 5);
    auto x2 = x;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 8; ++c) x2.at({b, 0, c}) += 3.0;
    auto y = rrcv_forward(constant(x), p, true).value();
    auto y2 = rrcv_forward(constant(x2), p, true).value();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < 17; ++t)
        for (std::size_t c = 0; c < 8; ++c) {
          if (t == 0) {
            EXPECT_EQ(y.at({b, 0, c}), x.at({b, 0, c}));
            EXPECT_EQ(y2.at({b, 0, c}), x2.at({b, 0, c}));
          } else {
            EXPECT_EQ(y.at({b, t, c}), y2.at({b, t, c}));
          }
        }
  }
}

// ---------------------------------------------------------------------------
// Multi-scale fusion

TEST(MultiScale, SingleIdentityBranch) {
  SeedSequence seeds(1);
  auto p = MultiScaleParams<double>::init(3, {1}, seeds);
  assign(p.branches[0].weight, Tensor<double>::ones({3, 1, 1, 1}));
  assign(p.branches[0].bias, Tensor<double>::zeros({3}));
  assign(p.reduce.weight, eye(3).reshaped({3, 3, 1, 1}));
  assign(p.reduce.bias, Tensor<double>::zeros({3}));
  auto x = rnd({2, 3, 4, 4}, 1);
  EXPECT_TRUE(multi_scale_fuse(constant(x), p).value().bit_equal(x));
}

TEST(MultiScale, DeltaKernelsAndAveragingRecoverInput) {
  const std::size_t C = 3;
  SeedSequence seeds(2);
  auto p = MultiScaleParams<double>::init(C, {1, 3, 5}, seeds);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t k = p.scales[s];
    Tensor<double> w({C, 1, k, k});
    for (std::size_t c = 0; c < C; ++c) w.at({c, 0, k / 2, k / 2}) = 1.0;
    assign(p.branches[s].weight, w);
    assign(p.branches[s].bias, Tensor<double>::zeros({C}));
  }
  Tensor<double> avg({C, 3 * C, 1, 1});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t s = 0; s < 3; ++s) avg.at({c, s * C + c, 0, 0}) = 1.0 / 3.0;
  assign(p.reduce.weight, avg);
  assign(p.reduce.bias, Tensor<double>::zeros({C}));
  auto x = rnd({2, C, 5, 5}, 3);
  expect_near(multi_scale_fuse(constant(x), p).value(), x, 1e-15);
}

TEST(MultiScale, MatchesNaiveConvConcatOracle) {
  const std::size_t C = 3;
  for (std::uint64_t s = 0; s < 5; ++s) {
    SeedSequence seeds(s);
    auto p = MultiScaleParams<double>::init(C, {1, 3, 5}, seeds);
    auto x = rnd({2, C, 6, 6}, s + 20);
    Tensor<double> cat({2, 3 * C, 6, 6});
    for (std::size_t br = 0; br < 3; ++br) {
      const auto& conv = p.branches[br];
      auto y = naive_conv(x, conv.weight.value(), &conv.bias.value(), 1, p.scales[br] / 2, C);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 6; ++j) cat.at({b, br * C + c, i, j}) = y.at({b, c, i, j});
    }
    auto want = naive_conv(cat, p.reduce.weight.value(), &p.reduce.bias.value(), 1, 0, 1);
    expect_near(multi_scale_fuse(constant(x), p).value(), want, 1e-12);
  }
  SeedSequence seeds(1);
  EXPECT_THROW(MultiScaleParams<double>::init(C, {2}, seeds), ConfigError);
  EXPECT_THROW(MultiScaleParams<double>::init(C, {}, seeds), ConfigError);
}

TEST(MultiScale, FusionStageClassTokenBypass) {
  SeedSequence seeds(3);
  auto p = MultiScaleParams<double>::init(8, {1, 3, 5}, seeds);
  auto x = rnd({1, 17, 8}, 1);
  auto x2 = x;
  for (std::size_t c = 0; c < 8; ++c) x2.at({0, 0, c}) = -x.at({0, 0, c}) + 1.0;
  auto y = fuse_tokens(constant(x), p, true).value();
  auto y2 = fuse_tokens(constant(x2), p, true).value();
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_EQ(y.at({0, 0, c}), x.at({0, 0, c}));
    EXPECT_EQ(y2.at({0, 0, c}), x2.at({0, 0, c}));
  }
  for (std::size_t i = 8; i < y.numel(); ++i) EXPECT_EQ(y[i], y2[i]);
}

// ---------------------------------------------------------------------------
// Attention

TEST(Attention, SingleTokenWeightIsOne) {
  auto cfg = plain_attention(8, 2);
  SeedSequence seeds(4);
  auto p = AttentionParams<double>::init(cfg, seeds);
  auto x = rnd({1, 1, 8}, 2);
  AttentionTrace<double> trace;
  auto y = mhsa(constant(x), p, &trace).value();
  for (auto w : trace.weights.span()) EXPECT_EQ(w, 1.0);
  auto v = naive_linear(rows_of(x, 0), p.v.weight.value(), &p.v.bias.value());
  auto want = naive_linear(v, p.out.weight.value(), &p.out.bias.value());
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y.at({0, 0, c}), want[0][c], 1e-12);
  expect_near(lmf_mhsa(constant(x), p, false).value(), y, 0.0);
}

TEST(Attention, EqualKeysGiveUniformWeights) {
  // r = 1: a zero key map makes every key row equal to the bias
  auto cfg = plain_attention(8, 2);
  SeedSequence seeds(5);
  auto p = AttentionParams<double>::init(cfg, seeds);
  assign(p.k.weight, Tensor<double>::zeros({8, 8}));
  auto x = rnd({1, 6, 8}, 3);
  AttentionTrace<double> trace;
  auto y = mhsa(constant(x), p, &trace).value();
  for (auto w : trace.weights.span()) EXPECT_NEAR(w, 1.0 / 6.0, 1e-15);
  auto v = naive_linear(rows_of(x, 0), p.v.weight.value(), &p.v.bias.value());
  std::vector<std::vector<double>> mean_v(1, std::vector<double>(8, 0.0));
  for (const auto& row : v)
    for (std::size_t c = 0; c < 8; ++c) mean_v[0][c] += row[c] / 6.0;
  auto want = naive_linear(mean_v, p.out.weight.value(), &p.out.bias.value());
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y.at({0, t, c}), want[0][c], 1e-12);
}

TEST(Attention, ForcedEqualReducedKeysGiveUniformWeights) {
  auto cfg = small();
  cfg.kernel_scales = {};
  cfg.kv_reduction = 3;  // T = 17 -> 6 reduced rows
  SeedSequence seeds(6);
  auto p = AttentionParams<double>::init(cfg, seeds);
  ASSERT_TRUE(p.k_tokens.has_value());
  const std::size_t T = 17, R = 6;
  assign(p.k_tokens->weight, Tensor<double>::zeros({R, T}));
  assign(p.k_tokens->bias, Tensor<double>::constant({R}, 0.3));
  auto x = rnd({1, T, 8}, 4);
  AttentionTrace<double> trace;
  auto y = lmf_mhsa(constant(x), p, true, &trace).value();
  EXPECT_EQ(trace.weights.shape(), (Shape{1, 2, T, R}));
  for (auto w : trace.weights.span()) EXPECT_NEAR(w, 1.0 / R, 1e-15);
  // V'[r] = sum_t Wv[r, t] V[t] + bv[r]
  auto v = naive_linear(rows_of(x, 0), p.v.weight.value(), &p.v.bias.value());
  const auto& wt = p.v_tokens->weight.value();
  const auto& bt = p.v_tokens->bias.value();
  std::vector<std::vector<double>> mean_v(1, std::vector<double>(8, 0.0));
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      double acc = bt[r];
      for (std::size_t t = 0; t < T; ++t) acc += wt.at({r, t}) * v[t][c];
      mean_v[0][c] += acc / R;
    }
  auto want = naive_linear(mean_v, p.out.weight.value(), &p.out.bias.value());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y.at({0, t, c}), want[0][c], 1e-12);
}

TEST(Attention, MatchesTextbookOracle) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto cfg = plain_attention(8, 2);
    SeedSequence seeds(s);
    auto p = AttentionParams<double>::init(cfg, seeds);
    auto x = rnd({2, 4, 8}, s + 30);
    auto y = lmf_mhsa(constant(x), p, false).value();
    for (std::size_t b = 0; b < 2; ++b) {
      auto want = naive_attention(rows_of(x, b), 2, p.q, p.k, p.v, p.out);
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y.at({b, t, c}), want[t][c], 1e-10);
    }
  }
}

TEST(Attention, LmfWithoutFusionOrReductionEqualsMhsa) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto cfg = plain_attention(8, 4);
    SeedSequence seeds(s);
    auto p = AttentionParams<double>::init(cfg, seeds);
    auto x = constant(rnd({2, 17, 8}, s));
    expect_near(lmf_mhsa(x, p, true).value(), mhsa(x, p).value(), 1e-10);
  }
}

TEST(Attention, WeightsAreRowStochastic) {
  for (auto kind : {AttentionKind::mhsa, AttentionKind::lmf_mhsa}) {
    auto cfg = small();
    cfg.attention = kind;
    SeedSequence seeds(8);
    auto p = AttentionParams<double>::init(cfg, seeds);
    AttentionTrace<double> trace;
    attention_forward(constant(rnd({2, 17, 8}, 1, -3, 3)), p, cfg, &trace);
    const auto& w = trace.weights;
    const std::size_t cols = w.dim(3);
    EXPECT_EQ(cols, kind == AttentionKind::mhsa ? 17u : 9u);
    for (std::size_t r = 0; r < w.numel() / cols; ++r) {
      double sum = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        EXPECT_GE(w[r * cols + j], 0.0);
        sum += w[r * cols + j];
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(Attention, PermutationEquivariance) {
  auto cfg = plain_attention(8, 2);
  SeedSequence seeds(12);
  auto p = AttentionParams<double>::init(cfg, seeds);
  const std::size_t T = 9;
  auto x = rnd({1, T, 8}, 2);
  std::vector<std::size_t> perm(T);
  std::iota(perm.begin(), perm.end(), 0);
  CounterRng rng(3);
  for (std::size_t i = T - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  Tensor<double> xp({1, T, 8});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < 8; ++c) xp.at({0, t, c}) = x.at({0, perm[t], c});
  auto y = mhsa(constant(x), p).value();
  auto yp = mhsa(constant(xp), p).value();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(yp.at({0, t, c}), y.at({0, perm[t], c}), 1e-12);
}

TEST(Attention, ConfigErrors) {
  auto cfg = small();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small();
  cfg.kv_reduction = 18;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small();
  SeedSequence seeds(1);
  auto lmf = AttentionParams<double>::init(cfg, seeds);
  EXPECT_THROW(mhsa(constant(rnd({1, 17, 8}, 1)), lmf), ConfigError);
  EXPECT_THROW(lmf_mhsa(constant(rnd({1, 5, 8}, 1)), lmf, true), ShapeError);
}

TEST(Attention, GradCheck) {
  for (auto kind : {AttentionKind::mhsa, AttentionKind::lmf_mhsa}) {
    auto cfg = small();
    cfg.attention = kind;
    SeedSequence seeds(13);
    auto p = AttentionParams<double>::init(cfg, seeds);
    auto x = parameter(rnd({2, 17, 8}, 2));
    ParamList<double> ins{{"x", x}};
    p.collect("attn", ins);
    auto r = grad_check([&] { return probe(attention_forward(x, p, cfg), 4); }, ins);
    EXPECT_LE(r.max_rel_error, 1e-4) << to_string(kind) << " " << r.worst_input;
  }
}

// ---------------------------------------------------------------------------
// Block and model

TEST(CtBlock, ZeroedOutputProjectionsGiveIdentity) {
  auto cfg = small();
  SeedSequence seeds(14);
  auto b = BlockParams<double>::init(cfg, seeds);
  zero(b.attn.out);
  zero(b.fc2);
  zero(b.rrcv->embed);
  auto x = rnd({2, 17, 8}, 1);
  EXPECT_TRUE(ct_block(constant(x), b, cfg).value().bit_equal(x));
}

TEST(CtBlock, TinyShapeContract) {
  auto cfg = ModelConfig::tiny();
  SeedSequence seeds(15);
  auto b = BlockParams<double>::init(cfg, seeds);
  EXPECT_EQ(ct_block(constant(rnd({2, 65, 64}, 1)), b, cfg).shape(), (Shape{2, 65, 64}));
}

TEST(CtBlock, GradCheckEveryParameter) {
  for (auto v : {RrcvVariant::cnn, RrcvVariant::dwconv, RrcvVariant::resnet}) {
    auto cfg = small();
    cfg.rrcv = v;
    SeedSequence seeds(16);
    auto b = BlockParams<double>::init(cfg, seeds);
    auto x = parameter(rnd({1, 17, 8}, 3));
    ParamList<double> ins{{"x", x}};
    b.collect("block", ins);
    auto r = grad_check([&] { return sum_all(ct_block(x, b, cfg)); }, ins);
    EXPECT_LE(r.max_rel_error, 1e-4) << to_string(v) << " " << r.worst_input << "[" << r.worst_index << "]";
  }
}

TEST(Model, LogitsShapeAndFinite) {
  auto net = model_init<double>(ModelConfig::tiny(), 3);
  auto logits = model_forward(constant(rnd({2, 3, 32, 32}, 1)), net).value();
  EXPECT_EQ(logits.shape(), (Shape{2, 10}));
  EXPECT_TRUE(logits.all_finite());
}

TEST(Model, InitIsDeterministicPerSeed) {
  auto a = model_init<float>(ModelConfig::tiny(), 42);
  auto b = model_init<float>(ModelConfig::tiny(), 42);
  auto c = model_init<float>(ModelConfig::tiny(), 43);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(pa[i].var.value().bit_equal(pb[i].var.value())) << pa[i].name;
    any_diff = any_diff || !pa[i].var.value().bit_equal(pc[i].var.value());
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, ParameterNamesAreUnique) {
  auto cfg = ModelConfig::tiny();
  auto params = model_init<float>(cfg, 1).parameters();
  std::set<std::string> names;
  for (const auto& p : params) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_EQ(params.front().name, "patch_embed.proj.weight");
  EXPECT_EQ(params.back().name, "head.bias");
  EXPECT_TRUE(names.count("blocks.3.attn.k_tokens.weight"));
  EXPECT_TRUE(names.count("blocks.0.rrcv.pconv.weight"));
}

TEST(Model, EndToEndGradCheckSampled) {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.embed_dim = 32;
  cfg.depth = 2;
  auto net = model_init<double>(cfg, 7);
  auto img = constant(rnd({2, 3, 16, 16}, 1));
  GradCheckOptions opt;
  opt.max_coords = 3;
  auto r = grad_check([&] { return cross_entropy(model_forward(img, net), {1, 7}); }, net.parameters(), opt);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_input << "[" << r.worst_index << "]";
  EXPECT_GT(r.coords_checked, 100u);
}

// The head reads only the class token, and RRCV passes the class token through
// unchanged, so the last block's RRCV cannot influence the logits. That is the
// only dead path; without a class token every parameter is live.
TEST(Model, NoDeadParametersExceptLastBlockRrcv) {
  for (bool cls : {true, false}) {
    auto cfg = small();
    cfg.depth = 2;
    cfg.use_class_token = cls;
    auto net = model_init<double>(cfg, 17);
    auto loss = probe(model_forward(constant(rnd({2, 3, 8, 8}, 2)), net), 3);
    backward(loss);
    for (const auto& p : net.parameters()) {
      const auto g = p.var.grad();
      bool nonzero = false;
      for (auto v : g.span()) nonzero = nonzero || v != 0.0;
      const bool dead_by_construction = cls && p.name.rfind("blocks.1.rrcv.", 0) == 0;
      EXPECT_EQ(nonzero, !dead_by_construction) << p.name << " cls=" << cls;
    }
  }
}

TEST(Model, ShapePreservationOverRandomConfigs) {
  CounterRng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg;
    cfg.patch_size = 1 + rng.below(3);
    cfg.image_size = cfg.patch_size * (2 + rng.below(3));
    cfg.heads = 1 + rng.below(3);
    cfg.embed_dim = cfg.heads * (2 + rng.below(4));
    cfg.depth = 1;
    cfg.mlp_ratio = 1 + rng.below(3);
    cfg.use_class_token = rng.below(2) == 1;
    cfg.attention = rng.below(2) ? AttentionKind::mhsa : AttentionKind::lmf_mhsa;
    cfg.rrcv = static_cast<RrcvVariant>(rng.below(4));
    const std::vector<std::vector<std::size_t>> scale_sets{{}, {1}, {3}, {1, 3}, {1, 3, 5}};
    cfg.kernel_scales = scale_sets[rng.below(scale_sets.size())];
    cfg.kv_reduction = 1 + rng.below(4);
    ASSERT_NO_THROW(cfg.validate()) << trial;
    SeedSequence seeds(trial);
    auto b = BlockParams<double>::init(cfg, seeds);
    const Shape s{2, cfg.tokens(), cfg.embed_dim};
    auto x = constant(rnd(s, trial));
    EXPECT_EQ(attention_forward(x, b.attn, cfg).shape(), s) << trial;
    EXPECT_EQ(ct_block(x, b, cfg).shape(), s) << trial;
    if (b.rrcv) {
      EXPECT_EQ(rrcv_forward(x, *b.rrcv, cfg.use_class_token).shape(), s) << trial;
    }
    if (b.attn.fusion) {
      EXPECT_EQ(fuse_tokens(x, *b.attn.fusion, cfg.use_class_token).shape(), s) << trial;
    }
  }
}

TEST(Model, ConfigValidation) {
  auto cfg = small();
  cfg.image_size = 9;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small();
  cfg.kernel_scales = {1, 4};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.kernel_scales = {3, 3};
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_EQ(parse_scales("1,3,5"), (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_TRUE(parse_scales("none").empty());
  EXPECT_EQ(parse_attention("lmf_mhsa"), AttentionKind::lmf_mhsa);
  EXPECT_NO_THROW(ModelConfig::paper().validate());
}
