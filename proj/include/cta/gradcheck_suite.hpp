#pragma once

#include <chrono>
#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "cta/gradcheck.hpp"
#include "cta/model.hpp"

namespace cta {

enum class CheckKind { elementwise, matmul, softmax, layer, model };

inline std::string to_string(CheckKind k) {
  switch (k) {
    case CheckKind::elementwise: return "elementwise";
    case CheckKind::matmul: return "matmul";
    case CheckKind::softmax: return "softmax";
    case CheckKind::layer: return "layer";
    case CheckKind::model: return "model";
  }
  return "?";
}

/// Pointwise kernels are held to 1e-6, composite layers to 1e-4.
inline double tolerance_for(CheckKind k) {
  return k == CheckKind::layer || k == CheckKind::model ? 1e-4 : 1e-6;
}

struct SuiteOptions {
  bool include_model = true;
  ModelConfig model = ModelConfig::tiny();
  std::size_t model_batch = 2;
  /// Coordinates per parameter tensor for the full-model check.
  std::size_t model_coords = 6;
  std::uint64_t seed = 7;
  /// Adds an op whose backward is deliberately wrong (negative control).
  bool inject_fault = false;
};

struct SuiteRow {
  std::string op;
  CheckKind kind = CheckKind::layer;
  double tolerance = 0;
  GradCheckResult result;
  double seconds = 0;
  bool passed() const { return result.max_rel_error <= tolerance; }
};

namespace detail {

inline Tensor<double> suite_tensor(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  return Tensor<double>::uniform(std::move(s), lo, hi, seed);
}

/// Random weighted sum of every output coordinate.
inline Var<double> weighted_sum(const Var<double>& y, std::uint64_t seed) {
  return sum_all(mul(y, constant(suite_tensor(y.shape(), seed))));
}

/// square() with a backward of x instead of 2x.
inline Var<double> faulty_square(const Var<double>& x) {
  return unary_op<double>("faulty_square", x, [](double v) { return v * v; }, [](double v, double) { return v; });
}

struct SuiteCase {
  std::string op;
  CheckKind kind;
  std::function<GradCheckResult()> run;
};

inline ModelConfig suite_block_config(AttentionKind attn, RrcvVariant rrcv) {
  ModelConfig m;
  m.image_size = 8;
  m.patch_size = 2;
  m.embed_dim = 8;
  m.heads = 2;
  m.depth = 1;
  m.mlp_ratio = 2;
  m.attention = attn;
  m.rrcv = rrcv;
  m.kernel_scales = {1, 3};
  m.kv_reduction = 3;
  m.num_classes = 3;
  return m;
}

inline std::vector<SuiteCase> suite_cases(const SuiteOptions& opt) {
  std::vector<SuiteCase> cases;
  const std::uint64_t s0 = opt.seed;

  // Single-input elementwise ops over a [2,3,4] input.
  auto unary = [&](std::string name, std::function<Var<double>(const Var<double>&)> f, double lo = -1, double hi = 1) {
    cases.push_back({name, CheckKind::elementwise, [=] {
                       return grad_check([&](const Var<double>& x) { return weighted_sum(f(x), s0 + 1); },
                                         suite_tensor({2, 3, 4}, s0, lo, hi));
                     }});
  };
  // Two-input ops with broadcasting of a [3,1] operand.
  auto binary = [&](std::string name, std::function<Var<double>(const Var<double>&, const Var<double>&)> f) {
    cases.push_back({name, CheckKind::elementwise, [=] {
                       auto a = parameter(suite_tensor({2, 3, 4}, s0 + 2));
                       auto b = parameter(suite_tensor({3, 1}, s0 + 3, 0.5, 1.5));
                       return grad_check([&] { return weighted_sum(f(a, b), s0 + 4); }, {{"a", a}, {"b", b}});
                     }});
  };

  binary("add", [](auto& a, auto& b) { return add(a, b); });
  binary("sub", [](auto& a, auto& b) { return sub(a, b); });
  binary("mul", [](auto& a, auto& b) { return mul(a, b); });
  binary("div", [](auto& a, auto& b) { return div(a, b); });
  binary("maximum", [](auto& a, auto& b) { return maximum(a, b); });
  unary("scale", [](auto& x) { return scale(x, -1.7); });
  unary("add_scalar", [](auto& x) { return add_scalar(x, 0.3); });
  unary("neg", [](auto& x) { return neg(x); });
  unary("exp", [](auto& x) { return exp(x); });
  unary("sqrt", [](auto& x) { return sqrt(x); }, 0.5, 2.0);
  unary("log", [](auto& x) { return log(x); }, 0.5, 2.0);
  unary("square", [](auto& x) { return square(x); });
  unary("gelu", [](auto& x) { return gelu(x); }, -3, 3);
  unary("sum_all", [](auto& x) { return sum_all(square(x)); });
  unary("mean_all", [](auto& x) { return mean_all(square(x)); });
  unary("sum", [](auto& x) { return sum(x, 1); });
  unary("mean", [](auto& x) { return mean(x, -1, true); });
  unary("var", [](auto& x) { return var(x, 2); });
  unary("reshape", [](auto& x) { return reshape(x, {4, 6}); });
  unary("permute", [](auto& x) { return permute(x, {2, 0, 1}); });
  unary("transpose", [](auto& x) { return transpose(x, 1, 2); });
  unary("slice", [](auto& x) { return slice(x, 2, 1, 2); });
  unary("concat", [](auto& x) { return concat<double>({x, scale(x, 2.0)}, 1); });
  unary("broadcast_to", [](auto& x) { return broadcast_to(slice(x, 1, 0, 1), {2, 5, 4}); });

  cases.push_back({"matmul", CheckKind::matmul, [=] {
                     auto a = parameter(suite_tensor({2, 3, 4}, s0 + 5));
                     auto b = parameter(suite_tensor({4, 5}, s0 + 6));
                     return grad_check([&] { return weighted_sum(matmul(a, b), s0 + 7); }, {{"a", a}, {"b", b}});
                   }});
  cases.push_back({"softmax", CheckKind::softmax, [=] {
                     return grad_check([&](const Var<double>& x) { return weighted_sum(softmax(x, -1), s0 + 8); },
                                       suite_tensor({2, 3, 5}, s0 + 9, -2, 2));
                   }});

  auto layer = [&](std::string name, std::function<GradCheckResult()> run) {
    cases.push_back({std::move(name), CheckKind::layer, std::move(run)});
  };
  auto with_input = [](const ParamList<double>& params, const Var<double>& x) {
    ParamList<double> all{{"x", x}};
    all.insert(all.end(), params.begin(), params.end());
    return all;
  };

  layer("linear", [=] {
    SeedSequence seeds(s0 + 10);
    auto p = LinearParams<double>::init(4, 3, seeds);
    auto x = parameter(suite_tensor({2, 5, 4}, s0 + 11));
    ParamList<double> ps;
    p.collect("linear", ps);
    return grad_check([&] { return weighted_sum(linear(x, p), s0 + 12); }, with_input(ps, x));
  });
  auto conv_case = [&](std::string name, std::size_t in, std::size_t out, std::size_t k, std::size_t groups,
                       std::function<Var<double>(const Var<double>&, const Conv2dParams<double>&)> f) {
    layer(std::move(name), [=] {
      SeedSequence seeds(s0 + 13);
      auto p = Conv2dParams<double>::init(in, out, k, groups, seeds);
      auto x = parameter(suite_tensor({2, in, 5, 5}, s0 + 14));
      ParamList<double> ps;
      p.collect("conv", ps);
      return grad_check([&] { return weighted_sum(f(x, p), s0 + 15); }, with_input(ps, x));
    });
  };
  conv_case("conv2d", 3, 4, 3, 1, [](auto& x, auto& p) { return conv2d(x, p); });
  conv_case("conv2d_grouped", 4, 6, 3, 2, [](auto& x, auto& p) { return conv2d(x, p); });
  conv_case("depthwise_conv2d", 3, 3, 5, 3, [](auto& x, auto& p) { return depthwise_conv2d(x, p); });
  conv_case("pointwise_conv2d", 3, 5, 1, 1, [](auto& x, auto& p) { return pointwise_conv2d(x, p); });
  layer("layer_norm", [=] {
    auto p = LayerNormParams<double>::init(6);
    p.gamma.mutable_value() = suite_tensor({6}, s0 + 16, 0.5, 1.5);
    p.beta.mutable_value() = suite_tensor({6}, s0 + 17);
    auto x = parameter(suite_tensor({2, 3, 6}, s0 + 18));
    ParamList<double> ps;
    p.collect("ln", ps);
    return grad_check([&] { return weighted_sum(layer_norm(x, p), s0 + 19); }, with_input(ps, x));
  });
  layer("cross_entropy", [=] {
    return grad_check([](const Var<double>& x) { return cross_entropy(x, {1, 0, 3}); },
                      suite_tensor({3, 4}, s0 + 20, -2, 2));
  });
  layer("patchify_reconstruct", [=] {
    return grad_check(
        [&](const Var<double>& x) {
          auto patches = extract_patches(x, 2);
          return weighted_sum(reconstruct(scale(patches, 1.5), 4, 6), s0 + 21);
        },
        suite_tensor({2, 3, 4, 6}, s0 + 22));
  });

  for (auto variant : {RrcvVariant::cnn, RrcvVariant::dwconv, RrcvVariant::resnet}) {
    layer("rrcv_" + to_string(variant), [=] {
      const auto cfg = suite_block_config(AttentionKind::lmf_mhsa, variant);
      SeedSequence seeds(s0 + 23);
      auto p = RrcvParams<double>::init(cfg, seeds);
      auto x = parameter(suite_tensor({2, cfg.tokens(), cfg.embed_dim}, s0 + 24));
      ParamList<double> ps;
      p.collect("rrcv", ps);
      return grad_check([&] { return weighted_sum(rrcv_forward(x, p, cfg.use_class_token), s0 + 25); },
                        with_input(ps, x));
    });
  }
  layer("multi_scale_fuse", [=] {
    SeedSequence seeds(s0 + 26);
    auto p = MultiScaleParams<double>::init(3, {1, 3, 5}, seeds);
    auto x = parameter(suite_tensor({2, 3, 4, 4}, s0 + 27));
    ParamList<double> ps;
    p.collect("fusion", ps);
    return grad_check([&] { return weighted_sum(multi_scale_fuse(x, p), s0 + 28); }, with_input(ps, x));
  });
  for (auto attn : {AttentionKind::mhsa, AttentionKind::lmf_mhsa}) {
    layer(to_string(attn), [=] {
      const auto cfg = suite_block_config(attn, RrcvVariant::none);
      SeedSequence seeds(s0 + 29);
      auto p = AttentionParams<double>::init(cfg, seeds);
      auto x = parameter(suite_tensor({2, cfg.tokens(), cfg.embed_dim}, s0 + 30));
      ParamList<double> ps;
      p.collect("attn", ps);
      return grad_check([&] { return weighted_sum(attention_forward(x, p, cfg), s0 + 31); }, with_input(ps, x));
    });
  }
  for (auto variant : {RrcvVariant::none, RrcvVariant::resnet}) {
    layer("ct_block_" + to_string(variant), [=] {
      const auto cfg = suite_block_config(AttentionKind::lmf_mhsa, variant);
      SeedSequence seeds(s0 + 32);
      auto p = BlockParams<double>::init(cfg, seeds);
      auto x = parameter(suite_tensor({2, cfg.tokens(), cfg.embed_dim}, s0 + 33));
      ParamList<double> ps;
      p.collect("block", ps);
      return grad_check([&] { return weighted_sum(ct_block(x, p, cfg), s0 + 34); }, with_input(ps, x));
    });
  }

  if (opt.include_model) {
    cases.push_back({"model", CheckKind::model, [=] {
                       const auto& cfg = opt.model;
                       auto net = model_init<double>(cfg, s0 + 35);
                       auto img = parameter(
                           suite_tensor({opt.model_batch, cfg.in_channels, cfg.image_size, cfg.image_size}, s0 + 36, 0, 1));
                       std::vector<int> labels(opt.model_batch);
                       for (std::size_t i = 0; i < labels.size(); ++i)
                         labels[i] = static_cast<int>(i % cfg.num_classes);
                       GradCheckOptions g;
                       g.max_coords = opt.model_coords;
                       return grad_check([&] { return cross_entropy(model_forward(img, net), labels); },
                                         with_input(net.parameters(), img), g);
                     }});
  }

  if (opt.inject_fault) unary("faulty_square", [](auto& x) { return faulty_square(x); });
  return cases;
}

}  // namespace detail

/// Runs every case; `on_row` sees each row as soon as it finishes.
inline std::vector<SuiteRow> run_gradcheck_suite(const SuiteOptions& opt = {},
                                                 const std::function<void(const SuiteRow&)>& on_row = {}) {
  std::vector<SuiteRow> rows;
  for (const auto& c : detail::suite_cases(opt)) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteRow row{c.op, c.kind, tolerance_for(c.kind), c.run(), 0};
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
    if (on_row) on_row(rows.back());
  }
  return rows;
}

inline void print_suite_row(std::ostream& os, const SuiteRow& r) {
  os << std::left << std::setw(22) << r.op << std::setw(13) << to_string(r.kind) << std::right << std::scientific
     << std::setprecision(3) << std::setw(12) << r.result.max_rel_error << "  tol " << std::setprecision(0)
     << r.tolerance << std::defaultfloat << std::setw(8) << r.result.coords_checked << " coords  "
     << (r.passed() ? "ok" : "FAIL");
  if (!r.passed()) os << "  (worst: " << r.result.worst_input << "[" << r.result.worst_index << "])";
  os << '\n';
}

}  // namespace cta
