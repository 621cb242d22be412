#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cta/nn.hpp"

namespace cta {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates checked per input tensor; 0 checks every coordinate.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0x5eed;
  /// Denominator floor. Central differences carry ~1e-11 of roundoff, so
  /// gradients that are exactly zero by construction need a floor well above that.
  double rel_floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_input;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. The relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, rel_floor).
/// `f` must rebuild its graph on every call; inputs are perturbed in place and restored.
inline GradCheckResult grad_check(const std::function<Var<double>()>& f, const ParamList<double>& inputs,
                                  const GradCheckOptions& opt = {}) {
  for (auto p : inputs) p.var.zero_grad();
  const Var<double> out = f();
  if (out.numel() != 1) throw ContractError("grad_check needs a scalar function, got " + to_string(out.shape()));
  if (const auto bad = find_non_finite(out); !bad.empty())
    throw NumericalError("non-finite value produced by op '" + bad + "'");
  backward(out);

  auto eval = [&]() {
    NoGradGuard guard;
    const double v = f().value().item();
    if (!std::isfinite(v)) throw NumericalError("non-finite loss under central-difference perturbation");
    return v;
  };

  GradCheckResult res;
  CounterRng rng(opt.seed);
  for (const auto& in : inputs) {
    auto param = in.var;
    const Tensor<double> analytic = param.grad();
    const std::size_t n = param.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (opt.max_coords && n > opt.max_coords) {
      for (std::size_t i = 0; i < opt.max_coords; ++i) std::swap(coords[i], coords[i + rng.below(n - i)]);
      coords.resize(opt.max_coords);
    }
    for (auto i : coords) {
      double& slot = param.mutable_value()[i];
      const double orig = slot;
      slot = orig + opt.eps;
      const double up = eval();
      slot = orig - opt.eps;
      const double down = eval();
      slot = orig;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.rel_floor});
      ++res.coords_checked;
      res.max_abs_error = std::max(res.max_abs_error, std::abs(a - numeric));
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_input = in.name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

/// Single-input convenience form.
inline GradCheckResult grad_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                                  const GradCheckOptions& opt = {}) {
  auto v = parameter(x);
  return grad_check([&] { return f(v); }, ParamList<double>{{"x", v}}, opt);
}

}  // namespace cta
