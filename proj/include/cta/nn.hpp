#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "cta/ops.hpp"

namespace cta {

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// Hands out one independent RNG stream per parameter tensor.
class SeedSequence {
 public:
  explicit SeedSequence(std::uint64_t seed) : seed_(seed) {}
  std::uint64_t next() { return CounterRng::derive(seed_, stream_++); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_ = 0;
};

// ---------------------------------------------------------------------------
// Parameter blocks

template <typename T>
struct LinearParams {
  Var<T> weight;  // [out_dim, in_dim]
  Var<T> bias;    // [out_dim], optional

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }

  /// Uniform in +-1/sqrt(fan_in) for weight and bias.
  static LinearParams init(std::size_t in_dim, std::size_t out_dim, SeedSequence& seeds, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    LinearParams p;
    p.weight = parameter(Tensor<T>::uniform({out_dim, in_dim}, -bound, bound, seeds.next()));
    if (with_bias) p.bias = parameter(Tensor<T>::uniform({out_dim}, -bound, bound, seeds.next()));
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct Conv2dParams {
  Var<T> weight;  // [out_ch, in_ch / groups, k, k]
  Var<T> bias;    // [out_ch], optional
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1) * groups; }
  std::size_t kernel() const { return weight.dim(2); }

  /// "Same" convolution: odd kernel, stride 1, pad (k-1)/2.
  static Conv2dParams init(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t groups,
                           SeedSequence& seeds, bool with_bias = true) {
    if (k % 2 == 0) throw ConfigError("only odd kernel sizes are supported, got " + std::to_string(k));
    if (groups == 0 || in_ch % groups || out_ch % groups)
      throw ConfigError("channels " + std::to_string(in_ch) + "->" + std::to_string(out_ch) +
                        " not divisible by groups " + std::to_string(groups));
    const std::size_t fan_in = in_ch / groups * k * k;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Conv2dParams p;
    p.weight = parameter(Tensor<T>::uniform({out_ch, in_ch / groups, k, k}, -bound, bound, seeds.next()));
    if (with_bias) p.bias = parameter(Tensor<T>::uniform({out_ch}, -bound, bound, seeds.next()));
    p.padding = (k - 1) / 2;
    p.groups = groups;
    return p;
  }

  static Conv2dParams depthwise(std::size_t channels, std::size_t k, SeedSequence& seeds, bool with_bias = true) {
    return init(channels, channels, k, channels, seeds, with_bias);
  }

  static Conv2dParams pointwise(std::size_t in_ch, std::size_t out_ch, SeedSequence& seeds, bool with_bias = true) {
    return init(in_ch, out_ch, 1, 1, seeds, with_bias);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct LayerNormParams {
  Var<T> gamma;
  Var<T> beta;
  double eps = 1e-5;

  static LayerNormParams init(std::size_t dim) {
    return {parameter(Tensor<T>::ones({dim})), parameter(Tensor<T>::zeros({dim})), 1e-5};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

// ---------------------------------------------------------------------------
// Linear

/// y = x W^T + b over the last axis.
template <typename T>
Var<T> linear(const Var<T>& x, const LinearParams<T>& p) {
  const std::size_t in = p.in_dim(), outd = p.out_dim();
  if (x.rank() == 0 || x.shape().back() != in)
    throw ShapeError("linear expects last axis " + std::to_string(in) + ", got " + to_string(x.shape()));
  if (p.bias.defined() && (p.bias.rank() != 1 || p.bias.dim(0) != outd)) throw ShapeError("linear bias length mismatch");
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Tensor<T> out(out_shape);
  ConstMatMap<T> X(x.value().data(), rows, in);
  ConstMatMap<T> W(p.weight.value().data(), outd, in);
  MatMap<T> Y(out.data(), rows, outd);
  Y.noalias() = X * W.transpose();
  if (p.bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(p.bias.value().data(), outd);
    Y.rowwise() += b;
  }
  const bool has_bias = p.bias.defined();
  auto backward = [rows, in, outd, has_bias](Node<T>& self) {
    ConstMatMap<T> G(self.grad.data(), rows, outd);
    if (self.wants(0)) {
      ConstMatMap<T> W(self.input(1).data(), outd, in);
      MatMap<T> GX(self.input_grad(0).data(), rows, in);
      GX.noalias() += G * W;
    }
    if (self.wants(1)) {
      ConstMatMap<T> X(self.input(0).data(), rows, in);
      MatMap<T> GW(self.input_grad(1).data(), outd, in);
      GW.noalias() += G.transpose() * X;
    }
    if (has_bias && self.wants(2)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(self.input_grad(2).data(), outd);
      gb += G.colwise().sum();
    }
  };
  if (has_bias) return record("linear", std::move(out), {x, p.weight, p.bias}, backward);
  return record("linear", std::move(out), {x, p.weight}, backward);
}

// ---------------------------------------------------------------------------
// Convolution

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw ShapeError("kernel " + std::to_string(k) + " larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t batch, in_ch, h, w, out_ch, k, stride, pad, groups, ho, wo;
  std::size_t cin_g() const { return in_ch / groups; }
  std::size_t cout_g() const { return out_ch / groups; }
};

/// col[(c*k + u)*k + v, i*wo + j] = x[c, i*s + u - p, j*s + v - p] for one image and group.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t cg = g.cin_g(), hw = g.ho * g.wo;
  for (std::size_t c = 0; c < cg; ++c)
    for (std::size_t u = 0; u < g.k; ++u)
      for (std::size_t v = 0; v < g.k; ++v) {
        T* row = col + ((c * g.k + u) * g.k + v) * hw;
        const T* plane = x + c * g.h * g.w;
        for (std::size_t i = 0; i < g.ho; ++i) {
          const long y = static_cast<long>(i * g.stride + u) - static_cast<long>(g.pad);
          for (std::size_t j = 0; j < g.wo; ++j) {
            const long xx = static_cast<long>(j * g.stride + v) - static_cast<long>(g.pad);
            row[i * g.wo + j] = (y < 0 || y >= static_cast<long>(g.h) || xx < 0 || xx >= static_cast<long>(g.w))
                                    ? T(0)
                                    : plane[static_cast<std::size_t>(y) * g.w + static_cast<std::size_t>(xx)];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t cg = g.cin_g(), hw = g.ho * g.wo;
  for (std::size_t c = 0; c < cg; ++c)
    for (std::size_t u = 0; u < g.k; ++u)
      for (std::size_t v = 0; v < g.k; ++v) {
        const T* row = col + ((c * g.k + u) * g.k + v) * hw;
        T* plane = dx + c * g.h * g.w;
        for (std::size_t i = 0; i < g.ho; ++i) {
          const long y = static_cast<long>(i * g.stride + u) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.h)) continue;
          for (std::size_t j = 0; j < g.wo; ++j) {
            const long xx = static_cast<long>(j * g.stride + v) - static_cast<long>(g.pad);
            if (xx < 0 || xx >= static_cast<long>(g.w)) continue;
            plane[static_cast<std::size_t>(y) * g.w + static_cast<std::size_t>(xx)] += row[i * g.wo + j];
          }
        }
      }
}

template <typename T>
void depthwise_forward(const T* x, const T* w, const T* b, const ConvGeometry& g, T* out) {
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t c = 0; c < g.in_ch; ++c) {
      const T* plane = x + (n * g.in_ch + c) * g.h * g.w;
      const T* ker = w + c * g.k * g.k;
      T* o = out + (n * g.in_ch + c) * g.ho * g.wo;
      const T bias = b ? b[c] : T(0);
      for (std::size_t i = 0; i < g.ho; ++i)
        for (std::size_t j = 0; j < g.wo; ++j) {
          T acc = bias;
          for (std::size_t u = 0; u < g.k; ++u) {
            const long y = static_cast<long>(i * g.stride + u) - static_cast<long>(g.pad);
            if (y < 0 || y >= static_cast<long>(g.h)) continue;
            for (std::size_t v = 0; v < g.k; ++v) {
              const long xx = static_cast<long>(j * g.stride + v) - static_cast<long>(g.pad);
              if (xx < 0 || xx >= static_cast<long>(g.w)) continue;
              acc += ker[u * g.k + v] * plane[static_cast<std::size_t>(y) * g.w + static_cast<std::size_t>(xx)];
            }
          }
          o[i * g.wo + j] = acc;
        }
    }
}

template <typename T>
void depthwise_backward(const T* x, const T* w, const T* gout, const ConvGeometry& g, T* gx, T* gw, T* gb) {
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t c = 0; c < g.in_ch; ++c) {
      const T* plane = x + (n * g.in_ch + c) * g.h * g.w;
      const T* ker = w + c * g.k * g.k;
      const T* go = gout + (n * g.in_ch + c) * g.ho * g.wo;
      T* gplane = gx ? gx + (n * g.in_ch + c) * g.h * g.w : nullptr;
      T* gker = gw ? gw + c * g.k * g.k : nullptr;
      for (std::size_t i = 0; i < g.ho; ++i)
        for (std::size_t j = 0; j < g.wo; ++j) {
          const T gv = go[i * g.wo + j];
          if (gb) gb[c] += gv;
          for (std::size_t u = 0; u < g.k; ++u) {
            const long y = static_cast<long>(i * g.stride + u) - static_cast<long>(g.pad);
            if (y < 0 || y >= static_cast<long>(g.h)) continue;
            for (std::size_t v = 0; v < g.k; ++v) {
              const long xx = static_cast<long>(j * g.stride + v) - static_cast<long>(g.pad);
              if (xx < 0 || xx >= static_cast<long>(g.w)) continue;
              const std::size_t off = static_cast<std::size_t>(y) * g.w + static_cast<std::size_t>(xx);
              if (gker) gker[u * g.k + v] += gv * plane[off];
              if (gplane) gplane[off] += gv * ker[u * g.k + v];
            }
          }
        }
    }
}

}  // namespace detail

/// Grouped 2-D convolution on [B, C, H, W]. General case runs im2col + GEMM
/// per image and group; pure depthwise (groups == C == out_ch) uses a direct loop.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Conv2dParams<T>& p) {
  if (x.rank() != 4) throw ShapeError("conv2d expects [B,C,H,W], got " + to_string(x.shape()));
  const auto& ws = p.weight.shape();
  if (ws.size() != 4 || ws[2] != ws[3]) throw ShapeError("conv2d weight must be [O, C/g, k, k]");
  if (p.stride == 0 || p.groups == 0) throw ConfigError("conv2d stride and groups must be >= 1");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), ws[0], ws[2], p.stride, p.padding, p.groups, 0, 0};
  if (g.in_ch % g.groups || g.out_ch % g.groups)
    throw ShapeError("conv2d channels not divisible by groups");
  if (ws[1] * g.groups != g.in_ch)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(g.in_ch) + " channels, weight expects " +
                     std::to_string(ws[1] * g.groups));
  if (p.bias.defined() && (p.bias.rank() != 1 || p.bias.dim(0) != g.out_ch)) throw ShapeError("conv2d bias length mismatch");
  g.ho = conv_out_extent(g.h, g.k, g.stride, g.pad);
  g.wo = conv_out_extent(g.w, g.k, g.stride, g.pad);
  Tensor<T> out({g.batch, g.out_ch, g.ho, g.wo});
  const bool has_bias = p.bias.defined();
  const bool depthwise = g.groups == g.in_ch && g.out_ch == g.in_ch;
  const bool direct_1x1 = g.k == 1 && g.stride == 1 && g.pad == 0;
  const std::size_t hw = g.ho * g.wo, ckk = g.cin_g() * g.k * g.k;

  if (depthwise) {
    detail::depthwise_forward(x.value().data(), p.weight.value().data(), has_bias ? p.bias.value().data() : nullptr, g,
                              out.data());
  } else {
    Buffer<T> col(direct_1x1 ? 0 : ckk * hw);
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t gi = 0; gi < g.groups; ++gi) {
        const T* xin = x.value().data() + (n * g.in_ch + gi * g.cin_g()) * g.h * g.w;
        if (!direct_1x1) detail::im2col(xin, g, col.data());
        ConstMatMap<T> C(direct_1x1 ? xin : col.data(), ckk, hw);
        ConstMatMap<T> W(p.weight.value().data() + gi * g.cout_g() * ckk, g.cout_g(), ckk);
        MatMap<T> O(out.data() + (n * g.out_ch + gi * g.cout_g()) * hw, g.cout_g(), hw);
        O.noalias() = W * C;
        if (has_bias)
          for (std::size_t o = 0; o < g.cout_g(); ++o) O.row(o).array() += p.bias.value()[gi * g.cout_g() + o];
      }
  }

  auto backward = [g, has_bias, depthwise, direct_1x1, hw, ckk](Node<T>& self) {
    const T* gout = self.grad.data();
    T* gx = self.wants(0) ? self.input_grad(0).data() : nullptr;
    T* gw = self.wants(1) ? self.input_grad(1).data() : nullptr;
    T* gb = has_bias && self.wants(2) ? self.input_grad(2).data() : nullptr;
    if (depthwise) {
      detail::depthwise_backward(self.input(0).data(), self.input(1).data(), gout, g, gx, gw, gb);
      return;
    }
    Buffer<T> col(direct_1x1 ? 0 : ckk * hw);
    Buffer<T> dcol(direct_1x1 ? 0 : ckk * hw);
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t gi = 0; gi < g.groups; ++gi) {
        const T* xin = self.input(0).data() + (n * g.in_ch + gi * g.cin_g()) * g.h * g.w;
        ConstMatMap<T> G(gout + (n * g.out_ch + gi * g.cout_g()) * hw, g.cout_g(), hw);
        if (gb)
          for (std::size_t o = 0; o < g.cout_g(); ++o) gb[gi * g.cout_g() + o] += G.row(o).sum();
        if (gw) {
          if (!direct_1x1) detail::im2col(xin, g, col.data());
          ConstMatMap<T> C(direct_1x1 ? xin : col.data(), ckk, hw);
          MatMap<T> GW(gw + gi * g.cout_g() * ckk, g.cout_g(), ckk);
          GW.noalias() += G * C.transpose();
        }
        if (gx) {
          ConstMatMap<T> W(self.input(1).data() + gi * g.cout_g() * ckk, g.cout_g(), ckk);
          T* gxin = gx + (n * g.in_ch + gi * g.cin_g()) * g.h * g.w;
          if (direct_1x1) {
            MatMap<T> GX(gxin, ckk, hw);
            GX.noalias() += W.transpose() * G;
          } else {
            MatMap<T> DC(dcol.data(), ckk, hw);
            DC.noalias() = W.transpose() * G;
            detail::col2im_add(dcol.data(), g, gxin);
          }
        }
      }
  };
  if (has_bias) return record("conv2d", std::move(out), {x, p.weight, p.bias}, backward);
  return record("conv2d", std::move(out), {x, p.weight}, backward);
}

/// Per-channel convolution; requires groups == channels.
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Conv2dParams<T>& p) {
  if (p.groups != x.dim(1) || p.out_channels() != x.dim(1))
    throw ShapeError("depthwise_conv2d needs groups == in_ch == out_ch");
  return conv2d(x, p);
}

/// 1x1 channel mixer; requires k == 1 and groups == 1.
template <typename T>
Var<T> pointwise_conv2d(const Var<T>& x, const Conv2dParams<T>& p) {
  if (p.kernel() != 1 || p.groups != 1) throw ShapeError("pointwise_conv2d needs a 1x1 kernel and groups == 1");
  return conv2d(x, p);
}

// ---------------------------------------------------------------------------
// Normalization, activation, loss

/// (x - mean) / sqrt(var + eps) * gamma + beta per last-axis slice, population variance.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const LayerNormParams<T>& p) {
  const std::size_t d = p.gamma.numel();
  if (x.rank() == 0 || x.shape().back() != d)
    throw ShapeError("layer_norm expects last axis " + std::to_string(d) + ", got " + to_string(x.shape()));
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> rstd(rows);
  const T* px = x.value().data();
  const T* gam = p.gamma.value().data();
  const T* bet = p.beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T m = T(0);
    for (std::size_t j = 0; j < d; ++j) m += row[j];
    m /= static_cast<T>(d);
    T v = T(0);
    for (std::size_t j = 0; j < d; ++j) v += (row[j] - m) * (row[j] - m);
    v /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(v + static_cast<T>(p.eps));
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (row[j] - m) * rstd[r] * gam[j] + bet[j];
  }
  return record("layer_norm", std::move(out), {x, p.gamma, p.beta}, [rows, d, rstd](Node<T>& self) {
    const T* px = self.input(0).data();
    const T* gam = self.input(1).data();
    const T* g = self.grad.data();
    T* gx = self.wants(0) ? self.input_grad(0).data() : nullptr;
    T* gg = self.wants(1) ? self.input_grad(1).data() : nullptr;
    T* gbeta = self.wants(2) ? self.input_grad(2).data() : nullptr;
    std::vector<T> xhat(d), dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = px + r * d;
      const T* grow = g + r * d;
      T m = T(0);
      for (std::size_t j = 0; j < d; ++j) m += row[j];
      m /= static_cast<T>(d);
      T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (row[j] - m) * rstd[r];
        dxhat[j] = grow[j] * gam[j];
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
        if (gg) gg[j] += grow[j] * xhat[j];
        if (gbeta) gbeta[j] += grow[j];
      }
      mean_dxhat /= static_cast<T>(d);
      mean_dxhat_xhat /= static_cast<T>(d);
      if (gx)
        for (std::size_t j = 0; j < d; ++j)
          gx[r * d + j] += rstd[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  });
}

/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = static_cast<T>(0.044715);
  return unary_op<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(c * (v + a * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v);
      });
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects [B, classes], got " + to_string(logits.shape()));
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) throw ShapeError("cross_entropy label count != batch");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= k)
      throw InputError("label " + std::to_string(l) + " out of range [0," + std::to_string(k) + ")");
  const T* z = logits.value().data();
  std::vector<T> lse(b);
  T loss = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = z + i * k;
    const T mx = *std::max_element(row, row + k);
    T s = T(0);
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    lse[i] = mx + std::log(s);
    loss += lse[i] - row[labels[i]];
  }
  loss /= static_cast<T>(b);
  return record("cross_entropy", Tensor<T>::scalar(loss), {logits}, [labels, lse, b, k](Node<T>& self) {
    const T g = self.grad[0] / static_cast<T>(b);
    const T* z = self.input(0).data();
    T* gz = self.input_grad(0).data();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < k; ++j)
        gz[i * k + j] += g * (std::exp(z[i * k + j] - lse[i]) - (static_cast<int>(j) == labels[i] ? T(1) : T(0)));
  });
}

}  // namespace cta
