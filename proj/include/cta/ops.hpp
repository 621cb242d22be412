#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cta/autograd.hpp"

namespace cta {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// ---------------------------------------------------------------------------
// Broadcasting

/// Right-aligned broadcast of two shapes; an axis matches or one side is 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace detail {

/// Strides of `in` aligned to `out`'s rank, zero on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> s(out.size(), 0);
  const auto base = strides_of(in);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    if (in[i] != 1) s[i + off] = base[i];
  return s;
}

/// Visits every output index with the matching flat offsets of two operands.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel_of(out);
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t last = out[rank - 1];
  const std::size_t la = sa[rank - 1], lb = sb[rank - 1];
  for (std::size_t o = 0; o < n;) {
    std::size_t a = ia, b = ib;
    for (std::size_t j = 0; j < last; ++j, ++o, a += la, b += lb) f(o, a, b);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

/// Adds `g` (shape `out`) into `target` (broadcast into `out`) summing over broadcast axes.
template <typename T>
void accumulate_reduced(Tensor<T>& target, const Tensor<T>& g) {
  if (target.shape() == g.shape()) {
    auto* t = target.data();
    const auto* s = g.data();
    for (std::size_t i = 0; i < g.numel(); ++i) t[i] += s[i];
    return;
  }
  const auto st = broadcast_strides(target.shape(), g.shape());
  const std::vector<std::size_t> zero(g.rank(), 0);
  auto* t = target.data();
  const auto* s = g.data();
  for_each_broadcast(g.shape(), st, zero, [&](std::size_t o, std::size_t a, std::size_t) { t[a] += s[o]; });
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto* d = dst.data();
  const auto* s = src.data();
  for (std::size_t i = 0; i < src.numel(); ++i) d[i] += s[i];
}

/// Splits a shape around `axis` into (outer, extent, inner) loop counts.
inline std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T, typename F, typename DA, typename DB>
Var<T> binary_op(const char* op, const Var<T>& a, const Var<T>& b, F f, DA da, DB db) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(out_shape);
  const auto sa = detail::broadcast_strides(a.shape(), out_shape);
  const auto sb = detail::broadcast_strides(b.shape(), out_shape);
  {
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < out.numel(); ++i) po[i] = f(pa[i], pb[i]);
    } else {
      detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = f(pa[i], pb[j]); });
    }
  }
  return record(op, std::move(out), {a, b}, [sa, sb, da, db](Node<T>& self) {
    const T* pa = self.input(0).data();
    const T* pb = self.input(1).data();
    const T* po = self.value.data();
    const T* g = self.grad.data();
    T* ga = self.wants(0) ? self.input_grad(0).data() : nullptr;
    T* gb = self.wants(1) ? self.input_grad(1).data() : nullptr;
    detail::for_each_broadcast(self.value.shape(), sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (ga) ga[i] += g[o] * da(pa[i], pb[j], po[o]);
      if (gb) gb[j] += g[o] * db(pa[i], pb[j], po[o]);
    });
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
                      [](T, T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
                      [](T, T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
                      [](T x, T, T) { return x; });
}

/// IEEE division: a zero divisor yields inf/nan rather than an error.
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>("div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
                      [](T x, T y, T) { return -x / (y * y); });
}

/// Ties route the gradient to `a`.
template <typename T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>("maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
                      [](T x, T y, T) { return x >= y ? T(1) : T(0); },
                      [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

template <typename T, typename F, typename DF>
Var<T> unary_op(const char* op, const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = f(px[i]);
  return record(op, std::move(out), {x}, [df](Node<T>& self) {
    const T* px = self.input(0).data();
    const T* py = self.value.data();
    const T* g = self.grad.data();
    T* gx = self.input_grad(0).data();
    for (std::size_t i = 0; i < self.value.numel(); ++i) gx[i] += g[i] * df(px[i], py[i]);
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  return unary_op<T>("scale", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary_op<T>("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> neg(const Var<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary_op<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  return unary_op<T>("sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return unary_op<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary_op<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T s = T(0);
  for (auto v : x.value().span()) s += v;
  return record("sum_all", Tensor<T>::scalar(s), {x}, [](Node<T>& self) {
    const T g = self.grad[0];
    for (auto& v : self.input_grad(0).span()) v += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

namespace detail {
inline Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) out[axis] = 1;
  else out.erase(out.begin() + static_cast<long>(axis));
  return out;
}
}  // namespace detail

template <typename T>
Var<T> sum(const Var<T>& x, long axis_in, bool keepdim = false) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  Tensor<T> out(detail::reduced_shape(x.shape(), axis, keepdim));
  const T* px = x.value().data();
  T* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) po[o * inner + i] += px[(o * n + k) * inner + i];
  return record("sum", std::move(out), {x}, [outer = outer, n = n, inner = inner](Node<T>& self) {
    const T* g = self.grad.data();
    T* gx = self.input_grad(0).data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * n + k) * inner + i] += g[o * inner + i];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x, long axis, bool keepdim = false) {
  const std::size_t a = detail::normalize_axis(axis, x.rank());
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(x.dim(a)));
}

/// Population variance along an axis.
template <typename T>
Var<T> var(const Var<T>& x, long axis, bool keepdim = false) {
  const auto centered = sub(x, mean(x, axis, true));
  return mean(square(centered), axis, keepdim);
}

// ---------------------------------------------------------------------------
// Data movement

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return record("reshape", std::move(out), {x}, [](Node<T>& self) {
    detail::add_into(self.input_grad(0), self.grad);
  });
}

namespace detail {

template <typename T>
void permute_copy(const T* src, const Shape& src_shape, const std::vector<std::size_t>& perm, T* dst,
                  bool accumulate) {
  const std::size_t rank = src_shape.size();
  Shape out_shape(rank);
  const auto src_strides = strides_of(src_shape);
  std::vector<std::size_t> st(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = src_shape[perm[i]];
    st[i] = src_strides[perm[i]];
  }
  const std::vector<std::size_t> zero(rank, 0);
  if (accumulate)
    for_each_broadcast(out_shape, st, zero, [&](std::size_t o, std::size_t s, std::size_t) { dst[s] += src[o]; });
  else
    for_each_broadcast(out_shape, st, zero, [&](std::size_t o, std::size_t s, std::size_t) { dst[o] = src[s]; });
}

}  // namespace detail

/// Output axis i is input axis perm[i].
template <typename T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank) throw ShapeError("permutation rank mismatch");
  std::vector<bool> used(rank, false);
  for (auto p : perm) {
    if (p >= rank || used[p]) throw ShapeError("invalid permutation");
    used[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[perm[i]];
  Tensor<T> out(out_shape);
  detail::permute_copy(x.value().data(), x.shape(), perm, out.data(), false);
  return record("permute", std::move(out), {x}, [perm](Node<T>& self) {
    // scatter back: out index o corresponds to input offset s
    detail::permute_copy(self.grad.data(), self.input(0).shape(), perm, self.input_grad(0).data(), true);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x, std::size_t a1, std::size_t a2) {
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm.at(a1), perm.at(a2));
  return permute(x, perm);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, long axis_in) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t axis = detail::normalize_axis(axis_in, xs[0].rank());
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    if (x.rank() != out_shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < x.rank(); ++i)
      if (i != axis && x.shape()[i] != out_shape[i])
        throw ShapeError("concat operands differ off-axis: " + to_string(x.shape()) + " vs " + to_string(xs[0].shape()));
    out_shape[axis] += x.shape()[axis];
  }
  const auto [outer, total, inner] = detail::split_axis(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t n = x.shape()[axis];
    const T* px = x.value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(px + o * n * inner, n * inner, out.data() + (o * total + off) * inner);
    off += n;
  }
  return record_many<T>("concat", std::move(out), xs,
                        [offsets, outer = outer, total = total, inner = inner, axis](Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (!self.wants(k)) continue;
      const std::size_t n = self.input(k).shape()[axis];
      T* gx = self.input_grad(k).data();
      const T* g = self.grad.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n * inner; ++j) gx[o * n * inner + j] += g[(o * total + offsets[k]) * inner + j];
    }
  });
}

/// Elements [start, start+len) along an axis.
template <typename T>
Var<T> slice(const Var<T>& x, long axis_in, std::size_t start, std::size_t len) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  if (len == 0 || start + len > x.shape()[axis])
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of range for " +
                     to_string(x.shape()));
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  Tensor<T> out(out_shape);
  const T* px = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(px + (o * n + start) * inner, len * inner, out.data() + o * len * inner);
  return record("slice", std::move(out), {x}, [outer = outer, n = n, inner = inner, start, len](Node<T>& self) {
    T* gx = self.input_grad(0).data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < len * inner; ++j) gx[(o * n + start) * inner + j] += g[o * len * inner + j];
  });
}

template <typename T>
std::vector<Var<T>> split(const Var<T>& x, long axis, const std::vector<std::size_t>& sizes) {
  std::vector<Var<T>> parts;
  std::size_t start = 0;
  for (auto s : sizes) {
    parts.push_back(slice(x, axis, start, s));
    start += s;
  }
  if (start != x.shape()[detail::normalize_axis(axis, x.rank())]) throw ShapeError("split sizes do not cover the axis");
  return parts;
}

template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape)
    throw ShapeError("cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  Tensor<T> out(shape);
  const auto sx = detail::broadcast_strides(x.shape(), shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  const T* px = x.value().data();
  detail::for_each_broadcast(shape, sx, zero, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = px[i]; });
  return record("broadcast_to", std::move(out), {x}, [](Node<T>& self) {
    detail::accumulate_reduced(self.input_grad(0), self.grad);
  });
}

// ---------------------------------------------------------------------------
// Matmul

/// a[..., m, k] x b[..., k, n] with numpy-style broadcasting of leading axes.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul operands need rank >= 2");
  const std::size_t m = a.shape()[a.rank() - 2], k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2], n = b.shape()[b.rank() - 1];
  if (k != kb)
    throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  const Shape lead = broadcast_shape(lead_a, lead_b);
  std::vector<std::size_t> ia, ib;  // per batch item: matrix index into a and b
  {
    const auto sa = detail::broadcast_strides(lead_a, lead);
    const auto sb = detail::broadcast_strides(lead_b, lead);
    detail::for_each_broadcast(lead, sa, sb, [&](std::size_t, std::size_t i, std::size_t j) {
      ia.push_back(i);
      ib.push_back(j);
    });
  }
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  for (std::size_t t = 0; t < ia.size(); ++t) {
    ConstMatMap<T> A(a.value().data() + ia[t] * m * k, m, k);
    ConstMatMap<T> B(b.value().data() + ib[t] * k * n, k, n);
    MatMap<T> C(out.data() + t * m * n, m, n);
    C.noalias() = A * B;
  }
  return record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Node<T>& self) {
    for (std::size_t t = 0; t < ia.size(); ++t) {
      ConstMatMap<T> G(self.grad.data() + t * m * n, m, n);
      if (self.wants(0)) {
        ConstMatMap<T> B(self.input(1).data() + ib[t] * k * n, k, n);
        MatMap<T> GA(self.input_grad(0).data() + ia[t] * m * k, m, k);
        GA.noalias() += G * B.transpose();
      }
      if (self.wants(1)) {
        ConstMatMap<T> A(self.input(0).data() + ia[t] * m * k, m, k);
        MatMap<T> GB(self.input_grad(1).data() + ib[t] * k * n, k, n);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax

/// Max-subtracted softmax along an axis.
template <typename T>
Var<T> softmax(const Var<T>& x, long axis_in = -1) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, px[base + j * inner]);
      T s = T(0);
      for (std::size_t j = 0; j < n; ++j) s += (po[base + j * inner] = std::exp(px[base + j * inner] - mx));
      for (std::size_t j = 0; j < n; ++j) po[base + j * inner] /= s;
    }
  return record("softmax", std::move(out), {x}, [outer = outer, n = n, inner = inner](Node<T>& self) {
    const T* y = self.value.data();
    const T* g = self.grad.data();
    T* gx = self.input_grad(0).data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t p = base + j * inner;
          gx[p] += y[p] * (g[p] - dot);
        }
      }
  });
}

}  // namespace cta
