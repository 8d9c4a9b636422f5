#pragma once

// Primitive catalogue of the autodiff engine. Every function appends exactly
// one node to the graph of its first argument and registers its
// vector-Jacobian product. Image tensors are NHWC.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "xdr/core/graph.hpp"

namespace xdr::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using ConstRowVec = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

// Upper bound on the number of im2col elements materialized at once.
inline constexpr std::size_t kChunkElems = std::size_t(1) << 22;

inline int chunk_samples(std::size_t per_sample, int n) {
  return static_cast<int>(std::clamp<std::size_t>(kChunkElems / std::max<std::size_t>(per_sample, 1), 1, n));
}

template <class T>
Graph<T>& same_graph(std::initializer_list<Var<T>> vars) {
  Graph<T>* g = vars.begin()->graph;
  for (const auto& v : vars)
    if (v.graph != g) throw Error("operands belong to different graphs");
  return *g;
}

// Gathers k x k patches of an H x W x C image into rows of an
// (OH*OW) x (k*k*C) matrix. Patch element order is (kh, kw, c).
template <class T>
void im2col(const T* img, int H, int W, int C, int k, int stride, int pad, int OH, int OW, T* cols) {
  const std::size_t K = std::size_t(k) * k * C;
  for (int oh = 0; oh < OH; ++oh)
    for (int ow = 0; ow < OW; ++ow) {
      T* row = cols + (std::size_t(oh) * OW + ow) * K;
      for (int kh = 0; kh < k; ++kh) {
        const int ih = oh * stride - pad + kh;
        for (int kw = 0; kw < k; ++kw) {
          const int iw = ow * stride - pad + kw;
          T* dst = row + (std::size_t(kh) * k + kw) * C;
          if (ih < 0 || ih >= H || iw < 0 || iw >= W)
            std::fill(dst, dst + C, T(0));
          else
            std::copy_n(img + (std::size_t(ih) * W + iw) * C, C, dst);
        }
      }
    }
}

// Adjoint of im2col: scatter-adds patch rows back into the image.
template <class T>
void col2im(const T* cols, int H, int W, int C, int k, int stride, int pad, int OH, int OW, T* img) {
  const std::size_t K = std::size_t(k) * k * C;
  for (int oh = 0; oh < OH; ++oh)
    for (int ow = 0; ow < OW; ++ow) {
      const T* row = cols + (std::size_t(oh) * OW + ow) * K;
      for (int kh = 0; kh < k; ++kh) {
        const int ih = oh * stride - pad + kh;
        if (ih < 0 || ih >= H) continue;
        for (int kw = 0; kw < k; ++kw) {
          const int iw = ow * stride - pad + kw;
          if (iw < 0 || iw >= W) continue;
          const T* src = row + (std::size_t(kh) * k + kw) * C;
          T* dst = img + (std::size_t(ih) * W + iw) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
        }
      }
    }
}

template <class T, class F, class DF>
Var<T> unary(const char* name, Var<T> x, F f, DF df) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  const int xi = x.id;
  return g.record(name, std::move(y), {xi}, [xi, df](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    const Tensor<T>& xv = g.value(xi);
    const Tensor<T>& yv = g.value(self);
    Tensor<T>& gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
  });
}

template <class T>
void require_same_shape(Graph<T>& g, const char* op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) g.fail(op, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <class T>
void require_rank(Graph<T>& g, const char* op, Var<T> a, int rank, const char* what) {
  if (a.value().rank() != rank)
    g.fail(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " + to_string(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> relu(Var<T> x) {
  return detail::unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                          [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> exp(Var<T> x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
  return detail::unary<T>("scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_scalar(Var<T> x, T c) {
  return detail::unary<T>("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph({a, b});
  detail::require_same_shape(g, "add", a, b);
  Tensor<T> y = a.value();
  y += b.value();
  const int ai = a.id, bi = b.id;
  return g.record("add", std::move(y), {ai, bi}, [ai, bi](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    if (g.requires_grad(ai)) g.grad_buffer(ai) += gy;
    if (g.requires_grad(bi)) g.grad_buffer(bi) += gy;
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph({a, b});
  detail::require_same_shape(g, "sub", a, b);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const int ai = a.id, bi = b.id;
  return g.record("sub", std::move(y), {ai, bi}, [ai, bi](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    if (g.requires_grad(ai)) g.grad_buffer(ai) += gy;
    if (g.requires_grad(bi)) {
      Tensor<T>& gb = g.grad_buffer(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph({a, b});
  detail::require_same_shape(g, "mul", a, b);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const int ai = a.id, bi = b.id;
  return g.record("mul", std::move(y), {ai, bi}, [ai, bi](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    const Tensor<T>& av = g.value(ai);
    const Tensor<T>& bv = g.value(bi);
    if (g.requires_grad(ai)) {
      Tensor<T>& ga = g.grad_buffer(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (g.requires_grad(bi)) {
      Tensor<T>& gb = g.grad_buffer(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph({a, b});
  detail::require_same_shape(g, "div", a, b);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= bv[i];
  const int ai = a.id, bi = b.id;
  return g.record("div", std::move(y), {ai, bi}, [ai, bi](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    const Tensor<T>& yv = g.value(self);
    const Tensor<T>& bv = g.value(bi);
    if (g.requires_grad(ai)) {
      Tensor<T>& ga = g.grad_buffer(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] / bv[i];
    }
    if (g.requires_grad(bi)) {
      Tensor<T>& gb = g.grad_buffer(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i] * yv[i] / bv[i];
    }
  });
}

/// Forward identity; backward contributes nothing to x.
template <class T>
Var<T> stop_gradient(Var<T> x) {
  return x.graph->input(x.value(), "stop_gradient");
}

/// Forward value is `value`; the gradient passes to x unchanged. Equivalent to
/// x + sg(value - x) without the rounding of the sum.
template <class T>
Var<T> straight_through(Var<T> x, Tensor<T> value) {
  Graph<T>& g = *x.graph;
  if (value.shape() != x.shape())
    g.fail("straight_through", "value shape " + to_string(value.shape()) + " vs " + to_string(x.shape()));
  const int xi = x.id;
  return g.record("straight_through", std::move(value), {xi}, [xi](Graph<T>& g, int self) {
    g.grad_buffer(xi) += g.out_grad(self);
  });
}

// ------------------------------------------------------------------ structure

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Graph<T>& g = *x.graph;
  if (numel(shape) != x.value().size())
    g.fail("reshape", "cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  const int xi = x.id;
  return g.record("reshape", x.value().reshaped(std::move(shape)), {xi}, [xi](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    Tensor<T>& gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
  });
}

/// Collapses every axis after the first: [N, ...] -> [N, prod(...)].
template <class T>
Var<T> flatten(Var<T> x) {
  const int n = x.dim(0);
  return reshape(x, Shape{n, static_cast<int>(x.value().size() / n)});
}

/// Concatenation along the last axis (channels for NHWC, columns for 2-D).
template <class T>
Var<T> concat_last(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_last: no operands");
  Graph<T>& g = *xs.front().graph;
  Shape lead = xs.front().shape();
  lead.pop_back();
  int total = 0;
  std::vector<int> ids, widths;
  for (const auto& v : xs) {
    if (v.graph != &g) throw Error("operands belong to different graphs");
    Shape s = v.shape();
    widths.push_back(s.back());
    s.pop_back();
    if (s != lead) g.fail("concat_last", "leading extents differ: " + to_string(v.shape()));
    total += widths.back();
    ids.push_back(v.id);
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> y(out_shape);
  const std::size_t outer = y.size() / total;
  int off = 0;
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const T* src = xs[j].value().data();
    for (std::size_t r = 0; r < outer; ++r)
      std::copy_n(src + r * widths[j], widths[j], y.data() + r * total + off);
    off += widths[j];
  }
  return g.record("concat_last", std::move(y), ids, [ids, widths, total, outer](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    int off = 0;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (g.requires_grad(ids[j])) {
        Tensor<T>& gx = g.grad_buffer(ids[j]);
        for (std::size_t r = 0; r < outer; ++r)
          for (int c = 0; c < widths[j]; ++c) gx[r * widths[j] + c] += gy[r * total + off + c];
      }
      off += widths[j];
    }
  });
}

/// Columns [begin, begin+count) of the last axis.
template <class T>
Var<T> slice_last(Var<T> x, int begin, int count) {
  Graph<T>& g = *x.graph;
  const int width = x.shape().back();
  if (begin < 0 || count <= 0 || begin + count > width)
    g.fail("slice_last", "range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") outside last extent " + std::to_string(width));
  Shape out_shape = x.shape();
  out_shape.back() = count;
  Tensor<T> y(out_shape);
  const std::size_t outer = y.size() / count;
  for (std::size_t r = 0; r < outer; ++r)
    std::copy_n(x.value().data() + r * width + begin, count, y.data() + r * count);
  const int xi = x.id;
  return g.record("slice_last", std::move(y), {xi}, [xi, begin, count, width, outer](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    Tensor<T>& gx = g.grad_buffer(xi);
    for (std::size_t r = 0; r < outer; ++r)
      for (int c = 0; c < count; ++c) gx[r * width + begin + c] += gy[r * count + c];
  });
}

/// Rows of a 2-D table selected by index (embedding lookup).
template <class T>
Var<T> gather_rows(Var<T> table, const std::vector<int>& index) {
  Graph<T>& g = *table.graph;
  detail::require_rank(g, "gather_rows", table, 2, "table");
  const int rows = table.dim(0), width = table.dim(1);
  if (index.empty()) g.fail("gather_rows", "empty index");
  Tensor<T> y(Shape{static_cast<int>(index.size()), width});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= rows)
      g.fail("gather_rows", "index " + std::to_string(index[r]) + " outside [0, " + std::to_string(rows) + ")");
    std::copy_n(table.value().data() + std::size_t(index[r]) * width, width, y.data() + r * width);
  }
  const int ti = table.id;
  return g.record("gather_rows", std::move(y), {ti}, [ti, index, width](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    Tensor<T>& gt = g.grad_buffer(ti);
    for (std::size_t r = 0; r < index.size(); ++r)
      for (int c = 0; c < width; ++c) gt[std::size_t(index[r]) * width + c] += gy[r * width + c];
  });
}

/// Nearest-neighbour x2 upsampling of an NHWC tensor.
template <class T>
Var<T> upsample2x(Var<T> x) {
  Graph<T>& g = *x.graph;
  detail::require_rank(g, "upsample2x", x, 4, "input");
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Tensor<T> y(Shape{N, 2 * H, 2 * W, C});
  const T* xv = x.value().data();
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < 2 * H; ++h)
      for (int w = 0; w < 2 * W; ++w)
        std::copy_n(xv + ((std::size_t(n) * H + h / 2) * W + w / 2) * C, C,
                    y.data() + ((std::size_t(n) * 2 * H + h) * 2 * W + w) * C);
  const int xi = x.id;
  return g.record("upsample2x", std::move(y), {xi}, [xi, N, H, W, C](Graph<T>& g, int self) {
    const T* gy = g.out_grad(self).data();
    T* gx = g.grad_buffer(xi).data();
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < 2 * H; ++h)
        for (int w = 0; w < 2 * W; ++w) {
          const T* src = gy + ((std::size_t(n) * 2 * H + h) * 2 * W + w) * C;
          T* dst = gx + ((std::size_t(n) * H + h / 2) * W + w / 2) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
        }
  });
}

// ----------------------------------------------------------------- reductions

template <class T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = *x.graph;
  T s = T(0);
  for (T v : x.value().values()) s += v;
  const int xi = x.id;
  return g.record("sum", Tensor<T>::scalar(s), {xi}, [xi](Graph<T>& g, int self) {
    const T gy = g.out_grad(self)[0];
    Tensor<T>& gx = g.grad_buffer(xi);
    for (auto& v : gx.values()) v += gy;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  Graph<T>& g = *x.graph;
  const T n = static_cast<T>(x.value().size());
  T s = T(0);
  for (T v : x.value().values()) s += v;
  const int xi = x.id;
  return g.record("mean", Tensor<T>::scalar(s / n), {xi}, [xi, n](Graph<T>& g, int self) {
    const T gy = g.out_grad(self)[0] / n;
    Tensor<T>& gx = g.grad_buffer(xi);
    for (auto& v : gx.values()) v += gy;
  });
}

/// Sums out one axis; a rank-1 input reduces to shape {1}.
template <class T>
Var<T> sum_axis(Var<T> x, int axis) {
  Graph<T>& g = *x.graph;
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) g.fail("sum_axis", "axis out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const int n = s[axis];
  Shape out_shape;
  for (int i = 0; i < r; ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> y(out_shape);
  const T* xv = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (int k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += xv[(o * n + k) * inner + i];
  const int xi = x.id;
  return g.record("sum_axis", std::move(y), {xi}, [xi, outer, inner, n](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    Tensor<T>& gx = g.grad_buffer(xi);
    for (std::size_t o = 0; o < outer; ++o)
      for (int k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * n + k) * inner + i] += gy[o * inner + i];
  });
}

// ------------------------------------------------------------- linear algebra

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph({a, b});
  detail::require_rank(g, "matmul", a, 2, "left operand");
  detail::require_rank(g, "matmul", b, 2, "right operand");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) g.fail("matmul", "inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  using namespace detail;
  Tensor<T> y(Shape{n, m});
  MatMap<T>(y.data(), n, m).noalias() = ConstMatMap<T>(a.value().data(), n, k) * ConstMatMap<T>(b.value().data(), k, m);
  const int ai = a.id, bi = b.id;
  return g.record("matmul", std::move(y), {ai, bi}, [ai, bi, n, k, m](Graph<T>& g, int self) {
    ConstMatMap<T> gy(g.out_grad(self).data(), n, m);
    if (g.requires_grad(ai))
      MatMap<T>(g.grad_buffer(ai).data(), n, k).noalias() += gy * ConstMatMap<T>(g.value(bi).data(), k, m).transpose();
    if (g.requires_grad(bi))
      MatMap<T>(g.grad_buffer(bi).data(), k, m).noalias() += ConstMatMap<T>(g.value(ai).data(), n, k).transpose() * gy;
  });
}

/// Fully-connected layer: x [N, in] * w [in, out] + b [out].
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Graph<T>& g = detail::same_graph({x, w, b});
  detail::require_rank(g, "linear", x, 2, "input");
  detail::require_rank(g, "linear", w, 2, "weight");
  const int n = x.dim(0), in = x.dim(1), out = w.dim(1);
  if (w.dim(0) != in) g.fail("linear", "input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  if (b.shape() != Shape{out}) g.fail("linear", "bias shape " + to_string(b.shape()));
  using namespace detail;
  Tensor<T> y(Shape{n, out});
  MatMap<T> Y(y.data(), n, out);
  Y.noalias() = ConstMatMap<T>(x.value().data(), n, in) * ConstMatMap<T>(w.value().data(), in, out);
  Y.rowwise() += ConstRowVec<T>(b.value().data(), out);
  const int xi = x.id, wi = w.id, bi = b.id;
  return g.record("linear", std::move(y), {xi, wi, bi}, [xi, wi, bi, n, in, out](Graph<T>& g, int self) {
    ConstMatMap<T> gy(g.out_grad(self).data(), n, out);
    if (g.requires_grad(xi))
      MatMap<T>(g.grad_buffer(xi).data(), n, in).noalias() += gy * ConstMatMap<T>(g.value(wi).data(), in, out).transpose();
    if (g.requires_grad(wi))
      MatMap<T>(g.grad_buffer(wi).data(), in, out).noalias() += ConstMatMap<T>(g.value(xi).data(), n, in).transpose() * gy;
    if (g.requires_grad(bi)) {
      Tensor<T>& gb = g.grad_buffer(bi);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < out; ++c) gb[c] += gy(r, c);
    }
  });
}

/// 2-D convolution with "same" zero padding. x [N,H,W,Cin], w [k,k,Cin,Cout],
/// b [Cout]; stride 1 or 2 (stride 2 halves each extent exactly).
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride) {
  Graph<T>& g = detail::same_graph({x, w, b});
  detail::require_rank(g, "conv2d", x, 4, "input");
  detail::require_rank(g, "conv2d", w, 4, "weight");
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const int k = w.dim(0), Cout = w.dim(3);
  if (w.dim(1) != k || w.dim(2) != Cin || k % 2 == 0)
    g.fail("conv2d", "weight " + to_string(w.shape()) + " incompatible with input " + to_string(x.shape()));
  if (b.shape() != Shape{Cout}) g.fail("conv2d", "bias shape " + to_string(b.shape()));
  if (stride < 1 || H % stride || W % stride)
    g.fail("conv2d", "stride " + std::to_string(stride) + " does not divide input " + to_string(x.shape()));
  const int pad = (k - 1) / 2, OH = H / stride, OW = W / stride;
  const std::size_t K = std::size_t(k) * k * Cin, rows = std::size_t(OH) * OW;
  const int chunk = detail::chunk_samples(rows * K, N);
  using namespace detail;

  Tensor<T> y(Shape{N, OH, OW, Cout});
  {
    std::vector<T> cols(chunk * rows * K);
    ConstMatMap<T> Wm(w.value().data(), K, Cout);
    for (int n0 = 0; n0 < N; n0 += chunk) {
      const int nc = std::min(chunk, N - n0);
      for (int j = 0; j < nc; ++j)
        im2col(x.value().data() + std::size_t(n0 + j) * H * W * Cin, H, W, Cin, k, stride, pad, OH, OW,
               cols.data() + j * rows * K);
      MatMap<T> Y(y.data() + std::size_t(n0) * rows * Cout, nc * rows, Cout);
      Y.noalias() = ConstMatMap<T>(cols.data(), nc * rows, K) * Wm;
      Y.rowwise() += ConstRowVec<T>(b.value().data(), Cout);
    }
  }
  const int xi = x.id, wi = w.id, bi = b.id;
  return g.record("conv2d", std::move(y), {xi, wi, bi},
                  [=](Graph<T>& g, int self) {
                    const Tensor<T>& gy = g.out_grad(self);
                    const bool gx_on = g.requires_grad(xi), gw_on = g.requires_grad(wi);
                    if (g.requires_grad(bi)) {
                      Tensor<T>& gb = g.grad_buffer(bi);
                      for (std::size_t r = 0; r < std::size_t(N) * rows; ++r)
                        for (int c = 0; c < Cout; ++c) gb[c] += gy[r * Cout + c];
                    }
                    if (!gx_on && !gw_on) return;
                    std::vector<T> cols(chunk * rows * K);
                    ConstMatMap<T> Wm(g.value(wi).data(), K, Cout);
                    const T* xv = g.value(xi).data();
                    for (int n0 = 0; n0 < N; n0 += chunk) {
                      const int nc = std::min(chunk, N - n0);
                      ConstMatMap<T> GY(gy.data() + std::size_t(n0) * rows * Cout, nc * rows, Cout);
                      if (gw_on) {
                        for (int j = 0; j < nc; ++j)
                          im2col(xv + std::size_t(n0 + j) * H * W * Cin, H, W, Cin, k, stride, pad, OH, OW,
                                 cols.data() + j * rows * K);
                        MatMap<T>(g.grad_buffer(wi).data(), K, Cout).noalias() +=
                            ConstMatMap<T>(cols.data(), nc * rows, K).transpose() * GY;
                      }
                      if (gx_on) {
                        MatMap<T>(cols.data(), nc * rows, K).noalias() = GY * Wm.transpose();
                        T* gx = g.grad_buffer(xi).data();
                        for (int j = 0; j < nc; ++j)
                          col2im(cols.data() + j * rows * K, H, W, Cin, k, stride, pad, OH, OW,
                                 gx + std::size_t(n0 + j) * H * W * Cin);
                      }
                    }
                  });
}

/// Transposed convolution that multiplies each extent by `stride`.
/// x [N,H,W,Cin], w [Cin,k,k,Cout], b [Cout]; requires (k - stride) even.
template <class T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, Var<T> b, int stride) {
  Graph<T>& g = detail::same_graph({x, w, b});
  detail::require_rank(g, "conv_transpose2d", x, 4, "input");
  detail::require_rank(g, "conv_transpose2d", w, 4, "weight");
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const int k = w.dim(1), Cout = w.dim(3);
  if (w.dim(0) != Cin || w.dim(2) != k || k < stride || (k - stride) % 2)
    g.fail("conv_transpose2d", "weight " + to_string(w.shape()) + " incompatible with input " + to_string(x.shape()));
  if (b.shape() != Shape{Cout}) g.fail("conv_transpose2d", "bias shape " + to_string(b.shape()));
  const int pad = (k - stride) / 2, OH = H * stride, OW = W * stride;
  const std::size_t Kc = std::size_t(k) * k * Cout, rows = std::size_t(H) * W, out_px = std::size_t(OH) * OW;
  const int chunk = detail::chunk_samples(rows * Kc, N);
  using namespace detail;

  Tensor<T> y(Shape{N, OH, OW, Cout});
  {
    std::vector<T> cols(chunk * rows * Kc);
    ConstMatMap<T> Wm(w.value().data(), Cin, Kc);
    for (int n0 = 0; n0 < N; n0 += chunk) {
      const int nc = std::min(chunk, N - n0);
      MatMap<T>(cols.data(), nc * rows, Kc).noalias() =
          ConstMatMap<T>(x.value().data() + std::size_t(n0) * rows * Cin, nc * rows, Cin) * Wm;
      for (int j = 0; j < nc; ++j)
        col2im(cols.data() + j * rows * Kc, OH, OW, Cout, k, stride, pad, H, W, y.data() + (n0 + j) * out_px * Cout);
    }
    MatMap<T>(y.data(), N * out_px, Cout).rowwise() += ConstRowVec<T>(b.value().data(), Cout);
  }
  const int xi = x.id, wi = w.id, bi = b.id;
  return g.record("conv_transpose2d", std::move(y), {xi, wi, bi},
                  [=](Graph<T>& g, int self) {
                    const Tensor<T>& gy = g.out_grad(self);
                    const bool gx_on = g.requires_grad(xi), gw_on = g.requires_grad(wi);
                    if (g.requires_grad(bi)) {
                      Tensor<T>& gb = g.grad_buffer(bi);
                      for (std::size_t r = 0; r < std::size_t(N) * out_px; ++r)
                        for (int c = 0; c < Cout; ++c) gb[c] += gy[r * Cout + c];
                    }
                    if (!gx_on && !gw_on) return;
                    std::vector<T> cols(chunk * rows * Kc);
                    ConstMatMap<T> Wm(g.value(wi).data(), Cin, Kc);
                    for (int n0 = 0; n0 < N; n0 += chunk) {
                      const int nc = std::min(chunk, N - n0);
                      for (int j = 0; j < nc; ++j)
                        im2col(gy.data() + (n0 + j) * out_px * Cout, OH, OW, Cout, k, stride, pad, H, W,
                               cols.data() + j * rows * Kc);
                      ConstMatMap<T> GC(cols.data(), nc * rows, Kc);
                      if (gw_on)
                        MatMap<T>(g.grad_buffer(wi).data(), Cin, Kc).noalias() +=
                            ConstMatMap<T>(g.value(xi).data() + std::size_t(n0) * rows * Cin, nc * rows, Cin).transpose() * GC;
                      if (gx_on)
                        MatMap<T>(g.grad_buffer(xi).data() + std::size_t(n0) * rows * Cin, nc * rows, Cin).noalias() +=
                            GC * Wm.transpose();
                    }
                  });
}

// ------------------------------------------------------------ distance & loss

/// D[i][j] = ||x_i - y_j||^2 for x [n,d], y [m,d].
template <class T>
Var<T> pairwise_sq_dist(Var<T> x, Var<T> y) {
  Graph<T>& g = detail::same_graph({x, y});
  detail::require_rank(g, "pairwise_sq_dist", x, 2, "left operand");
  detail::require_rank(g, "pairwise_sq_dist", y, 2, "right operand");
  const int n = x.dim(0), m = y.dim(0), d = x.dim(1);
  if (y.dim(1) != d) g.fail("pairwise_sq_dist", "dimension mismatch " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  Tensor<T> out(Shape{n, m});
  const T* xv = x.value().data();
  const T* yv = y.value().data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      T s = T(0);
      for (int c = 0; c < d; ++c) {
        const T diff = xv[std::size_t(i) * d + c] - yv[std::size_t(j) * d + c];
        s += diff * diff;
      }
      out[std::size_t(i) * m + j] = s;
    }
  const int xi = x.id, yi = y.id;
  return g.record("pairwise_sq_dist", std::move(out), {xi, yi}, [xi, yi, n, m, d](Graph<T>& g, int self) {
    const Tensor<T>& gd = g.out_grad(self);
    const T* xv = g.value(xi).data();
    const T* yv = g.value(yi).data();
    T* gx = g.requires_grad(xi) ? g.grad_buffer(xi).data() : nullptr;
    T* gyy = g.requires_grad(yi) ? g.grad_buffer(yi).data() : nullptr;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        const T coef = T(2) * gd[std::size_t(i) * m + j];
        if (coef == T(0)) continue;
        for (int c = 0; c < d; ++c) {
          const T diff = coef * (xv[std::size_t(i) * d + c] - yv[std::size_t(j) * d + c]);
          if (gx) gx[std::size_t(i) * d + c] += diff;
          if (gyy) gyy[std::size_t(j) * d + c] -= diff;
        }
      }
  });
}

/// Row-wise cosine similarity of a [n,d] and b [n,d] -> [n].
template <class T>
Var<T> cosine_similarity(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph({a, b});
  detail::require_rank(g, "cosine_similarity", a, 2, "left operand");
  detail::require_same_shape(g, "cosine_similarity", a, b);
  const int n = a.dim(0), d = a.dim(1);
  constexpr T kEps = T(1e-12);
  Tensor<T> y(Shape{n});
  std::vector<T> na(n), nb(n);
  for (int i = 0; i < n; ++i) {
    const T* av = a.value().data() + std::size_t(i) * d;
    const T* bv = b.value().data() + std::size_t(i) * d;
    T dot = 0, sa = 0, sb = 0;
    for (int c = 0; c < d; ++c) {
      dot += av[c] * bv[c];
      sa += av[c] * av[c];
      sb += bv[c] * bv[c];
    }
    na[i] = std::max(std::sqrt(sa), kEps);
    nb[i] = std::max(std::sqrt(sb), kEps);
    y[i] = dot / (na[i] * nb[i]);
  }
  const int ai = a.id, bi = b.id;
  return g.record("cosine_similarity", std::move(y), {ai, bi}, [ai, bi, n, d, na, nb](Graph<T>& g, int self) {
    const Tensor<T>& gy = g.out_grad(self);
    const Tensor<T>& yv = g.value(self);
    const T* av = g.value(ai).data();
    const T* bv = g.value(bi).data();
    T* ga = g.requires_grad(ai) ? g.grad_buffer(ai).data() : nullptr;
    T* gb = g.requires_grad(bi) ? g.grad_buffer(bi).data() : nullptr;
    for (int i = 0; i < n; ++i) {
      const T inv = T(1) / (na[i] * nb[i]);
      for (int c = 0; c < d; ++c) {
        const std::size_t o = std::size_t(i) * d + c;
        if (ga) ga[o] += gy[i] * (bv[o] * inv - yv[i] * av[o] / (na[i] * na[i]));
        if (gb) gb[o] += gy[i] * (av[o] * inv - yv[i] * bv[o] / (nb[i] * nb[i]));
      }
    }
  });
}

/// Mean over rows of -log softmax(logits)[label], max-subtracted.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& labels) {
  Graph<T>& g = *logits.graph;
  detail::require_rank(g, "softmax_cross_entropy", logits, 2, "logits");
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) g.fail("softmax_cross_entropy", "label count differs from rows");
  Tensor<T> prob(Shape{n, c});
  T total = T(0);
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c) g.fail("softmax_cross_entropy", "label out of range");
    const T* z = logits.value().data() + std::size_t(i) * c;
    const T mx = *std::max_element(z, z + c);
    T s = T(0);
    for (int j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    for (int j = 0; j < c; ++j) prob[std::size_t(i) * c + j] = std::exp(z[j] - mx) / s;
    total += mx + std::log(s) - z[labels[i]];
  }
  const int li = logits.id;
  return g.record("softmax_cross_entropy", Tensor<T>::scalar(total / n), {li},
                  [li, n, c, labels, prob = std::move(prob)](Graph<T>& g, int self) {
                    const T gy = g.out_grad(self)[0] / n;
                    Tensor<T>& gl = g.grad_buffer(li);
                    for (int i = 0; i < n; ++i)
                      for (int j = 0; j < c; ++j)
                        gl[std::size_t(i) * c + j] +=
                            gy * (prob[std::size_t(i) * c + j] - (j == labels[i] ? T(1) : T(0)));
                  });
}

// ----------------------------------------------------------------- composites

template <class T>
Var<T> square(Var<T> x) {
  return mul(x, x);
}

/// Mean squared error over all elements.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  return mean(square(sub(a, b)));
}

/// Row-wise dot product of a [n,d] and b [n,d] -> [n].
template <class T>
Var<T> row_dot(Var<T> a, Var<T> b) {
  return sum_axis(mul(a, b), 1);
}

}  // namespace xdr::ops
