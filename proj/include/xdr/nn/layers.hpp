#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "xdr/core/ops.hpp"
#include "xdr/util/rng.hpp"

namespace xdr::nn {

/// Normal(0, sqrt(2 / fan_in)) weights; biases start at zero.
template <class T>
Tensor<T> he_normal(Shape shape, double fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double sd = std::sqrt(2.0 / fan_in);
  for (auto& v : t.values()) v = static_cast<T>(sd * standard_normal(rng));
  return t;
}

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out, Rng& rng)
      : weight(name + ".weight", he_normal<T>({in, out}, in, rng)), bias(name + ".bias", Tensor<T>(Shape{out})) {}

  Var<T> operator()(Graph<T>& g, Var<T> x) { return ops::linear(x, g.param(weight), g.param(bias)); }
  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Parameter<T> weight, bias;
};

/// "Same"-padded convolution, stride 1 or 2.
template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in, int out, int kernel, int stride, Rng& rng)
      : weight(name + ".weight", he_normal<T>({kernel, kernel, in, out}, double(kernel) * kernel * in, rng)),
        bias(name + ".bias", Tensor<T>(Shape{out})),
        stride_(stride) {}

  Var<T> operator()(Graph<T>& g, Var<T> x) { return ops::conv2d(x, g.param(weight), g.param(bias), stride_); }
  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Parameter<T> weight, bias;

 private:
  int stride_ = 1;
};

/// Transposed convolution multiplying spatial extents by `stride`.
template <class T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::string name, int in, int out, int kernel, int stride, Rng& rng)
      // each output pixel receives in * (kernel / stride)^2 contributions
      : weight(name + ".weight",
               he_normal<T>({in, kernel, kernel, out}, double(in) * kernel * kernel / (stride * stride), rng)),
        bias(name + ".bias", Tensor<T>(Shape{out})),
        stride_(stride) {}

  Var<T> operator()(Graph<T>& g, Var<T> x) {
    return ops::conv_transpose2d(x, g.param(weight), g.param(bias), stride_);
  }
  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Parameter<T> weight, bias;

 private:
  int stride_ = 2;
};

template <class T, class... Layers>
std::vector<Parameter<T>*> collect(Layers&... layers) {
  std::vector<Parameter<T>*> out;
  (
      [&] {
        for (auto* p : layers.parameters()) out.push_back(p);
      }(),
      ...);
  return out;
}

template <class T>
void set_frozen(const std::vector<Parameter<T>*>& params, bool frozen) {
  for (auto* p : params) p->frozen = frozen;
}

/// Copies values between two parameter lists of identical layout
/// (e.g. a float network into its 64-bit shadow).
template <class To, class From>
void copy_values(const std::vector<Parameter<To>*>& dst, const std::vector<Parameter<From>*>& src) {
  if (dst.size() != src.size()) throw ShapeError("copy_values: parameter count differs");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->value.shape() != src[i]->value.shape())
      throw ShapeError("copy_values: shape mismatch for '" + dst[i]->name + "'");
    dst[i]->value = src[i]->value.template cast<To>();
  }
}

}  // namespace xdr::nn
