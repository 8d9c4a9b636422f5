#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "xdr/nn/imitator.hpp"
#include "xdr/nn/layers.hpp"

namespace xdr::nn {

inline constexpr double kParamRange = 2.5;

template <class T>
struct Quantized {
  Var<T> out;                // straight-through quantized latent, same shape as z
  std::vector<int> indices;  // one per spatial position, row-major over [N, H, W]
  Var<T> codebook_loss;      // mean over positions of |sg(z) - e|^2
  Var<T> commitment_loss;    // mean over positions of |sg(e) - z|^2
};

/// Index of the nearest row of `codebook` [K, D] to each D-vector of `z`,
/// by squared Euclidean distance; ties go to the lowest index.
template <class T>
std::vector<int> nearest_codes(const Tensor<T>& z, const Tensor<T>& codebook) {
  const int k = codebook.dim(0), d = codebook.dim(1);
  const std::size_t positions = z.size() / d;
  std::vector<int> idx(positions);
  for (std::size_t p = 0; p < positions; ++p) {
    const T* zv = z.data() + p * d;
    T best = std::numeric_limits<T>::infinity();
    int arg = 0;
    for (int c = 0; c < k; ++c) {
      const T* e = codebook.data() + std::size_t(c) * d;
      T dist = T(0);
      for (int j = 0; j < d; ++j) {
        const T diff = zv[j] - e[j];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = c;
      }
    }
    idx[p] = arg;
  }
  return idx;
}

template <class T>
Quantized<T> quantize(Var<T> z, Var<T> codebook) {
  Graph<T>& g = *z.graph;
  if (codebook.value().rank() != 2 || codebook.dim(0) == 0) g.fail("quantize", "codebook must be a non-empty [K, D] table");
  const int d = codebook.dim(1);
  if (z.shape().back() != d)
    g.fail("quantize", "latent channels " + std::to_string(z.shape().back()) + " vs code dim " + std::to_string(d));
  Quantized<T> r;
  r.indices = nearest_codes(z.value(), codebook.value());
  const int positions = static_cast<int>(r.indices.size());
  const Var<T> e = ops::reshape(ops::gather_rows(codebook, r.indices), z.shape());
  const T inv = T(1) / static_cast<T>(positions);
  r.codebook_loss = ops::scale(ops::sum(ops::square(ops::sub(ops::stop_gradient(z), e))), inv);
  r.commitment_loss = ops::scale(ops::sum(ops::square(ops::sub(ops::stop_gradient(e), z))), inv);
  r.out = ops::straight_through(z, e.value());
  return r;
}

/// Bottom-level grid concatenated with the x2-upsampled top grid, bottom first.
template <class T>
Var<T> assemble_features(Var<T> bottom, Var<T> top) {
  Var<T> up = ops::upsample2x(top);
  if (up.dim(1) != bottom.dim(1) || up.dim(2) != bottom.dim(2) || up.dim(0) != bottom.dim(0))
    bottom.graph->fail("assemble_features",
                       "upsampled top " + to_string(up.shape()) + " vs bottom " + to_string(bottom.shape()));
  return ops::concat_last<T>({bottom, up});
}

template <class T>
struct PerceptionOutput {
  Var<T> features;  // f [N, 512]
  Var<T> params;    // p [N, P] in (-2.5, 2.5)
  Var<T> codebook_loss;
  Var<T> commitment_loss;
  std::vector<int> bottom_indices, top_indices;
};

/// Shared encoder, two-level quantizer, feature assembly and regressor.
template <class T>
class Perception {
 public:
  static constexpr int kCodeDim = 64;

  Perception(int param_dim, int image_size, std::uint64_t seed, int codes = 128)
      : param_dim_(param_dim), image_size_(image_size) {
    if (codes < 1) throw ValidationError("codebook size must be positive");
    const int levels = log2_exact(image_size, "image size");
    if (levels < 4) throw ValidationError("image size must be at least 16");
    Rng rng(derive_seed(seed, "perception"));
    enc1_ = Conv2d<T>("encoder.conv1", 3, 32, 3, 2, rng);
    enc2_ = Conv2d<T>("encoder.conv2", 32, kCodeDim, 3, 2, rng);
    enc_top_ = Conv2d<T>("encoder.top", kCodeDim, kCodeDim, 3, 2, rng);
    Rng crng(derive_seed(seed, "codebooks"));
    bottom_codes_ = Parameter<T>("codebook.bottom", normal({codes, kCodeDim}, crng));
    top_codes_ = Parameter<T>("codebook.top", normal({codes, kCodeDim}, crng));
    // regressor halves the bottom grid (size / 4) down to 2x2
    for (int s = 0; s < levels - 3; ++s)
      reg_.emplace_back("regressor.conv" + std::to_string(s + 1), 2 * kCodeDim, 2 * kCodeDim, 3, 2, rng);
    head_ = Linear<T>("regressor.head", feature_dim(), param_dim, rng);
  }

  static constexpr int feature_dim() { return 2 * 2 * 2 * kCodeDim; }
  int param_dim() const { return param_dim_; }
  int image_size() const { return image_size_; }

  /// Pre-quantization latents (bottom, top).
  std::pair<Var<T>, Var<T>> encode(Graph<T>& g, Var<T> images) {
    if (images.value().rank() != 4 || images.dim(1) != image_size_ || images.dim(2) != image_size_ || images.dim(3) != 3)
      g.fail("encode", "expected images [N, " + std::to_string(image_size_) + ", " + std::to_string(image_size_) +
                           ", 3], got " + to_string(images.shape()));
    Var<T> h = ops::relu(enc1_(g, images));
    Var<T> bottom = enc2_(g, h);
    Var<T> top = enc_top_(g, ops::relu(bottom));
    return {bottom, top};
  }

  /// (f, p) from an assembled 2*kCodeDim-channel grid.
  std::pair<Var<T>, Var<T>> regress(Graph<T>& g, Var<T> grid) {
    Var<T> h = grid;
    for (auto& layer : reg_) h = ops::relu(layer(g, h));
    Var<T> f = ops::flatten(h);
    Var<T> p = ops::scale(ops::tanh(head_(g, f)), static_cast<T>(kParamRange));
    return {f, p};
  }

  PerceptionOutput<T> operator()(Graph<T>& g, Var<T> images) {
    auto [zb, zt] = encode(g, images);
    Quantized<T> qb = quantize(zb, g.param(bottom_codes_));
    Quantized<T> qt = quantize(zt, g.param(top_codes_));
    auto [f, p] = regress(g, assemble_features(qb.out, qt.out));
    return {f,
            p,
            ops::add(qb.codebook_loss, qt.codebook_loss),
            ops::add(qb.commitment_loss, qt.commitment_loss),
            std::move(qb.indices),
            std::move(qt.indices)};
  }

  Parameter<T>& bottom_codebook() { return bottom_codes_; }
  Parameter<T>& top_codebook() { return top_codes_; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* l : {&enc1_, &enc2_, &enc_top_})
      for (auto* q : l->parameters()) out.push_back(q);
    out.push_back(&bottom_codes_);
    out.push_back(&top_codes_);
    for (auto& l : reg_)
      for (auto* q : l.parameters()) out.push_back(q);
    for (auto* q : head_.parameters()) out.push_back(q);
    return out;
  }

 private:
  static Tensor<T> normal(Shape shape, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double sd = 1.0 / std::sqrt(double(kCodeDim));
    for (auto& v : t.values()) v = static_cast<T>(sd * standard_normal(rng));
    return t;
  }

  int param_dim_, image_size_;
  Conv2d<T> enc1_, enc2_, enc_top_;
  Parameter<T> bottom_codes_, top_codes_;
  std::vector<Conv2d<T>> reg_;
  Linear<T> head_;
};

}  // namespace xdr::nn
