#pragma once

#include <cstdint>
#include <vector>

#include "xdr/nn/imitator.hpp"
#include "xdr/nn/layers.hpp"

namespace xdr::nn {

inline constexpr int kGeometryDim = 12;

/// Constant matrices of the geometry descriptor for an H x W image.
template <class T>
struct GeometryMaps {
  int height = 0, width = 0;
  Tensor<T> channel_mean;  // [H*W*3, 3], 1/(H*W) on the matching channel
  Tensor<T> luminance;     // [3, 1]
  Tensor<T> moments;       // [H*W, 9]: 1, x, y, x^2, y^2, xy, band fractions (top, middle, bottom)

  GeometryMaps(int h, int w) : height(h), width(w) {
    const std::size_t hw = std::size_t(h) * w;
    channel_mean = Tensor<T>(Shape{static_cast<int>(hw * 3), 3});
    for (std::size_t k = 0; k < hw; ++k)
      for (int c = 0; c < 3; ++c) channel_mean[(k * 3 + c) * 3 + c] = static_cast<T>(1.0 / hw);
    luminance = Tensor<T>::from({3, 1}, {T(0.299), T(0.587), T(0.114)});
    moments = Tensor<T>(Shape{static_cast<int>(hw), 9});
    for (int y = 0; y < h; ++y) {
      // fraction of pixel row [y, y+1) falling in each horizontal third
      double band[3];
      for (int b = 0; b < 3; ++b) {
        const double lo = h * b / 3.0, hi = h * (b + 1) / 3.0;
        band[b] = std::max(0.0, std::min<double>(y + 1, hi) - std::max<double>(y, lo));
      }
      for (int x = 0; x < w; ++x) {
        const double u = (x + 0.5) / w, v = (y + 0.5) / h;
        const double row[9] = {1, u, v, u * u, v * v, u * v, band[0], band[1], band[2]};
        for (int j = 0; j < 9; ++j) moments[(std::size_t(y) * w + x) * 9 + j] = static_cast<T>(row[j]);
      }
    }
  }
};

/// 12-d descriptor per image: channel means (3), channel variances (3),
/// mass-normalized central second moments of luminance (mu20, mu02, mu11,
/// offset so a uniform image gives zero)
/// and luminance mass fractions of the top / middle / bottom thirds.
template <class T>
Var<T> geometry_embed(Var<T> images, const GeometryMaps<T>& maps) {
  Graph<T>& g = *images.graph;
  if (images.value().rank() != 4 || images.dim(1) != maps.height || images.dim(2) != maps.width || images.dim(3) != 3)
    g.fail("geometry_embed", "images " + to_string(images.shape()) + " do not match descriptor maps");
  using namespace ops;
  const int n = images.dim(0);
  const int hw = maps.height * maps.width;
  const Var<T> flat = reshape(images, Shape{n, hw * 3});
  const Var<T> cm = g.input(maps.channel_mean, "geometry.channel_mean");
  const Var<T> mean_c = matmul(flat, cm);
  const Var<T> var_c = sub(matmul(square(flat), cm), square(mean_c));

  const Var<T> lum = reshape(matmul(reshape(images, Shape{n * hw, 3}), g.input(maps.luminance)), Shape{n, hw});
  const Var<T> s = matmul(lum, g.input(maps.moments, "geometry.moments"));  // [n, 9]
  const Var<T> mass = matmul(slice_last(s, 0, 1), g.input(Tensor<T>(Shape{1, 8}, T(1))));
  const Var<T> r = div(slice_last(s, 1, 8), mass);  // raw moments / mass
  const Var<T> mx = slice_last(r, 0, 1), my = slice_last(r, 1, 1);
  // measured relative to a uniform mass, so a flat image has zero moments
  const T ux = static_cast<T>((double(maps.width) * maps.width - 1) / (12.0 * maps.width * maps.width));
  const T uy = static_cast<T>((double(maps.height) * maps.height - 1) / (12.0 * maps.height * maps.height));
  const Var<T> mu20 = add_scalar(sub(slice_last(r, 2, 1), square(mx)), -ux);
  const Var<T> mu02 = add_scalar(sub(slice_last(r, 3, 1), square(my)), -uy);
  const Var<T> mu11 = sub(slice_last(r, 4, 1), mul(mx, my));
  return concat_last<T>({mean_c, var_c, mu20, mu02, mu11, slice_last(r, 5, 3)});
}

/// Small identity-embedding network: four stride-2 convs (3-16-32-64-64),
/// global average pool to a 64-d embedding, linear classification head.
template <class T>
class IdEmbedNet {
 public:
  static constexpr int kEmbedDim = 64;

  IdEmbedNet(int num_ids, int image_size, std::uint64_t seed) : num_ids_(num_ids), image_size_(image_size) {
    if (log2_exact(image_size, "image size") < 4) throw ValidationError("image size must be at least 16");
    Rng rng(derive_seed(seed, "id_embed"));
    c1_ = Conv2d<T>("idnet.conv1", 3, 16, 3, 2, rng);
    c2_ = Conv2d<T>("idnet.conv2", 16, 32, 3, 2, rng);
    c3_ = Conv2d<T>("idnet.conv3", 32, 64, 3, 2, rng);
    c4_ = Conv2d<T>("idnet.conv4", 64, kEmbedDim, 3, 2, rng);
    head_ = Linear<T>("idnet.head", kEmbedDim, num_ids, rng);
  }

  int num_ids() const { return num_ids_; }
  int image_size() const { return image_size_; }

  Var<T> embed(Graph<T>& g, Var<T> images) {
    if (images.value().rank() != 4 || images.dim(1) != image_size_ || images.dim(2) != image_size_)
      g.fail("id_embed", "images " + to_string(images.shape()) + " do not match network size " +
                             std::to_string(image_size_));
    Var<T> h = ops::relu(c1_(g, images));
    h = ops::relu(c2_(g, h));
    h = ops::relu(c3_(g, h));
    h = c4_(g, h);
    const int n = h.dim(0), cells = h.dim(1) * h.dim(2);
    return ops::scale(ops::sum_axis(ops::reshape(h, Shape{n, cells, kEmbedDim}), 1), T(1) / static_cast<T>(cells));
  }

  Var<T> logits(Graph<T>& g, Var<T> images) { return head_(g, embed(g, images)); }

  /// Embedding weights only (the head is discarded after pretraining).
  std::vector<Parameter<T>*> embed_parameters() { return collect<T>(c1_, c2_, c3_, c4_); }
  std::vector<Parameter<T>*> parameters() {
    auto out = embed_parameters();
    for (auto* q : head_.parameters()) out.push_back(q);
    return out;
  }

  void set_frozen(bool f) { nn::set_frozen(parameters(), f); }
  bool frozen() {
    const auto ps = embed_parameters();
    return std::all_of(ps.begin(), ps.end(), [](auto* q) { return q->frozen; });
  }

 private:
  int num_ids_, image_size_;
  Conv2d<T> c1_, c2_, c3_, c4_;
  Linear<T> head_;
};

}  // namespace xdr::nn
