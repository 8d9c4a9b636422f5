#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "xdr/nn/layers.hpp"

namespace xdr::nn {

inline int log2_exact(int n, const char* what) {
  int k = 0;
  while ((1 << k) < n) ++k;
  if ((1 << k) != n) throw ValidationError(std::string(what) + " must be a power of two");
  return k;
}

/// Differentiable stand-in for the renderer: p [N, P] -> image [N, S, S, 3].
/// FC to 4x4x128, then x2 transposed-conv stages (128, 64, 32, 16 channels at
/// 64x64), a 3x3 conv to RGB and a sigmoid.
template <class T>
class Imitator {
 public:
  Imitator(int param_dim, int image_size, std::uint64_t seed) : param_dim_(param_dim), image_size_(image_size) {
    const int stages = log2_exact(image_size, "image size") - 2;
    if (stages < 1) throw ValidationError("image size must be at least 8");
    Rng rng(derive_seed(seed, "imitator"));
    fc_ = Linear<T>("imitator.fc", param_dim, 4 * 4 * 128, rng);
    int in = 128;
    for (int s = 0; s < stages; ++s) {
      const int ch = std::max(16, 128 >> s);
      up_.emplace_back("imitator.up" + std::to_string(s), in, ch, 4, 2, rng);
      in = ch;
    }
    out_ = Conv2d<T>("imitator.out", in, 3, 3, 1, rng);
  }

  int param_dim() const { return param_dim_; }
  int image_size() const { return image_size_; }

  Var<T> operator()(Graph<T>& g, Var<T> p) {
    if (p.value().rank() != 2 || p.dim(1) != param_dim_)
      g.fail("imitator", "expected parameters [N, " + std::to_string(param_dim_) + "], got " + to_string(p.shape()));
    const int n = p.dim(0);
    Var<T> h = ops::reshape(ops::relu(fc_(g, p)), Shape{n, 4, 4, 128});
    for (auto& layer : up_) h = ops::relu(layer(g, h));
    return ops::sigmoid(out_(g, h));
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out = fc_.parameters();
    for (auto& layer : up_)
      for (auto* q : layer.parameters()) out.push_back(q);
    for (auto* q : out_.parameters()) out.push_back(q);
    return out;
  }

  void set_frozen(bool f) { nn::set_frozen(parameters(), f); }
  bool frozen() {
    const auto ps = parameters();
    return std::all_of(ps.begin(), ps.end(), [](auto* q) { return q->frozen; });
  }

 private:
  int param_dim_, image_size_;
  Linear<T> fc_;
  std::vector<ConvTranspose2d<T>> up_;
  Conv2d<T> out_;
};

}  // namespace xdr::nn
