#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "xdr/procgen/render.hpp"
#include "xdr/util/rng.hpp"

namespace xdr::procgen {

struct ViewSpec {
  std::array<float, 4> nuisance{};  // indices 28..31, each in [-1, 1]
  std::uint64_t photometric_seed = 0;
};

struct IdentityRecord {
  int id = 0;
  std::vector<float> identity_params;  // 28 entries
  std::array<float, 3> tint{};         // per-identity colour cast, each in [-0.05, 0.05]
  std::vector<ViewSpec> views;
};

struct ShiftOptions {
  double gamma = 0.8;
  double background_top = 0.35;
  double background_bottom = 0.75;
  double noise_sigma = 0.03;
};

/// Source-domain transform applied in place: gamma, gradient background
/// behind the face, 3x3 box blur (replicated edges), Gaussian noise, tint, clamp.
inline void apply_domain_shift(Image& img, const std::vector<float>& face_alpha, const std::array<float, 3>& tint,
                               std::uint64_t noise_seed, const ShiftOptions& opt = {}) {
  const int h = img.height, w = img.width;
  if (face_alpha.size() != std::size_t(h) * w) throw ShapeError("face alpha does not match image");
  for (int y = 0; y < h; ++y) {
    const double bg = opt.background_top + (opt.background_bottom - opt.background_top) * (y + 0.5) / h;
    for (int x = 0; x < w; ++x) {
      const double a = face_alpha[std::size_t(y) * w + x];
      for (int c = 0; c < 3; ++c) {
        float& v = img.at(y, x, c);
        v = static_cast<float>(a * std::pow(static_cast<double>(v), opt.gamma) + (1 - a) * bg);
      }
    }
  }
  Image blurred(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += img.at(std::clamp(y + dy, 0, h - 1), std::clamp(x + dx, 0, w - 1), c);
        blurred.at(y, x, c) = static_cast<float>(acc / 9);
      }
  Rng rng(noise_seed);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double noise = opt.noise_sigma > 0 ? opt.noise_sigma * standard_normal(rng) : 0.0;
        img.at(y, x, c) = static_cast<float>(std::clamp(blurred.at(y, x, c) + noise + tint[c], 0.0, 1.0));
      }
}

inline ParamVector full_params(const IdentityRecord& id, const ViewSpec& view) {
  if (id.identity_params.size() != std::size_t(kIdentityDim))
    throw ValidationError("identity " + std::to_string(id.id) + " has " +
                          std::to_string(id.identity_params.size()) + " identity parameters");
  ParamVector p(id.identity_params);
  for (float v : view.nuisance)
    if (!(std::abs(v) <= kNuisanceLimit)) throw ValidationError("view nuisance outside [-1, 1]");
  p.insert(p.end(), view.nuisance.begin(), view.nuisance.end());
  return p;
}

inline Image render_source_view(const IdentityRecord& id, const ViewSpec& view, int size = 64,
                                const ShiftOptions& opt = {}) {
  Rendered r = render_with_alpha(full_params(id, view), size);
  apply_domain_shift(r.image, r.face_alpha, id.tint, view.photometric_seed, opt);
  return r.image;
}

}  // namespace xdr::procgen
