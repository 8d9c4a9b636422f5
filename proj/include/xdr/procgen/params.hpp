#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xdr/core/error.hpp"
#include "xdr/util/rng.hpp"

namespace xdr::procgen {

inline constexpr double kParamLimit = 2.5;
inline constexpr double kNuisanceLimit = 1.0;
inline constexpr int kParamDim = 32;
inline constexpr int kIdentityDim = 28;

/// Semantic layout of the renderer's parameter vector.
enum Param : int {
  kHeadWidth = 0,
  kHeadHeight,
  kEyeSpacing,
  kEyeSize,
  kEyeHeight,
  kEyeTilt,
  kBrowThickness,
  kBrowTilt,
  kNoseWidth,
  kNoseLength,
  kMouthWidth,
  kMouthHeight,
  kMouthCurvature,
  kChinOffset,
  kSkinR,
  kSkinG,
  kSkinB,
  kIrisTone,
  kHairBandHeight,
  kCheekShading,
  kEyeAspect,
  kBrowHeight,
  kBrowLength,
  kLipTone,
  kHairDarkness,
  kHairWarmth,
  kPupilSize,
  kJawTaper,
  // nuisance block: final 2-D similarity transform
  kRotation = 28,
  kShiftX,
  kShiftY,
  kScale,
};

/// Bounded parameter vector; every entry in [-2.5, 2.5].
using ParamVector = std::vector<float>;

inline void validate_params(const ParamVector& p, int dim = kParamDim) {
  if (static_cast<int>(p.size()) != dim)
    throw ValidationError("parameter vector has " + std::to_string(p.size()) + " entries, expected " +
                          std::to_string(dim));
  for (std::size_t i = 0; i < p.size(); ++i)
    if (!std::isfinite(p[i]) || std::abs(p[i]) > kParamLimit)
      throw ValidationError("parameter " + std::to_string(i) + " = " + std::to_string(p[i]) +
                            " outside [-2.5, 2.5]");
}

/// Identity coordinates uniform on [-2.5, 2.5], nuisance on [-1, 1].
inline ParamVector sample_params(std::uint64_t seed) {
  Rng rng(seed);
  ParamVector p(kParamDim);
  for (int i = 0; i < kParamDim; ++i) {
    const double lim = i < kIdentityDim ? kParamLimit : kNuisanceLimit;
    p[i] = static_cast<float>(uniform(rng, -lim, lim));
  }
  return p;
}

}  // namespace xdr::procgen
