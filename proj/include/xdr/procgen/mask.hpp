#pragma once

#include <cmath>
#include <string>

#include "xdr/procgen/image.hpp"

namespace xdr::procgen {

enum class MaskRegion { kUpper, kMiddle, kLower };

inline MaskRegion parse_mask_region(const std::string& s) {
  if (s == "upper") return MaskRegion::kUpper;
  if (s == "middle") return MaskRegion::kMiddle;
  if (s == "lower") return MaskRegion::kLower;
  throw ValidationError("unknown mask region '" + s + "' (expected upper|middle|lower)");
}

inline const char* to_string(MaskRegion r) {
  switch (r) {
    case MaskRegion::kUpper: return "upper";
    case MaskRegion::kMiddle: return "middle";
    case MaskRegion::kLower: return "lower";
  }
  return "?";
}

struct Rect {
  int top, left, height, width;
};

/// 15x10 rectangle at 64x64, centred horizontally, vertical centre at rows
/// 17 / 32 / 47; scaled proportionally for other sizes.
inline Rect mask_rect(MaskRegion region, int height, int width) {
  const double sy = height / 64.0, sx = width / 64.0;
  const int h = static_cast<int>(std::lround(15 * sy));
  const int w = static_cast<int>(std::lround(10 * sx));
  const double centre = region == MaskRegion::kUpper ? 17 : region == MaskRegion::kMiddle ? 32 : 47;
  const int top = static_cast<int>(std::lround(centre * sy)) - h / 2;
  const int left = width / 2 - w / 2;
  return {top, left, h, w};
}

inline Image mask_region(Image img, MaskRegion region) {
  const Rect r = mask_rect(region, img.height, img.width);
  for (int y = r.top; y < r.top + r.height; ++y)
    for (int x = r.left; x < r.left + r.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = 0.f;
  return img;
}

}  // namespace xdr::procgen
