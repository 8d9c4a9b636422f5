#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "xdr/procgen/image.hpp"
#include "xdr/procgen/params.hpp"

namespace xdr::procgen {

/// Geometry lives in a 64-unit canonical frame; other power-of-two sizes
/// resample it, so features scale with the image.
inline constexpr double kCanonicalSize = 64.0;

struct Rendered {
  Image image;
  std::vector<float> face_alpha;  // coverage of head and hair, H*W
};

namespace detail {

using Vec2 = std::array<double, 2>;
using Rgb = std::array<double, 3>;

inline double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

inline Vec2 rotate(Vec2 v, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * v[0] - s * v[1], s * v[0] + c * v[1]};
}

// Approximate signed distance to an axis-aligned ellipse centred at the origin.
inline double ellipse_sd(Vec2 q, double rx, double ry) {
  const double k0 = std::hypot(q[0] / rx, q[1] / ry);
  const double k1 = std::hypot(q[0] / (rx * rx), q[1] / (ry * ry));
  if (k1 < 1e-12) return -std::min(rx, ry);
  return k0 * (k0 - 1) / k1;
}

inline double capsule_sd(Vec2 q, double half_len, double radius) {
  const double x = std::clamp(q[0], -half_len, half_len);
  return std::hypot(q[0] - x, q[1]) - radius;
}

inline Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

/// Scene description derived from p; all lengths in canonical units.
struct Face {
  double cx = 32, cy = 33;
  double head_rx, head_ry, chin, taper;
  double eye_dx, eye_y, eye_rx, eye_ry, eye_tilt, iris_r, pupil_r;
  double brow_dy, brow_len, brow_half_thick, brow_tilt;
  double nose_w, nose_len;
  double mouth_y, mouth_w, mouth_h, mouth_curve;
  double hair_h, cheek;
  Rgb skin, iris, lip, hair, brow;
  double rot, tx, ty, scale;
};

inline Face describe(const ParamVector& p) {
  auto u = [&](int i) { return static_cast<double>(p[i]); };
  Face f;
  f.head_rx = 19 + 1.4 * u(kHeadWidth);
  f.head_ry = 23 + 1.4 * u(kHeadHeight);
  f.chin = 1.2 * u(kChinOffset);
  f.taper = 0.12 + 0.04 * u(kJawTaper);
  f.eye_dx = 8 + 0.9 * u(kEyeSpacing);
  f.eye_y = -4 + 1.0 * u(kEyeHeight);
  f.eye_rx = 3.4 + 0.45 * u(kEyeSize);
  f.eye_ry = f.eye_rx * (0.55 + 0.08 * u(kEyeAspect));
  f.eye_tilt = 0.14 * u(kEyeTilt);
  f.iris_r = 0.8 * f.eye_ry;
  f.pupil_r = f.iris_r * (0.45 + 0.08 * u(kPupilSize));
  f.brow_dy = 4.2 + 0.6 * u(kBrowHeight);
  f.brow_len = 3.8 + 0.5 * u(kBrowLength);
  f.brow_half_thick = 1.1 + 0.3 * u(kBrowThickness);
  f.brow_tilt = 0.16 * u(kBrowTilt);
  f.nose_w = 2.4 + 0.5 * u(kNoseWidth);
  f.nose_len = 4.5 + 0.8 * u(kNoseLength);
  f.mouth_y = 0.48 * f.head_ry;
  f.mouth_w = 6.5 + 1.0 * u(kMouthWidth);
  f.mouth_h = 1.6 + 0.4 * u(kMouthHeight);
  f.mouth_curve = 0.9 * u(kMouthCurvature);
  f.hair_h = 7 + 1.6 * u(kHairBandHeight);
  f.cheek = 0.05 + 0.02 * u(kCheekShading);
  f.skin = {0.78 + 0.05 * u(kSkinR), 0.62 + 0.05 * u(kSkinG), 0.52 + 0.05 * u(kSkinB)};
  const double it = u(kIrisTone);
  f.iris = {0.30 + 0.06 * it, 0.28 + 0.02 * it, 0.22 - 0.06 * it};
  const double lt = u(kLipTone);
  f.lip = {0.70 + 0.06 * lt, 0.30 - 0.03 * lt, 0.32 - 0.03 * lt};
  const double lum = 0.28 + 0.08 * u(kHairDarkness);
  const double warm = u(kHairWarmth) / kParamLimit;
  f.hair = {lum * (1 + 0.25 * warm), lum, lum * (1 - 0.25 * warm)};
  f.brow = {0.9 * f.hair[0], 0.9 * f.hair[1], 0.9 * f.hair[2]};
  f.rot = 0.12 * u(kRotation);
  f.tx = 2.5 * u(kShiftX);
  f.ty = 2.5 * u(kShiftY);
  f.scale = 1 + 0.06 * u(kScale);
  return f;
}

inline const Rgb kBackground{0.86, 0.87, 0.90};
inline const Rgb kSclera{0.96, 0.96, 0.95};
inline const Rgb kPupil{0.05, 0.05, 0.06};
inline const Rgb kBlush{0.85, 0.45, 0.45};

/// Shades one canonical-frame point (already mapped through the inverse
/// nuisance transform). `fw` is the edge falloff half-width in canonical units.
inline Rgb shade(const Face& f, Vec2 s, double fw, double& alpha) {
  auto cover = [&](double sd) { return 1 - smoothstep(-fw, fw, sd); };
  const Vec2 q{s[0] - f.cx, s[1] - f.cy};

  // head: lower half stretched by the chin offset and narrowed by the taper
  double ry = f.head_ry, rx = f.head_rx;
  if (q[1] > 0) {
    ry = std::max(4.0, f.head_ry + f.chin);
    rx = f.head_rx * (1 - f.taper * std::min(1.0, q[1] / ry));
  }
  const double head = cover(ellipse_sd(q, rx, ry));
  const double hair_shell = cover(ellipse_sd(q, f.head_rx + 2, f.head_ry + 2));
  const double hair_line = f.cy - f.head_ry + f.hair_h;
  const double hair = hair_shell * cover(s[1] - hair_line);
  alpha = std::max(head, hair);

  Rgb c = mix(kBackground, f.skin, head);

  for (int side : {-1, 1}) {
    const Vec2 cheek_q{q[0] - side * 0.55 * f.head_rx, q[1] - 5};
    const double blob = 1 - smoothstep(0.0, 5.0, std::hypot(cheek_q[0], cheek_q[1]));
    c = mix(c, kBlush, f.cheek * 4 * blob * head);
  }

  const Vec2 nose_q{q[0], q[1] - 3};
  c = mix(c, {c[0] * 0.82, c[1] * 0.82, c[2] * 0.82}, 0.6 * head * cover(ellipse_sd(nose_q, f.nose_w, f.nose_len)));

  for (int side : {-1, 1}) {
    const Vec2 eq = rotate({q[0] - side * f.eye_dx, q[1] - f.eye_y}, side * f.eye_tilt);
    const double sclera = cover(ellipse_sd(eq, f.eye_rx, f.eye_ry));
    const double r = std::hypot(eq[0], eq[1]);
    c = mix(c, kSclera, sclera);
    c = mix(c, f.iris, sclera * cover(r - f.iris_r));
    c = mix(c, kPupil, sclera * cover(r - f.pupil_r));

    const Vec2 bq = rotate({q[0] - side * f.eye_dx, q[1] - f.eye_y + f.brow_dy}, side * f.brow_tilt);
    c = mix(c, f.brow, head * cover(capsule_sd(bq, f.brow_len, f.brow_half_thick)));
  }

  const double mx = q[0] / f.mouth_w;
  const Vec2 mq{q[0], q[1] - f.mouth_y + f.mouth_curve * mx * mx};
  c = mix(c, f.lip, head * cover(ellipse_sd(mq, f.mouth_w, f.mouth_h)));

  c = mix(c, f.hair, hair);
  return c;
}

}  // namespace detail

/// Deterministic rasterizer: pure function of p and the image size.
inline Rendered render_with_alpha(const ParamVector& p, int size = 64) {
  validate_params(p);
  if (size < 8 || (size & (size - 1)) != 0) throw ValidationError("image size must be a power of two >= 8");
  const detail::Face f = detail::describe(p);
  const double unit = kCanonicalSize / size;  // canonical units per output pixel
  const double fw = unit;                     // 2-pixel falloff
  Rendered out{Image(size, size), std::vector<float>(std::size_t(size) * size)};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      // inverse similarity about the face centre
      const detail::Vec2 d{(x + 0.5) * unit - f.cx - f.tx, (y + 0.5) * unit - f.cy - f.ty};
      const detail::Vec2 r = detail::rotate(d, -f.rot);
      const detail::Vec2 s{f.cx + r[0] / f.scale, f.cy + r[1] / f.scale};
      double alpha = 0;
      const detail::Rgb c = detail::shade(f, s, fw / f.scale, alpha);
      for (int ch = 0; ch < 3; ++ch) out.image.at(y, x, ch) = static_cast<float>(std::clamp(c[ch], 0.0, 1.0));
      out.face_alpha[std::size_t(y) * size + x] = static_cast<float>(alpha);
    }
  }
  return out;
}

inline Image render_engine(const ParamVector& p, int size = 64) { return render_with_alpha(p, size).image; }

}  // namespace xdr::procgen
