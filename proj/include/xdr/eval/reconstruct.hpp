#pragma once

#include <filesystem>

#include "xdr/nn/imitator.hpp"
#include "xdr/nn/perception.hpp"
#include "xdr/procgen/render.hpp"
#include "xdr/util/io.hpp"

namespace xdr::eval {

struct Reconstruction {
  procgen::ParamVector params;
  procgen::Image engine;    // Engine(p)
  procgen::Image imitated;  // G(p)
};

inline Tensor<float> image_tensor(const procgen::Image& img) {
  Tensor<float> t({1, img.height, img.width, 3});
  std::copy(img.rgb.begin(), img.rgb.end(), t.data());
  return t;
}

inline procgen::Image tensor_image(const Tensor<float>& t, int row = 0) {
  procgen::Image img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  const std::size_t n = std::size_t(img.height) * img.width * 3;
  img.rgb.assign(t.data() + row * n, t.data() + (row + 1) * n);
  return img;
}

/// One forward pass: p = R(D(E(I))), then both renderings of p.
inline Reconstruction reconstruct(nn::Perception<float>& net, nn::Imitator<float>& imitator, const procgen::Image& img) {
  if (img.height != net.image_size() || img.width != net.image_size())
    throw ValidationError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                          ", model expects " + std::to_string(net.image_size()) + "x" +
                          std::to_string(net.image_size()));
  if (imitator.image_size() != net.image_size() || imitator.param_dim() != net.param_dim())
    throw ValidationError("imitator and perception checkpoints disagree on image size or P");
  Graph<float> g(GradMode::kDisabled);
  const Var<float> p = net(g, g.input(image_tensor(img))).params;
  Reconstruction r;
  r.params.assign(p.value().data(), p.value().data() + p.value().size());
  r.imitated = tensor_image(imitator(g, p).value());
  r.engine = procgen::render_engine(r.params, img.height);
  return r;
}

inline void write_reconstruction(const std::filesystem::path& dir, const Reconstruction& r) {
  write_json(dir / "params.json", Json{{"params", r.params}});
  procgen::write_ppm(dir / "engine.ppm", r.engine);
  procgen::write_ppm(dir / "imitator.ppm", r.imitated);
}

}  // namespace xdr::eval
