#pragma once

#include <algorithm>
#include <chrono>
#include <thread>
#include <vector>

#include "xdr/nn/perception.hpp"
#include "xdr/util/io.hpp"

namespace xdr::eval {

struct Throughput {
  int batch = 64;
  double single_ms = 0;  // per image, one image per forward pass (median of runs)
  double batch_ms = 0;   // per image, amortized over one batch forward (median of runs)
  std::vector<double> single_runs, batch_runs;
  double images_per_second() const { return 1000.0 / batch_ms; }
  /// Batch efficiency relative to single-image passes (1 = perfectly linear).
  double scaling() const { return single_ms / batch_ms; }
};

namespace detail {
inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

/// Times the parameter regression only (one forward pass per call).
/// A warmup pass precedes each timed series.
inline Throughput throughput_bench(nn::Perception<float>& net, int batch = 64, int runs = 5, int singles = 32) {
  using clock = std::chrono::steady_clock;
  const int s = net.image_size();
  Tensor<float> images({batch, s, s, 3});
  Rng rng(derive_seed(0, "bench"));
  for (auto& v : images.values()) v = static_cast<float>(uniform01(rng));
  auto forward = [&](const Tensor<float>& x) {
    Graph<float> g(GradMode::kDisabled);
    return net(g, g.input(x)).params.value()[0];
  };
  std::vector<Tensor<float>> single;
  for (int i = 0; i < singles; ++i) {
    Tensor<float> one({1, s, s, 3});
    std::copy_n(images.data() + std::size_t(i % batch) * s * s * 3, s * s * 3, one.data());
    single.push_back(std::move(one));
  }
  Throughput t;
  t.batch = batch;
  volatile float sink = 0;
  sink = sink + forward(single[0]);
  for (int r = 0; r < runs; ++r) {
    const auto a = clock::now();
    for (const auto& x : single) sink = sink + forward(x);
    t.single_runs.push_back(std::chrono::duration<double, std::milli>(clock::now() - a).count() / singles);
  }
  sink = sink + forward(images);
  for (int r = 0; r < runs; ++r) {
    const auto a = clock::now();
    sink = sink + forward(images);
    t.batch_runs.push_back(std::chrono::duration<double, std::milli>(clock::now() - a).count() / batch);
  }
  t.single_ms = detail::median(t.single_runs);
  t.batch_ms = detail::median(t.batch_runs);
  return t;
}

inline Json throughput_json(const Throughput& t) {
  return Json{{"batch", t.batch},
              {"single_ms_per_image", t.single_ms},
              {"batch_ms_per_image", t.batch_ms},
              {"images_per_second", t.images_per_second()},
              {"scaling", t.scaling()},
              {"single_runs_ms", t.single_runs},
              {"batch_runs_ms", t.batch_runs},
              {"hardware", {{"threads", std::thread::hardware_concurrency()}, {"device", "cpu"}}}};
}

}  // namespace xdr::eval
