#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xdr/eval/bench.hpp"
#include "xdr/eval/export.hpp"
#include "xdr/eval/verification.hpp"
#include "xdr/procgen/mask.hpp"

namespace xdr::eval {

inline Matrix to_matrix(const Tensor<float>& t) {
  Matrix m(t.dim(0), t.dim(1));
  for (int r = 0; r < t.dim(0); ++r)
    for (int c = 0; c < t.dim(1); ++c) m(r, c) = t[std::size_t(r) * t.dim(1) + c];
  return m;
}

inline Matrix descriptors(nn::Perception<float>& net, const procgen::ImageBank& bank) {
  return to_matrix(train::regress_params(net, bank, train::iota_rows(bank.count())));
}

/// In-memory masked copy; the corpus files are never touched.
inline procgen::ImageBank masked_bank(const procgen::ImageBank& bank, std::optional<procgen::MaskRegion> region) {
  if (!region) return bank;
  procgen::ImageBank out;
  for (std::size_t i = 0; i < bank.count(); ++i) out.append(procgen::mask_region(bank.image(i), *region));
  return out;
}

struct RegionResult {
  std::string region;
  VerificationResult result;
};

struct Robustness {
  VerificationResult baseline;
  std::vector<RegionResult> regions;
  double mean_drop = 0;  // baseline accuracy minus the mean masked accuracy
};

/// Verification on unmasked and masked copies of the evaluation images.
/// The pipeline is reused; the threshold is refit on each region's
/// threshold-fit pairs. A nullopt region is the no-op control.
inline Robustness robustness_eval(nn::Perception<float>& net, const procgen::ImageBank& eval_images,
                                  const DescriptorPipeline& pipeline, const Benchmark& bench,
                                  const std::vector<std::optional<procgen::MaskRegion>>& regions) {
  Robustness r;
  r.baseline = verify(pipeline.apply_rows(descriptors(net, eval_images)), bench);
  double sum = 0;
  for (const auto& region : regions) {
    const Matrix d = pipeline.apply_rows(descriptors(net, masked_bank(eval_images, region)));
    r.regions.push_back({region ? procgen::to_string(*region) : "none", verify(d, bench)});
    sum += r.regions.back().result.accuracy;
  }
  if (!regions.empty()) r.mean_drop = r.baseline.accuracy - sum / static_cast<double>(regions.size());
  return r;
}

struct EvalOptions {
  bool bench = false;
  std::vector<std::filesystem::path> trend_checkpoints;
  int chance_repeats = 20;
  train::KernelSpec kernel = train::KernelSpec::median();
};

/// Full metrics report for one perception checkpoint:
/// {accuracy, threshold, per_region, mean_drop, chance, mmd_trend, throughput}.
inline Json evaluate(const std::filesystem::path& corpus, const procgen::Manifest& m,
                     const std::filesystem::path& checkpoint, const EvalOptions& opts = {}) {
  auto net = train::load_perception(checkpoint);
  log::info("eval: fitting descriptor pipeline on the source train split");
  const train::SourceSet train_set = train::load_source(corpus, m, "train");
  const DescriptorPipeline pipeline = fit_descriptor_pipeline({descriptors(net, train_set.images), "train"});
  const train::SourceSet eval_set = train::load_source(corpus, m, "eval");
  const Benchmark bench = build_benchmark(eval_set.identity, eval_set.view, derive_seed(m.seed, "verification"));
  const Robustness rob = robustness_eval(net, eval_set.images, pipeline, bench,
                                         {procgen::MaskRegion::kUpper, procgen::MaskRegion::kMiddle,
                                          procgen::MaskRegion::kLower});
  const double chance = shuffled_chance(pipeline.apply_rows(descriptors(net, eval_set.images)), bench,
                                        derive_seed(m.seed, "chance"), opts.chance_repeats);
  Json per_region = Json::object();
  for (const auto& r : rob.regions)
    per_region[r.region] = {{"accuracy", r.result.accuracy}, {"threshold", r.result.threshold}};
  Json report{{"checkpoint", checkpoint.string()},
              {"accuracy", rob.baseline.accuracy},
              {"threshold", rob.baseline.threshold},
              {"fit_accuracy", rob.baseline.fit_accuracy},
              {"pairs", {{"fit", bench.fit.size()}, {"test", bench.test.size()}}},
              {"per_region", per_region},
              {"mean_drop", rob.mean_drop},
              {"chance", chance},
              {"mmd_trend", Json::array()},
              {"throughput", nullptr}};
  log::info("eval: accuracy " + train::fmt(rob.baseline.accuracy) + " mean drop " + train::fmt(rob.mean_drop));
  if (!opts.trend_checkpoints.empty()) {
    const GapSets sets = load_gap_sets(corpus, m);
    for (const auto& c : opts.trend_checkpoints) {
      auto n = train::load_perception(c);
      report["mmd_trend"].push_back(embed_domains(n, sets, opts.kernel).mmd);
    }
  }
  if (opts.bench) report["throughput"] = throughput_json(throughput_bench(net));
  return report;
}

}  // namespace xdr::eval
