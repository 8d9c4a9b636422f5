#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xdr/procgen/corpus.hpp"
#include "xdr/train/objectives.hpp"
#include "xdr/util/io.hpp"

namespace xdr::train {

struct ImitatorConfig {
  int batch_size = 128;
  int epochs = 30;
  double lr = 3e-4;
};

struct ExtractorConfig {
  int batch_size = 64;
  int max_epochs = 60;
  int train_views = 6;  // remaining views per identity are held out
  double target_accuracy = 0.90;
  double lr = 1e-3;
};

struct Stage2Config {
  int target_batch = 32;
  int identities = 8;  // K + 1; source sub-batch holds 2 views of each
  int epochs = 60;
  int steps_per_epoch = 25;
  double lr = 3e-4;
  std::vector<int> lr_halve_epochs{50, 100};
  int checkpoint_every = 10;
  double tau = 0.07;
  KernelSpec kernel = KernelSpec::median();
  int probe_images = 256;  // held-out target / eval source images scored at each checkpoint
};

/// Every key has a default; a config file only needs the keys it changes.
struct TrainConfig {
  std::uint64_t seed = 1;
  int image_size = 64;
  int param_dim = 32;
  int codebook_size = 128;
  LossWeights weights;
  ImitatorConfig imitator;
  ExtractorConfig extractor;
  Stage2Config stage2;

  void validate() const {
    auto positive = [](double v, const char* what) {
      if (!(v > 0 && std::isfinite(v))) throw ValidationError(std::string(what) + " must be positive");
    };
    if (param_dim != procgen::kParamDim) throw ValidationError("param_dim must be 32 (renderer layout)");
    if (image_size < 16 || (image_size & (image_size - 1))) throw ValidationError("image_size must be a power of two >= 16");
    positive(codebook_size, "codebook_size");
    for (double l : {weights.lambda1, weights.lambda2, weights.lambda3, weights.lambda4, weights.alpha, weights.beta})
      if (!(l >= 0 && std::isfinite(l))) throw ValidationError("loss weights must be finite and non-negative");
    positive(imitator.batch_size, "imitator.batch_size");
    if (imitator.epochs < 1) throw ValidationError("imitator.epochs must be >= 1");
    positive(imitator.lr, "imitator.lr");
    positive(extractor.batch_size, "extractor.batch_size");
    positive(extractor.max_epochs, "extractor.max_epochs");
    positive(extractor.lr, "extractor.lr");
    if (!(extractor.target_accuracy >= 0 && extractor.target_accuracy <= 1))
      throw ValidationError("extractor.target_accuracy must be in [0, 1]");
    if (extractor.train_views < 1) throw ValidationError("extractor.train_views must be >= 1");
    positive(stage2.target_batch, "stage2.target_batch");
    if (stage2.identities < 2) throw ValidationError("stage2.identities must be >= 2 (K >= 1)");
    positive(stage2.epochs, "stage2.epochs");
    positive(stage2.steps_per_epoch, "stage2.steps_per_epoch");
    positive(stage2.lr, "stage2.lr");
    positive(stage2.tau, "stage2.tau");
    positive(stage2.checkpoint_every, "stage2.checkpoint_every");
    positive(stage2.probe_images, "stage2.probe_images");
    for (std::size_t i = 1; i < stage2.lr_halve_epochs.size(); ++i)
      if (stage2.lr_halve_epochs[i] <= stage2.lr_halve_epochs[i - 1])
        throw ValidationError("stage2.lr_halve_epochs must be strictly ascending");
    stage2.kernel.validate();
  }
};

/// Learning rate in effect during (1-based) `epoch`: halved once for every
/// milestone already passed.
inline double scheduled_lr(double base, const std::vector<int>& milestones, int epoch) {
  double lr = base;
  for (int m : milestones)
    if (epoch > m) lr *= 0.5;
  return lr;
}

inline void to_json(Json& j, const KernelSpec& k) {
  j = Json{{"rule", k.rule == KernelSpec::Rule::kFixed ? "fixed" : "median"},
           {"bandwidths", k.bandwidths},
           {"multi_scale", k.multi_scale}};
}

inline void from_json(const Json& j, KernelSpec& k) {
  const std::string rule = j.value("rule", "median");
  if (rule != "fixed" && rule != "median") throw ValidationError("kernel.rule must be fixed or median");
  k.rule = rule == "fixed" ? KernelSpec::Rule::kFixed : KernelSpec::Rule::kMedian;
  k.bandwidths = j.value("bandwidths", std::vector<double>{});
  k.multi_scale = j.value("multi_scale", false);
}

inline Json config_json(const TrainConfig& c) {
  const LossWeights& w = c.weights;
  return Json{
      {"seed", c.seed},
      {"image_size", c.image_size},
      {"param_dim", c.param_dim},
      {"codebook_size", c.codebook_size},
      {"weights",
       {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}, {"lambda4", w.lambda4},
        {"alpha", w.alpha}, {"beta", w.beta}}},
      {"imitator", {{"batch_size", c.imitator.batch_size}, {"epochs", c.imitator.epochs}, {"lr", c.imitator.lr}}},
      {"extractor",
       {{"batch_size", c.extractor.batch_size}, {"max_epochs", c.extractor.max_epochs},
        {"train_views", c.extractor.train_views}, {"target_accuracy", c.extractor.target_accuracy},
        {"lr", c.extractor.lr}}},
      {"stage2",
       {{"target_batch", c.stage2.target_batch}, {"identities", c.stage2.identities}, {"epochs", c.stage2.epochs},
        {"steps_per_epoch", c.stage2.steps_per_epoch}, {"lr", c.stage2.lr},
        {"lr_halve_epochs", c.stage2.lr_halve_epochs}, {"checkpoint_every", c.stage2.checkpoint_every},
        {"tau", c.stage2.tau}, {"kernel", c.stage2.kernel}, {"probe_images", c.stage2.probe_images}}}};
}

/// Parses a config, rejecting unknown keys so typos do not silently fall back to defaults.
inline TrainConfig parse_config(const Json& j) {
  TrainConfig c;
  const Json defaults = config_json(c);
  auto check_keys = [](const Json& obj, const Json& ref, const std::string& where) {
    if (!obj.is_object()) throw ValidationError("config" + where + " must be an object");
    for (const auto& [k, v] : obj.items())
      if (!ref.contains(k)) throw ValidationError("unknown config key '" + where + (where.empty() ? "" : ".") + k + "'");
  };
  try {
    check_keys(j, defaults, "");
    c.seed = j.value("seed", c.seed);
    c.image_size = j.value("image_size", c.image_size);
    c.param_dim = j.value("param_dim", c.param_dim);
    c.codebook_size = j.value("codebook_size", c.codebook_size);
    if (j.contains("weights")) {
      const Json& w = j["weights"];
      check_keys(w, defaults["weights"], "weights");
      c.weights.lambda1 = w.value("lambda1", c.weights.lambda1);
      c.weights.lambda2 = w.value("lambda2", c.weights.lambda2);
      c.weights.lambda3 = w.value("lambda3", c.weights.lambda3);
      c.weights.lambda4 = w.value("lambda4", c.weights.lambda4);
      c.weights.alpha = w.value("alpha", c.weights.alpha);
      c.weights.beta = w.value("beta", c.weights.beta);
    }
    if (j.contains("imitator")) {
      const Json& s = j["imitator"];
      check_keys(s, defaults["imitator"], "imitator");
      c.imitator.batch_size = s.value("batch_size", c.imitator.batch_size);
      c.imitator.epochs = s.value("epochs", c.imitator.epochs);
      c.imitator.lr = s.value("lr", c.imitator.lr);
    }
    if (j.contains("extractor")) {
      const Json& s = j["extractor"];
      check_keys(s, defaults["extractor"], "extractor");
      c.extractor.batch_size = s.value("batch_size", c.extractor.batch_size);
      c.extractor.max_epochs = s.value("max_epochs", c.extractor.max_epochs);
      c.extractor.train_views = s.value("train_views", c.extractor.train_views);
      c.extractor.target_accuracy = s.value("target_accuracy", c.extractor.target_accuracy);
      c.extractor.lr = s.value("lr", c.extractor.lr);
    }
    if (j.contains("stage2")) {
      const Json& s = j["stage2"];
      check_keys(s, defaults["stage2"], "stage2");
      c.stage2.target_batch = s.value("target_batch", c.stage2.target_batch);
      c.stage2.identities = s.value("identities", c.stage2.identities);
      c.stage2.epochs = s.value("epochs", c.stage2.epochs);
      c.stage2.steps_per_epoch = s.value("steps_per_epoch", c.stage2.steps_per_epoch);
      c.stage2.lr = s.value("lr", c.stage2.lr);
      c.stage2.lr_halve_epochs = s.value("lr_halve_epochs", c.stage2.lr_halve_epochs);
      c.stage2.checkpoint_every = s.value("checkpoint_every", c.stage2.checkpoint_every);
      c.stage2.tau = s.value("tau", c.stage2.tau);
      if (s.contains("kernel")) c.stage2.kernel = s["kernel"].get<KernelSpec>();
      c.stage2.probe_images = s.value("probe_images", c.stage2.probe_images);
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) { return parse_config(read_json(path)); }

}  // namespace xdr::train
