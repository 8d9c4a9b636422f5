#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "xdr/nn/imitator.hpp"
#include "xdr/train/checkpoint.hpp"
#include "xdr/train/config.hpp"
#include "xdr/train/data.hpp"
#include "xdr/util/log.hpp"

namespace xdr::train {

inline constexpr const char* kImitatorFile = "imitator.xckpt";
inline constexpr const char* kImitatorStateFile = "imitator_state.xckpt";

struct Stage1Options {
  int stop_after_epoch = 0;  // > 0 ends the run early, leaving a resumable state
};

struct Stage1Epoch {
  int epoch = 0;
  double train_mse = 0, heldout_mse = 0;
};

struct Stage1Result {
  bool completed = false;
  double baseline = 0;  // held-out MSE of the untrained network
  std::vector<Stage1Epoch> history;
  double seconds = 0;  // training wall time, summed over resumed sessions
  std::string weights_digest;
  std::filesystem::path checkpoint;
};

/// Everything the stage-1 result depends on. A state file recorded under a
/// different fingerprint is refused rather than silently mixed in.
inline Json stage1_fingerprint(const TrainConfig& c, const procgen::Manifest& m) {
  return Json{{"seed", c.seed},
              {"image_size", c.image_size},
              {"param_dim", c.param_dim},
              {"imitator", config_json(c)["imitator"]},
              {"corpus_digest", m.content_digest}};
}

inline double heldout_mse(nn::Imitator<float>& net, const TargetSet& set, int chunk = 250) {
  const int n = set.params.dim(0);
  double sq = 0;
  std::size_t count = 0;
  for (int b = 0; b < n; b += chunk) {
    std::vector<int> rows;
    for (int r = b; r < std::min(n, b + chunk); ++r) rows.push_back(r);
    Graph<float> g(GradMode::kDisabled);
    const Tensor<float> out = net(g, g.input(rows_of(set.params, rows))).value();
    const Tensor<float> ref = set.images.batch<float>(rows);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double d = double(out[i]) - ref[i];
      sq += d * d;
    }
    count += out.size();
  }
  return sq / static_cast<double>(count);
}

namespace detail {

inline Json history_json(const std::vector<Stage1Epoch>& h) {
  Json j = Json::array();
  for (const auto& e : h) j.push_back({e.epoch, e.train_mse, e.heldout_mse});
  return j;
}

inline std::vector<Stage1Epoch> parse_history(const Json& j) {
  std::vector<Stage1Epoch> h;
  for (const auto& r : j) h.push_back({r[0].get<int>(), r[1].get<double>(), r[2].get<double>()});
  return h;
}

inline void write_stage1_csv(const std::filesystem::path& dir, const std::vector<Stage1Epoch>& h) {
  std::vector<std::string> rows;
  for (const auto& e : h) rows.push_back(std::to_string(e.epoch) + "," + fmt(e.train_mse) + "," + fmt(e.heldout_mse));
  write_csv(dir / "imitator_loss.csv", "epoch,train_mse,heldout_mse", rows);
}

}  // namespace detail

/// Restores a frozen imitator from its verified checkpoint.
inline void load_imitator(nn::Imitator<float>& net, const std::filesystem::path& path) {
  const Checkpoint c = load_verified(path, "imitator");
  restore(net.parameters(), c);
  net.set_frozen(true);
}

inline nn::Imitator<float> load_imitator(const std::filesystem::path& path) {
  const Checkpoint c = load_verified(path, "imitator");
  nn::Imitator<float> net(c.config.at("param_dim").get<int>(), c.config.at("image_size").get<int>(), 0);
  restore(net.parameters(), c);
  net.set_frozen(true);
  return net;
}

/// Trains the imitator on the target train split with MSE and Adam, one
/// state checkpoint per epoch. Resumes from an existing state file and
/// returns immediately if the final checkpoint is already present.
inline Stage1Result run_stage1(const std::filesystem::path& corpus, const procgen::Manifest& manifest,
                               const TrainConfig& config, const std::filesystem::path& out_dir,
                               const Stage1Options& opts = {}) {
  config.validate();
  if (manifest.config.image_size != config.image_size || manifest.config.param_dim != config.param_dim)
    throw ValidationError("corpus image size / P do not match the training config");
  const Json fingerprint = stage1_fingerprint(config, manifest);
  const auto final_path = out_dir / kImitatorFile;
  const auto state_path = out_dir / kImitatorStateFile;
  Stage1Result result;
  result.checkpoint = final_path;

  if (std::filesystem::exists(final_path)) {
    const Checkpoint c = load_verified(final_path, "imitator");
    if (c.config.at("fingerprint") != fingerprint)
      throw ValidationError(final_path.string() + " was trained under a different config or corpus");
    result.completed = true;
    result.baseline = c.config.at("baseline").get<double>();
    result.history = detail::parse_history(c.config.at("history"));
    result.seconds = read_seconds(out_dir / "imitator_timing.json");
    result.weights_digest = weights_digest(c.tensors);
    log::info("stage 1: reusing " + final_path.string());
    return result;
  }

  log::info("stage 1: loading target corpus");
  const TargetSet train = load_target(corpus, manifest, "train");
  const TargetSet test = load_target(corpus, manifest, "test");

  nn::Imitator<float> net(config.param_dim, config.image_size, config.seed);
  Adam<float> adam(net.parameters(), AdamOptions{.lr = config.imitator.lr});
  int start = 0;
  if (std::filesystem::exists(state_path)) {
    const Checkpoint c = load_verified(state_path, "imitator.state");
    if (c.config.at("fingerprint") != fingerprint)
      throw ValidationError(state_path.string() + " belongs to a different config or corpus; remove it to restart");
    restore(net.parameters(), c);
    restore_optimizer(adam, c);
    start = static_cast<int>(c.epoch);
    result.baseline = c.config.at("baseline").get<double>();
    result.history = detail::parse_history(c.config.at("history"));
    result.seconds = read_seconds(out_dir / "imitator_timing.json");
    log::info("stage 1: resuming after epoch " + std::to_string(start));
  } else {
    result.baseline = heldout_mse(net, test);
    log::info("stage 1: untrained held-out mse " + fmt(result.baseline));
  }

  const auto session_start = std::chrono::steady_clock::now();
  const double prior_seconds = result.seconds;
  auto state_config = [&] {
    result.seconds = prior_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - session_start).count();
    write_json(out_dir / "imitator_timing.json", Json{{"seconds", result.seconds}});
    return Json{{"fingerprint", fingerprint},
                {"param_dim", config.param_dim},
                {"image_size", config.image_size},
                {"baseline", result.baseline},
                {"history", detail::history_json(result.history)}};
  };

  const int n = train.params.dim(0), bs = config.imitator.batch_size;
  for (int epoch = start + 1; epoch <= config.imitator.epochs; ++epoch) {
    std::vector<int> order = iota_rows(n);
    Rng rng(derive_seed(config.seed, "imitator.epoch", epoch));
    shuffle(order, rng);
    double sq = 0;
    for (int b = 0; b < n; b += bs) {
      const std::vector<int> rows(order.begin() + b, order.begin() + std::min(n, b + bs));
      adam.zero_grad();
      Graph<float> g;
      const Var<float> loss =
          ops::mse(net(g, g.input(rows_of(train.params, rows))), g.input(train.images.batch<float>(rows)));
      const double value = loss.value().item();
      if (!std::isfinite(value))
        throw NonFiniteError("stage 1: non-finite loss in epoch " + std::to_string(epoch) +
                             "; last good state is " + state_path.string());
      g.backward(loss);
      adam.step();
      sq += value * static_cast<double>(rows.size());
    }
    Stage1Epoch row{epoch, sq / n, heldout_mse(net, test)};
    result.history.push_back(row);
    log::info("stage 1: epoch " + std::to_string(epoch) + "/" + std::to_string(config.imitator.epochs) +
              " train " + fmt(row.train_mse) + " held-out " + fmt(row.heldout_mse));
    save_verified(state_path, snapshot("imitator.state", epoch, state_config(), net.parameters(), &adam));
    detail::write_stage1_csv(out_dir, result.history);
    if (opts.stop_after_epoch > 0 && epoch == opts.stop_after_epoch && epoch < config.imitator.epochs) return result;
  }

  net.set_frozen(true);
  const Checkpoint final_ckpt = snapshot("imitator", config.imitator.epochs, state_config(), net.parameters());
  const Json meta = save_verified(final_path, final_ckpt);
  result.weights_digest = meta.at("weights_digest");
  result.completed = true;
  write_json(out_dir / "imitator_metrics.json",
             Json{{"baseline_heldout_mse", result.baseline},
                  {"final_heldout_mse", result.history.back().heldout_mse},
                  {"ratio", result.history.back().heldout_mse / result.baseline},
                  {"epochs", config.imitator.epochs},
                  {"seconds", result.seconds},
                  {"weights_digest", result.weights_digest}});
  std::filesystem::remove(state_path);
  std::filesystem::remove(sidecar_path(state_path));
  return result;
}

}  // namespace xdr::train
