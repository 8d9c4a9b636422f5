#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "xdr/nn/perception.hpp"
#include "xdr/train/extractor.hpp"
#include "xdr/train/stage1.hpp"

namespace xdr::train {

inline constexpr const char* kPerceptionFile = "perception.xckpt";
inline constexpr const char* kPerceptionStateFile = "perception_state.xckpt";
inline constexpr const char* kStage2Header = "step,epoch,restored,param,differ,domain,contrastive,l3d,lid,total,lr";

struct Stage2Options {
  std::string ablate;        // "", "domain", "contrastive" or "consistency"
  int stop_after_epoch = 0;  // > 0 ends the run early at a checkpoint epoch
};

/// Held-out measurements taken at every checkpoint.
struct Probe {
  int epoch = 0;
  double restored_mse = 0;  // target test images vs G(R(D(E(I))))
  double param_mmd = 0;     // source eval vs target test parameters
};

struct Stage2Result {
  bool completed = false;
  std::string tag;
  std::filesystem::path dir, checkpoint;
  std::vector<Probe> probes;
  std::vector<std::string> csv_rows;
  double seconds = 0;  // training wall time, summed over resumed sessions
  std::string imitator_digest, extractor_digest;
  std::vector<std::filesystem::path> epoch_checkpoints;
};

inline std::string run_tag(const std::string& ablate) { return ablate.empty() ? "full" : "no_" + ablate; }

/// Zeroes exactly one of lambda2..lambda4. The restored loss is not an ablation.
inline LossWeights ablated_weights(LossWeights w, const std::string& ablate) {
  if (ablate.empty()) return w;
  if (ablate == "domain")
    w.lambda2 = 0;
  else if (ablate == "contrastive")
    w.lambda3 = 0;
  else if (ablate == "consistency")
    w.lambda4 = 0;
  else if (ablate == "restored")
    throw ValidationError("the restored loss cannot be ablated; choose domain, contrastive or consistency");
  else
    throw ValidationError("unknown ablation '" + ablate + "'; choose domain, contrastive or consistency");
  return w;
}

inline nn::Perception<float> make_perception(const TrainConfig& c) {
  return nn::Perception<float>(c.param_dim, c.image_size, c.seed, c.codebook_size);
}

inline nn::Perception<float> load_perception(const std::filesystem::path& path) {
  const Checkpoint c = load_verified(path, "perception");
  nn::Perception<float> net(c.config.at("param_dim").get<int>(), c.config.at("image_size").get<int>(), 0,
                            c.config.at("codebook_size").get<int>());
  restore(net.parameters(), c);
  return net;
}

/// Regressed parameters for a list of bank rows, in chunks.
inline Tensor<float> regress_params(nn::Perception<float>& net, const procgen::ImageBank& bank,
                                    const std::vector<int>& rows, int chunk = 128) {
  Tensor<float> out({static_cast<int>(rows.size()), net.param_dim()});
  for (std::size_t b = 0; b < rows.size(); b += chunk) {
    const std::vector<int> part(rows.begin() + b, rows.begin() + std::min(rows.size(), b + chunk));
    Graph<float> g(GradMode::kDisabled);
    const Tensor<float> p = net(g, g.input(bank.batch<float>(part))).params.value();
    std::copy_n(p.data(), p.size(), out.data() + b * net.param_dim());
  }
  return out;
}

inline double restored_mse(nn::Perception<float>& net, nn::Imitator<float>& imitator, const procgen::ImageBank& bank,
                           const std::vector<int>& rows, int chunk = 128) {
  double sq = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < rows.size(); b += chunk) {
    const std::vector<int> part(rows.begin() + b, rows.begin() + std::min(rows.size(), b + chunk));
    Graph<float> g(GradMode::kDisabled);
    const Tensor<float> images = bank.batch<float>(part);
    const Tensor<float> out = imitator(g, net(g, g.input(images)).params).value();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double d = double(out[i]) - images[i];
      sq += d * d;
    }
    count += out.size();
  }
  return sq / static_cast<double>(count);
}

/// MMD^2 between two parameter sets, evaluated in double.
inline double param_mmd(const Tensor<float>& a, const Tensor<float>& b, const KernelSpec& kernel) {
  Graph<double> g(GradMode::kDisabled);
  return mmd_sq(g.input(a.cast<double>()), g.input(b.cast<double>()), kernel).value().item();
}

namespace detail {

/// Target rows and source rows (ordered for plan_contrastive) of one step.
struct StepSample {
  std::vector<int> target, source;
};

class Stage2Sampler {
 public:
  Stage2Sampler(const TargetSet& target, const SourceSet& source, const Stage2Config& c, std::uint64_t seed)
      : n_target_(target.params.dim(0)), cfg_(c), seed_(seed) {
    std::map<int, std::vector<int>> by_id;
    for (std::size_t r = 0; r < source.identity.size(); ++r) by_id[source.identity[r]].push_back(static_cast<int>(r));
    for (auto& [id, rows] : by_id)
      if (rows.size() >= 2) views_.push_back(std::move(rows));
    if (static_cast<int>(views_.size()) < c.identities)
      throw ValidationError("source train split has fewer than " + std::to_string(c.identities) +
                            " identities with two views");
    if (n_target_ < c.target_batch) throw ValidationError("target train split smaller than the target sub-batch");
  }

  StepSample operator()(long step) const {
    Rng rng(derive_seed(seed_, "stage2.step", static_cast<std::uint64_t>(step)));
    StepSample s;
    s.target = distinct(rng, n_target_, cfg_.target_batch);
    for (int k : distinct(rng, static_cast<int>(views_.size()), cfg_.identities)) {
      const auto& rows = views_[k];
      const std::size_t a = uniform_index(rng, rows.size());
      std::size_t b = uniform_index(rng, rows.size() - 1);
      if (b >= a) ++b;
      s.source.push_back(rows[a]);
      s.source.push_back(rows[b]);
    }
    return s;
  }

 private:
  static std::vector<int> distinct(Rng& rng, int n, int k) {
    std::vector<int> out;
    std::unordered_set<int> seen;
    while (static_cast<int>(out.size()) < k) {
      const int v = static_cast<int>(uniform_index(rng, n));
      if (seen.insert(v).second) out.push_back(v);
    }
    return out;
  }

  int n_target_;
  Stage2Config cfg_;
  std::uint64_t seed_;
  std::vector<std::vector<int>> views_;
};

inline std::string csv_row(long step, int epoch, const LossReport& r, double lr) {
  return std::to_string(step) + "," + std::to_string(epoch) + "," + fmt(r.restored) + "," + fmt(r.param) + "," +
         fmt(r.differ) + "," + fmt(r.domain) + "," + fmt(r.contrastive) + "," + fmt(r.consistency_3d) + "," +
         fmt(r.consistency_id) + "," + fmt(r.total) + "," + fmt(lr);
}

inline std::vector<std::string> read_csv_rows(const std::filesystem::path& path, std::size_t keep) {
  std::vector<std::string> rows;
  if (!std::filesystem::exists(path)) return rows;
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);  // header
  while (rows.size() < keep && std::getline(in, line)) rows.push_back(line);
  if (rows.size() != keep) throw ValidationError(path.string() + " has fewer rows than the state checkpoint records");
  return rows;
}

inline Json probes_json(const std::vector<Probe>& ps) {
  Json j = Json::array();
  for (const auto& p : ps) j.push_back({{"epoch", p.epoch}, {"restored_mse", p.restored_mse}, {"param_mmd", p.param_mmd}});
  return j;
}

inline std::vector<Probe> parse_probes(const Json& j) {
  std::vector<Probe> ps;
  for (const auto& p : j) ps.push_back({p.at("epoch"), p.at("restored_mse"), p.at("param_mmd")});
  return ps;
}

inline bool frozen_grads_zero(const std::vector<Parameter<float>*>& params) {
  for (const auto* p : params)
    if (p->grad.defined())
      for (float v : p->grad.values())
        if (v != 0.0f) return false;
  return true;
}

}  // namespace detail

inline Json stage2_fingerprint(const TrainConfig& c, const procgen::Manifest& m, const std::string& ablate,
                               const std::string& imitator_digest, const std::string& extractor_digest) {
  Json cfg = config_json(c);
  cfg.erase("imitator");
  cfg.erase("extractor");
  return Json{{"config", cfg},
              {"ablate", ablate},
              {"corpus_digest", m.content_digest},
              {"imitator_digest", imitator_digest},
              {"extractor_digest", extractor_digest}};
}

inline std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& run_dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch_%04d.xckpt", epoch);
  return run_dir / "checkpoints" / name;
}

/// Stage-2 training of encoder, codebooks and regressor under the full
/// objective with frozen imitator and identity extractor. Writes into
/// out_root/<tag>: per-step loss CSV, epoch checkpoints (epoch 0, every
/// checkpoint_every epochs, last), probes and the final checkpoint.
inline Stage2Result run_stage2(const std::filesystem::path& corpus, const procgen::Manifest& manifest,
                               const TrainConfig& config, const std::filesystem::path& imitator_path,
                               const std::filesystem::path& extractor_path, const std::filesystem::path& out_root,
                               const Stage2Options& opts = {}) {
  config.validate();
  const LossWeights weights = ablated_weights(config.weights, opts.ablate);
  if (!std::filesystem::exists(imitator_path))
    throw ValidationError("missing imitator checkpoint " + imitator_path.string() + " (run stage 1: train-imitator)");
  if (!std::filesystem::exists(extractor_path))
    throw ValidationError("missing identity extractor checkpoint " + extractor_path.string() +
                          " (run train-extractor)");
  nn::Imitator<float> imitator = load_imitator(imitator_path);
  nn::IdEmbedNet<float> idnet = load_extractor(extractor_path);
  if (imitator.param_dim() != config.param_dim || imitator.image_size() != config.image_size ||
      idnet.image_size() != config.image_size)
    throw ValidationError("imitator / extractor dimensions do not match the training config");
  const std::string imitator_digest = weights_digest(imitator.parameters());
  const std::string extractor_digest = weights_digest(idnet.parameters());
  auto verify_frozen = [&](const char* when) {
    if (weights_digest(imitator.parameters()) != imitator_digest)
      throw FrozenError(std::string("imitator weights changed during stage 2 (") + when + ")");
    if (weights_digest(idnet.parameters()) != extractor_digest)
      throw FrozenError(std::string("identity extractor weights changed during stage 2 (") + when + ")");
  };

  Stage2Result result;
  result.tag = run_tag(opts.ablate);
  result.dir = out_root / result.tag;
  result.checkpoint = result.dir / kPerceptionFile;
  result.imitator_digest = imitator_digest;
  result.extractor_digest = extractor_digest;
  const Json fingerprint = stage2_fingerprint(config, manifest, opts.ablate, imitator_digest, extractor_digest);
  const auto state_path = result.dir / kPerceptionStateFile;
  const auto csv_path = result.dir / "loss.csv";
  const Stage2Config& s2 = config.stage2;
  auto collect_epoch_paths = [&](const std::vector<Probe>& probes) {
    result.epoch_checkpoints.clear();
    for (const auto& p : probes) result.epoch_checkpoints.push_back(epoch_checkpoint_path(result.dir, p.epoch));
  };

  if (std::filesystem::exists(result.checkpoint)) {
    const Checkpoint c = load_verified(result.checkpoint, "perception");
    if (c.config.at("fingerprint") != fingerprint)
      throw ValidationError(result.checkpoint.string() + " was trained under a different config; use a new directory");
    result.completed = true;
    result.probes = detail::parse_probes(c.config.at("probes"));
    result.csv_rows = detail::read_csv_rows(csv_path, c.config.at("steps").get<std::size_t>());
    result.seconds = read_seconds(result.dir / "timing.json");
    collect_epoch_paths(result.probes);
    log::info("stage 2 [" + result.tag + "]: reusing " + result.checkpoint.string());
    return result;
  }

  log::info("stage 2 [" + result.tag + "]: loading corpus");
  const TargetSet target = load_target(corpus, manifest, "train");
  const TargetSet target_test = load_target(corpus, manifest, "test");
  const SourceSet source = load_source(corpus, manifest, "train");
  const SourceSet source_eval = load_source(corpus, manifest, "eval");
  const detail::Stage2Sampler sampler(target, source, s2, config.seed);
  const std::vector<int> probe_t = iota_rows(std::min<std::size_t>(s2.probe_images, target_test.images.count()));
  const std::vector<int> probe_s = iota_rows(std::min<std::size_t>(s2.probe_images, source_eval.images.count()));
  const nn::GeometryMaps<float> maps(config.image_size, config.image_size);

  nn::Perception<float> net = make_perception(config);
  Adam<float> adam(net.parameters(), AdamOptions{.lr = s2.lr});
  int start = 0;
  if (std::filesystem::exists(state_path)) {
    const Checkpoint c = load_verified(state_path, "perception.state");
    if (c.config.at("fingerprint") != fingerprint)
      throw ValidationError(state_path.string() + " belongs to a different config; remove it to restart");
    restore(net.parameters(), c);
    restore_optimizer(adam, c);
    start = static_cast<int>(c.epoch);
    result.probes = detail::parse_probes(c.config.at("probes"));
    result.csv_rows = detail::read_csv_rows(csv_path, c.config.at("steps").get<std::size_t>());
    result.seconds = read_seconds(result.dir / "timing.json");
    log::info("stage 2 [" + result.tag + "]: resuming after epoch " + std::to_string(start));
  }

  const auto session_start = std::chrono::steady_clock::now();
  const double prior_seconds = result.seconds;
  auto model_config = [&] {
    result.seconds = prior_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - session_start).count();
    write_json(result.dir / "timing.json", Json{{"seconds", result.seconds}});
    return Json{{"fingerprint", fingerprint},
                {"param_dim", config.param_dim},
                {"image_size", config.image_size},
                {"codebook_size", config.codebook_size},
                {"tag", result.tag},
                {"steps", result.csv_rows.size()},
                {"probes", detail::probes_json(result.probes)}};
  };
  auto checkpoint = [&](int epoch) {
    verify_frozen(("epoch " + std::to_string(epoch)).c_str());
    Probe p{epoch, restored_mse(net, imitator, target_test.images, probe_t),
            param_mmd(regress_params(net, source_eval.images, probe_s), regress_params(net, target_test.images, probe_t),
                      s2.kernel)};
    result.probes.push_back(p);
    save_verified(epoch_checkpoint_path(result.dir, epoch),
                  snapshot("perception", static_cast<std::uint32_t>(epoch), model_config(), net.parameters()));
    save_verified(state_path,
                  snapshot("perception.state", static_cast<std::uint32_t>(epoch), model_config(), net.parameters(), &adam));
    write_csv(csv_path, kStage2Header, result.csv_rows);
    log::info("stage 2 [" + result.tag + "]: checkpoint epoch " + std::to_string(epoch) + " restored mse " +
              fmt(p.restored_mse) + " param mmd " + fmt(p.param_mmd));
  };
  if (start == 0) {
    result.csv_rows.clear();
    checkpoint(0);
  }

  const auto frozen_params = [&] {
    auto ps = imitator.parameters();
    for (auto* q : idnet.parameters()) ps.push_back(q);
    return ps;
  }();
  for (int epoch = start + 1; epoch <= s2.epochs; ++epoch) {
    const double lr = scheduled_lr(s2.lr, s2.lr_halve_epochs, epoch);
    adam.set_lr(lr);
    double epoch_total = 0;
    for (int k = 0; k < s2.steps_per_epoch; ++k) {
      const long step = static_cast<long>(epoch - 1) * s2.steps_per_epoch + k + 1;
      const detail::StepSample sample = sampler(step);
      StepBatch<float> batch{target.images.batch<float>(sample.target), source.images.batch<float>(sample.source),
                             s2.identities};
      adam.zero_grad();
      Graph<float> g;
      Objective<float> obj = full_objective(g, batch, net, imitator, idnet, maps, weights, s2.kernel, s2.tau);
      if (!std::isfinite(obj.report.total))
        throw NonFiniteError("stage 2: non-finite loss at step " + std::to_string(step) + "; last good state is " +
                             state_path.string());
      g.backward(obj.total);
      if (k == 0 && !detail::frozen_grads_zero(frozen_params))
        throw FrozenError("stage 2: a frozen network received a gradient");
      adam.step();
      result.csv_rows.push_back(detail::csv_row(step, epoch, obj.report, lr));
      epoch_total += obj.report.total;
    }
    log::info("stage 2 [" + result.tag + "]: epoch " + std::to_string(epoch) + "/" + std::to_string(s2.epochs) +
              " mean total " + fmt(epoch_total / s2.steps_per_epoch) + " lr " + fmt(lr));
    if (epoch % s2.checkpoint_every == 0 || epoch == s2.epochs) checkpoint(epoch);
    if (opts.stop_after_epoch > 0 && epoch >= opts.stop_after_epoch && epoch < s2.epochs &&
        epoch % s2.checkpoint_every == 0)
      return result;
  }

  verify_frozen("final");
  save_verified(result.checkpoint,
                snapshot("perception", static_cast<std::uint32_t>(s2.epochs), model_config(), net.parameters()));
  write_json(result.dir / "stage2_metrics.json",
             Json{{"tag", result.tag},
                  {"ablate", opts.ablate},
                  {"weights",
                   {{"lambda1", weights.lambda1}, {"lambda2", weights.lambda2}, {"lambda3", weights.lambda3},
                    {"lambda4", weights.lambda4}, {"alpha", weights.alpha}, {"beta", weights.beta}}},
                  {"probes", detail::probes_json(result.probes)},
                  {"imitator_digest", imitator_digest},
                  {"extractor_digest", extractor_digest},
                  {"steps", result.csv_rows.size()},
                  {"seconds", result.seconds}});
  std::filesystem::remove(state_path);
  std::filesystem::remove(sidecar_path(state_path));
  collect_epoch_paths(result.probes);
  result.completed = true;
  return result;
}

}  // namespace xdr::train
