#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "xdr/nn/extractors.hpp"
#include "xdr/train/checkpoint.hpp"
#include "xdr/train/config.hpp"
#include "xdr/train/data.hpp"
#include "xdr/util/log.hpp"

namespace xdr::train {

inline constexpr const char* kExtractorFile = "id_extractor.xckpt";

struct ExtractorResult {
  int epochs = 0;
  double initial_accuracy = 0;  // held-out, untrained
  double accuracy = 0;          // held-out, final
  double same_identity_cos = 0, cross_identity_cos = 0;
  std::string weights_digest;
  std::filesystem::path checkpoint;
  double margin() const { return same_identity_cos - cross_identity_cos; }
};

inline Json extractor_fingerprint(const TrainConfig& c, const procgen::Manifest& m) {
  return Json{{"seed", c.seed},
              {"image_size", c.image_size},
              {"extractor", config_json(c)["extractor"]},
              {"corpus_digest", m.content_digest}};
}

inline nn::IdEmbedNet<float> load_extractor(const std::filesystem::path& path) {
  const Checkpoint c = load_verified(path, "extractor");
  nn::IdEmbedNet<float> net(c.config.at("num_ids").get<int>(), c.config.at("image_size").get<int>(), 0);
  restore(net.parameters(), c);
  net.set_frozen(true);
  return net;
}

namespace detail {

inline double classification_accuracy(nn::IdEmbedNet<float>& net, const procgen::ImageBank& bank,
                                      const std::vector<int>& rows, const std::vector<int>& labels) {
  int correct = 0;
  for (std::size_t b = 0; b < rows.size(); b += 256) {
    const std::vector<int> chunk(rows.begin() + b, rows.begin() + std::min(rows.size(), b + 256));
    Graph<float> g(GradMode::kDisabled);
    const Tensor<float> logits = net.logits(g, g.input(bank.batch<float>(chunk))).value();
    const int k = logits.dim(1);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const float* row = logits.data() + r * k;
      if (std::max_element(row, row + k) - row == labels[b + r]) ++correct;
    }
  }
  return double(correct) / static_cast<double>(rows.size());
}

}  // namespace detail

/// Mean embedding cosine between held-out views of the same identity and
/// between views of different identities.
inline std::pair<double, double> embedding_margin(nn::IdEmbedNet<float>& net, const procgen::ImageBank& bank,
                                                  const std::vector<int>& rows, const std::vector<int>& labels) {
  Graph<float> g(GradMode::kDisabled);
  Tensor<float> e = net.embed(g, g.input(bank.batch<float>(rows))).value();
  const int d = e.dim(1), n = e.dim(0);
  std::vector<double> norm(n);
  for (int i = 0; i < n; ++i) {
    double s = 0;
    for (int k = 0; k < d; ++k) s += double(e[i * d + k]) * e[i * d + k];
    norm[i] = std::max(std::sqrt(s), 1e-12);
  }
  double same = 0, cross = 0;
  long n_same = 0, n_cross = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double dot = 0;
      for (int k = 0; k < d; ++k) dot += double(e[i * d + k]) * e[j * d + k];
      const double c = dot / (norm[i] * norm[j]);
      if (labels[i] == labels[j]) {
        same += c;
        ++n_same;
      } else {
        cross += c;
        ++n_cross;
      }
    }
  return {n_same ? same / n_same : 0.0, n_cross ? cross / n_cross : 0.0};
}

/// Trains the identity classifier on the extractor split (views below
/// train_views), stopping once held-out view accuracy reaches the target.
/// Missing the target by the epoch cap is a runtime failure.
inline ExtractorResult run_extractor(const std::filesystem::path& corpus, const procgen::Manifest& manifest,
                                     const TrainConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  const Json fingerprint = extractor_fingerprint(config, manifest);
  const auto path = out_dir / kExtractorFile;
  ExtractorResult result;
  result.checkpoint = path;
  if (std::filesystem::exists(path)) {
    const Checkpoint c = load_verified(path, "extractor");
    if (c.config.at("fingerprint") != fingerprint)
      throw ValidationError(path.string() + " was trained under a different config or corpus");
    const Json& m = c.config.at("metrics");
    result.epochs = static_cast<int>(c.epoch);
    result.initial_accuracy = m.at("initial_accuracy");
    result.accuracy = m.at("accuracy");
    result.same_identity_cos = m.at("same_identity_cos");
    result.cross_identity_cos = m.at("cross_identity_cos");
    result.weights_digest = weights_digest(c.tensors);
    log::info("extractor: reusing " + path.string());
    return result;
  }

  const SourceSet set = load_source(corpus, manifest, "extractor");
  std::map<int, int> label_of;
  for (int id : set.identity) label_of.emplace(id, static_cast<int>(label_of.size()));
  const int num_ids = static_cast<int>(label_of.size());
  std::vector<int> train_rows, train_labels, held_rows, held_labels;
  for (std::size_t r = 0; r < set.identity.size(); ++r) {
    const int label = label_of.at(set.identity[r]);
    if (set.view[r] < config.extractor.train_views) {
      train_rows.push_back(static_cast<int>(r));
      train_labels.push_back(label);
    } else {
      held_rows.push_back(static_cast<int>(r));
      held_labels.push_back(label);
    }
  }
  if (held_rows.empty()) throw ValidationError("extractor split has no held-out views (train_views too large)");

  nn::IdEmbedNet<float> net(num_ids, config.image_size, config.seed);
  Adam<float> adam(net.parameters(), AdamOptions{.lr = config.extractor.lr});
  result.initial_accuracy = detail::classification_accuracy(net, set.images, held_rows, held_labels);
  log::info("extractor: " + std::to_string(num_ids) + " identities, untrained held-out accuracy " +
            fmt(result.initial_accuracy));

  const int n = static_cast<int>(train_rows.size()), bs = config.extractor.batch_size;
  for (int epoch = 1; epoch <= config.extractor.max_epochs; ++epoch) {
    std::vector<int> order = iota_rows(n);
    Rng rng(derive_seed(config.seed, "extractor.epoch", epoch));
    shuffle(order, rng);
    double total = 0;
    for (int b = 0; b < n; b += bs) {
      std::vector<int> rows, labels;
      for (int k = b; k < std::min(n, b + bs); ++k) {
        rows.push_back(train_rows[order[k]]);
        labels.push_back(train_labels[order[k]]);
      }
      adam.zero_grad();
      Graph<float> g;
      const Var<float> loss = ops::softmax_cross_entropy(net.logits(g, g.input(set.images.batch<float>(rows))), labels);
      if (!std::isfinite(loss.value().item()))
        throw NonFiniteError("extractor: non-finite loss in epoch " + std::to_string(epoch));
      g.backward(loss);
      adam.step();
      total += loss.value().item() * static_cast<double>(rows.size());
    }
    result.epochs = epoch;
    result.accuracy = detail::classification_accuracy(net, set.images, held_rows, held_labels);
    log::info("extractor: epoch " + std::to_string(epoch) + " loss " + fmt(total / n) + " held-out accuracy " +
              fmt(result.accuracy));
    if (result.accuracy >= config.extractor.target_accuracy) break;
  }
  if (result.accuracy < config.extractor.target_accuracy)
    throw Error("identity extractor reached only " + fmt(result.accuracy) + " held-out accuracy after " +
                std::to_string(result.epochs) + " epochs (target " + fmt(config.extractor.target_accuracy) + ")");

  std::tie(result.same_identity_cos, result.cross_identity_cos) =
      embedding_margin(net, set.images, held_rows, held_labels);
  net.set_frozen(true);
  const Json metrics{{"initial_accuracy", result.initial_accuracy},
                     {"accuracy", result.accuracy},
                     {"same_identity_cos", result.same_identity_cos},
                     {"cross_identity_cos", result.cross_identity_cos}};
  const Json meta = save_verified(path, snapshot("extractor", static_cast<std::uint32_t>(result.epochs),
                                                 Json{{"fingerprint", fingerprint},
                                                      {"num_ids", num_ids},
                                                      {"image_size", config.image_size},
                                                      {"metrics", metrics}},
                                                 net.parameters()));
  result.weights_digest = meta.at("weights_digest");
  Json report = metrics;
  report["epochs"] = result.epochs;
  report["margin"] = result.margin();
  report["weights_digest"] = result.weights_digest;
  write_json(out_dir / "id_extractor_metrics.json", report);
  return result;
}

}  // namespace xdr::train
