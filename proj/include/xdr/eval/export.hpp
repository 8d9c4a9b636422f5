#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "xdr/train/stage2.hpp"

namespace xdr::eval {

/// Source eval and target test images, the two sets compared by the
/// parameter-space domain gap.
struct GapSets {
  train::SourceSet source;
  train::TargetSet target;
};

inline GapSets load_gap_sets(const std::filesystem::path& corpus, const procgen::Manifest& m) {
  return {train::load_source(corpus, m, "eval"), train::load_target(corpus, m, "test")};
}

struct Embedding {
  Tensor<float> source, target;  // regressed parameters
  double mmd = 0;
};

inline Embedding embed_domains(nn::Perception<float>& net, const GapSets& sets, const train::KernelSpec& kernel) {
  Embedding e;
  e.source = train::regress_params(net, sets.source.images, train::iota_rows(sets.source.images.count()));
  e.target = train::regress_params(net, sets.target.images, train::iota_rows(sets.target.images.count()));
  e.mmd = train::param_mmd(e.source, e.target, kernel);
  return e;
}

inline std::string embedding_csv(const Embedding& e) {
  const int p = e.source.dim(1);
  std::string out = "domain";
  for (int k = 0; k < p; ++k) out += ",p" + std::to_string(k);
  out += "\n";
  auto rows = [&](const char* tag, const Tensor<float>& t) {
    for (int r = 0; r < t.dim(0); ++r) {
      out += tag;
      for (int k = 0; k < p; ++k) out += "," + train::fmt(t[std::size_t(r) * p + k]);
      out += "\n";
    }
  };
  rows("source", e.source);
  rows("target", e.target);
  return out;
}

/// One CSV per checkpoint plus the source/target parameter MMD^2 of each.
inline Json export_embeddings(const std::filesystem::path& corpus, const procgen::Manifest& m,
                              const std::vector<std::filesystem::path>& checkpoints,
                              const std::filesystem::path& out_dir,
                              const train::KernelSpec& kernel = train::KernelSpec::median()) {
  const GapSets sets = load_gap_sets(corpus, m);
  Json list = Json::array();
  std::vector<double> trend;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    auto net = train::load_perception(checkpoints[i]);
    const Embedding e = embed_domains(net, sets, kernel);
    char name[16];
    std::snprintf(name, sizeof name, "%02zu_", i);
    const auto csv = out_dir / (name + checkpoints[i].stem().string() + ".csv");
    write_atomic(csv, embedding_csv(e));
    trend.push_back(e.mmd);
    list.push_back({{"checkpoint", checkpoints[i].string()},
                    {"csv", csv.string()},
                    {"source_rows", e.source.dim(0)},
                    {"target_rows", e.target.dim(0)},
                    {"param_mmd", e.mmd}});
    log::info("export: " + checkpoints[i].string() + " mmd " + train::fmt(e.mmd));
  }
  const Json summary{{"checkpoints", list}, {"mmd_trend", trend}};
  write_json(out_dir / "embeddings.json", summary);
  return summary;
}

}  // namespace xdr::eval
