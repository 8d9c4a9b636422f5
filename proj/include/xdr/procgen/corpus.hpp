#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xdr/core/tensor.hpp"
#include "xdr/procgen/image.hpp"
#include "xdr/procgen/shift.hpp"
#include "xdr/util/digest.hpp"
#include "xdr/util/io.hpp"

namespace xdr::procgen {

inline constexpr int kManifestVersion = 1;
inline constexpr int kMaxViews = 64;
inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kSealedName = "sealed_ground_truth.json";

struct CorpusConfig {
  int image_size = 64;
  int param_dim = kParamDim;
  int target_train = 18000;
  int target_test = 2000;
  int source_train_ids = 2000;
  int source_train_views = 4;
  int eval_ids = 400;
  int eval_views = 2;
  int extractor_ids = 256;
  int extractor_views = 8;
  double tint_limit = 0.05;

  void validate() const {
    if (param_dim != kParamDim)
      throw ValidationError("param_dim " + std::to_string(param_dim) + " unsupported by the renderer (needs 32)");
    if (image_size < 8 || (image_size & (image_size - 1)) != 0)
      throw ValidationError("image_size must be a power of two >= 8");
    for (int v : {target_train, target_test, source_train_ids, eval_ids, extractor_ids})
      if (v < 0) throw ValidationError("corpus counts must be non-negative");
    for (int v : {source_train_views, eval_views, extractor_views})
      if (v < 1 || v > kMaxViews) throw ValidationError("views per identity must be in [1, 64]");
  }

  int eval_begin() const { return source_train_ids; }
  int extractor_begin() const { return source_train_ids + eval_ids; }
  int total_ids() const { return source_train_ids + eval_ids + extractor_ids; }
};

inline void to_json(Json& j, const CorpusConfig& c) {
  j = Json{{"image_size", c.image_size},
           {"param_dim", c.param_dim},
           {"target_train", c.target_train},
           {"target_test", c.target_test},
           {"source_train_ids", c.source_train_ids},
           {"source_train_views", c.source_train_views},
           {"eval_ids", c.eval_ids},
           {"eval_views", c.eval_views},
           {"extractor_ids", c.extractor_ids},
           {"extractor_views", c.extractor_views},
           {"tint_limit", c.tint_limit}};
}

inline void from_json(const Json& j, CorpusConfig& c) {
  CorpusConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.param_dim = j.value("param_dim", d.param_dim);
  c.target_train = j.value("target_train", d.target_train);
  c.target_test = j.value("target_test", d.target_test);
  c.source_train_ids = j.value("source_train_ids", d.source_train_ids);
  c.source_train_views = j.value("source_train_views", d.source_train_views);
  c.eval_ids = j.value("eval_ids", d.eval_ids);
  c.eval_views = j.value("eval_views", d.eval_views);
  c.extractor_ids = j.value("extractor_ids", d.extractor_ids);
  c.extractor_views = j.value("extractor_views", d.extractor_views);
  c.tint_limit = j.value("tint_limit", d.tint_limit);
}

/// Identity and view construction. Every value depends only on the corpus
/// seed and its own index, so files can be produced in any order.
inline IdentityRecord make_identity(std::uint64_t seed, int id, int views, double tint_limit = 0.05) {
  IdentityRecord r;
  r.id = id;
  Rng rng(derive_seed(seed, "identity", id));
  for (int i = 0; i < kIdentityDim; ++i) r.identity_params.push_back(static_cast<float>(uniform(rng, -kParamLimit, kParamLimit)));
  Rng trng(derive_seed(seed, "tint", id));
  for (auto& t : r.tint) t = static_cast<float>(uniform(trng, -tint_limit, tint_limit));
  for (int v = 0; v < views; ++v) {
    const auto index = static_cast<std::uint64_t>(id) * kMaxViews + v;
    ViewSpec view;
    Rng vrng(derive_seed(seed, "view", index));
    for (auto& n : view.nuisance) n = static_cast<float>(uniform(vrng, -kNuisanceLimit, kNuisanceLimit));
    view.photometric_seed = derive_seed(seed, "photometric", index);
    r.views.push_back(view);
  }
  return r;
}

inline ParamVector target_params(std::uint64_t seed, int index) { return sample_params(derive_seed(seed, "target", index)); }

inline std::string target_path(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "target/t%06d.ppm", i);
  return buf;
}

inline std::string source_path(int id, int view) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "source/s%06d_v%d.ppm", id, view);
  return buf;
}

struct TargetEntry {
  std::string path;
  ParamVector params;
  std::string split;  // train | test
};

struct SourceEntry {
  std::string path;
  int identity = 0;
  int view = 0;
  std::string split;  // train | eval | extractor
};

/// Trainer-visible corpus description (no source ground truth).
struct Manifest {
  std::uint64_t seed = 0;
  CorpusConfig config;
  std::vector<TargetEntry> target;
  std::vector<SourceEntry> source;
  std::string content_digest;

  std::vector<int> target_indices(const std::string& split) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < target.size(); ++i)
      if (target[i].split == split) out.push_back(static_cast<int>(i));
    return out;
  }
  std::vector<int> source_indices(const std::string& split) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < source.size(); ++i)
      if (source[i].split == split) out.push_back(static_cast<int>(i));
    return out;
  }
};

inline Json manifest_json(const Manifest& m) {
  const CorpusConfig& c = m.config;
  Json target = Json::array(), source = Json::array();
  for (const auto& t : m.target) target.push_back({{"path", t.path}, {"params", t.params}, {"split", t.split}});
  for (const auto& s : m.source)
    source.push_back({{"path", s.path}, {"identity", s.identity}, {"view", s.view}, {"split", s.split}});
  Json splits = {
      {"target", {{"train", c.target_train}, {"test", c.target_test}}},
      {"source",
       {{"train", {{"first_id", 0}, {"ids", c.source_train_ids}, {"views", c.source_train_views}}},
        {"eval", {{"first_id", c.eval_begin()}, {"ids", c.eval_ids}, {"views", c.eval_views}}},
        {"extractor", {{"first_id", c.extractor_begin()}, {"ids", c.extractor_ids}, {"views", c.extractor_views}}}}}};
  return Json{{"version", kManifestVersion}, {"seed", m.seed},     {"image_size", c.image_size},
              {"param_dim", c.param_dim},    {"config", c},         {"content_digest", m.content_digest},
              {"splits", splits},            {"target", target},    {"source", source}};
}

inline Manifest parse_manifest(const Json& j) {
  Manifest m;
  try {
    if (j.at("version").get<int>() != kManifestVersion) throw ValidationError("unsupported manifest version");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.at("config").get<CorpusConfig>();
    m.content_digest = j.value("content_digest", "");
    for (const auto& t : j.at("target"))
      m.target.push_back({t.at("path"), t.at("params").get<ParamVector>(), t.at("split")});
    for (const auto& s : j.at("source")) m.source.push_back({s.at("path"), s.at("identity"), s.at("view"), s.at("split")});
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  if (!std::filesystem::exists(path)) throw ValidationError("no manifest at " + path.string());
  return parse_manifest(read_json(path));
}

/// Renders the full corpus under `dir`. The manifest is written last, and an
/// existing one is removed first, so a failed run never leaves a manifest
/// pointing at partial data.
inline Manifest build_corpus(const std::filesystem::path& dir, const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  namespace fs = std::filesystem;
  fs::create_directories(dir / "target");
  fs::create_directories(dir / "source");
  fs::remove(dir / kManifestName);
  fs::remove(dir / kSealedName);

  Manifest m;
  m.seed = seed;
  m.config = config;
  Sha256 digest;
  auto emit = [&](const std::string& rel, const Image& img) {
    const std::string bytes = encode_ppm(img);
    write_atomic(dir / rel, bytes);
    digest.update(rel).update(bytes);
  };

  const int n_target = config.target_train + config.target_test;
  for (int i = 0; i < n_target; ++i) {
    ParamVector p = target_params(seed, i);
    const std::string rel = target_path(i);
    emit(rel, render_engine(p, config.image_size));
    m.target.push_back({rel, std::move(p), i < config.target_train ? "train" : "test"});
  }

  Json sealed = Json::object();
  struct Block {
    const char* split;
    int first, count, views;
  };
  const Block blocks[] = {{"train", 0, config.source_train_ids, config.source_train_views},
                          {"eval", config.eval_begin(), config.eval_ids, config.eval_views},
                          {"extractor", config.extractor_begin(), config.extractor_ids, config.extractor_views}};
  for (const Block& b : blocks) {
    for (int id = b.first; id < b.first + b.count; ++id) {
      const IdentityRecord rec = make_identity(seed, id, b.views, config.tint_limit);
      sealed[std::to_string(id)] = rec.identity_params;
      for (int v = 0; v < b.views; ++v) {
        const std::string rel = source_path(id, v);
        emit(rel, render_source_view(rec, rec.views[v], config.image_size));
        m.source.push_back({rel, id, v, b.split});
      }
    }
  }
  m.content_digest = digest.hex();
  write_json(dir / kSealedName, sealed);
  write_json(dir / kManifestName, manifest_json(m));
  return m;
}

/// Dense uint8 storage for a list of same-sized images.
struct ImageBank {
  int height = 0, width = 0;
  std::vector<std::uint8_t> bytes;

  std::size_t count() const { return height ? bytes.size() / (std::size_t(height) * width * 3) : 0; }
  std::size_t stride() const { return std::size_t(height) * width * 3; }

  void append(const std::filesystem::path& path) {
    int h = 0, w = 0;
    const auto b = read_ppm_bytes(path, h, w);
    if (bytes.empty()) {
      height = h;
      width = w;
    } else if (h != height || w != width) {
      throw ValidationError(path.string() + ": image is " + std::to_string(h) + "x" + std::to_string(w) +
                            ", expected " + std::to_string(height) + "x" + std::to_string(width));
    }
    bytes.insert(bytes.end(), b.begin(), b.end());
  }

  void append(const Image& img) {
    if (bytes.empty()) {
      height = img.height;
      width = img.width;
    } else if (img.height != height || img.width != width) {
      throw ValidationError("image size mismatch in bank");
    }
    const auto b = to_bytes(img);
    bytes.insert(bytes.end(), b.begin(), b.end());
  }

  Image image(std::size_t i) const { return from_bytes(height, width, bytes.data() + i * stride()); }

  /// NHWC batch with values in [0, 1].
  template <class T>
  Tensor<T> batch(const std::vector<int>& rows) const {
    Tensor<T> out({static_cast<int>(rows.size()), height, width, 3});
    T* dst = out.data();
    for (int r : rows) {
      const std::uint8_t* src = bytes.data() + std::size_t(r) * stride();
      for (std::size_t k = 0; k < stride(); ++k) *dst++ = static_cast<T>(src[k] / 255.0);
    }
    return out;
  }
};

inline ImageBank load_bank(const std::filesystem::path& dir, const std::vector<std::string>& rel_paths) {
  ImageBank bank;
  bank.bytes.reserve(rel_paths.size() * 64 * 64 * 3);
  for (const auto& p : rel_paths) bank.append(dir / p);
  return bank;
}

}  // namespace xdr::procgen
