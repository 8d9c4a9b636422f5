#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xdr/procgen/corpus.hpp"

namespace xdr::train {

/// Images of one manifest split plus their row metadata.
struct TargetSet {
  procgen::ImageBank images;
  Tensor<float> params;  // [N, P]
};

struct SourceSet {
  procgen::ImageBank images;
  std::vector<int> identity, view;
};

inline TargetSet load_target(const std::filesystem::path& corpus, const procgen::Manifest& m, const std::string& split) {
  TargetSet s;
  std::vector<std::string> paths;
  const auto idx = m.target_indices(split);
  if (idx.empty()) throw ValidationError("target split '" + split + "' is empty");
  const int p = m.config.param_dim;
  s.params = Tensor<float>({static_cast<int>(idx.size()), p});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& e = m.target[idx[r]];
    paths.push_back(e.path);
    if (static_cast<int>(e.params.size()) != p) throw ValidationError("manifest entry " + e.path + " has wrong P");
    for (int k = 0; k < p; ++k) s.params[r * p + k] = e.params[k];
  }
  s.images = procgen::load_bank(corpus, paths);
  return s;
}

inline SourceSet load_source(const std::filesystem::path& corpus, const procgen::Manifest& m, const std::string& split) {
  SourceSet s;
  std::vector<std::string> paths;
  for (int i : m.source_indices(split)) {
    paths.push_back(m.source[i].path);
    s.identity.push_back(m.source[i].identity);
    s.view.push_back(m.source[i].view);
  }
  if (paths.empty()) throw ValidationError("source split '" + split + "' is empty");
  s.images = procgen::load_bank(corpus, paths);
  return s;
}

inline Tensor<float> rows_of(const Tensor<float>& t, const std::vector<int>& rows) {
  const int w = t.dim(1);
  Tensor<float> out({static_cast<int>(rows.size()), w});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(t.data() + std::size_t(rows[r]) * w, w, out.data() + r * w);
  return out;
}

inline std::vector<int> iota_rows(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<int>(i);
  return v;
}

/// Writes a CSV through write_atomic; rows are pre-formatted lines.
inline void write_csv(const std::filesystem::path& path, const std::string& header, const std::vector<std::string>& rows) {
  std::string out = header + "\n";
  for (const auto& r : rows) out += r + "\n";
  write_atomic(path, out);
}

/// Wall time recorded by an earlier session of a resumable run (0 if none).
inline double read_seconds(const std::filesystem::path& timing) {
  return std::filesystem::exists(timing) ? read_json(timing).value("seconds", 0.0) : 0.0;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace xdr::train
