#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "xdr/eval/descriptor.hpp"
#include "xdr/util/rng.hpp"

namespace xdr::eval {

inline constexpr int kThresholds = 1001;

inline double threshold_at(int k) { return -1.0 + 2.0 * k / (kThresholds - 1); }

/// Same-identity decision: cosine >= threshold.
struct ThresholdFit {
  double threshold = 0;
  double accuracy = 0;
};

inline double accuracy_at(const std::vector<double>& scores, const std::vector<bool>& same, double t) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) ok += ((scores[i] >= t) == same[i]);
  return static_cast<double>(ok) / static_cast<double>(scores.size());
}

/// Sweeps the 1,001 thresholds over [-1, 1]; ties go to the lowest threshold.
inline ThresholdFit fit_threshold(const std::vector<double>& scores, const std::vector<bool>& same) {
  if (scores.empty() || scores.size() != same.size()) throw ValidationError("threshold fit needs a non-empty pair set");
  // sorted scores turn each threshold into a binary search
  std::vector<std::pair<double, bool>> s;
  for (std::size_t i = 0; i < scores.size(); ++i) s.emplace_back(scores[i], same[i]);
  std::sort(s.begin(), s.end());
  std::vector<std::size_t> pos_below(s.size() + 1, 0);  // positives among the first i sorted pairs
  for (std::size_t i = 0; i < s.size(); ++i) pos_below[i + 1] = pos_below[i] + s[i].second;
  const std::size_t n = s.size(), pos = pos_below[n];
  ThresholdFit best{threshold_at(0), -1};
  for (int k = 0; k < kThresholds; ++k) {
    const double t = threshold_at(k);
    const std::size_t below =
        std::lower_bound(s.begin(), s.end(), t, [](const auto& a, double v) { return a.first < v; }) - s.begin();
    const std::size_t correct = (below - pos_below[below]) + (pos - pos_below[below]);
    const double acc = static_cast<double>(correct) / static_cast<double>(n);
    if (acc > best.accuracy) best = {t, acc};
  }
  return best;
}

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) return 0;
  return a.dot(b) / (na * nb);
}

struct Pair {
  int a = 0, b = 0;  // descriptor rows
  bool same = false;
};

struct VerificationResult {
  double accuracy = 0;  // test pairs
  double threshold = 0;
  double fit_accuracy = 0;
};

inline std::vector<double> pair_scores(const Matrix& desc, const std::vector<Pair>& pairs) {
  std::vector<double> s;
  for (const auto& p : pairs) s.push_back(cosine(desc.row(p.a).transpose(), desc.row(p.b).transpose()));
  return s;
}

inline std::vector<bool> pair_labels(const std::vector<Pair>& pairs) {
  std::vector<bool> l;
  for (const auto& p : pairs) l.push_back(p.same);
  return l;
}

/// Threshold fitted on `fit` scores, accuracy reported on `test` scores.
inline VerificationResult verification_accuracy(const std::vector<double>& fit_scores, const std::vector<bool>& fit_same,
                                                const std::vector<double>& test_scores,
                                                const std::vector<bool>& test_same) {
  if (test_scores.empty() || test_scores.size() != test_same.size())
    throw ValidationError("verification needs a non-empty test pair set");
  const ThresholdFit f = fit_threshold(fit_scores, fit_same);
  return {accuracy_at(test_scores, test_same, f.threshold), f.threshold, f.accuracy};
}

/// Pipeline-transformed descriptors scored on a fit/test benchmark.
struct Benchmark {
  std::vector<Pair> fit, test;
};

inline VerificationResult verify(const Matrix& transformed, const Benchmark& b) {
  return verification_accuracy(pair_scores(transformed, b.fit), pair_labels(b.fit), pair_scores(transformed, b.test),
                               pair_labels(b.test));
}

/// Pairs over descriptor rows labelled by identity and view. Identities are
/// split in half (sorted order): the first half supplies threshold-fit
/// pairs, the second half test pairs, so the two sets share no identity.
/// Each half gets one positive pair (views 0 and 1) per identity and the
/// same number of negatives between seeded random distinct identities.
inline Benchmark build_benchmark(const std::vector<int>& identity, const std::vector<int>& view, std::uint64_t seed) {
  std::map<int, std::map<int, int>> rows;  // id -> view -> row
  for (std::size_t r = 0; r < identity.size(); ++r) rows[identity[r]][view[r]] = static_cast<int>(r);
  std::vector<int> ids;
  for (const auto& [id, views] : rows)
    if (views.count(0) && views.count(1)) ids.push_back(id);
  if (ids.size() < 4) throw ValidationError("verification benchmark needs at least 4 identities with two views");
  const std::size_t half = ids.size() / 2;
  const std::vector<int> fit_ids(ids.begin(), ids.begin() + half), test_ids(ids.begin() + half, ids.end());

  auto make = [&](const std::vector<int>& group, const char* tag) {
    std::vector<Pair> out;
    for (int id : group) out.push_back({rows[id][0], rows[id][1], true});
    Rng rng(derive_seed(seed, tag));
    std::set<std::pair<int, int>> used;
    const std::size_t want = group.size();
    const std::size_t possible = group.size() * (group.size() - 1) / 2;
    while (used.size() < std::min(want, possible)) {
      const int i = group[uniform_index(rng, group.size())];
      const int j = group[uniform_index(rng, group.size())];
      if (i == j || !used.insert({std::min(i, j), std::max(i, j)}).second) continue;
      out.push_back({rows[i][static_cast<int>(uniform_index(rng, 2))], rows[j][static_cast<int>(uniform_index(rng, 2))],
                     false});
    }
    return out;
  };
  return {make(fit_ids, "verify.fit"), make(test_ids, "verify.test")};
}

/// Mean test accuracy when pair labels are shuffled (threshold refit on the
/// shuffled fit labels each time).
inline double shuffled_chance(const Matrix& transformed, const Benchmark& b, std::uint64_t seed, int repeats = 20) {
  const auto fs = pair_scores(transformed, b.fit), ts = pair_scores(transformed, b.test);
  double total = 0;
  for (int k = 0; k < repeats; ++k) {
    Rng rng(derive_seed(seed, "chance", k));
    auto fl = pair_labels(b.fit), tl = pair_labels(b.test);
    shuffle(fl, rng);
    shuffle(tl, rng);
    total += verification_accuracy(fs, fl, ts, tl).accuracy;
  }
  return total / repeats;
}

}  // namespace xdr::eval
