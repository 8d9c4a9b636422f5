#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "xdr/nn/extractors.hpp"
#include "xdr/nn/imitator.hpp"
#include "xdr/nn/perception.hpp"

namespace xdr::train {

struct KernelSpec {
  enum class Rule { kFixed, kMedian };
  Rule rule = Rule::kMedian;
  std::vector<double> bandwidths;  // sigma values for kFixed
  bool multi_scale = false;        // kMedian: {sigma/2, sigma, 2 sigma}

  static KernelSpec fixed(std::vector<double> sigmas) { return {Rule::kFixed, std::move(sigmas), false}; }
  static KernelSpec median(bool multi = false) { return {Rule::kMedian, {}, multi}; }

  void validate() const {
    if (rule == Rule::kFixed) {
      if (bandwidths.empty()) throw ValidationError("kernel: fixed rule needs at least one bandwidth");
      for (double s : bandwidths)
        if (!(std::isfinite(s) && s > 0)) throw ValidationError("kernel: bandwidths must be finite and positive");
    }
  }
};

/// Median of the pooled pairwise squared distances over X u Y (distinct pairs).
template <class T>
double median_sq_distance(const Tensor<T>& x, const Tensor<T>& y) {
  const int d = x.dim(1);
  std::vector<const T*> rows;
  for (int i = 0; i < x.dim(0); ++i) rows.push_back(x.data() + std::size_t(i) * d);
  for (int i = 0; i < y.dim(0); ++i) rows.push_back(y.data() + std::size_t(i) * d);
  std::vector<double> dist;
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      double s = 0;
      for (int j = 0; j < d; ++j) {
        const double diff = double(rows[a][j]) - double(rows[b][j]);
        s += diff * diff;
      }
      dist.push_back(s);
    }
  if (dist.empty()) return 1.0;
  std::sort(dist.begin(), dist.end());
  const std::size_t m = dist.size();
  return m % 2 ? dist[m / 2] : 0.5 * (dist[m / 2 - 1] + dist[m / 2]);
}

template <class T>
std::vector<double> resolve_bandwidths(const KernelSpec& k, const Tensor<T>& x, const Tensor<T>& y) {
  k.validate();
  if (k.rule == KernelSpec::Rule::kFixed) return k.bandwidths;
  // sigma^2 = median / 2; a degenerate batch falls back to sigma = 1
  const double med = median_sq_distance(x, y);
  const double sigma = med > 0 ? std::sqrt(med / 2) : 1.0;
  if (k.multi_scale) return {sigma / 2, sigma, 2 * sigma};
  return {sigma};
}

template <class T>
Var<T> mean_kernel(Var<T> a, Var<T> b, double sigma) {
  return ops::mean(ops::exp(ops::scale(ops::pairwise_sq_dist(a, b), static_cast<T>(-1.0 / (2 * sigma * sigma)))));
}

/// Biased (V-statistic) squared MMD with Gaussian kernels, averaged over the
/// bandwidths. Bandwidths are constants of the backward pass.
template <class T>
Var<T> mmd_sq(Var<T> x, Var<T> y, const KernelSpec& kernel) {
  Graph<T>& g = *x.graph;
  if (x.value().rank() != 2 || y.value().rank() != 2 || x.dim(1) != y.dim(1))
    g.fail("mmd_sq", "sample sets must be [n, d] and [m, d], got " + to_string(x.shape()) + " and " +
                         to_string(y.shape()));
  const auto sigmas = resolve_bandwidths(kernel, x.value(), y.value());
  Var<T> total;
  for (double s : sigmas) {
    const Var<T> within = ops::add(mean_kernel(x, x, s), mean_kernel(y, y, s));
    // both cross orders, so the estimate is exactly symmetric in (X, Y)
    const Var<T> cross = ops::add(mean_kernel(x, y, s), mean_kernel(y, x, s));
    const Var<T> term = ops::sub(within, cross);
    total = total.graph ? ops::add(total, term) : term;
  }
  // the V-statistic is a squared RKHS norm; relu only removes rounding below zero
  return ops::relu(ops::scale(total, static_cast<T>(1.0 / sigmas.size())));
}

template <class T>
Var<T> loss_domain(Var<T> f_s, Var<T> f_t, Var<T> p_s, Var<T> p_t, const KernelSpec& kernel) {
  return ops::add(mmd_sq(f_s, f_t, kernel), mmd_sq(p_s, p_t, kernel));
}

/// InfoNCE over explicit positives and K negatives per query:
/// mean_i -log softmax([q.p+, q.p-_1, ..., q.p-_K] / tau)[0].
template <class T>
Var<T> loss_contrastive(Var<T> queries, Var<T> positives, const std::vector<Var<T>>& negatives, double tau,
                        bool normalize = false) {
  Graph<T>& g = *queries.graph;
  if (negatives.empty()) g.fail("loss_contrastive", "need at least one negative (K >= 1)");
  if (!(tau > 0)) g.fail("loss_contrastive", "temperature must be positive");
  const int n = queries.dim(0);
  auto similarity = [&](Var<T> v) {
    if (v.shape() != queries.shape()) g.fail("loss_contrastive", "operand shape " + to_string(v.shape()));
    return ops::reshape(normalize ? ops::cosine_similarity(queries, v) : ops::row_dot(queries, v), Shape{n, 1});
  };
  std::vector<Var<T>> cols{similarity(positives)};
  for (const auto& neg : negatives) cols.push_back(similarity(neg));
  const Var<T> logits = ops::scale(ops::concat_last(cols), static_cast<T>(1.0 / tau));
  return ops::softmax_cross_entropy(logits, std::vector<int>(n, 0));
}

/// Source sub-batch rows ordered [id0 v0, id0 v1, id1 v0, id1 v1, ...]. Each
/// row is a query; its sibling view is the positive and the same-index view
/// of every other identity is a negative.
struct ContrastivePlan {
  std::vector<int> positive;
  std::vector<std::vector<int>> negatives;  // [K][rows]
};

inline ContrastivePlan plan_contrastive(int identities) {
  if (identities < 2) throw ValidationError("contrastive batch needs at least 2 identities (K >= 1)");
  ContrastivePlan plan;
  const int rows = 2 * identities;
  plan.negatives.assign(identities - 1, std::vector<int>(rows));
  for (int r = 0; r < rows; ++r) {
    const int id = r / 2, view = r % 2;
    plan.positive.push_back(2 * id + (1 - view));
    int k = 0;
    for (int other = 0; other < identities; ++other)
      if (other != id) plan.negatives[k++][r] = 2 * other + (1 - view);
  }
  return plan;
}

template <class T>
Var<T> loss_contrastive_batch(Var<T> p_s, int identities, double tau, bool normalize = false) {
  if (p_s.value().rank() != 2 || p_s.dim(0) != 2 * identities)
    p_s.graph->fail("loss_contrastive", "source batch must hold 2 views of " + std::to_string(identities) +
                                            " identities, got " + to_string(p_s.shape()));
  const ContrastivePlan plan = plan_contrastive(identities);
  std::vector<Var<T>> negs;
  for (const auto& idx : plan.negatives) negs.push_back(ops::gather_rows(p_s, idx));
  return loss_contrastive(p_s, ops::gather_rows(p_s, plan.positive), negs, tau, normalize);
}

/// Codebook + alpha * commitment, summed over both quantizer levels.
template <class T>
Var<T> loss_differ(Var<T> codebook_loss, Var<T> commitment_loss, double alpha = 0.25) {
  return ops::add(codebook_loss, ops::scale(commitment_loss, static_cast<T>(alpha)));
}

template <class T>
void require_frozen(bool frozen, const char* what) {
  if (!frozen) throw FrozenError(std::string(what) + " must be frozen before it is used inside a loss");
}

/// Mean squared pixel error between G(p_hat) and the input images.
template <class T>
Var<T> loss_param(nn::Imitator<T>& imitator, Var<T> p_hat, Var<T> images) {
  require_frozen<T>(imitator.frozen(), "imitator");
  return ops::mse(imitator(*p_hat.graph, p_hat), images);
}

/// mean(1 - cos) over rows of two embedding batches.
template <class T>
Var<T> identity_distance(Var<T> a, Var<T> b) {
  return ops::add_scalar(ops::scale(ops::mean(ops::cosine_similarity(a, b)), T(-1)), T(1));
}

template <class T>
struct Consistency {
  Var<T> l3d, lid;
  Var<T> rendered;
};

/// l3d: mean over the batch of the squared distance between geometry
/// descriptors of I and G(p_hat); lid: mean(1 - cos) of identity embeddings.
template <class T>
Consistency<T> loss_consistency(Var<T> images, Var<T> rendered, nn::IdEmbedNet<T>& idnet,
                                const nn::GeometryMaps<T>& maps) {
  require_frozen<T>(idnet.frozen(), "identity extractor");
  Graph<T>& g = *images.graph;
  const int n = images.dim(0);
  Consistency<T> c;
  c.rendered = rendered;
  const Var<T> d = ops::sub(nn::geometry_embed(images, maps), nn::geometry_embed(rendered, maps));
  c.l3d = ops::scale(ops::sum(ops::square(d)), static_cast<T>(1.0 / n));
  c.lid = identity_distance(idnet.embed(g, images), idnet.embed(g, rendered));
  return c;
}

struct LossWeights {
  double lambda1 = 1.0;   // restored
  double lambda2 = 0.01;  // domain
  double lambda3 = 0.02;  // contrastive
  double lambda4 = 0.02;  // consistency
  double alpha = 0.25;    // commitment weight inside differ
  double beta = 0.25;     // differ weight inside restored
};

struct LossReport {
  double restored = 0, param = 0, differ = 0, domain = 0, contrastive = 0, consistency_3d = 0, consistency_id = 0,
         total = 0;
  LossWeights weights;

  double weighted_sum() const {
    return weights.lambda1 * restored + weights.lambda2 * domain + weights.lambda3 * contrastive +
           weights.lambda4 * (consistency_3d + consistency_id);
  }
};

/// Inputs of one stage-2 step. Source rows are ordered as in plan_contrastive.
template <class T>
struct StepBatch {
  Tensor<T> target;  // [Bt, S, S, 3]
  Tensor<T> source;  // [2 * identities, S, S, 3]
  int identities = 0;
};

template <class T>
struct Objective {
  Var<T> total;
  LossReport report;
};

/// Weighted training objective for one batch. A term with zero weight is still reported
/// but evaluated on detached inputs, so it costs no backward work.
template <class T>
Objective<T> full_objective(Graph<T>& g, const StepBatch<T>& batch, nn::Perception<T>& net, nn::Imitator<T>& imitator,
                            nn::IdEmbedNet<T>& idnet, const nn::GeometryMaps<T>& maps, const LossWeights& w,
                            const KernelSpec& kernel, double tau) {
  if (batch.source.rank() != 4 || batch.source.dim(0) != 2 * batch.identities)
    throw ValidationError("source sub-batch must be 2 views x " + std::to_string(batch.identities) + " identities");
  if (batch.target.rank() != 4 || batch.target.dim(0) < 1) throw ValidationError("target sub-batch is empty");
  for (double l : {w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.alpha, w.beta})
    if (!(l >= 0 && std::isfinite(l))) throw ValidationError("loss weights must be finite and non-negative");

  using namespace ops;
  const Var<T> it = g.input(batch.target, "target_images");
  const Var<T> is = g.input(batch.source, "source_images");
  auto out_t = net(g, it);
  auto out_s = net(g, is);
  auto gate = [](Var<T> v, double weight) { return weight > 0 ? v : stop_gradient(v); };

  const Var<T> param = loss_param(imitator, out_t.params, it);
  const Var<T> differ = loss_differ(add(out_t.codebook_loss, out_s.codebook_loss),
                                    add(out_t.commitment_loss, out_s.commitment_loss), w.alpha);
  const Var<T> restored = add(param, scale(differ, static_cast<T>(w.beta)));
  const Var<T> domain = loss_domain(gate(out_s.features, w.lambda2), gate(out_t.features, w.lambda2),
                                    gate(out_s.params, w.lambda2), gate(out_t.params, w.lambda2), kernel);
  const Var<T> contrastive = loss_contrastive_batch(gate(out_s.params, w.lambda3), batch.identities, tau);
  const Var<T> p_s = gate(out_s.params, w.lambda4);
  const auto cons = loss_consistency(is, imitator(g, p_s), idnet, maps);

  Var<T> total = scale(restored, static_cast<T>(w.lambda1));
  total = add(total, scale(domain, static_cast<T>(w.lambda2)));
  total = add(total, scale(contrastive, static_cast<T>(w.lambda3)));
  total = add(total, scale(add(cons.l3d, cons.lid), static_cast<T>(w.lambda4)));

  Objective<T> o{total, {}};
  LossReport& r = o.report;
  r.weights = w;
  r.param = param.value().item();
  r.differ = differ.value().item();
  r.restored = restored.value().item();
  r.domain = domain.value().item();
  r.contrastive = contrastive.value().item();
  r.consistency_3d = cons.l3d.value().item();
  r.consistency_id = cons.lid.value().item();
  // logged in double; the float graph total differs only by rounding
  r.total = r.weighted_sum();
  return o;
}

}  // namespace xdr::train
