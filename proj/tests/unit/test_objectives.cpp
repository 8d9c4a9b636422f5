#include <gtest/gtest.h>

#include <numeric>

#include "support/finite_diff.hpp"
#include "xdr/procgen/params.hpp"
#include "xdr/train/objectives.hpp"

using namespace xdr;
using namespace xdr::train;
namespace fd = xdr::testing;

namespace {

// Direct kernel-matrix MMD^2 for one bandwidth.
double mmd_oracle(const Tensor<double>& x, const Tensor<double>& y, double sigma) {
  const int n = x.dim(0), m = y.dim(0), d = x.dim(1);
  auto k = [&](const double* a, const double* b) {
    double s = 0;
    for (int j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return std::exp(-s / (2 * sigma * sigma));
  };
  double kxx = 0, kyy = 0, kxy = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) kxx += k(x.data() + i * d, x.data() + j * d);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) kyy += k(y.data() + i * d, y.data() + j * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) kxy += k(x.data() + i * d, y.data() + j * d);
  return kxx / (n * n) + kyy / (m * m) - 2 * kxy / (n * m);
}

double mmd_value(const Tensor<double>& x, const Tensor<double>& y, const KernelSpec& k) {
  Graph<double> g(GradMode::kDisabled);
  return mmd_sq(g.input(x), g.input(y), k).value().item();
}

Tensor<double> gaussian(int n, int d, double shift, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(shift, 1.0);
  Tensor<double> t(Shape{n, d});
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

// Explicit (K+1)-way softmax cross-entropy with the positive as class 0.
double contrastive_oracle(const std::vector<double>& sims, double tau) {
  double mx = -1e300;
  for (double s : sims) mx = std::max(mx, s / tau);
  double z = 0;
  for (double s : sims) z += std::exp(s / tau - mx);
  return -(sims[0] / tau - mx - std::log(z));
}

Tensor<double> param_rows(int n, std::uint64_t seed, double scale = 1.0) {
  Tensor<double> p(Shape{n, 32});
  for (int i = 0; i < n; ++i) {
    const auto v = procgen::sample_params(derive_seed(seed, "rows", i));
    for (int j = 0; j < 32; ++j) p[i * 32 + j] = scale * v[j];
  }
  return p;
}

struct SmallModels {
  nn::Perception<double> net{32, 16, 1};
  nn::Imitator<double> imitator{32, 16, 2};
  nn::IdEmbedNet<double> idnet{6, 16, 3};
  nn::GeometryMaps<double> maps{16, 16};
  SmallModels() {
    imitator.set_frozen(true);
    idnet.set_frozen(true);
  }
};

}  // namespace

// ---------------------------------------------------------------- MMD

TEST(Mmd, IdenticalSetsGiveZero) {
  std::mt19937_64 rng(1);
  const Tensor<double> x = gaussian(20, 4, 0, rng);
  EXPECT_NEAR(mmd_value(x, x, KernelSpec::median()), 0.0, 1e-7);
  EXPECT_NEAR(mmd_value(x, x, KernelSpec::fixed({0.5, 2})), 0.0, 1e-7);
}

TEST(Mmd, TwoPointClosedForm) {
  const double v = mmd_value(Tensor<double>::from({1, 1}, {0}), Tensor<double>::from({1, 1}, {1}), KernelSpec::fixed({1}));
  EXPECT_NEAR(v, 2 - 2 * std::exp(-0.5), 1e-6);
  EXPECT_NEAR(v, 0.786939, 1e-6);
}

TEST(Mmd, MatchesKernelMatrixOracle) {
  std::mt19937_64 rng(2);
  const Tensor<double> x = gaussian(17, 5, 0, rng), y = gaussian(11, 5, 0.7, rng);
  for (double s : {0.3, 1.0, 4.0}) EXPECT_NEAR(mmd_value(x, y, KernelSpec::fixed({s})), mmd_oracle(x, y, s), 1e-6);
  const double med = median_sq_distance(x, y);
  const double sigma = std::sqrt(med / 2);
  EXPECT_NEAR(mmd_value(x, y, KernelSpec::median()), mmd_oracle(x, y, sigma), 1e-6);
  const double multi = (mmd_oracle(x, y, sigma / 2) + mmd_oracle(x, y, sigma) + mmd_oracle(x, y, 2 * sigma)) / 3;
  EXPECT_NEAR(mmd_value(x, y, KernelSpec::median(true)), multi, 1e-6);
}

TEST(Mmd, MedianOfPooledDistances) {
  // points 0, 1, 3: distances 1, 9, 4 -> median 4
  EXPECT_EQ(median_sq_distance(Tensor<double>::from({2, 1}, {0, 1}), Tensor<double>::from({1, 1}, {3})), 4.0);
}

TEST(Mmd, SymmetricExactly) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor<double> x = gaussian(9, 3, 0, rng), y = gaussian(13, 3, 0.5, rng);
    EXPECT_EQ(mmd_value(x, y, KernelSpec::median()), mmd_value(y, x, KernelSpec::median()));
  }
}

TEST(Mmd, NonNegativeOnRandomInputs) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor<double> x = gaussian(1 + trial % 7, 2, 0, rng), y = gaussian(1 + trial % 5, 2, 0.01 * trial, rng);
    EXPECT_GE(mmd_value(x, y, KernelSpec::median(trial % 2)), 0.0);
  }
}

TEST(Mmd, PermutationInvariant) {
  std::mt19937_64 rng(5);
  const Tensor<double> x = gaussian(12, 3, 0, rng), y = gaussian(12, 3, 1, rng);
  Tensor<double> xp = x;
  std::vector<int> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 3; ++j) xp[i * 3 + j] = x[perm[i] * 3 + j];
  EXPECT_NEAR(mmd_value(x, y, KernelSpec::median()), mmd_value(xp, y, KernelSpec::median()), 1e-12);
}

TEST(Mmd, DetectsUnitMeanShift) {
  std::mt19937_64 rng(6);
  const Tensor<double> a = gaussian(256, 1, 0, rng), b = gaussian(256, 1, 0, rng), c = gaussian(256, 1, 1, rng);
  EXPECT_GT(mmd_value(a, c, KernelSpec::median()), 5 * mmd_value(a, b, KernelSpec::median()));
}

TEST(Mmd, RejectsDimensionMismatch) {
  Graph<double> g;
  EXPECT_THROW(mmd_sq(g.input(Tensor<double>(Shape{2, 3})), g.input(Tensor<double>(Shape{2, 4})), KernelSpec::median()),
               ShapeError);
  EXPECT_THROW(KernelSpec::fixed({}).validate(), ValidationError);
  EXPECT_THROW(KernelSpec::fixed({-1}).validate(), ValidationError);
}

TEST(Mmd, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto loss = [](auto&, auto& v) { return mmd_sq(v[0], v[1], KernelSpec::fixed({0.8, 2.0})); };
  EXPECT_LT(fd::gradcheck_inputs<double>(loss, {gaussian(6, 3, 0, rng), gaussian(5, 3, 1, rng)}), 1e-5);
  EXPECT_LT(fd::gradcheck_inputs<float>(loss, {gaussian(6, 3, 0, rng), gaussian(5, 3, 1, rng)}), 1e-3);
}

// ------------------------------------------------------------- domain

TEST(Domain, ZeroWhenBatchesCoincide) {
  std::mt19937_64 rng(8);
  const Tensor<double> f = gaussian(8, 16, 0, rng), p = gaussian(8, 4, 0, rng);
  Graph<double> g;
  EXPECT_NEAR(loss_domain(g.input(f), g.input(f), g.input(p), g.input(p), KernelSpec::median()).value().item(), 0.0, 1e-7);
}

TEST(Domain, EqualsSumOfOracles) {
  std::mt19937_64 rng(9);
  const Tensor<double> fs = gaussian(8, 16, 0, rng), ft = gaussian(9, 16, 0.3, rng);
  const Tensor<double> ps = gaussian(8, 4, 0, rng), pt = gaussian(9, 4, 0.6, rng);
  Graph<double> g;
  const double v = loss_domain(g.input(fs), g.input(ft), g.input(ps), g.input(pt), KernelSpec::fixed({1.5})).value().item();
  EXPECT_NEAR(v, mmd_oracle(fs, ft, 1.5) + mmd_oracle(ps, pt, 1.5), 1e-6);
}

TEST(Domain, DecreasesAsTargetMovesTowardSource) {
  std::mt19937_64 rng(10);
  const Tensor<double> ps = gaussian(32, 6, 0, rng), pt0 = gaussian(32, 6, 1.5, rng);
  std::vector<double> ms(6, 0), mt(6, 0);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 6; ++j) ms[j] += ps[i * 6 + j] / 32, mt[j] += pt0[i * 6 + j] / 32;
  double prev = 1e300;
  for (double t : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    Tensor<double> pt = pt0;
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 6; ++j) pt[i * 6 + j] += t * (ms[j] - mt[j]);
    Graph<double> g;
    const double v = loss_domain(g.input(ps), g.input(pt), g.input(ps), g.input(pt), KernelSpec::median()).value().item();
    EXPECT_LT(v, prev) << "t=" << t;
    prev = v;
  }
}

TEST(Domain, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto loss = [](auto&, auto& v) { return loss_domain(v[0], v[1], v[2], v[3], KernelSpec::fixed({1.0, 3.0})); };
  EXPECT_LT(fd::gradcheck_inputs<double>(
                loss, {gaussian(4, 8, 0, rng), gaussian(5, 8, 1, rng), gaussian(4, 3, 0, rng), gaussian(5, 3, 1, rng)}),
            1e-5);
}

// -------------------------------------------------------- contrastive

TEST(Contrastive, EqualSimilaritiesGiveLogTwo) {
  Graph<double> g;
  const auto q = g.input(Tensor<double>::from({1, 2}, {1, 0}));
  const auto pos = g.input(Tensor<double>::from({1, 2}, {0.5, 3}));
  const auto neg = g.input(Tensor<double>::from({1, 2}, {0.5, -2}));
  EXPECT_NEAR(loss_contrastive(q, pos, {neg}, 0.07).value().item(), std::log(2.0), 1e-7);
}

TEST(Contrastive, HandSoftmax) {
  Graph<double> g;
  const auto q = g.input(Tensor<double>::from({1, 2}, {1, 0}));
  const auto pos = g.input(Tensor<double>::from({1, 2}, {1, 0}));
  const auto neg = g.input(Tensor<double>::from({1, 2}, {0, 1}));
  EXPECT_NEAR(loss_contrastive(q, pos, {neg}, 1.0).value().item(), std::log(1 + std::exp(-1.0)), 1e-7);
  EXPECT_NEAR(loss_contrastive(q, pos, {neg}, 1.0).value().item(), 0.313262, 1e-6);
}

TEST(Contrastive, SymmetricCaseIsLogKPlusOne) {
  for (int k : {1, 3, 7, 15}) {
    Graph<double> g;
    const Tensor<double> v = Tensor<double>::from({2, 3}, {0.2, -1, 0.4, 1.5, 0.1, 0.3});
    std::vector<Var<double>> negs;
    for (int i = 0; i < k; ++i) negs.push_back(g.input(v));
    EXPECT_NEAR(loss_contrastive(g.input(v), g.input(v), negs, 0.07).value().item(), std::log(k + 1.0), 1e-7);
  }
}

TEST(Contrastive, MatchesEnumerationOracle) {
  std::mt19937_64 rng(12);
  const int ids = 8;
  const Tensor<double> p = fd::random_tensor({2 * ids, 32}, rng, -0.5, 0.5);
  Graph<double> g;
  const double v = loss_contrastive_batch(g.input(p), ids, 0.07).value().item();
  double expect = 0;
  auto dot = [&](int a, int b) {
    double s = 0;
    for (int j = 0; j < 32; ++j) s += p[a * 32 + j] * p[b * 32 + j];
    return s;
  };
  for (int r = 0; r < 2 * ids; ++r) {
    const int id = r / 2, view = r % 2;
    std::vector<double> sims{dot(r, 2 * id + 1 - view)};
    for (int o = 0; o < ids; ++o)
      if (o != id) sims.push_back(dot(r, 2 * o + 1 - view));
    expect += contrastive_oracle(sims, 0.07) / (2 * ids);
  }
  EXPECT_NEAR(v, expect, 1e-6);
  EXPECT_GE(v, 0.0);
}

TEST(Contrastive, PlanStructure) {
  const ContrastivePlan plan = plan_contrastive(4);
  EXPECT_EQ(plan.positive, (std::vector<int>{1, 0, 3, 2, 5, 4, 7, 6}));
  ASSERT_EQ(plan.negatives.size(), 3u);
  for (int r = 0; r < 8; ++r)
    for (const auto& neg : plan.negatives) {
      EXPECT_NE(neg[r] / 2, r / 2) << "negative shares the query identity";
      EXPECT_EQ(neg[r] % 2, plan.positive[r] % 2);
    }
  EXPECT_THROW(plan_contrastive(1), ValidationError);
}

TEST(Contrastive, RejectsNoNegatives) {
  Graph<double> g;
  const auto q = g.input(Tensor<double>(Shape{1, 2}));
  EXPECT_THROW(loss_contrastive(q, q, {}, 0.07), ShapeError);
}

TEST(Contrastive, NormalizedVariantUsesCosine) {
  Graph<double> g;
  const auto q = g.input(Tensor<double>::from({1, 2}, {3, 0}));
  const auto pos = g.input(Tensor<double>::from({1, 2}, {5, 0}));
  const auto neg = g.input(Tensor<double>::from({1, 2}, {0, 9}));
  EXPECT_NEAR(loss_contrastive(q, pos, {neg}, 1.0, true).value().item(), std::log(1 + std::exp(-1.0)), 1e-9);
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto loss = [](auto&, auto& v) { return loss_contrastive_batch(v[0], 4, 0.5); };
  EXPECT_LT(fd::gradcheck_inputs<double>(loss, {fd::random_tensor({8, 6}, rng)}), 1e-5);
  EXPECT_LT(fd::gradcheck_inputs<float>(loss, {fd::random_tensor({8, 6}, rng)}), 1e-3);
  auto cos_loss = [](auto&, auto& v) { return loss_contrastive(v[0], v[1], {v[2]}, 0.3, true); };
  EXPECT_LT(fd::gradcheck_inputs<double>(
                cos_loss, {fd::random_tensor({3, 4}, rng), fd::random_tensor({3, 4}, rng), fd::random_tensor({3, 4}, rng)},
                1e-5),
            1e-5);
}

// ------------------------------------------------- differ / restored

TEST(Differ, Arithmetic) {
  Graph<double> g;
  EXPECT_NEAR(loss_differ(g.input(Tensor<double>::scalar(0.8)), g.input(Tensor<double>::scalar(0.4))).value().item(),
              0.9, 1e-12);
  EXPECT_EQ(loss_differ(g.input(Tensor<double>::scalar(0)), g.input(Tensor<double>::scalar(0))).value().item(), 0.0);
}

TEST(Restored, ArithmeticAndRecomputation) {
  LossReport r;
  r.param = 1.0;
  r.differ = 0.4;
  EXPECT_NEAR(r.param + r.weights.beta * r.differ, 1.1, 1e-12);
  SmallModels m;
  std::mt19937_64 rng(14);
  StepBatch<double> b{fd::random_tensor({2, 16, 16, 3}, rng, 0, 1), fd::random_tensor({4, 16, 16, 3}, rng, 0, 1), 2};
  Graph<double> g;
  const auto o = full_objective(g, b, m.net, m.imitator, m.idnet, m.maps, LossWeights{}, KernelSpec::median(), 0.07);
  EXPECT_NEAR(o.report.restored, o.report.param + 0.25 * o.report.differ, 1e-7);
}

// -------------------------------------------------------------- param

TEST(LossParam, ZeroOnOwnRendering) {
  SmallModels m;
  Graph<double> g;
  const auto p = g.variable(param_rows(2, 1));
  const Tensor<double> img = m.imitator(g, g.input(param_rows(2, 1))).value();
  EXPECT_EQ(loss_param(m.imitator, p, g.input(img)).value().item(), 0.0);
}

TEST(LossParam, BlackOutputGivesMeanSquare) {
  SmallModels m;
  // saturate the output sigmoid towards 0
  for (auto* q : m.imitator.parameters())
    if (q->name == "imitator.out.bias") q->value.fill(-200.0);
  Graph<double> g;
  const auto p = g.variable(param_rows(1, 3));
  const Tensor<double> gray(Shape{1, 16, 16, 3}, 0.6);
  EXPECT_NEAR(loss_param(m.imitator, p, g.input(gray)).value().item(), 0.36, 1e-12);
}

TEST(LossParam, ImitatorWeightsGetNoGradient) {
  SmallModels m;
  for (auto* q : m.imitator.parameters()) q->zero_grad();
  std::mt19937_64 rng(15);
  Graph<double> g;
  const auto p = g.variable(param_rows(2, 4));
  g.backward(loss_param(m.imitator, p, g.input(fd::random_tensor({2, 16, 16, 3}, rng, 0, 1))));
  for (auto* q : m.imitator.parameters())
    for (double v : q->grad.values()) ASSERT_EQ(v, 0.0) << q->name;
  const Tensor<double> gp = g.grad(p);
  double n = 0;
  for (double v : gp.values()) n += std::abs(v);
  EXPECT_GT(n, 0);
}

TEST(LossParam, RejectsUnfrozenImitator) {
  SmallModels m;
  m.imitator.set_frozen(false);
  Graph<double> g;
  EXPECT_THROW(loss_param(m.imitator, g.input(param_rows(1, 1)), g.input(Tensor<double>(Shape{1, 16, 16, 3}))), FrozenError);
}

TEST(LossParam, GradientMatchesFiniteDifferences) {
  SmallModels m;
  std::mt19937_64 rng(16);
  const Tensor<double> img = fd::random_tensor({2, 16, 16, 3}, rng, 0, 1);
  auto loss = [&](auto& g, auto& v) { return loss_param(m.imitator, v[0], g.input(img)); };
  EXPECT_LT(fd::gradcheck_inputs<double>(loss, {param_rows(2, 5)}, 1e-6), 1e-5);
}

// -------------------------------------------------------- consistency

TEST(Consistency, SelfConsistencyIsZero) {
  SmallModels m;
  std::mt19937_64 rng(17);
  const Tensor<double> img = fd::random_tensor({3, 16, 16, 3}, rng, 0, 1);
  Graph<double> g;
  const auto c = loss_consistency(g.input(img), g.input(img), m.idnet, m.maps);
  EXPECT_EQ(c.l3d.value().item(), 0.0);
  EXPECT_NEAR(c.lid.value().item(), 0.0, 1e-12);
}

TEST(Consistency, OrthogonalEmbeddingsGiveOne) {
  Graph<double> g;
  const auto a = g.input(Tensor<double>::from({2, 3}, {1, 0, 0, 0, 2, 0}));
  const auto b = g.input(Tensor<double>::from({2, 3}, {0, 1, 0, 0, 0, 5}));
  EXPECT_NEAR(identity_distance(a, b).value().item(), 1.0, 1e-12);
}

TEST(Consistency, RejectsUnfrozenExtractor) {
  SmallModels m;
  m.idnet.set_frozen(false);
  Graph<double> g;
  const auto img = g.input(Tensor<double>(Shape{1, 16, 16, 3}, 0.5));
  EXPECT_THROW(loss_consistency(img, img, m.idnet, m.maps), FrozenError);
}

TEST(Consistency, GradientThroughWholeChain) {
  SmallModels m;
  std::mt19937_64 rng(18);
  const Tensor<double> img = fd::random_tensor({2, 16, 16, 3}, rng, 0, 1);
  auto loss = [&](auto& g, auto& v) {
    const auto c = loss_consistency(g.input(img), m.imitator(g, v[0]), m.idnet, m.maps);
    return ops::add(c.l3d, c.lid);
  };
  EXPECT_LT(fd::gradcheck_inputs<double>(loss, {param_rows(2, 6)}, 1e-6), 1e-5);
}

TEST(Consistency, ExtractorWeightsGetNoGradient) {
  SmallModels m;
  for (auto* q : m.idnet.parameters()) q->zero_grad();
  std::mt19937_64 rng(19);
  Graph<double> g;
  const auto p = g.variable(param_rows(2, 7));
  const auto c = loss_consistency(g.input(fd::random_tensor({2, 16, 16, 3}, rng, 0, 1)), m.imitator(g, p), m.idnet, m.maps);
  g.backward(ops::add(c.l3d, c.lid));
  for (auto* q : m.idnet.parameters())
    for (double v : q->grad.values()) ASSERT_EQ(v, 0.0) << q->name;
}

// --------------------------------------------------------- full objective

TEST(FullObjective, WeightedSumArithmetic) {
  LossReport r;
  r.restored = 1;
  r.domain = 0.5;
  r.contrastive = 0.7;
  r.consistency_3d = 0.2;
  EXPECT_NEAR(r.weighted_sum(), 1.023, 1e-12);
}

class FullObjectiveRun : public ::testing::Test {
 protected:
  StepBatch<double> batch() {
    std::mt19937_64 rng(20);
    return {fd::random_tensor({3, 16, 16, 3}, rng, 0, 1), fd::random_tensor({6, 16, 16, 3}, rng, 0, 1), 3};
  }
  std::vector<Tensor<double>> grads(const LossWeights& w, LossReport* report = nullptr) {
    for (auto* q : m.net.parameters()) q->zero_grad();
    Graph<double> g;
    const auto o = full_objective(g, batch(), m.net, m.imitator, m.idnet, m.maps, w, KernelSpec::median(), 0.07);
    g.backward(o.total);
    if (report) *report = o.report;
    std::vector<Tensor<double>> out;
    for (auto* q : m.net.parameters()) out.push_back(q->grad);
    return out;
  }
  SmallModels m;
};

TEST_F(FullObjectiveRun, TotalEqualsWeightedSum) {
  Graph<double> g;
  const auto o = full_objective(g, batch(), m.net, m.imitator, m.idnet, m.maps, LossWeights{}, KernelSpec::median(), 0.07);
  const LossReport& r = o.report;
  EXPECT_NEAR(o.total.value().item(), r.weighted_sum(), 1e-6);
  EXPECT_EQ(r.total, r.weighted_sum());
  for (double v : {r.param, r.differ, r.domain, r.contrastive, r.consistency_3d, r.consistency_id}) EXPECT_GE(v, 0.0);
}

TEST_F(FullObjectiveRun, ZeroAuxWeightsReduceToRestored) {
  LossWeights w;
  w.lambda2 = w.lambda3 = w.lambda4 = 0;
  LossReport r;
  grads(w, &r);
  EXPECT_NEAR(r.total, r.restored, 1e-12);
  EXPECT_GT(r.contrastive, 0.0);  // still reported
}

TEST_F(FullObjectiveRun, GradientIsLinearInComponents) {
  const LossWeights w;
  const auto total = grads(w);
  auto only = [&](int which) {
    LossWeights u;
    u.lambda1 = which == 1;
    u.lambda2 = which == 2;
    u.lambda3 = which == 3;
    u.lambda4 = which == 4;
    return grads(u);
  };
  const auto g1 = only(1), g2 = only(2), g3 = only(3), g4 = only(4);
  double worst = 0, scale = 1e-12;
  for (std::size_t k = 0; k < total.size(); ++k)
    for (std::size_t i = 0; i < total[k].size(); ++i) {
      const double expect = w.lambda1 * g1[k][i] + w.lambda2 * g2[k][i] + w.lambda3 * g3[k][i] + w.lambda4 * g4[k][i];
      worst = std::max(worst, std::abs(total[k][i] - expect));
      scale = std::max(scale, std::abs(expect));
    }
  EXPECT_LT(worst / scale, 1e-9);
}

TEST_F(FullObjectiveRun, FrozenNetworksUntouched) {
  for (auto* q : m.imitator.parameters()) q->zero_grad();
  for (auto* q : m.idnet.parameters()) q->zero_grad();
  grads(LossWeights{});
  for (auto* q : m.imitator.parameters())
    for (double v : q->grad.values()) ASSERT_EQ(v, 0.0);
  for (auto* q : m.idnet.parameters())
    for (double v : q->grad.values()) ASSERT_EQ(v, 0.0);
}

TEST_F(FullObjectiveRun, RejectsMalformedBatch) {
  auto b = batch();
  b.identities = 4;
  Graph<double> g;
  EXPECT_THROW(full_objective(g, b, m.net, m.imitator, m.idnet, m.maps, LossWeights{}, KernelSpec::median(), 0.07),
               ValidationError);
}

TEST_F(FullObjectiveRun, GradientMatchesFiniteDifferences) {
  // whole weighted objective w.r.t. regressor head weights (fixed-bandwidth kernel)
  const auto b = batch();
  auto f = [&](Graph<double>& g) {
    return full_objective(g, b, m.net, m.imitator, m.idnet, m.maps, LossWeights{}, KernelSpec::fixed({1.0, 4.0}), 0.5)
        .total;
  };
  auto params = m.net.parameters();
  std::vector<Parameter<double>*> head(params.end() - 2, params.end());
  EXPECT_LT(fd::gradcheck_params(f, head, 1e-6, 10), 1e-5);
}
