#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "support/finite_diff.hpp"
#include "xdr/core/adam.hpp"
#include "xdr/core/ops.hpp"
#include "xdr/util/rng.hpp"

namespace xdr {
namespace {

using testing::gradcheck_inputs;
using testing::random_tensor;

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), ShapeError);
  Tensor<float> t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Evaluate, ReluExample) {
  Graph<float> g;
  auto y = ops::relu(g.input(Tensor<float>::from({2}, {-1.f, 2.f})));
  EXPECT_EQ(y.value(), Tensor<float>::from({2}, {0.f, 2.f}));
}

TEST(Evaluate, IdentityConvKernelIsIdentity) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 4, 4, 3}, rng).cast<float>();
  Tensor<float> w(Shape{1, 1, 3, 3});
  for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.f;
  Graph<float> g;
  auto y = ops::conv2d(g.input(x), g.input(w), g.input(Tensor<float>(Shape{3})), 1);
  EXPECT_EQ(y.value(), x);
}

TEST(Evaluate, ShapeMismatchNamesNode) {
  Graph<float> g;
  auto a = g.input(Tensor<float>(Shape{2, 3}));
  auto b = g.input(Tensor<float>(Shape{3, 2}));
  try {
    ops::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("'add' at node 2"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, NonFiniteIntermediateRejected) {
  Graph<float> g;
  auto x = g.input(Tensor<float>::from({1}, {100.f}));
  EXPECT_THROW(ops::exp(x), NonFiniteError);
  auto zero = g.input(Tensor<float>::from({1}, {0.f}));
  EXPECT_THROW(ops::div(zero, zero), NonFiniteError);
}

TEST(Evaluate, Deterministic) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 8, 8, 4}, rng).cast<float>();
  auto w = random_tensor({3, 3, 4, 6}, rng).cast<float>();
  auto b = random_tensor({6}, rng).cast<float>();
  auto run = [&] {
    Graph<float> g;
    return ops::tanh(ops::conv2d(g.input(x), g.input(w), g.input(b), 2)).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Differentiate, SumGivesOnes) {
  Graph<double> g;
  auto x = g.variable(Tensor<double>(Shape{2, 3}, 4.0));
  g.backward(ops::sum(x));
  EXPECT_EQ(g.grad(x), Tensor<double>(Shape{2, 3}, 1.0));
}

TEST(Differentiate, HalfSquaredNorm) {
  Graph<double> g;
  auto x = g.variable(Tensor<double>::from({2}, {3, 4}));
  g.backward(ops::scale(ops::sum(ops::square(x)), 0.5));
  EXPECT_EQ(g.grad(x), Tensor<double>::from({2}, {3, 4}));
}

TEST(Differentiate, NonScalarLossRejected) {
  Graph<double> g;
  auto x = g.variable(Tensor<double>(Shape{2}));
  EXPECT_THROW(g.backward(ops::relu(x)), ShapeError);
}

TEST(Differentiate, UnreachableParameterGetsZeroGradient) {
  Parameter<double> used("used", Tensor<double>(Shape{2}, 1.0));
  Parameter<double> unused("unused", Tensor<double>(Shape{3}, 1.0));
  unused.grad = Tensor<double>();
  Graph<double> g;
  g.param(unused);
  g.backward(ops::sum(g.param(used)));
  EXPECT_EQ(unused.grad, Tensor<double>(Shape{3}));
  EXPECT_EQ(used.grad, Tensor<double>(Shape{2}, 1.0));
}

TEST(Differentiate, SharedParameterAccumulatesOnce) {
  Parameter<double> p("p", Tensor<double>::from({1}, {2.0}));
  Graph<double> g;
  auto a = g.param(p);
  auto b = g.param(p);
  EXPECT_EQ(a.id, b.id);
  g.backward(ops::mul(a, b));
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
}

TEST(StopGradient, ForwardIdentity) {
  Graph<double> g;
  auto x = g.variable(Tensor<double>::from({2}, {1, 2}));
  auto y = ops::stop_gradient(x);
  EXPECT_EQ(y.value(), Tensor<double>::from({2}, {1, 2}));
  EXPECT_FALSE(y.requires_grad());
}

TEST(StopGradient, OneFactorDetached) {
  Graph<double> g;
  auto x = g.variable(Tensor<double>::from({1}, {2}));
  g.backward(ops::sum(ops::mul(ops::stop_gradient(x), x)));
  EXPECT_EQ(g.grad(x), Tensor<double>::from({1}, {2}));
}

TEST(StopGradient, FullyDetachedIsExactlyZero) {
  Graph<double> g;
  auto x = g.variable(Tensor<double>::from({3}, {1, -2, 5}));
  auto y = ops::stop_gradient(x);
  // mix the detached path with a live one; the sg path must add exactly zero
  g.backward(ops::add(ops::sum(ops::square(y)), ops::scale(ops::sum(x), 0.0)));
  EXPECT_EQ(g.grad(x), Tensor<double>(Shape{3}));
}

// ------------------------------------------------------------ gradient suite

using Fn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;
using FnF = std::function<Var<float>(Graph<float>&, const std::vector<Var<float>>&)>;

struct PrimitiveCase {
  std::string name;
  std::vector<Shape> shapes;
  double margin;  // keep inputs away from zero (kinks, division)
};

// Reduces any op output to a scalar with a fixed random projection so every
// output coordinate contributes to the checked gradient.
template <class T>
Var<T> project(Var<T> y) {
  Tensor<T> w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(std::sin(0.7 * double(i) + 0.3));
  return ops::sum(ops::mul(y, y.graph->input(w)));
}

template <class T>
Var<T> apply_case(const std::string& name, Graph<T>& g, const std::vector<Var<T>>& v) {
  (void)g;
  if (name == "conv2d_s1") return project(ops::conv2d(v[0], v[1], v[2], 1));
  if (name == "conv2d_s2") return project(ops::conv2d(v[0], v[1], v[2], 2));
  if (name == "conv_transpose2d_s2") return project(ops::conv_transpose2d(v[0], v[1], v[2], 2));
  if (name == "linear") return project(ops::linear(v[0], v[1], v[2]));
  if (name == "matmul") return project(ops::matmul(v[0], v[1]));
  if (name == "relu") return project(ops::relu(v[0]));
  if (name == "tanh") return project(ops::tanh(v[0]));
  if (name == "sigmoid") return project(ops::sigmoid(v[0]));
  if (name == "exp") return project(ops::exp(v[0]));
  if (name == "add") return project(ops::add(v[0], v[1]));
  if (name == "sub") return project(ops::sub(v[0], v[1]));
  if (name == "mul") return project(ops::mul(v[0], v[1]));
  if (name == "div") return project(ops::div(v[0], v[1]));
  if (name == "scale") return project(ops::scale(v[0], T(-1.7)));
  if (name == "add_scalar") return project(ops::add_scalar(v[0], T(0.4)));
  if (name == "concat_last") return project(ops::concat_last<T>({v[0], v[1]}));
  if (name == "slice_last") return project(ops::slice_last(v[0], 1, 3));
  if (name == "flatten") return project(ops::flatten(v[0]));
  if (name == "mean") return ops::scale(ops::mean(v[0]), T(3));
  if (name == "sum") return ops::scale(ops::sum(v[0]), T(0.5));
  if (name == "sum_axis") return project(ops::sum_axis(v[0], 1));
  if (name == "pairwise_sq_dist") return project(ops::pairwise_sq_dist(v[0], v[1]));
  if (name == "cosine_similarity") return project(ops::cosine_similarity(v[0], v[1]));
  if (name == "softmax_cross_entropy") return ops::softmax_cross_entropy(v[0], {2, 0, 4});
  if (name == "upsample2x") return project(ops::upsample2x(v[0]));
  if (name == "gather_rows") return project(ops::gather_rows(v[0], {3, 0, 3, 1}));
  throw std::logic_error("unknown case " + name);
}

const std::vector<PrimitiveCase>& primitive_cases() {
  static const std::vector<PrimitiveCase> cases = {
      {"conv2d_s1", {{2, 6, 6, 3}, {3, 3, 3, 4}, {4}}, 0},
      {"conv2d_s2", {{2, 8, 8, 3}, {3, 3, 3, 5}, {5}}, 0},
      {"conv_transpose2d_s2", {{2, 4, 4, 3}, {3, 4, 4, 2}, {2}}, 0},
      {"linear", {{3, 5}, {5, 4}, {4}}, 0},
      {"matmul", {{3, 5}, {5, 2}}, 0},
      {"relu", {{4, 5}}, 0.05},
      {"tanh", {{4, 5}}, 0},
      {"sigmoid", {{4, 5}}, 0},
      {"exp", {{4, 5}}, 0},
      {"add", {{3, 4}, {3, 4}}, 0},
      {"sub", {{3, 4}, {3, 4}}, 0},
      {"mul", {{3, 4}, {3, 4}}, 0},
      {"div", {{3, 4}, {3, 4}}, 0.3},
      {"scale", {{3, 4}}, 0},
      {"add_scalar", {{3, 4}}, 0},
      {"concat_last", {{2, 3, 2}, {2, 3, 4}}, 0},
      {"slice_last", {{3, 6}}, 0},
      {"flatten", {{2, 3, 2, 2}}, 0},
      {"mean", {{3, 7}}, 0},
      {"sum", {{3, 7}}, 0},
      {"sum_axis", {{2, 5, 3}}, 0},
      {"pairwise_sq_dist", {{4, 3}, {5, 3}}, 0},
      {"cosine_similarity", {{4, 6}, {4, 6}}, 0},
      {"softmax_cross_entropy", {{3, 5}}, 0},
      {"upsample2x", {{2, 3, 3, 2}}, 0},
      {"gather_rows", {{5, 3}}, 0},
  };
  return cases;
}

class PrimitiveGradient : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences64) {
  const auto& c = GetParam();
  std::mt19937_64 rng(std::hash<std::string>{}(c.name));
  std::vector<Tensor<double>> inputs;
  for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, -1, 1, c.margin));
  const double err = gradcheck_inputs<double>(
      [&](auto& g, const auto& v) { return apply_case(c.name, g, v); }, inputs, 1e-3);
  EXPECT_LT(err, 1e-5) << c.name;
}

TEST_P(PrimitiveGradient, MatchesFiniteDifferences32) {
  const auto& c = GetParam();
  std::mt19937_64 rng(std::hash<std::string>{}(c.name) + 1);
  std::vector<Tensor<double>> inputs;
  for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, -1, 1, c.margin));
  // float inputs are the rounded doubles; make the oracle see the same values
  for (auto& t : inputs) t = t.cast<float>().cast<double>();
  const double err = gradcheck_inputs<float>(
      [&](auto& g, const auto& v) { return apply_case(c.name, g, v); }, inputs, 1e-3);
  EXPECT_LT(err, 1e-3) << c.name;
}

// sg(x) * x must differentiate like c * x with c frozen at the current x.
TEST(StopGradient, MatchesFiniteDifferencesOfFrozenFactor) {
  std::mt19937_64 rng(17);
  const auto x0 = random_tensor({3, 4}, rng);
  Graph<double> g;
  auto x = g.variable(x0);
  g.backward(project(ops::mul(ops::stop_gradient(x), x)));
  const auto analytic = g.grad(x);
  Graph<double> h;
  auto y = h.variable(x0);
  h.backward(project(ops::mul(h.input(x0), y)));
  EXPECT_EQ(analytic, h.grad(y));
  const double err = gradcheck_inputs<double>(
      [&](auto& gg, const auto& v) { return project(ops::mul(gg.input(x0), v[0])); }, {x0}, 1e-3);
  EXPECT_LT(err, 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Catalogue, PrimitiveGradient, ::testing::ValuesIn(primitive_cases()),
                         [](const auto& info) { return info.param.name; });

// ---------------------------------------------------------------------- adam

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Parameter<float> p("p", Tensor<float>::from({3}, {1.f, -2.f, 0.5f}));
  const auto before = p.value;
  Adam<float> opt({&p});
  p.zero_grad();
  opt.step();
  EXPECT_EQ(p.value, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter<double> p("p", Tensor<double>::from({1}, {0.0}));
  Adam<double> opt({&p}, AdamOptions{.lr = 0.001});
  p.grad = Tensor<double>::from({1}, {1.0});
  opt.step();
  // m_hat = 1, v_hat = 1 at t = 1: update = lr / (1 + eps)
  EXPECT_NEAR(p.value[0], -0.001 / (1 + 1e-8), 1e-15);
  EXPECT_EQ(opt.state().t, 1u);
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(42);
    Parameter<float> p("p", Tensor<float>(Shape{16}));
    for (auto& v : p.value.values()) v = float(standard_normal(rng));
    Adam<float> opt({&p});
    for (int s = 0; s < 20; ++s) {
      Graph<float> g;
      auto x = g.param(p);
      p.zero_grad();
      g.backward(ops::sum(ops::tanh(ops::square(x))));
      opt.step();
    }
    return p.value;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, NonFiniteGradientRejectsStepAndKeepsState) {
  Parameter<float> p("p", Tensor<float>::from({2}, {1.f, 2.f}));
  Adam<float> opt({&p});
  p.grad = Tensor<float>::from({2}, {0.5f, 0.5f});
  opt.step();
  const auto value = p.value;
  const auto m = opt.state().m[0];
  p.grad = Tensor<float>::from({2}, {std::numeric_limits<float>::quiet_NaN(), 1.f});
  EXPECT_THROW(opt.step(), NonFiniteError);
  EXPECT_EQ(p.value, value);
  EXPECT_EQ(opt.state().m[0], m);
  EXPECT_EQ(opt.state().t, 1u);
}

TEST(Adam, FrozenParameterRefused) {
  Parameter<float> p("p", Tensor<float>::from({1}, {1.f}));
  Adam<float> opt({&p});
  p.zero_grad();
  p.frozen = true;
  EXPECT_THROW(opt.step(), FrozenError);
  EXPECT_EQ(p.value[0], 1.f);
}

TEST(Adam, UpdateSignInvariantToLossScale) {
  // scaling the loss by c > 0 scales m_hat and sqrt(v_hat) alike
  for (double c : {0.01, 1.0, 250.0}) {
    Parameter<double> p("p", Tensor<double>::from({4}, {0.3, -0.8, 1.5, -2.0}));
    const auto before = p.value;
    Adam<double> opt({&p}, AdamOptions{.eps = 1e-12});
    for (std::size_t i = 0; i < 4; ++i) p.grad = Tensor<double>::from({4}, {c * 2.0, -c * 0.5, c * 1e-2, -c * 3.0});
    opt.step();
    const double expected_sign[] = {-1, 1, -1, 1};
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(std::signbit(p.value[i] - before[i]), expected_sign[i] < 0) << "c=" << c << " i=" << i;
      EXPECT_NEAR(std::abs(p.value[i] - before[i]), 3e-4, 1e-9);
    }
  }
}

}  // namespace
}  // namespace xdr
