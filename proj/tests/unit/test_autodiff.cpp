#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "deeptrails/autodiff.hpp"
#include "deeptrails/rng.hpp"

using namespace deeptrails;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) x = scale * rng.normal();
  return t;
}

// Builds a scalar from the given inputs; the harness contracts non-scalar op
// outputs with a fixed random tensor so every output entry is exercised.
using Graph = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval(const Graph& g, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, false));
  return tape.value(g(tape, vars))[0];
}

/// Largest relative error |a - n| / max(1e-6, |a| + |n|) over all inputs.
double gradient_error(const Graph& g, const std::vector<Tensor>& inputs, const std::vector<bool>& differentiable = {}) {
  Tape tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    vars.push_back(tape.leaf(inputs[i], differentiable.empty() || differentiable[i]));
  }
  tape.backward(g(tape, vars));
  double worst = 0.0;
  const double h = 1e-5;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!differentiable.empty() && !differentiable[i]) continue;
    const Tensor analytic = tape.grad(vars[i]);
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      auto plus = inputs, minus = inputs;
      plus[i][k] += h;
      minus[i][k] -= h;
      const double numeric = (eval(g, plus) - eval(g, minus)) / (2 * h);
      const double denom = std::max(1e-6, std::abs(analytic[k]) + std::abs(numeric));
      worst = std::max(worst, std::abs(analytic[k] - numeric) / denom);
    }
  }
  return worst;
}

Var contract(Tape& tape, Var out, std::uint64_t seed) {
  Rng rng(seed);
  const auto shape = tape.value(out).shape();
  const Var w = tape.leaf(random_tensor(rng, shape), false);
  return ad::sum(tape, ad::mul(tape, out, w));
}

constexpr double kTol = 1e-4;
constexpr int kTrials = 20;

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

}  // namespace

// ---------------------------------------------------------------------------
// Forward values

TEST(Matmul, IdentityAndOracle) {
  Rng rng(1);
  Tape tape;
  const Tensor A = random_tensor(rng, {5, 4});
  const Tensor B = random_tensor(rng, {4, 3});
  Tensor I = Tensor::matrix(4, 4);
  for (std::size_t i = 0; i < 4; ++i) I.at(i, i) = 1.0;
  const Var a = tape.leaf(A);
  EXPECT_EQ(tape.value(ad::matmul(tape, a, tape.leaf(I))), A);
  const Tensor& C = tape.value(ad::matmul(tape, a, tape.leaf(B)));
  ASSERT_EQ(C.shape(), (std::vector<std::size_t>{5, 3}));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += A.at(i, k) * B.at(k, j);
      EXPECT_NEAR(C.at(i, j), s, 1e-12);
    }
}

TEST(Matmul, ShapeMismatch) {
  Tape tape;
  EXPECT_THROW(ad::matmul(tape, tape.leaf(Tensor::matrix(2, 3)), tape.leaf(Tensor::matrix(4, 2))), ShapeError);
  EXPECT_THROW(ad::add(tape, tape.leaf(Tensor::matrix(2, 3)), tape.leaf(Tensor::matrix(3, 2))), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(LayerNorm, Examples) {
  Tape tape;
  const Var ones = tape.leaf(Tensor({4}, 1.0));
  const Var zeros = tape.leaf(Tensor({4}, 0.0));
  const Tensor& c = tape.value(ad::layer_norm(tape, tape.leaf(Tensor({1, 4}, 3.7)), ones, zeros));
  for (double x : c.values()) EXPECT_EQ(x, 0.0);

  Rng rng(2);
  const Tensor X = random_tensor(rng, {3, 4});
  const Tensor& y = tape.value(ad::layer_norm(tape, tape.leaf(X), ones, zeros));
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 4; ++j) mean += X.at(i, j) / 4;
    for (std::size_t j = 0; j < 4; ++j) var += (X.at(i, j) - mean) * (X.at(i, j) - mean) / 4;
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at(i, j), (X.at(i, j) - mean) / std::sqrt(var + 1e-5), 1e-12);
  }

  const Tensor offset({4}, std::vector<double>{0.5, -1, 2, 3});
  const Tensor& z = tape.value(ad::layer_norm(tape, tape.leaf(X), tape.leaf(Tensor({4}, 0.0)), tape.leaf(offset)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(z.at(i, j), offset[j]);
}

TEST(CrossEntropy, UniformLogits) {
  const Tensor logits = Tensor::matrix(3, 102, 0.25);
  const std::vector<int> targets{0, 50, 101};
  const auto ce = ad::softmax_cross_entropy(logits, targets);
  for (double l : ce.per_position) EXPECT_NEAR(l, std::log(102.0), 1e-12);
  EXPECT_NEAR(ce.mean, 4.6250, 5e-5);
}

TEST(CrossEntropy, PeakedLogitsAndOracle) {
  Tensor peaked = Tensor::matrix(1, 10);
  peaked.at(0, 3) = 100.0;
  EXPECT_NEAR(ad::softmax_cross_entropy(peaked, std::vector<int>{3}).mean, 0.0, 1e-30);

  Rng rng(4);
  const Tensor L = random_tensor(rng, {6, 9}, 3.0);
  std::vector<int> t{0, 8, 3, 3, 5, 1};
  const auto ce = ad::softmax_cross_entropy(L, t);
  double mean = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 9; ++j) z += std::exp(L.at(i, j));
    const double naive = -std::log(std::exp(L.at(i, static_cast<std::size_t>(t[i]))) / z);
    EXPECT_NEAR(ce.per_position[i], naive, 1e-10);
    mean += naive / 6;
    const auto p = ad::softmax_row({L.data() + i * 9, 9});
    double s = 0.0;
    for (double x : p) s += x;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_NEAR(ce.mean, mean, 1e-10);
  t[2] = 9;
  EXPECT_THROW(ad::softmax_cross_entropy(L, t), DomainError);
}

TEST(CrossEntropy, IgnoredTargets) {
  Rng rng(5);
  const Tensor L = random_tensor(rng, {3, 4});
  const auto all = ad::softmax_cross_entropy(L, std::vector<int>{1, 2, 3});
  const auto some = ad::softmax_cross_entropy(L, std::vector<int>{1, ad::kIgnoreTarget, 3});
  EXPECT_EQ(some.per_position[1], 0.0);
  EXPECT_NEAR(some.mean, (all.per_position[0] + all.per_position[2]) / 2, 1e-15);
}

TEST(Tensor, NonFiniteIsAnError) {
  Tape tape;
  Tensor big({1}, std::vector<double>{1e308});
  EXPECT_THROW(ad::scale(tape, tape.leaf(big), 10.0), NumericError);
}

// ---------------------------------------------------------------------------
// Backward

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Rng rng(6);
  const Var x = tape.leaf(random_tensor(rng, {3, 5}), true);
  tape.backward(ad::sum(tape, x));
  const Tensor gx = tape.grad(x);
  for (double g : gx.values()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, UnusedParameterHasZeroGradient) {
  Tape tape;
  const Var x = tape.leaf(Tensor({2, 2}, 1.0), true);
  const Var unused = tape.leaf(Tensor({3}, 2.0), true);
  tape.backward(ad::sum(tape, ad::scale(tape, x, 3.0)));
  const Tensor gu = tape.grad(unused), gx = tape.grad(x);
  for (double g : gu.values()) EXPECT_EQ(g, 0.0);
  for (double g : gx.values()) EXPECT_EQ(g, 3.0);
}

TEST(Backward, NonScalarRootIsUsageError) {
  Tape tape;
  const Var x = tape.leaf(Tensor({2, 2}, 1.0), true);
  EXPECT_THROW(tape.backward(x), UsageError);
  Tape other;
  EXPECT_THROW(other.value(x), UsageError);
}

TEST(GradCheck, Matmul) {
  Rng rng(100);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto r = dim(rng, 1, 5), k = dim(rng, 1, 5), c = dim(rng, 1, 5);
    const Graph g = [&](Tape& t, const std::vector<Var>& v) { return contract(t, ad::matmul(t, v[0], v[1]), 7); };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {r, k}), random_tensor(rng, {k, c})}), kTol) << r << k << c;
  }
}

TEST(GradCheck, Linear) {
  Rng rng(101);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto r = dim(rng, 1, 6), k = dim(rng, 1, 5), c = dim(rng, 1, 5);
    const Graph g = [&](Tape& t, const std::vector<Var>& v) { return contract(t, ad::linear(t, v[0], v[1], v[2]), 8); };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {r, k}), random_tensor(rng, {k, c}), random_tensor(rng, {c})}), kTol);
  }
}

TEST(GradCheck, TransposeAddMulScale) {
  Rng rng(102);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto r = dim(rng, 1, 5), c = dim(rng, 1, 5);
    const double s = rng.normal();
    const Graph g = [&](Tape& t, const std::vector<Var>& v) {
      const Var sum = ad::add(t, v[0], v[1]);
      const Var prod = ad::mul(t, sum, v[1]);
      return contract(t, ad::transpose(t, ad::scale(t, prod, s)), 9);
    };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {r, c}), random_tensor(rng, {r, c})}), kTol);
  }
}

TEST(GradCheck, AddRowwiseAndSum) {
  Rng rng(103);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto r = dim(rng, 1, 6), c = dim(rng, 1, 6);
    const Graph g = [&](Tape& t, const std::vector<Var>& v) {
      const Var y = ad::add_rowwise(t, v[0], v[1]);
      return ad::sum(t, ad::mul(t, y, y));
    };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {r, c}), random_tensor(rng, {c})}), kTol);
  }
}

TEST(GradCheck, Gelu) {
  Rng rng(104);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto r = dim(rng, 1, 5), c = dim(rng, 1, 6);
    const Graph g = [&](Tape& t, const std::vector<Var>& v) { return contract(t, ad::gelu(t, v[0]), 10); };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {r, c}, 2.0)}), kTol);
  }
}

TEST(GradCheck, LayerNorm) {
  Rng rng(105);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto r = dim(rng, 1, 5), d = dim(rng, 2, 8);
    const Graph g = [&](Tape& t, const std::vector<Var>& v) { return contract(t, ad::layer_norm(t, v[0], v[1], v[2]), 11); };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {r, d}), random_tensor(rng, {d}), random_tensor(rng, {d})}), kTol);
  }
}

TEST(GradCheck, GatherRows) {
  Rng rng(106);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto v = dim(rng, 1, 6), d = dim(rng, 1, 4), n = dim(rng, 1, 8);
    std::vector<int> ids(n);
    for (int& id : ids) id = static_cast<int>(rng.below(v));
    const Graph g = [&](Tape& t, const std::vector<Var>& in) { return contract(t, ad::gather_rows(t, in[0], ids), 12); };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {v, d})}), kTol);
  }
}

TEST(GradCheck, ReplaceRows) {
  Rng rng(107);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto r = dim(rng, 2, 7), d = dim(rng, 1, 4);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < r; i += 2) rows.push_back(i);
    const Graph g = [&](Tape& t, const std::vector<Var>& in) { return contract(t, ad::replace_rows(t, in[0], rows, in[1]), 13); };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {r, d}), random_tensor(rng, {rows.size(), d})}), kTol);
  }
}

TEST(GradCheck, CausalAttention) {
  Rng rng(108);
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t heads = dim(rng, 1, 3), hd = dim(rng, 1, 3), batch = dim(rng, 1, 2), seq = dim(rng, 1, 5);
    const std::size_t d = heads * hd;
    const Graph g = [&](Tape& t, const std::vector<Var>& in) {
      return contract(t, ad::causal_attention(t, in[0], batch, seq, heads), 14);
    };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {batch * seq, 3 * d})}), kTol) << heads << hd << batch << seq;
  }
}

TEST(GradCheck, CrossEntropy) {
  Rng rng(109);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto n = dim(rng, 1, 6), v = dim(rng, 2, 9);
    std::vector<int> targets(n);
    for (int& t : targets) t = rng.below(4) == 0 ? ad::kIgnoreTarget : static_cast<int>(rng.below(v));
    targets[0] = 0;
    const Graph g = [&](Tape& t, const std::vector<Var>& in) { return ad::cross_entropy(t, in[0], targets); };
    EXPECT_LT(gradient_error(g, {random_tensor(rng, {n, v}, 2.0)}), kTol);
  }
}

TEST(CausalAttention, FutureDoesNotLeak) {
  Rng rng(110);
  const std::size_t seq = 5, d = 4;
  Tensor qkv = random_tensor(rng, {seq, 3 * d});
  Tape a;
  const Tensor out1 = a.value(ad::causal_attention(a, a.leaf(qkv), 1, seq, 2));
  for (std::size_t j = 0; j < 3 * d; ++j) qkv.at(seq - 1, j) += 1.0;
  Tape b;
  const Tensor out2 = b.value(ad::causal_attention(b, b.leaf(qkv), 1, seq, 2));
  for (std::size_t i = 0; i + 1 < seq; ++i)
    for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(out1.at(i, j), out2.at(i, j));
  Tape c;
  EXPECT_THROW(ad::causal_attention(c, c.leaf(Tensor::matrix(seq, 3 * d)), 1, seq, 3), ShapeError);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradientKeepsParameters) {
  std::vector<Tensor> params{Tensor({3}, std::vector<double>{1, -2, 3})};
  const auto before = params;
  auto state = ad::make_adam({}, params);
  ad::adam_step(state, params, {Tensor({3}, 0.0)});
  EXPECT_EQ(params, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Tensor> params{Tensor({4}, std::vector<double>{0, 0, 0, 0})};
  auto state = ad::make_adam({0.01}, params);
  ad::adam_step(state, params, {Tensor({4}, std::vector<double>{0.3, -5, 1e-3, -2e-2})});
  EXPECT_NEAR(params[0][0], -0.01, 1e-7);
  EXPECT_NEAR(params[0][1], 0.01, 1e-7);
  EXPECT_NEAR(params[0][2], -0.01, 1e-7);
  EXPECT_NEAR(params[0][3], 0.01, 1e-7);
}

TEST(Adam, TwoStepsHandComputed) {
  // lr 0.1, g = 0.5 both steps, b1 0.9, b2 0.999, eps 1e-8.
  // step 1: m = 0.05, v = 0.00025, mhat = 0.5, vhat = 0.25 -> w -= 0.1 * 0.5 / (0.5 + 1e-8)
  // step 2: m = 0.095, v = 0.00049975, mhat = 0.5, vhat = 0.25 -> same decrement
  const double step = 0.1 * 0.5 / (0.5 + 1e-8);
  std::vector<Tensor> params{Tensor({1}, std::vector<double>{1.0})};
  auto state = ad::make_adam({0.1}, params);
  const std::vector<Tensor> grads{Tensor({1}, std::vector<double>{0.5})};
  ad::adam_step(state, params, grads);
  ad::adam_step(state, params, grads);
  const double m2 = 0.9 * 0.05 + 0.1 * 0.5, v2 = 0.999 * 0.00025 + 0.001 * 0.25;
  const double mhat = m2 / (1 - 0.81), vhat = v2 / (1 - 0.999 * 0.999);
  EXPECT_NEAR(params[0][0], 1.0 - step - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
  EXPECT_EQ(state.step, 2);
}

TEST(Adam, ShapeMismatch) {
  std::vector<Tensor> params{Tensor({2}, 0.0)};
  auto state = ad::make_adam({}, params);
  EXPECT_THROW(ad::adam_step(state, params, {Tensor({3}, 0.0)}), ShapeError);
  EXPECT_THROW(ad::adam_step(state, params, {}), ShapeError);
}
