#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include <rewritenet/checkpoint.hpp>
#include <rewritenet/gradcheck.hpp>
#include <rewritenet/optim.hpp>
#include <rewritenet/tensor.hpp>

using namespace rewritenet;
namespace fs = std::filesystem;

namespace {

Tensor rand_matrix(std::size_t r, std::size_t c, Rng& rng, bool grad = true) {
  return Tensor::randn({r, c}, 1.0, rng, grad);
}

// Weighted sum with fixed random weights so every output entry matters.
Tensor probe(const Tensor& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  const auto w = Tensor::randn(t.shape(), 1.0, rng);
  return ops::sum(ops::multiply(t, w));
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_NO_THROW(Tensor({2, 2}, {1, 2, 3, 4}));
}

TEST(Tensor, SoftmaxOfZerosIsUniform) {
  const auto s = ops::softmax_rows(Tensor::matrix(1, 2, {0, 0}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Tensor, LayerNormConstantRowIsZero) {
  const auto x = Tensor::matrix(1, 4, {3, 3, 3, 3});
  const auto y = ops::layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, LayerNormMoments) {
  Rng rng(1);
  const auto x = rand_matrix(5, 16, rng, false);
  const auto y = ops::layer_norm(ops::scale(x, 7.0), Tensor::full({16}, 1.0), Tensor::zeros({16}));
  for (std::size_t i = 0; i < 5; ++i) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < 16; ++j) m += y.at(i, j);
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m);
    v /= 16;
    EXPECT_LT(std::abs(m), 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(Tensor, MatmulIdentity) {
  Rng rng(2);
  const auto a = rand_matrix(3, 3, rng, false);
  const auto I = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto y = ops::matmul(I, a);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[i], a[i]);
}

TEST(Tensor, ShapeErrorNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2"), std::string::npos);
    EXPECT_NE(msg.find("3"), std::string::npos);
  }
}

TEST(Tensor, NonFiniteIsAnError) {
  const auto x = Tensor::matrix(1, 1, {1e308});
  EXPECT_THROW(ops::scale(x, 1e10), NumericError);
}

TEST(Tensor, DropoutRejectsBadProbability) {
  Rng rng(0);
  EXPECT_THROW(ops::dropout(Tensor::zeros({2, 2}), 1.0, rng, true), ShapeError);
  EXPECT_THROW(ops::dropout(Tensor::zeros({2, 2}), -0.1, rng, true), ShapeError);
}

TEST(Tensor, DropoutOffAtEvaluation) {
  Rng rng(0);
  Rng data_rng(3);
  const auto x = rand_matrix(4, 4, data_rng, false);
  const auto y = ops::dropout(x, 0.5, rng, false);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Backward, Linear) {
  auto x = Tensor({3}, {1, 2, 3}, true);
  backward(ops::sum(ops::scale(x, 2.0)));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Backward, Quadratic) {
  auto x = Tensor({1}, {3}, true);
  backward(ops::sum(ops::multiply(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NonScalarRejected) {
  auto x = Tensor({2}, {1, 2}, true);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), ShapeError);
}

TEST(Backward, TwoCallsAccumulateTwice) {
  Rng rng(4);
  auto a = rand_matrix(3, 4, rng);
  auto b = rand_matrix(4, 2, rng);
  auto loss = [&] { return probe(ops::softmax_rows(ops::matmul(a, b))); };
  backward(loss());
  const std::vector<double> once(a.grad().begin(), a.grad().end());
  a.zero_grad();
  b.zero_grad();
  backward(loss());
  backward(loss());
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(a.grad()[i], 2.0 * once[i], 1e-14);
}

TEST(Backward, MatmulSoftmaxAgainstFiniteDifferences) {
  Rng rng(5);
  auto a = rand_matrix(3, 4, rng);
  auto b = rand_matrix(4, 5, rng);
  const double err = finite_diff_check([&] { return probe(ops::softmax_rows(ops::matmul(a, b))); }, {a, b});
  EXPECT_LT(err, 1e-5);
}

// Every differentiable op against central differences on small random inputs.
TEST(Backward, EveryOpMatchesFiniteDifferences) {
  Rng rng(6);
  auto x = rand_matrix(4, 3, rng);
  auto y = rand_matrix(4, 3, rng);
  auto w = rand_matrix(3, 5, rng);
  auto wt = rand_matrix(5, 3, rng);
  auto k = Tensor::randn({2, 2, 3}, 1.0, rng, true);
  auto gain = Tensor::randn({3}, 1.0, rng, true);
  auto bias = Tensor::randn({3}, 1.0, rng, true);
  auto row = Tensor::randn({3}, 1.0, rng, true);
  const std::vector<std::size_t> ids{2, 0, 2, 1};
  const std::vector<std::size_t> targets{1, 0, 4, 2};
  const std::vector<bool> include{true, false, true, true};

  struct Case {
    const char* name;
    std::function<Tensor()> f;
    std::vector<Tensor> params;
  };
  std::vector<Case> cases{
      {"add", [&] { return probe(ops::add(x, y)); }, {x, y}},
      {"sub", [&] { return probe(ops::sub(x, y)); }, {x, y}},
      {"multiply", [&] { return probe(ops::multiply(x, y)); }, {x, y}},
      {"scale", [&] { return probe(ops::scale(x, -1.7)); }, {x}},
      {"matmul", [&] { return probe(ops::matmul(x, w)); }, {x, w}},
      {"matmul_transposed", [&] { return probe(ops::matmul_transposed(x, wt)); }, {x, wt}},
      {"conv1d_valid", [&] { return probe(ops::conv1d_valid(x, k)); }, {x, k}},
      {"softmax_rows", [&] { return probe(ops::softmax_rows(x)); }, {x}},
      {"layer_norm", [&] { return probe(ops::layer_norm(x, gain, bias)); }, {x, gain, bias}},
      {"gather_rows", [&] { return probe(ops::gather_rows(x, ids)); }, {x}},
      {"concat_rows", [&] { return probe(ops::concat_rows({x, y}, 3)); }, {x, y}},
      {"concat_cols", [&] { return probe(ops::concat_cols(x, y)); }, {x, y}},
      {"repeat_rows", [&] { return probe(ops::repeat_rows(row, 4)); }, {row}},
      {"cross_entropy", [&] { return ops::cross_entropy(ops::matmul(x, w), targets, include); }, {x, w}},
      {"select_sum", [&] { return ops::select_sum(x, {{0, 1, 2.0}, {3, 2, -0.5}, {0, 1, 1.0}}); }, {x}},
  };
  for (auto& c : cases) {
    EXPECT_LT(finite_diff_check(c.f, c.params), 1e-4) << c.name;
  }
}

TEST(Backward, DropoutMaskIsReusedInBackward) {
  Rng data_rng(7);
  auto x = rand_matrix(3, 4, data_rng);
  auto f = [&] {
    Rng rng(11);
    return probe(ops::dropout(x, 0.3, rng, true));
  };
  EXPECT_LT(finite_diff_check(f, {x}), 1e-4);
}

TEST(Backward, CrossEntropyFullyMaskedRejected) {
  EXPECT_THROW(ops::cross_entropy(Tensor::zeros({2, 3}), {0, 1}, {false, false}), ShapeError);
}

TEST(FiniteDiff, SumIsExact) {
  auto x = Tensor({4}, {1, -2, 3, 0.5}, true);
  EXPECT_LT(finite_diff_check([&] { return ops::sum(x); }, {x}), 1e-9);
}

TEST(FiniteDiff, ZeroStepRejected) {
  auto x = Tensor({1}, {1}, true);
  EXPECT_THROW(finite_diff_check([&] { return ops::sum(x); }, {x}, 0.0), std::invalid_argument);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParameterRegistry reg;
  reg.add("w", Tensor({3}, {1, 2, 3}));
  reg.zero_grad();
  adam_step(reg, AdamConfig{});
  EXPECT_EQ(reg.get("w")[0], 1.0);
  EXPECT_EQ(reg.get("w")[2], 3.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterRegistry reg;
  auto& w = reg.add("w", Tensor({1}, {0.5}));
  reg.zero_grad();
  w.grad_buffer()[0] = 1.0;
  AdamConfig cfg;
  adam_step(reg, cfg);
  // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
  EXPECT_NEAR(reg.get("w")[0], 0.5 - cfg.learning_rate / (1.0 + cfg.epsilon), 1e-15);
  EXPECT_EQ(reg.get("w").grad()[0], 0.0);
}

TEST(Adam, SecondIdenticalStepIsNoLarger) {
  ParameterRegistry reg;
  auto& w = reg.add("w", Tensor({1}, {0.0}));
  AdamConfig cfg;
  reg.zero_grad();
  w.grad_buffer()[0] = 1.0;
  adam_step(reg, cfg);
  const double step1 = std::abs(w[0]);
  const double before = w[0];
  w.grad_buffer()[0] = 1.0;
  adam_step(reg, cfg);
  EXPECT_LE(std::abs(w[0] - before), step1 * (1.0 + 1e-6));
}

TEST(Adam, MissingGradientRejected) {
  ParameterRegistry reg;
  reg.add("w", Tensor({1}, {0.0}));
  EXPECT_THROW(adam_step(reg, AdamConfig{}), NumericError);
}

TEST(Adam, ConfigValidation) {
  AdamConfig bad;
  bad.beta1 = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = AdamConfig{};
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Registry, ParametersRequireGradAndMomentsMatch) {
  ParameterRegistry reg;
  reg.add("a", Tensor::zeros({2, 3}));
  EXPECT_TRUE(reg.get("a").requires_grad());
  EXPECT_EQ(reg.moments().at("a").first.size(), 6u);
  EXPECT_THROW(reg.add("a", Tensor::zeros({1})), ConfigError);
}

TEST(Registry, ClipGradNorm) {
  ParameterRegistry reg;
  auto& a = reg.add("a", Tensor::zeros({2}));
  reg.zero_grad();
  a.grad_buffer()[0] = 3.0;
  a.grad_buffer()[1] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm(reg, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(a.grad()[1], 0.8, 1e-15);
}

TEST(Checkpoint, RoundTripWithAdamState) {
  const auto dir = fs::temp_directory_path() / "rewritenet_ckpt_test";
  fs::create_directories(dir);
  Rng rng(8);
  ParameterRegistry reg;
  auto& a = reg.add("layers.0.patterns", Tensor::randn({2, 3, 4}, 1.0, rng));
  reg.add("embedding", Tensor::randn({5, 4}, 1.0, rng));
  reg.zero_grad();
  for (auto& g : a.grad_buffer()) g = 0.25;
  reg.get("embedding").grad_buffer()[0] = -1.0;
  adam_step(reg, AdamConfig{});
  save_checkpoint(reg, dir / "m.ckpt");

  ParameterRegistry other;
  other.add("layers.0.patterns", Tensor::zeros({2, 3, 4}));
  other.add("embedding", Tensor::zeros({5, 4}));
  load_checkpoint(other, dir / "m.ckpt");
  for (const auto& [name, p] : reg.parameters()) {
    const auto& q = other.get(name);
    for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_EQ(p[i], q[i]) << name;
    EXPECT_EQ(reg.moments().at(name).second, other.moments().at(name).second);
  }
  EXPECT_EQ(other.step(), 1);

  ParameterRegistry wrong;
  wrong.add("embedding", Tensor::zeros({5, 3}));
  wrong.add("layers.0.patterns", Tensor::zeros({2, 3, 4}));
  EXPECT_THROW(load_checkpoint(wrong, dir / "m.ckpt"), DataError);
  fs::remove_all(dir);
}

TEST(Checkpoint, GarbageFileRejected) {
  const auto p = fs::temp_directory_path() / "rewritenet_garbage.ckpt";
  std::ofstream(p) << "not a checkpoint\n";
  ParameterRegistry reg;
  reg.add("a", Tensor::zeros({1}));
  EXPECT_THROW(load_checkpoint(reg, p), DataError);
  fs::remove(p);
}
