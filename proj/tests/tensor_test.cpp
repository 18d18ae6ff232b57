#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <functional>

#include "promptblend/tensor.hpp"

namespace pb = promptblend;
using pb::Tensor;

namespace {

Tensor random_tensor(pb::Shape shape, pb::Rng& rng, bool grad = true) {
  std::vector<double> d(pb::shape_numel(shape));
  for (double& x : d) {
    x = rng.normal();
  }
  return Tensor::from(std::move(shape), std::move(d), grad);
}

// Central differences of f over every entry of each input, compared against backward().
double max_grad_error(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                      double h = 1e-6) {
  for (auto& t : inputs) {
    t.zero_grad();
  }
  f().backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.data()[i];
      t.mutable_data()[i] = orig + h;
      const double up = f().item();
      t.mutable_data()[i] = orig - h;
      const double down = f().item();
      t.mutable_data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(numeric - analytic[i]) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace

TEST(Tensor, FactoriesAndAccessors) {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at(1, 2), 6.0);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), pb::ShapeError);
  EXPECT_THROW(t.item(), pb::ShapeError);
  EXPECT_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_EQ(Tensor::zeros({3}).data()[2], 0.0);
  EXPECT_EQ(Tensor::full({2}, 7.0).data()[1], 7.0);
}

TEST(Tensor, MatmulValues) {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = pb::matmul(a, b);
  EXPECT_EQ(c.shape(), (pb::Shape{2, 2}));
  EXPECT_EQ(c.at(0, 0), 58.0);
  EXPECT_EQ(c.at(1, 1), 154.0);
  Tensor nt = pb::matmul_nt(a, a);
  EXPECT_EQ(nt.at(0, 1), 32.0);
  EXPECT_THROW(pb::matmul(a, a), pb::ShapeError);
}

TEST(Tensor, ElementwiseShapeMismatchThrows) {
  EXPECT_THROW(pb::add(Tensor::zeros({2}), Tensor::zeros({3})), pb::ShapeError);
  EXPECT_THROW(pb::mul(Tensor::zeros({2, 1}), Tensor::zeros({1, 2})), pb::ShapeError);
}

TEST(Tensor, GradcheckArithmetic) {
  pb::Rng rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor c = random_tensor({3, 2}, rng);
  Tensor bias = random_tensor({2}, rng);
  auto f = [&] {
    Tensor y = pb::add_row_bias(pb::matmul(a, b), bias);
    return pb::sum(pb::mul(pb::sub(y, c), pb::scale(y, 0.5)));
  };
  EXPECT_LT(max_grad_error(f, {a, b, c, bias}), 1e-6);
}

TEST(Tensor, GradcheckMatmulNt) {
  pb::Rng rng(2);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({5, 4}, rng);
  auto f = [&] { return pb::sum(pb::gelu(pb::matmul_nt(a, b))); };
  EXPECT_LT(max_grad_error(f, {a, b}), 1e-6);
}

TEST(Tensor, GradcheckSoftmaxWithMask) {
  pb::Rng rng(3);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({3, 4}, rng, false);
  std::vector<std::uint8_t> allowed = {1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 0};
  auto f = [&] { return pb::sum(pb::mul(pb::softmax_rows(x, &allowed), w)); };
  EXPECT_LT(max_grad_error(f, {x}), 1e-6);
  Tensor s = pb::softmax_rows(x, &allowed);
  EXPECT_EQ(s.at(0, 2), 0.0);
  EXPECT_EQ(s.at(2, 0), 1.0);  // single allowed key takes all the mass
  const std::vector<std::uint8_t> none(12, 0);
  const Tensor masked = pb::softmax_rows(x, &none);
  for (double v : masked.data()) {
    EXPECT_EQ(v, 0.0);  // fully masked rows stay zero
  }
  EXPECT_NEAR(s.at(1, 1) + s.at(1, 2) + s.at(1, 3), 1.0, 1e-15);
}

TEST(Tensor, SoftmaxPropagatesNaN) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const Tensor x = Tensor::from({2, 2}, {nan, nan, 1.0, nan});
  const Tensor s = pb::softmax_rows(x);
  for (double v : s.data()) {
    EXPECT_TRUE(std::isnan(v));
  }
}

TEST(Tensor, GradcheckLayerNorm) {
  pb::Rng rng(4);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor g = random_tensor({5}, rng);
  Tensor b = random_tensor({5}, rng);
  Tensor w = random_tensor({3, 5}, rng, false);
  auto f = [&] { return pb::sum(pb::mul(pb::layer_norm_rows(x, g, b), w)); };
  EXPECT_LT(max_grad_error(f, {x, g, b}), 1e-5);
}

TEST(Tensor, GradcheckRowOps) {
  pb::Rng rng(5);
  Tensor table = random_tensor({6, 3}, rng);
  Tensor extra = random_tensor({2, 3}, rng);
  const std::vector<pb::TokenId> ids = {4, 0, 4, 2};
  const std::vector<std::uint8_t> keep = {1, 0, 1, 1, 1, 0};
  auto f = [&] {
    Tensor x = pb::concat_rows(extra, pb::gather_rows(table, ids));
    Tensor m = pb::masked_mean_rows(x, keep);
    return pb::sum(pb::mul(m, m));
  };
  EXPECT_LT(max_grad_error(f, {table, extra}), 1e-6);
  EXPECT_THROW(pb::gather_rows(table, std::vector<pb::TokenId>{6}), pb::IndexError);
  EXPECT_THROW(pb::masked_mean_rows(extra, {0, 0}), pb::DegenerateLossError);
}

TEST(Tensor, GradcheckCrossEntropy) {
  pb::Rng rng(6);
  Tensor logits = random_tensor({4, 5}, rng);
  const std::vector<pb::TokenId> targets = {1, 0, 4, 3};
  auto f = [&] { return pb::cross_entropy(logits, targets, 0); };
  EXPECT_LT(max_grad_error(f, {logits}), 1e-6);
}

TEST(Tensor, CrossEntropyUniformIsLogV) {
  for (std::size_t v : {2u, 7u, 50u, 1000u}) {
    Tensor logits = Tensor::zeros({3, v});
    EXPECT_NEAR(pb::cross_entropy(logits, std::vector<pb::TokenId>{1, 1, 1}, 0).item(),
                std::log(static_cast<double>(v)), 1e-12);
  }
}

TEST(Tensor, CrossEntropyErrors) {
  Tensor logits = Tensor::zeros({2, 4});
  EXPECT_THROW(pb::cross_entropy(logits, std::vector<pb::TokenId>{0, 0}, 0), pb::DegenerateLossError);
  EXPECT_THROW(pb::cross_entropy(logits, std::vector<pb::TokenId>{1, 4}, 0), pb::IndexError);
}

TEST(Tensor, DropoutSemantics) {
  pb::Rng rng(7);
  Tensor x = Tensor::full({1000}, 1.0, true);
  EXPECT_EQ(pb::dropout(x, 0.3, false, rng).node(), x.node());
  EXPECT_EQ(pb::dropout(x, 0.0, true, rng).node(), x.node());
  Tensor y = pb::dropout(x, 0.5, true, rng);
  std::size_t zeros = 0;
  for (double v : y.data()) {
    zeros += v == 0.0;
    EXPECT_TRUE(v == 0.0 || v == 2.0);
  }
  EXPECT_GT(zeros, 400u);
  EXPECT_LT(zeros, 600u);
  EXPECT_THROW(pb::dropout(x, 1.0, true, rng), pb::ParameterError);
  EXPECT_THROW(pb::dropout(x, -0.1, true, rng), pb::ParameterError);
}

TEST(Tensor, GradientsAccumulateAcrossBackwardCalls) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  pb::sum(pb::mul(x, x)).backward();
  pb::sum(pb::mul(x, x)).backward();
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Tensor, SharedSubexpressionGradient) {
  Tensor x = Tensor::from({1}, {3.0}, true);
  Tensor y = pb::mul(x, x);
  pb::sum(pb::add(y, y)).backward();
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Tensor, DetachCutsGraph) {
  Tensor x = Tensor::from({1}, {3.0}, true);
  Tensor y = pb::mul(x, x).detach();
  EXPECT_FALSE(y.requires_grad());
  Tensor z = pb::sum(pb::mul(y, x));
  z.backward();
  EXPECT_EQ(x.grad()[0], 9.0);
}

TEST(Tensor, ConstantsBuildNoGraph) {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = pb::mul(a, a);
  EXPECT_FALSE(b.requires_grad());
  EXPECT_TRUE(b.node()->is_leaf());
}

TEST(Tensor, ReshapeKeepsDataAndGradient) {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor r = pb::reshape(x, {3, 2});
  EXPECT_EQ(r.at(2, 1), 6.0);
  EXPECT_THROW(pb::reshape(x, {4}), pb::ShapeError);
  pb::sum(pb::scale(r, 2.0)).backward();
  EXPECT_EQ(x.grad()[5], 2.0);
}

TEST(Rng, DeterministicAndForkIndependent) {
  pb::Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.next(), b.next());
  }
  pb::Rng root(5);
  pb::Rng f1 = root.fork(1);
  pb::Rng f2 = root.fork(2);
  EXPECT_NE(f1.next(), f2.next());
  pb::Rng c(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(c.below(7), 7u);
  }
}

TEST(Rng, ShuffleIsPermutation) {
  pb::Rng rng(3);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  rng.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(sorted[i], i);
  }
}
