// Copyright 2026 The Sherlock Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>

#include <gtest/gtest.h>

#include "support.hpp"

namespace sherlock {
namespace {

using testing::random_tensor;

Tensord make(Shape s, std::initializer_list<double> v, bool grad = false) {
  Eigen::ArrayXd a(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) a[i++] = x;
  return Tensord(std::move(s), std::move(a), grad);
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensord({2, 3}, Eigen::ArrayXd::Zero(5)), ShapeError);
  EXPECT_EQ(Tensord::zeros({2, 3}).size(), 6);
}

TEST(Tensor, MatmulHandValues) {
  const auto a = make({2, 2}, {1, 2, 3, 4});
  const auto b = make({2, 1}, {5, 6});
  const auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.data()[0], 17);
  EXPECT_EQ(c.data()[1], 39);
}

TEST(Tensor, MatmulIdentity) {
  Rng rng(1);
  const auto x = random_tensor({2, 5}, rng, 1.0, false);
  const auto eye = make({2, 2}, {1, 0, 0, 1});
  EXPECT_TRUE((matmul(eye, x).data() == x.data()).all());
}

TEST(Tensor, MatmulShapeErrorNamesBothShapes) {
  try {
    matmul(Tensord::zeros({2, 3}), Tensord::zeros({4, 5}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
}

TEST(Tensor, BroadcastAddIsRowWise) {
  const auto a = make({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto b = make({3}, {10, 20, 30});
  const auto c = add(a, b);
  const Eigen::ArrayXd expected = (Eigen::ArrayXd(6) << 11, 22, 33, 14, 25, 36).finished();
  EXPECT_TRUE((c.data() == expected).all());
  EXPECT_THROW(add(a, make({2}, {1, 2})), ShapeError);
}

TEST(Tensor, SoftmaxExamples) {
  auto s = softmax(make({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
  s = softmax(make({2}, {std::log(2.0), 0}));
  EXPECT_NEAR(s.data()[0], 2.0 / 3, 1e-15);
  EXPECT_NEAR(s.data()[1], 1.0 / 3, 1e-15);
  s = softmax(make({2}, {1000, 0}));
  EXPECT_EQ(s.data()[0], 1.0);
  EXPECT_EQ(s.data()[1], 0.0);
}

TEST(Tensor, SoftmaxRowsAreSimplexPoints) {
  Rng rng(2);
  const auto x = random_tensor({7, 9}, rng, 5.0, false);
  for (Index axis : {0, 1}) {
    const auto s = softmax(x, axis);
    EXPECT_GE(s.data().minCoeff(), 0.0);
    EXPECT_LE(s.data().maxCoeff(), 1.0);
    const auto m = s.matrix();
    if (axis == 1) {
      EXPECT_LT((m.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    } else {
      EXPECT_LT((m.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    }
  }
}

TEST(Tensor, LayernormTwoPassOracle) {
  Rng rng(3);
  const Index d = 6;
  const auto x = random_tensor({4, d}, rng, 3.0, false);
  const auto g = random_tensor({d}, rng, 1.0, false), b = random_tensor({d}, rng, 1.0, false);
  const auto y = layernorm(x, g, b, 1e-6);
  for (Index r = 0; r < 4; ++r) {
    double mu = 0;
    for (Index c = 0; c < d; ++c) mu += x.data()[r * d + c];
    mu /= d;
    double var = 0;
    for (Index c = 0; c < d; ++c) var += (x.data()[r * d + c] - mu) * (x.data()[r * d + c] - mu);
    var /= d;
    for (Index c = 0; c < d; ++c) {
      const double ref = (x.data()[r * d + c] - mu) / std::sqrt(var + 1e-6) * g.data()[c] + b.data()[c];
      EXPECT_NEAR(y.data()[r * d + c], ref, 1e-6);
    }
  }
}

TEST(Tensor, LayernormConstantRowIsZero) {
  const auto x = Tensord::constant({2, 5}, 3.5);
  const auto y = layernorm(x, Tensord::constant({5}, 1.0), Tensord::zeros({5}));
  EXPECT_EQ(y.data().abs().maxCoeff(), 0.0);
}

TEST(Tensor, GeluAgainstErfOracle) {
  EXPECT_EQ(gelu(Tensord::scalar(0.0)).item(), 0.0);
  EXPECT_NEAR(gelu(Tensord::scalar(8.0)).item(), 8.0, 1e-9);
  double prev = -1e9;
  for (double x = -5.0; x <= 5.0 + 1e-12; x += 0.01) {
    const double g = gelu(Tensord::scalar(x)).item();
    EXPECT_NEAR(g, 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))), 1e-3) << x;
    if (x > -0.75) {  // monotone right of the minimum
      EXPECT_GE(g, prev) << x;
    }
    prev = g;
  }
}

TEST(Autodiff, SumGivesOnes) {
  const auto x = make({3}, {1, -2, 5}, true);
  backward(sum(x));
  EXPECT_TRUE((x.grad() == 1.0).all());
}

TEST(Autodiff, SquareGivesTwoX) {
  const auto x = make({3}, {1, -2, 5}, true);
  backward(sum(mul(x, x)));
  EXPECT_TRUE((x.grad() == 2.0 * x.data()).all());
}

TEST(Autodiff, FanOutAccumulates) {
  const auto x = make({2}, {1, 2}, true);
  const auto y = add(x, x);
  backward(sum(add(y, x)));
  EXPECT_TRUE((x.grad() == 3.0).all());
}

TEST(Autodiff, NonScalarLossIsAnError) {
  const auto x = make({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Autodiff, TapeIsTopological) {
  Rng rng(4);
  const auto a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
  const auto loss = sum(gelu(matmul(add(a, b), softmax(b))));
  const auto tape = GradTape<double>::record(loss);
  std::unordered_map<const detail::Node<double>*, std::size_t> pos;
  for (std::size_t i = 0; i < tape.entries().size(); ++i) pos[tape.entries()[i]] = i;
  for (std::size_t i = 0; i < tape.entries().size(); ++i) {
    for (const auto& in : tape.entries()[i]->inputs) EXPECT_LT(pos.at(in.get()), i);
  }
  EXPECT_EQ(tape.entries().back(), loss.node().get());
}

TEST(Autodiff, BackwardIsDeterministic) {
  Rng rng(5);
  auto a = random_tensor({4, 4}, rng);
  auto run = [&] {
    a.zero_grad();
    backward(sum(softmax(matmul(a, a))));
    return Eigen::ArrayXd(a.grad());
  };
  const auto g1 = run(), g2 = run();
  EXPECT_TRUE((g1 == g2).all());
}

TEST(Autodiff, OpsDoNotMutateInputs) {
  Rng rng(6);
  const auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({4}, rng);
  const Eigen::ArrayXd a0 = a.data(), b0 = b.data();
  const auto y = layernorm(concat<double>({a, a}, 1), b, b);
  backward(sum(gelu(add(y, b))));
  EXPECT_TRUE((a.data() == a0).all());
  EXPECT_TRUE((b.data() == b0).all());
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  const auto x = make({2}, {1, 2}, true);
  NoGradGuard guard;
  const auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, FiniteChecksCatchNaN) {
  set_finite_checks(true);
  const auto x = make({1}, {std::nan("")});
  EXPECT_THROW(add(x, x), std::domain_error);
  set_finite_checks(false);
}

TEST(ShapeOps, PermuteAndTranspose) {
  const auto x = make({2, 3}, {0, 1, 2, 3, 4, 5});
  const auto t = transpose(x);
  EXPECT_EQ(t.shape(), (Shape{3, 2}));
  const Eigen::ArrayXd expected = (Eigen::ArrayXd(6) << 0, 3, 1, 4, 2, 5).finished();
  EXPECT_TRUE((t.data() == expected).all());
  EXPECT_TRUE((permute(permute(x, {1, 0}), {1, 0}).data() == x.data()).all());
}

TEST(ShapeOps, ConcatIndexSelectGather) {
  const auto a = make({1, 2, 2}, {1, 2, 3, 4});
  const auto b = make({1, 1, 2}, {9, 9});
  const auto c = concat<double>({a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{1, 3, 2}));
  EXPECT_EQ(c.data()[4], 9);
  const auto s = index_select(c, 1, {2, 0});
  EXPECT_EQ(s.data()[0], 9);
  EXPECT_EQ(s.data()[2], 1);
  const auto g = batch_gather(c, {{1}});
  EXPECT_EQ(g.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(g.data()[1], 4);
  EXPECT_THROW(index_select(c, 1, {3}), std::out_of_range);
}

TEST(Optim, ZeroGradZeroDecayLeavesParams) {
  ParameterList<double> params{{"w", make({3}, {1, 2, 3}, true), true}};
  AdamWState<double> state;
  adamw_step(params, state, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_TRUE((params[0].tensor.data() == Eigen::Array3d(1, 2, 3)).all());
}

TEST(Optim, OneStepOnSquareDecreases) {
  const auto w = make({1}, {1.5}, true);
  ParameterList<double> params{{"w", w, true}};
  AdamWState<double> state;
  backward(sum(mul(w, w)));
  const double before = w.data()[0] * w.data()[0];
  adamw_step(params, state, {});
  EXPECT_LT(w.data()[0] * w.data()[0], before);
}

TEST(Optim, ThreeStepHandTrace) {
  // Values stepped by hand (double precision) for lr 0.01, betas (0.9, 0.95),
  // eps 1e-8, weight decay 0.05.
  auto w = make({3}, {0.5, -1.0, 2.0}, true);
  ParameterList<double> params{{"w", w, true}};
  AdamWState<double> state;
  const AdamWOptions opt{0.01, 0.9, 0.95, 1e-8, 0.05};
  const double grads[3][3] = {{0.1, -0.2, 0.3}, {-0.05, 0.4, 0.0}, {0.2, 0.2, -0.1}};
  const double expected[3][3] = {{0.48975000099999993, -0.98950000049999998, 1.9890000003333335},
                                 {0.48682143186076687, -0.99263898989048838, 1.9812190231891589},
                                 {0.48009057229340996, -0.99733621600287325, 1.9772777302816094}};
  for (int t = 0; t < 3; ++t) {
    w.zero_grad();
    w.accumulate_grad(Eigen::Array3d(grads[t][0], grads[t][1], grads[t][2]));
    adamw_step(params, state, opt);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(w.data()[i], expected[t][i], 1e-12) << t << "," << i;
  }
}

TEST(Optim, NoDecayFlagSkipsDecay) {
  ParameterList<double> params{{"b", make({1}, {2.0}, true), false}};
  AdamWState<double> state;
  adamw_step(params, state, {0.1, 0.9, 0.999, 1e-8, 0.5});
  EXPECT_EQ(params[0].tensor.data()[0], 2.0);
}

}  // namespace
}  // namespace sherlock
