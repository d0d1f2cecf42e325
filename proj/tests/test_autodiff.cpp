#include <gtest/gtest.h>

#include <random>

#include "cdnet/autodiff.hpp"
#include "support.hpp"

using namespace cdnet;
using testing_support::random_tensor;

TEST(Tensor, RejectsZeroExtentsAndSizeMismatch) {
  EXPECT_THROW(Tensor({0, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  const Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t(1, 2), 6.0);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, GatherRowsCopiesInOrder) {
  const Tensor t = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  const std::size_t idx[] = {2, 0};
  EXPECT_EQ(t.gather_rows(idx), Tensor::matrix(2, 2, {5, 6, 1, 2}));
}

TEST(Autodiff, MatmulForwardMatchesHandProduct) {
  Graph g;
  const Node out = g.matmul(g.input("a"), g.input("b"));
  Bindings b;
  b.bind("a", Tensor::matrix(2, 2, {1, 2, 3, 4})).bind("b", Tensor::matrix(2, 1, {5, 6}));
  EXPECT_EQ(forward(g, b).value(out), Tensor::matrix(2, 1, {17, 39}));
}

TEST(Autodiff, ShapeMismatchNamesTheNode) {
  Graph g;
  auto scope = g.scoped("probe");
  const Node out = g.matmul(g.input("a"), g.input("b"));
  Bindings b;
  b.bind("a", Tensor({2, 3})).bind("b", Tensor({2, 3}));
  try {
    forward(g, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos) << e.what();
    (void)out;
  }
}

TEST(Autodiff, NonFiniteIntermediateIsReported) {
  Graph g;
  const Node out = g.log(g.input("x"));
  Bindings b;
  b.bind("x", Tensor::matrix(1, 2, {1.0, -1.0}));
  EXPECT_THROW(forward(g, b), NumericError);
  (void)out;
}

TEST(Autodiff, UnboundInputIsAnError) {
  Graph g;
  const Node out = g.relu(g.input("x"));
  EXPECT_THROW(forward(g, Bindings{}), Error);
  (void)out;
}

TEST(Autodiff, GradientOfSumOfSquaresIsTwiceInput) {
  Graph g;
  const Node w = g.parameter("w");
  const Node out = g.sum(g.square(w));
  Bindings b;
  b.bind("w", Tensor::matrix(1, 3, {1, -2, 0.5}));
  const auto grads = backward(g, forward(g, b), out);
  EXPECT_EQ(grads.at("w"), Tensor::matrix(1, 3, {2, -4, 1}));
}

TEST(Autodiff, UnusedParameterGetsZeroGradient) {
  Graph g;
  const Node used = g.parameter("used");
  g.parameter("unused");
  const Node out = g.sum(used);
  Bindings b;
  b.bind("used", Tensor({1, 2}, 1.0)).bind("unused", Tensor({2, 2}, 3.0));
  const auto grads = backward(g, forward(g, b), out);
  EXPECT_EQ(grads.at("unused"), Tensor({2, 2}, 0.0));
}

TEST(Autodiff, FilterRestrictsGradients) {
  Graph g;
  const Node out = g.sum(g.mul(g.parameter("a/w"), g.parameter("b/w")));
  Bindings b;
  b.bind("a/w", Tensor({1, 2}, 2.0)).bind("b/w", Tensor({1, 2}, 3.0));
  const auto grads = backward(g, forward(g, b), out, {}, [](std::string_view n) { return n.starts_with("a/"); });
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_EQ(grads.at("a/w"), Tensor({1, 2}, 3.0));
}

TEST(Autodiff, BackwardThroughIndicatorThrows) {
  Graph g;
  const Node out = g.sum(g.greater(g.parameter("w"), 0.0));
  Bindings b;
  b.bind("w", Tensor({1, 2}, 1.0));
  EXPECT_THROW(backward(g, forward(g, b), out), Error);
}

TEST(Autodiff, SqrtAndDistanceUseZeroSubgradientAtTies) {
  Graph g;
  const Node w = g.parameter("w");
  const Node out = g.sum(g.pairwise_distance(w));
  Bindings b;
  b.bind("w", Tensor::matrix(2, 1, {1.0, 1.0}));
  const auto grads = backward(g, forward(g, b), out);
  EXPECT_EQ(grads.at("w"), Tensor({2, 1}, 0.0));
}

TEST(Autodiff, GradCheckRejectsCoincidentSamples) {
  Graph g;
  const Node out = g.sum(g.pairwise_distance(g.parameter("w")));
  Bindings b;
  b.bind("w", Tensor::matrix(2, 1, {1.0, 1.0}));
  EXPECT_THROW(grad_check(g, out, b), NumericError);
}

TEST(Autodiff, DropoutIsSeedDeterministicAndInactiveInEval) {
  Graph g;
  const Node out = g.dropout(g.input("x"), 0.5);
  Bindings b;
  b.bind("x", Tensor({4, 8}, 1.0));
  const Tensor a = forward(g, b, {true, 11}).value(out);
  const Tensor a2 = forward(g, b, {true, 11}).value(out);
  const Tensor c = forward(g, b, {true, 12}).value(out);
  EXPECT_EQ(a, a2);
  EXPECT_NE(a, c);
  EXPECT_EQ(forward(g, b, {false, 11}).value(out), Tensor({4, 8}, 1.0));
  for (double v : a.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

// Every differentiable op, composed, against central differences.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  Graph g;
  const Node a = g.parameter("a");  // 4 x 3
  const Node b = g.parameter("b");  // 3 x 2
  const Node r = g.parameter("r");  // 1 x 2
  Node h = g.add(g.matmul(a, b), r);
  Node out;
  switch (GetParam()) {
    case 0: out = g.mean(g.square(g.tanh(h))); break;
    case 1: out = g.sum(g.mul(g.sigmoid(h), g.softmax(h))); break;
    case 2: out = g.mean(g.log(g.affine(g.sigmoid(h), 0.5, 0.25))); break;
    case 3: out = g.sum(g.sqrt(g.affine(g.square(h), 1.0, 0.5))); break;
    case 4: out = g.sum(g.batch_mean(g.sub(h, g.transpose(g.transpose(h))))); break;
    case 5: out = g.mean(g.concat({h, g.relu(h), g.clamp(h, -0.3, 0.3)})); break;
    case 6: out = g.mean(g.mul(g.pairwise_distance(a), g.pairwise_distance(h))); break;
    case 7: out = g.sum(g.matmul(g.transpose(a), g.affine(a, 2.0))); break;
    default: FAIL();
  }
  Bindings bind;
  bind.bind("a", random_tensor(rng, 4, 3)).bind("b", random_tensor(rng, 3, 2)).bind("r", random_tensor(rng, 1, 2));
  EXPECT_LE(grad_check(g, out, bind), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Ops, OpGradient, ::testing::Range(0, 8));

TEST(Autodiff, DropoutGradientUsesForwardMask) {
  std::mt19937_64 rng(3);
  Graph g;
  const Node out = g.sum(g.square(g.dropout(g.parameter("w"), 0.3)));
  Bindings b;
  b.bind("w", random_tensor(rng, 3, 5));
  EXPECT_LE(grad_check(g, out, b, 1e-5, {true, 99}), 1e-6);
}

TEST(Autodiff, RowBroadcastGradientAccumulates) {
  Graph g;
  const Node bias = g.parameter("bias");
  const Node out = g.sum(g.add(g.input("x"), bias));
  Bindings b;
  b.bind("x", Tensor({5, 3}, 1.0)).bind("bias", Tensor({1, 3}, 0.0));
  EXPECT_EQ(backward(g, forward(g, b), out).at("bias"), Tensor({1, 3}, 5.0));
}
