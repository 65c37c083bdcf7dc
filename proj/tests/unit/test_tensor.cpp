#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "marnet/ops.hpp"
#include "marnet/tensor.hpp"

namespace marnet {
namespace {

TEST(Tensor, ShapeAndDataAgree) {
  Tensor<float> t(Shape{2, 3, 4}, 1.5f);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.cols(), 4u);
  EXPECT_EQ(t.rows(), 6u);
  EXPECT_EQ(numel(t.shape()), t.size());
  for (float v : t.data()) EXPECT_EQ(v, 1.5f);
}

TEST(Tensor, RejectsBadExtents) {
  EXPECT_THROW(Tensor<float>(Shape{}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{3, 0}), ShapeError);
  EXPECT_THROW((Tensor<float>(Shape{2, 2}, {1.0f, 2.0f, 3.0f})), ShapeError);
}

TEST(Tensor, GradientHasSameShape) {
  Tensor<double> t(Shape{3, 5});
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad().size(), t.size());
  EXPECT_TRUE(t.has_grad());
  for (double g : t.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Tensor, ReshapeKeepsElementCount) {
  Tensor<float> t(Shape{2, 6});
  t.reshape({3, 4});
  EXPECT_EQ(t.cols(), 4u);
  EXPECT_THROW(t.reshape({5, 5}), ShapeError);
}

TEST(Tensor, MemoryAccountingTracksBuffers) {
  const auto before = memory::stats().current_bytes;
  {
    Tensor<double> t(Shape{1000});
    EXPECT_EQ(memory::stats().current_bytes, before + 1000 * sizeof(double));
    EXPECT_GE(memory::stats().peak_bytes, before + 1000 * sizeof(double));
  }
  EXPECT_EQ(memory::stats().current_bytes, before);
  memory::reset_peak();
  EXPECT_EQ(memory::stats().peak_bytes, memory::stats().current_bytes);
}

TEST(Graph, NonFiniteForwardIsAnError) {
  auto x = parameter(Tensor<double>(Shape{1, 2}, {1.0, std::numeric_limits<double>::infinity()}));
  EXPECT_THROW(relu(x), NumericError);
}

TEST(Graph, BackwardNeedsScalarOrSeed) {
  auto x = parameter(Tensor<double>(Shape{2, 2}, 1.0));
  auto y = relu(x);
  EXPECT_THROW(backward(y), ShapeError);
  std::vector<double> seed = {1.0, 2.0, 3.0, 4.0};
  backward(y, std::span<const double>(seed));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.grad()[i], seed[i]);
}

TEST(Graph, LeafUsedTwiceAccumulates) {
  Rng rng(3);
  auto x = parameter(test::random_tensor<double>({4, 3}, rng));
  const auto w = test::random_tensor<double>({4, 3}, rng);
  // sum(w * (x + x)) against sum(2 w * x).
  backward(dot(add(x, x), w));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * w[i]);

  auto y = parameter(x.value());
  y.value().zero_grad();
  Tensor<double> w2 = w;
  for (auto& v : w2.data()) v *= 2.0;
  backward(dot(y, w2));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], y.grad()[i]);
}

TEST(Graph, SharedSubgraphVisitedOnce) {
  auto x = parameter(Tensor<double>(Shape{1, 2}, {1.0, -2.0}));
  auto r = relu(x);
  auto z = add(r, r);
  const auto stats = graph_stats(z);
  EXPECT_EQ(stats.nodes, 3u);
  EXPECT_EQ(stats.edges, 3u);
  backward(z, std::span<const double>(std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Graph, NoGradRecordsNothing) {
  auto x = parameter(Tensor<double>(Shape{1, 2}, 1.0));
  Var<double> y;
  {
    NoGradGuard guard;
    y = relu(x);
  }
  EXPECT_TRUE(GradMode::enabled());
  EXPECT_EQ(graph_stats(y).edges, 0u);
}

TEST(Graph, IntermediatesReleaseGradients) {
  auto x = parameter(Tensor<double>(Shape{1, 3}, 1.0));
  auto r = relu(x);
  auto kept = relu(r);
  kept.retain_grad();
  auto s = sum(kept);
  backward(s);
  EXPECT_FALSE(r.has_grad());
  EXPECT_TRUE(kept.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Graph, DeterministicForwardBackward) {
  auto run = [] {
    Rng rng(11);
    auto x = parameter(test::random_tensor<float>({8, 6}, rng));
    auto w = parameter(test::random_tensor<float>({2, 3, 4}, rng));
    auto b = parameter(test::random_tensor<float>({8}, rng));
    auto y = relu(grouped_linear(x, w, b, 2));
    const auto weights = test::random_tensor<float>({8, 8}, rng);
    backward(dot(y, weights));
    std::vector<float> out(y.value().data().begin(), y.value().data().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace marnet
