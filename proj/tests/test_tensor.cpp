#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "m1lab/error.hpp"
#include "m1lab/grad_check.hpp"
#include "m1lab/ops.hpp"

namespace m1lab {
namespace {

Tensor rand_leaf(Shape shape, Rng& rng, double stddev = 1.0) { return Tensor::randn(std::move(shape), rng, stddev, true); }

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Weighted sum with fixed random weights so that every output coordinate
// contributes a distinct gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = Tensor::randn(y.shape(), rng, 1.0);
  return sum(mul(y, w));
}

TEST(Matmul, IdentityAndHandComputed) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(values(matmul(a, eye)), (std::vector<double>{1, 2, 3, 4}));
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected dimension error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimension);
    EXPECT_NE(std::string(e.what()).find("[2,3] and [2,3]"), std::string::npos);
  }
}

TEST(Matmul, SumGradientMatchesFiniteDifferences) {
  Rng rng(1);
  Tensor a = rand_leaf({3, 4}, rng);
  Tensor b = rand_leaf({4, 2}, rng);
  auto r = grad_check([&] { return sum(matmul(a, b)); }, {a, b});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Softmax, Examples) {
  auto y = values(softmax(Tensor::from_data({3}, {0, 0, 0})));
  for (double v : y) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

  auto two = values(softmax(Tensor::from_data({2}, {0, std::log(3.0)})));
  EXPECT_NEAR(two[0], 0.25, 1e-15);
  EXPECT_NEAR(two[1], 0.75, 1e-15);

  Rng rng(2);
  Tensor x = Tensor::randn({5}, rng, 2.0);
  std::vector<double> shifted = values(x);
  for (auto& v : shifted) v += 123.5;
  auto base = values(softmax(x));
  auto moved = values(softmax(Tensor::from_data({5}, shifted)));
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], moved[i], 1e-14);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(6), n = 1 + rng.below(30);
    auto y = values(softmax(Tensor::randn({rows, n}, rng, 5.0)));
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GE(y[r * n + j], 0.0);
        s += y[r * n + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, NonFiniteInputIsNumericError) {
  Tensor x = Tensor::from_data({2}, {0.0, std::numeric_limits<double>::infinity()});
  try {
    softmax(x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
  }
}

TEST(RmsNorm, Examples) {
  Tensor ones = Tensor::full({4}, 1.0);
  for (double v : values(rmsnorm(ones, ones, 1e-14))) EXPECT_NEAR(v, 1.0, 1e-12);
  auto y = values(rmsnorm(Tensor::from_data({2}, {3, -3}), Tensor::full({2}, 1.0), 0.0));
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], -1.0);
}

TEST(SwigluFfn, Examples) {
  Rng rng(4);
  Tensor wg = Tensor::randn({3, 5}, rng, 1.0), wu = Tensor::randn({3, 5}, rng, 1.0), wd = Tensor::randn({5, 3}, rng, 1.0);
  for (double v : values(swiglu_ffn(Tensor::zeros({2, 3}), wg, wu, wd))) EXPECT_EQ(v, 0.0);

  Tensor one = Tensor::from_data({1, 1}, {1.0});
  const double y = swiglu_ffn(one, one, one, one).item();
  EXPECT_NEAR(y, 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(y, 0.731059, 1e-6);
}

TEST(SwigluFfn, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(swiglu_ffn(Tensor::zeros({2, 3}), Tensor::zeros({3, 4}), Tensor::zeros({3, 5}), Tensor::zeros({4, 3})), Error);
}

TEST(CausalConv, IdentityAndShiftKernels) {
  Rng rng(5);
  Tensor x = Tensor::randn({6, 3}, rng, 1.0);
  std::vector<double> id(9, 0.0);
  for (std::size_t c = 0; c < 3; ++c) id[2 * 3 + c] = 1.0;
  EXPECT_EQ(values(causal_conv1d(x, Tensor::from_data({3, 3}, id))), values(x));

  std::vector<double> shift(6, 0.0);
  for (std::size_t c = 0; c < 3; ++c) shift[c] = 1.0;
  auto y = values(causal_conv1d(x, Tensor::from_data({2, 3}, shift)));
  auto xv = values(x);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y[c], 0.0);
  for (std::size_t i = 1; i < 6; ++i) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y[i * 3 + c], xv[(i - 1) * 3 + c]);
  }
}

TEST(CausalConv, KernelLongerThanSequence) {
  Tensor x = Tensor::from_data({2, 1}, {1.0, 2.0});
  Tensor k = Tensor::from_data({4, 1}, {9.0, 9.0, 1.0, 1.0});
  EXPECT_EQ(values(causal_conv1d(x, k)), (std::vector<double>{1.0, 3.0}));
}

TEST(CausalConv, PerturbingLaterPositionsLeavesEarlierOutputsBitIdentical) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = 2 + rng.below(10), d = 1 + rng.below(4), k = 1 + rng.below(4);
    Tensor x = Tensor::randn({t, d}, rng, 1.0);
    Tensor kernel = Tensor::randn({k, d}, rng, 1.0);
    auto base = values(causal_conv1d(x, kernel));
    const std::size_t p = rng.below(t);
    auto xv = values(x);
    for (std::size_t i = p; i < t; ++i) {
      for (std::size_t c = 0; c < d; ++c) xv[i * d + c] += rng.normal();
    }
    auto moved = values(causal_conv1d(Tensor::from_data({t, d}, xv), kernel));
    for (std::size_t i = 0; i < p * d; ++i) EXPECT_EQ(base[i], moved[i]);
  }
}

TEST(CausalConv, SampleIdsBlockCrossSampleTaps) {
  Tensor x = Tensor::from_data({4, 1}, {1, 2, 3, 4});
  Tensor k = Tensor::from_data({2, 1}, {1, 1});
  const std::vector<std::uint16_t> ids{1, 1, 2, 2};
  EXPECT_EQ(values(causal_conv1d(x, k, ids)), (std::vector<double>{1, 3, 3, 7}));
}

TEST(Rope, PositionZeroIsIdentityAndOneRadian) {
  Rng rng(7);
  Tensor x = Tensor::randn({1, 2, 4}, rng, 1.0);
  EXPECT_EQ(values(rope_apply(x, 1e6, 0)), values(x));

  auto y = values(rope_apply(Tensor::from_data({1, 1, 2}, {1.0, 0.0}), 10000.0, 1));
  EXPECT_DOUBLE_EQ(y[0], std::cos(1.0));
  EXPECT_DOUBLE_EQ(y[1], std::sin(1.0));
}

TEST(Rope, OddHeadDimIsParameterError) {
  try {
    rope_apply(Tensor::zeros({2, 1, 3}), 1e4, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParameter);
  }
}

TEST(Rope, DotProductDependsOnlyOnRelativePosition) {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t hd = 2 * (1 + rng.below(8));
    Tensor q = Tensor::randn({1, 1, hd}, rng, 1.0), k = Tensor::randn({1, 1, hd}, rng, 1.0);
    const std::size_t a = rng.below(100), b = rng.below(100), s = rng.below(1000);
    auto dot = [&](std::size_t pa, std::size_t pb) {
      auto qa = values(rope_apply(q, 10000.0, pa));
      auto kb = values(rope_apply(k, 10000.0, pb));
      double acc = 0.0;
      for (std::size_t i = 0; i < hd; ++i) acc += qa[i] * kb[i];
      return acc;
    };
    EXPECT_NEAR(dot(a, b), dot(a + s, b + s), 1e-9);
  }
}

TEST(Rope, PreservesPairNorms) {
  Rng rng(9);
  Tensor x = Tensor::randn({7, 3, 8}, rng, 1.0);
  auto xv = values(x);
  auto y = values(rope_apply(x, 1e6, 11));
  for (std::size_t i = 0; i < xv.size(); i += 2) {
    EXPECT_NEAR(std::hypot(xv[i], xv[i + 1]), std::hypot(y[i], y[i + 1]), 1e-12);
  }
}

TEST(CrossEntropy, Examples) {
  const std::vector<std::int32_t> targets{0, 3, 2};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({3, 5}), targets).item(), std::log(5.0), 1e-14);

  double prev = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 60.0}) {
    Tensor logits = Tensor::from_data({1, 3}, {0.0, margin, 0.0});
    const std::vector<std::int32_t> t{1};
    const double loss = cross_entropy(logits, t).item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-20);

  const std::vector<std::int32_t> one{1};
  EXPECT_NEAR(cross_entropy(Tensor::from_data({1, 2}, {0.0, std::log(3.0)}), one).item(), -std::log(0.75), 1e-15);
  EXPECT_NEAR(-std::log(0.75), 0.287682, 1e-6);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
  const std::vector<std::int32_t> bad{2};
  try {
    cross_entropy(Tensor::zeros({1, 2}), bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIndex);
  }
}

TEST(CrossEntropy, MaskedSkipsIgnoredRows) {
  Tensor logits = Tensor::from_data({2, 2}, {0.0, std::log(3.0), 5.0, -5.0});
  const std::vector<std::int32_t> t{1, kIgnoreTarget};
  EXPECT_NEAR(masked_cross_entropy(logits, t).item(), -std::log(0.75), 1e-15);
}

TEST(GradCheck, SumHasExactGradient) {
  Rng rng(10);
  Tensor x = rand_leaf({4, 3}, rng);
  EXPECT_LT(grad_check([](const Tensor& t) { return sum(t); }, x), 1e-9);
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(GradCheck, OneLayerModelCrossEntropy) {
  Rng rng(11);
  Tensor x = Tensor::randn({5, 4}, rng, 1.0);
  Tensor w = rand_leaf({4, 6}, rng, 0.5);
  const std::vector<std::int32_t> targets{0, 5, 2, 2, 1};
  EXPECT_LT(grad_check([&](const Tensor& wt) { return cross_entropy(matmul(x, wt), targets); }, w, 1e-5), 1e-5);
}

TEST(GradCheck, DetectsWrongBackwardRule) {
  // square with a deliberately wrong derivative (x instead of 2x)
  auto bad_square = [](const Tensor& x) {
    auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * xd[i];
    return make_op("bad_square", x.shape(), std::move(out), {x}, [xd](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t i = 0; i < in[0].size(); ++i) in[0][i] += g[i] * xd[i];
    });
  };
  Rng rng(12);
  Tensor x = rand_leaf({6}, rng);
  EXPECT_GT(grad_check([&](const Tensor& t) { return sum(bad_square(t)); }, x), 1e-2);
}

TEST(GradCheck, NonFiniteEvaluationIsNumericError) {
  Tensor x = Tensor::from_data({1}, {0.0}, true);
  auto f = [](const Tensor& t) {
    std::vector<double> out{1.0 / t.data()[0]};
    return make_op("recip", {1}, std::move(out), {t}, [](std::span<const double>, std::span<const std::span<double>>) {});
  };
  EXPECT_THROW(grad_check(f, x), Error);
}

// Every differentiable op over 20 random shapes at float64.
class OpGradientSweep : public ::testing::TestWithParam<int> {};

TEST_P(OpGradientSweep, MatchesCentralDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  Rng rng(seed * 7919 + 1);
  const std::size_t t = 1 + rng.below(6), d = 1 + rng.below(5), h = 1 + rng.below(5);
  const double tol = 1e-5;

  {
    Tensor a = rand_leaf({t, d}, rng), b = rand_leaf({d, h}, rng);
    EXPECT_LT(grad_check([&] { return probe(matmul(a, b), seed); }, {a, b}).max_rel_error, tol) << "matmul";
  }
  {
    Tensor x = rand_leaf({t, d + 1}, rng, 2.0);
    EXPECT_LT(grad_check([&] { return probe(softmax(x), seed); }, {x}).max_rel_error, tol) << "softmax";
  }
  {
    Tensor x = rand_leaf({t, d}, rng), g = rand_leaf({d}, rng);
    EXPECT_LT(grad_check([&] { return probe(rmsnorm(x, g, 1e-6), seed); }, {x, g}).max_rel_error, tol) << "rmsnorm";
  }
  {
    Tensor x = rand_leaf({t, d}, rng), wg = rand_leaf({d, h}, rng), wu = rand_leaf({d, h}, rng), wd = rand_leaf({h, d}, rng);
    EXPECT_LT(grad_check([&] { return probe(swiglu_ffn(x, wg, wu, wd), seed); }, {x, wg, wu, wd}).max_rel_error, tol)
        << "swiglu_ffn";
  }
  {
    const std::size_t k = 1 + rng.below(4);
    Tensor x = rand_leaf({t, d}, rng), kernel = rand_leaf({k, d}, rng);
    EXPECT_LT(grad_check([&] { return probe(causal_conv1d(x, kernel), seed); }, {x, kernel}).max_rel_error, tol)
        << "causal_conv1d";
  }
  {
    Tensor x = rand_leaf({t, 1 + rng.below(3), 2 * (1 + rng.below(3))}, rng);
    const std::size_t off = rng.below(50);
    EXPECT_LT(grad_check([&] { return probe(rope_apply(x, 1e4, off), seed); }, {x}).max_rel_error, tol) << "rope_apply";
  }
  {
    const std::size_t heads = 1 + rng.below(3), hd = 1 + rng.below(4), w = 1 + rng.below(4);
    Tensor q = rand_leaf({t, heads, hd}, rng), k = rand_leaf({t, heads, hd}, rng), v = rand_leaf({t, heads, hd}, rng);
    std::vector<KeySpan> spans(t);
    for (std::size_t i = 0; i < t; ++i) {
      spans[i] = {static_cast<std::uint32_t>(i + 1 > w ? i + 1 - w : 0), static_cast<std::uint32_t>(i + 1)};
    }
    EXPECT_LT(grad_check([&] { return probe(attention(q, k, v, spans), seed); }, {q, k, v}).max_rel_error, tol)
        << "attention";
  }
  {
    Tensor table = rand_leaf({h + 2, d}, rng);
    std::vector<TokenId> ids(t);
    for (auto& id : ids) id = static_cast<TokenId>(rng.below(h + 2));
    EXPECT_LT(grad_check([&] { return probe(embedding(table, ids), seed); }, {table}).max_rel_error, tol) << "embedding";
  }
  {
    Tensor logits = rand_leaf({t, h + 1}, rng, 2.0);
    std::vector<std::int32_t> targets(t);
    for (auto& tg : targets) tg = static_cast<std::int32_t>(rng.below(h + 1));
    EXPECT_LT(grad_check([&] { return cross_entropy(logits, targets); }, {logits}).max_rel_error, tol) << "cross_entropy";
    targets[0] = kIgnoreTarget;
    EXPECT_LT(grad_check([&] { return masked_cross_entropy(logits, targets); }, {logits}).max_rel_error, tol)
        << "masked_cross_entropy";
  }
  {
    Tensor a = rand_leaf({t, d}, rng), b = rand_leaf({t, d}, rng);
    EXPECT_LT(grad_check([&] { return probe(silu(add(mul(a, b), scale(a, 0.5))), seed); }, {a, b}).max_rel_error, tol)
        << "elementwise";
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradientSweep, ::testing::Range(0, 20));

TEST(Graph, InputsPrecedeNodesInRecordingOrder) {
  Rng rng(13);
  Tensor a = rand_leaf({3, 3}, rng), b = rand_leaf({3, 3}, rng);
  Tensor y = sum(softmax(add(matmul(a, b), matmul(b, a))));
  auto nodes = graph_nodes(y);
  ASSERT_EQ(nodes.size(), 5u);
  for (const auto& n : nodes) {
    for (const auto& in : n.node_inputs()) EXPECT_LT(in.node_id(), n.node_id());
  }
  EXPECT_EQ(nodes.back().op_name(), "sum");
}

TEST(Graph, ReplayIsBitDeterministic) {
  auto run = [] {
    Rng rng(14);
    Tensor a = rand_leaf({4, 5}, rng), b = rand_leaf({5, 3}, rng);
    const std::vector<std::int32_t> targets{0, 1, 2, 1};
    cross_entropy(matmul(a, b), targets).backward();
    return std::make_pair(std::vector<double>(a.grad().begin(), a.grad().end()),
                          std::vector<double>(b.grad().begin(), b.grad().end()));
  };
  EXPECT_EQ(run(), run());
}

TEST(Graph, NoGradGuardSkipsRecording) {
  Tensor a = Tensor::full({2}, 1.0, true);
  NoGradGuard guard;
  Tensor y = sum(a);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Tensor, IntermediateResultsAreImmutable) {
  Tensor a = Tensor::full({2}, 1.0, true);
  Tensor y = scale(a, 2.0);
  EXPECT_THROW(y.mutable_data(), Error);
}

}  // namespace
}  // namespace m1lab
