#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hamobe/autodiff.hpp"
#include "hamobe/error.hpp"
#include "hamobe/grad_check.hpp"
#include "op_cases.hpp"
#include "support.hpp"

using namespace hamobe;
using hamobe::test::expect_error;
using hamobe::test::OpCase;
using hamobe::test::op_cases;
using hamobe::test::random_tensor;
using hamobe::test::weighted_sum;

namespace {

// Loop reference for single-head-per-slice scaled dot-product attention.
std::vector<double> attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const std::size_t nq = q.dim(0), nk = k.dim(0), D = q.dim(1), hd = D / heads;
  std::vector<double> out(nq * D, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> s(nk);
      double mx = -1e300;
      for (std::size_t j = 0; j < nk; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c) dot += q.at({i, h * hd + c}) * k.at({j, h * hd + c});
        s[j] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < nk; ++j)
        for (std::size_t c = 0; c < hd; ++c) out[i * D + h * hd + c] += s[j] / z * v.at({j, h * hd + c});
    }
  }
  return out;
}

}  // namespace

TEST(Tensor, RejectsEmptyExtents) {
  expect_error([] { Tensor t({2, 0}); }, ErrorKind::Shape);
  expect_error([] { Tensor t({2, 2}, std::vector<double>(3)); }, ErrorKind::Shape);
}

TEST(Tensor, RowMajorIndexing) {
  Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at({1, 2}), 5.0);
  EXPECT_EQ(t.at({0, 1}), 1.0);
  EXPECT_EQ(t.reshaped({3, 2}).at({2, 0}), 4.0);
}

TEST(Softmax, ZeroPairIsUniform) {
  const Tensor y = softmax_value(Tensor({2}, {0.0, 0.0}), 0);
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], 0.5);
}

TEST(Softmax, ShiftInvariant) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({4, 5}, rng, -5, 5);
  Tensor shifted = x;
  for (auto& v : shifted.data()) v += 7.25;
  const Tensor a = softmax_value(x, 1), b = softmax_value(shifted, 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Softmax, LargeGapValue) {
  const Tensor y = softmax_value(Tensor({2}, {10.0, 0.0}), 0);
  EXPECT_NEAR(y[0], 0.9999546, 1e-6);
  EXPECT_NEAR(y[1], 0.0000454, 1e-6);
  // exp-normalize oracle
  EXPECT_NEAR(y[0], 1.0 / (1.0 + std::exp(-10.0)), 1e-15);
}

TEST(Softmax, SlicesSumToOneForLargeInputs) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({3, 6, 4}, rng, -50, 50);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Tensor y = softmax_value(x, axis);
      const std::size_t len = x.dim(axis);
      std::size_t inner = 1;
      for (std::size_t a = axis + 1; a < 3; ++a) inner *= x.dim(a);
      const std::size_t outer = x.size() / (len * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          double total = 0.0;
          for (std::size_t l = 0; l < len; ++l) {
            const double v = y[(o * len + l) * inner + in];
            EXPECT_GE(v, 0.0);
            total += v;
          }
          EXPECT_NEAR(total, 1.0, 1e-12);
        }
      }
    }
  }
}

TEST(Softmax, AxisOutOfRange) {
  Tape tape;
  expect_error([&] { softmax(tape.leaf(Tensor({2, 2})), 2); }, ErrorKind::Shape);
}

TEST(Gelu, ScalarOracle) {
  EXPECT_NEAR(gelu_value(10.0), 10.0, 1e-4);
  EXPECT_EQ(gelu_value(0.0), 0.0);
  EXPECT_NEAR(gelu_value(1.0), 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-15);
}

TEST(Attention, ZeroValueProjectionGivesZero) {
  std::mt19937_64 rng(5);
  Tape tape;
  const std::size_t D = 4;
  auto leaf = [&](Shape s) { return tape.leaf(random_tensor(std::move(s), rng)); };
  MhsaWeights w{leaf({D, D}), leaf({D}), leaf({D, D}), leaf({D}),
                tape.leaf(Tensor({D, D}, 0.0)), tape.leaf(Tensor({D}, 0.0)), leaf({D, D}), tape.leaf(Tensor({D}, 0.0))};
  Var x = leaf({3, D});
  const Tensor out = mhsa_forward(x, x, x, 2, w).value();
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, SingleKeyReturnsValue) {
  std::mt19937_64 rng(6);
  Tape tape;
  Var q = tape.leaf(random_tensor({2, 4}, rng));
  Var k = tape.leaf(random_tensor({1, 4}, rng));
  Var v = tape.leaf(random_tensor({1, 4}, rng));
  const Tensor out = attention(q, k, v, 2).value();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at({i, c}), v.value().at({0, c}), 1e-15);
}

TEST(Attention, MatchesLoopOracle) {
  std::mt19937_64 rng(7);
  for (std::size_t heads : {1u, 2u}) {
    Tape tape;
    const Tensor q = random_tensor({2, 4}, rng), k = random_tensor({2, 4}, rng), v = random_tensor({2, 4}, rng);
    const Tensor out = attention(tape.leaf(q), tape.leaf(k), tape.leaf(v), heads).value();
    const auto ref = attention_oracle(q, k, v, heads);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-10);
  }
}

TEST(Attention, KeyValuePermutationInvariant) {
  std::mt19937_64 rng(8);
  Tape tape;
  const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({4, 4}, rng), v = random_tensor({4, 4}, rng);
  Tensor kp(k.shape()), vp(v.shape());
  const std::size_t perm[] = {2, 0, 3, 1};
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t c = 0; c < 4; ++c) {
      kp.at({j, c}) = k.at({perm[j], c});
      vp.at({j, c}) = v.at({perm[j], c});
    }
  const Tensor a = attention(tape.leaf(q), tape.leaf(k), tape.leaf(v), 2).value();
  const Tensor b = attention(tape.leaf(q), tape.leaf(kp), tape.leaf(vp), 2).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Attention, HeadsMustDivideWidth) {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 6}, 0.1));
  expect_error([&] { attention(x, x, x, 4); }, ErrorKind::Config);
}

TEST(Attention, KeyValueCountsMustAgree) {
  Tape tape;
  expect_error([&] { attention(tape.leaf(Tensor({2, 4})), tape.leaf(Tensor({3, 4})), tape.leaf(Tensor({2, 4})), 1); },
               ErrorKind::Shape);
}

TEST(MixExperts, HandConvexCombination) {
  Tape tape;
  Var f1 = tape.leaf(Tensor({1, 1, 2}, {4.0, 0.0}));
  Var f2 = tape.leaf(Tensor({1, 1, 2}, {0.0, 4.0}));
  Var w = tape.leaf(Tensor({1, 1, 2, 1}, {0.25, 0.75}));
  const Var experts[] = {f1, f2};
  const Tensor out = mix_experts(experts, w, 0).value();
  EXPECT_EQ(out[0], 1.0);
  EXPECT_EQ(out[1], 3.0);
}

TEST(Tape, PureOpsAreBitIdentical) {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 4}, rng);
  auto run = [&] {
    Tape tape;
    return softmax(gelu(matmul(tape.leaf(x), tape.leaf(w))), 1).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, SumIsLinear) {
  std::mt19937_64 rng(1);
  const auto r = grad_check([](Tape&, Var x) { return sum(x); }, random_tensor({5}, rng), 1e-5, 1e-10);
  EXPECT_TRUE(r.passed);
  for (double g : r.analytic.data()) EXPECT_EQ(g, 1.0);
  for (double g : r.numeric.data()) EXPECT_NEAR(g, 1.0, 1e-10);
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  std::mt19937_64 rng(2);
  const auto r = grad_check([](Tape&, Var x) { return sum(softmax(x, 0)); }, random_tensor({6}, rng), 1e-5, 1e-4);
  for (double g : r.analytic.data()) EXPECT_NEAR(g, 0.0, 1e-8);
  for (double g : r.numeric.data()) EXPECT_NEAR(g, 0.0, 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A custom node whose backward is deliberately off by a factor of two.
  const ScalarFn fn = [](Tape& tape, Var x) {
    Tensor y({1}, {0.0});
    for (double v : x.value().data()) y[0] += v * v;
    const Var parents[] = {x};
    return tape.record(y, parents, [x](Tape& t, const Tensor& g, const Tensor&) {
      if (auto* gx = t.grad_slot(x))
        for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[0] * 4.0 * x.value()[i];
    });
  };
  const auto r = grad_check(fn, Tensor({3}, {0.5, -1.0, 2.0}), 1e-6, 1e-4);
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 0.5, 1e-6);
}

TEST(GradCheck, NonFiniteValueReportsCoordinate) {
  const ScalarFn fn = [](Tape&, Var x) { return sum(sqrt(x)); };
  try {
    grad_check(fn, Tensor({3}, {1.0, 1e-9, 1.0}), 1e-6, 1e-4);
    ADD_FAILURE() << "expected numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos) << e.what();
  }
}

// Every differentiable op against central differences at 100 random points.
class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const OpCase& c = GetParam();
  std::mt19937_64 rng(std::hash<std::string>{}(c.name));
  for (int point = 0; point < 100; ++point) {
    const auto r = grad_check(c.fn, random_tensor(c.input, rng, c.lo, c.hi), 1e-6, 1e-5);
    ASSERT_TRUE(r.passed) << c.name << " point " << point << " max rel error " << r.max_rel_error << " at "
                          << r.worst_index;
  }
}


INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(op_cases()),
                         [](const ::testing::TestParamInfo<OpCase>& info) { return info.param.name; });
