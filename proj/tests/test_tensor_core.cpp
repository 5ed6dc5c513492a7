#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "test_support.hpp"

using namespace mhlat;
using testing_support::max_abs_diff;
using testing_support::max_rel_error;
using testing_support::numeric_gradient;
using testing_support::random_matrix;

namespace {

Tensor leaf(RealMatrix v) { return Tensor(std::move(v), true); }
Tensor constant(RealMatrix v) { return Tensor(std::move(v), false); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  std::mt19937_64 rng(1);
  Tape tape = Tape::inference();
  const RealMatrix m = random_matrix(2, 2, rng);
  EXPECT_EQ(matmul(tape, constant(linalg::identity(2)), constant(m)).value(), m);
}

TEST(Matmul, HandExample) {
  Tape tape = Tape::inference();
  Tensor out = matmul(tape, constant({{1, 2}, {3, 4}}), constant({{1}, {1}}));
  EXPECT_EQ(out.value(), (RealMatrix{{3}, {7}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape = Tape::inference();
  try {
    matmul(tape, constant(RealMatrix(1, 3)), constant(RealMatrix(2, 2)));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("1x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("2x2"), std::string::npos) << msg;
  }
}

TEST(Relu, ZeroesNegativesAndZero) {
  Tape tape = Tape::inference();
  EXPECT_EQ(relu(tape, constant({{-1, 0, 2}})).value(), (RealMatrix{{0, 0, 2}}));
  const RealMatrix pos{{0.5, 3.0}, {1e-9, 7.0}};
  EXPECT_EQ(relu(tape, constant(pos)).value(), pos);
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Tape tape;
  Tensor x = leaf({{0.0, 1.0, -1.0}});
  tape.backward(sum(tape, relu(tape, x)));
  EXPECT_EQ(x.grad(), (RealMatrix{{0.0, 1.0, 0.0}}));
}

TEST(RowSoftmax, UniformOnEqualScores) {
  Tape tape = Tape::inference();
  const auto out = row_softmax(tape, constant({{0, 0, 0}})).value();
  for (double v : out.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(RowSoftmax, LargeLogitsDoNotOverflow) {
  Tape tape = Tape::inference();
  const auto out = row_softmax(tape, constant({{1000, 1000}})).value();
  EXPECT_EQ(out(0, 0), 0.5);
  EXPECT_EQ(out(0, 1), 0.5);
}

TEST(RowSoftmax, MaskedClosedForm) {
  Tape tape = Tape::inference();
  const std::vector<std::uint8_t> mask{1, 1, 0};
  const auto out = row_softmax(tape, constant({{1, 2, 3}}), mask).value();
  const double s = std::exp(1.0) / (std::exp(1.0) + std::exp(2.0));
  EXPECT_NEAR(out(0, 0), s, 1e-15);
  EXPECT_NEAR(out(0, 1), 1.0 - s, 1e-15);
  EXPECT_EQ(out(0, 2), 0.0);
}

TEST(RowSoftmax, AllMaskedRowIsAnError) {
  Tape tape = Tape::inference();
  const std::vector<std::uint8_t> mask{0, 0};
  EXPECT_THROW(row_softmax(tape, constant({{1, 2}}), mask), std::domain_error);
}

TEST(RowSoftmax, RowsAreDistributionsOverRandomInstances) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  std::bernoulli_distribution keep(0.6);
  Tape tape = Tape::inference();
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = dim(rng), c = dim(rng);
    std::vector<std::uint8_t> mask(c);
    for (auto& m : mask) m = keep(rng);
    mask[c - 1] = 1;
    const auto out = row_softmax(tape, constant(random_matrix(r, c, rng, -30, 30)), mask).value();
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(out(i, j), 0.0);
        EXPECT_LE(out(i, j), 1.0);
        if (!mask[j]) {
          EXPECT_EQ(out(i, j), 0.0);
        }
        total += out(i, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(Affine, IdentityWeightsReturnInput) {
  std::mt19937_64 rng(3);
  Tape tape = Tape::inference();
  const RealMatrix x = random_matrix(4, 3, rng);
  EXPECT_EQ(affine(tape, constant(x), constant(linalg::identity(3)), constant(RealMatrix(1, 3))).value(),
            x);
}

TEST(Affine, HandExample) {
  Tape tape = Tape::inference();
  EXPECT_EQ(affine(tape, constant({{1, 1}}), constant({{2, 3}}), constant({{1}})).value(),
            (RealMatrix{{6}}));
}

TEST(Affine, ShapeMismatch) {
  Tape tape = Tape::inference();
  EXPECT_THROW(affine(tape, constant(RealMatrix(2, 3)), constant(RealMatrix(2, 2)),
                      constant(RealMatrix(1, 2))),
               ShapeError);
  EXPECT_THROW(affine(tape, constant(RealMatrix(2, 2)), constant(RealMatrix(2, 2)),
                      constant(RealMatrix(1, 3))),
               ShapeError);
}

TEST(ConcatCols, EmptyRightSideLeavesInput) {
  std::mt19937_64 rng(4);
  Tape tape = Tape::inference();
  const RealMatrix a = random_matrix(3, 2, rng);
  EXPECT_EQ(concat_cols(tape, constant(a), constant(RealMatrix(3, 0))).value(), a);
}

TEST(ConcatCols, Interleaves) {
  Tape tape = Tape::inference();
  EXPECT_EQ(concat_cols(tape, constant({{1}, {2}}), constant({{3}, {4}})).value(),
            (RealMatrix{{1, 3}, {2, 4}}));
  EXPECT_THROW(concat_cols(tape, constant(RealMatrix(2, 1)), constant(RealMatrix(3, 1))), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Tensor x = leaf(RealMatrix(2, 3, 0.25));
  tape.backward(sum(tape, x));
  EXPECT_EQ(x.grad(), RealMatrix(2, 3, 1.0));
}

TEST(Backward, SumOfProductGivesTransposeTimesOnes) {
  std::mt19937_64 rng(5);
  const RealMatrix xv = random_matrix(3, 4, rng);
  Tape tape;
  Tensor x = constant(xv);
  Tensor w = leaf(random_matrix(4, 2, rng));
  tape.backward(sum(tape, matmul(tape, x, w)));
  const RealMatrix expected = linalg::matmul(linalg::transpose(xv), RealMatrix(3, 2, 1.0));
  EXPECT_LT(max_abs_diff(w.grad(), expected), 1e-14);
  EXPECT_EQ(x.grad(), RealMatrix(3, 4));
}

TEST(Backward, UnusedParameterKeepsZeroGradient) {
  Tape tape;
  Tensor used = leaf({{2.0}});
  Tensor unused = leaf({{5.0}});
  tape.backward(sum(tape, mul(tape, used, used)));
  EXPECT_EQ(unused.grad(), RealMatrix(1, 1));
  EXPECT_EQ(used.grad()(0, 0), 4.0);
}

TEST(Backward, NonScalarLossIsAnError) {
  Tape tape;
  Tensor x = leaf(RealMatrix(2, 2, 1.0));
  Tensor y = scale(tape, x, 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, DiamondGraphSumsBranches) {
  // f(x) = sum(relu(x)·3 + x⊙x) with x positive, df/dx = 3 + 2x.
  Tape tape;
  Tensor x = leaf({{0.5, 2.0}, {1.5, 4.0}});
  Tensor left = scale(tape, relu(tape, x), 3.0);
  Tensor right = mul(tape, x, x);
  tape.backward(sum(tape, add(tape, left, right)));
  const RealMatrix g = x.grad();
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 3.0 + 2.0 * x.value()[i]);
}

TEST(Backward, ReplaysStrictlyInReverse) {
  Tape tape;
  std::vector<int> order;
  Tensor x = leaf({{1.0}});
  tape.record([&] { order.push_back(0); });
  tape.record([&] { order.push_back(1); });
  tape.record([&] { order.push_back(2); });
  Tensor y = scale(tape, x, 1.0);
  tape.backward(y);
  ASSERT_EQ(order.size(), 3u);
  EXPECT_EQ(order, (std::vector<int>{2, 1, 0}));
}

TEST(Backward, InferenceTapeRecordsNothing) {
  Tape tape = Tape::inference();
  Tensor x = leaf({{1.0, 2.0}});
  Tensor y = sum(tape, relu(tape, x));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteDiff, QuadraticIsNearlyExact) {
  ParamStore params;
  Tensor theta = params.add("theta", {{0.7, -1.3, 2.5}}, ParamKind::weight, ParamScope::head);
  const auto rep = finite_diff_check(
      params, {"theta"}, [&](Tape& tape) { return sum(tape, mul(tape, theta, theta)); }, 1e-5);
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(FiniteDiff, ZeroFunctionHasZeroError) {
  ParamStore params;
  Tensor theta = params.add("theta", {{0.7, -1.3}}, ParamKind::weight, ParamScope::head);
  const auto rep = finite_diff_check(
      params, {"theta"}, [&](Tape& tape) { return scale(tape, sum(tape, theta), 0.0); }, 1e-5);
  EXPECT_EQ(rep.max_rel_error, 0.0);
}

TEST(FiniteDiff, RejectsEpsOutsideRangeAndNonFiniteObjective) {
  ParamStore params;
  Tensor theta = params.add("theta", {{1.0}}, ParamKind::weight, ParamScope::head);
  auto f = [&](Tape& tape) { return sum(tape, theta); };
  EXPECT_THROW(finite_diff_check(params, {"theta"}, f, 1e-2), ConfigError);
  EXPECT_THROW(finite_diff_check(params, {"theta"}, f, 1e-9), ConfigError);
  auto bad = [&](Tape& tape) {
    return scale(tape, sum(tape, theta), std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(finite_diff_check(params, {"theta"}, bad, 1e-5), NumericError);
}

TEST(FiniteDiff, DetectsTamperedGradient) {
  ParamStore params;
  Tensor theta = params.add("theta", {{0.3, 0.9}}, ParamKind::weight, ParamScope::head);
  const auto rep = finite_diff_check(
      params, {"theta"}, [&](Tape& tape) { return sum(tape, mul(tape, theta, theta)); }, 1e-5,
      [](ParamStore& p) { p.get("theta").mutable_grad()[0] += 0.05; });
  EXPECT_GT(rep.max_rel_error, 1e-2);
  EXPECT_EQ(rep.worst_param, "theta");
  EXPECT_EQ(rep.worst_index, 0u);
}

// ---- Per-op gradient property over random instances ---------------------------------

namespace {

using OpFn = std::function<Tensor(Tape&, const Tensor&)>;

// Contracts op(x) with a fixed random weight matrix to obtain a scalar, then
// compares the autodiff gradient with central differences.
double op_gradient_error(const OpFn& op, const RealMatrix& x0, std::mt19937_64& rng) {
  RealMatrix probe_shape;
  {
    Tape t = Tape::inference();
    probe_shape = op(t, constant(x0)).value();
  }
  const RealMatrix weights = random_matrix(probe_shape.rows(), probe_shape.cols(), rng);
  auto scalar = [&](Tape& tape, const Tensor& x) {
    return sum(tape, mul(tape, op(tape, x), constant(weights)));
  };
  Tape tape;
  Tensor x = leaf(x0);
  tape.backward(scalar(tape, x));
  const RealMatrix numeric = numeric_gradient(
      [&](const RealMatrix& v) {
        Tape t = Tape::inference();
        return scalar(t, constant(v)).item();
      },
      x0);
  return max_rel_error(x.grad(), numeric);
}

RealMatrix off_kink(RealMatrix m) {
  for (auto& v : m.data())
    if (std::abs(v) < 1e-3) v = v < 0 ? -1e-3 : 1e-3;
  return m;
}

}  // namespace

TEST(OpGradients, MatchFiniteDifferencesOverRandomInstances) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  double worst_smooth = 0.0;
  double worst_relu = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = dim(rng), c = dim(rng), k = dim(rng);
    const RealMatrix x = random_matrix(r, c, rng);
    const Tensor other = constant(random_matrix(c, k, rng));
    const Tensor other_nt = constant(random_matrix(k, c, rng));
    const Tensor same = constant(random_matrix(r, c, rng));
    const Tensor right = constant(random_matrix(r, k, rng));
    const Tensor below = constant(random_matrix(k, c, rng));
    const Tensor bias_row = constant(random_matrix(1, k, rng));
    const Tensor gain = constant(random_matrix(1, c, rng, 0.5, 1.5));
    const Tensor shift = constant(random_matrix(1, c, rng));
    std::vector<std::size_t> idx(k);
    for (auto& i : idx) i = std::uniform_int_distribution<std::size_t>(0, r - 1)(rng);
    std::vector<std::uint8_t> mask(c, 1);
    if (c > 1) mask[0] = 0;
    std::vector<std::uint8_t> targets(r * c);
    for (auto& t : targets) t = std::bernoulli_distribution(0.5)(rng);

    const std::vector<OpFn> smooth = {
        [&](Tape& t, const Tensor& a) { return matmul(t, a, other); },
        [&](Tape& t, const Tensor& a) { return matmul(t, other_nt, transpose(t, a)); },
        [&](Tape& t, const Tensor& a) { return matmul_nt(t, a, other_nt); },
        [&](Tape& t, const Tensor& a) { return matmul_nt(t, other_nt, a); },
        [&](Tape& t, const Tensor& a) { return transpose(t, a); },
        [&](Tape& t, const Tensor& a) { return row_softmax(t, a); },
        [&](Tape& t, const Tensor& a) { return row_softmax(t, a, mask); },
        [&](Tape& t, const Tensor& a) { return affine(t, a, other_nt, bias_row); },
        [&](Tape& t, const Tensor& a) { return affine(t, same, a, constant(RealMatrix(1, r))); },
        [&](Tape& t, const Tensor& a) { return concat_cols(t, a, right); },
        [&](Tape& t, const Tensor& a) { return concat_rows(t, below, a); },
        [&](Tape& t, const Tensor& a) { return take_rows(t, a, idx); },
        [&](Tape& t, const Tensor& a) { return add(t, a, same); },
        [&](Tape& t, const Tensor& a) { return scale(t, a, -1.7); },
        [&](Tape& t, const Tensor& a) { return mul(t, a, a); },
        [&](Tape& t, const Tensor& a) { return sum(t, a); },
        [&](Tape& t, const Tensor& a) { return layer_norm(t, a, gain, shift); },
        [&](Tape& t, const Tensor& a) { return row_dot(t, a, same); },
        [&](Tape& t, const Tensor& a) {
          return bce_with_logits(t, a, std::span<const std::uint8_t>(targets));
        },
    };
    for (std::size_t i = 0; i < smooth.size(); ++i) {
      // Layer norm over one or two features is (nearly) constant, so its true
      // gradient is ~0 and relative error measures only roundoff.
      if (i == 16 && c <= 2) continue;
      const double err = op_gradient_error(smooth[i], x, rng);
      EXPECT_LT(err, 1e-5) << "op #" << i << " on " << r << "x" << c;
      worst_smooth = std::max(worst_smooth, err);
    }
    worst_relu = std::max(worst_relu, op_gradient_error([](Tape& t, const Tensor& a) { return relu(t, a); },
                                                        off_kink(x), rng));
  }
  EXPECT_LT(worst_smooth, 1e-5);
  EXPECT_LT(worst_relu, 1e-3);
}

TEST(OpGradients, ParameterGradientsOfLayerNormAndAffine) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore params;
    const Tensor x = constant(random_matrix(3, 4, rng));
    Tensor w = params.add("w", random_matrix(5, 4, rng), ParamKind::weight, ParamScope::head);
    Tensor b = params.add("b", random_matrix(1, 5, rng), ParamKind::bias, ParamScope::head);
    Tensor g = params.add("g", random_matrix(1, 5, rng, 0.5, 1.5), ParamKind::weight, ParamScope::head);
    Tensor s = params.add("s", random_matrix(1, 5, rng), ParamKind::bias, ParamScope::head);
    const RealMatrix weights = random_matrix(3, 5, rng);
    const auto rep = finite_diff_check(
        params, {"w", "b", "g", "s"},
        [&](Tape& t) {
          return sum(t, mul(t, layer_norm(t, affine(t, x, w, b), g, s), constant(weights)));
        },
        1e-5);
    EXPECT_LT(rep.max_rel_error, 1e-5) << rep.worst_param;
  }
}

TEST(BceWithLogits, StableForLargeLogits) {
  Tape tape = Tape::inference();
  const std::vector<std::uint8_t> y{1, 0};
  const double loss = bce_with_logits(tape, constant({{800.0}, {-800.0}}), y).item();
  EXPECT_EQ(loss, 0.0);
  const double bad = bce_with_logits(tape, constant({{-800.0}, {800.0}}), y).item();
  EXPECT_NEAR(bad, 1600.0, 1e-9);
}
