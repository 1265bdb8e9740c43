#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "mvaf/blob_io.hpp"
#include "mvaf/grad_check.hpp"
#include "mvaf/ops.hpp"

using namespace mvaf;

namespace {

using T64 = Tensor<double>;

T64 random_tensor(Shape shape, std::uint32_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  T64 t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

std::vector<double> values(Var<double> v) { return {v.value().begin(), v.value().end()}; }

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(T64({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(T64(Shape{0, 3}), DimensionError);
  T64 t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.ensure_grad().size(), 6u);
}

TEST(Matmul, IdentityAndPermutation) {
  Tape<double> tape;
  auto a = tape.constant(T64({2, 2}, {1, 2, 3, 4}));
  auto id = tape.constant(T64({2, 2}, {1, 0, 0, 1}));
  auto swap = tape.constant(T64({2, 2}, {0, 1, 1, 0}));
  EXPECT_EQ(values(matmul(a, id)), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(values(matmul(a, swap)), (std::vector<double>{2, 1, 4, 3}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(T64({2, 3}));
  auto b = tape.constant(T64({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
}

TEST(Matmul, BatchBroadcastMatchesPerBatchProducts) {
  Tape<double> tape;
  auto a = tape.constant(random_tensor({3, 2, 4}, 1));
  auto b = tape.constant(random_tensor({4, 5}, 2));
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t k = 0; k < 3; ++k) {
    auto ck = matmul(slice(a, 0, k, k + 1), b);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(c.value()[k * 10 + i], ck.value()[i]);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  TapeFunction<double> f = [](Tape<double>&, const std::vector<Var<double>>& in) {
    return sum(matmul(in[0], in[1]));
  };
  EXPECT_LT(grad_check<double>(f, {random_tensor({3, 3}, 3), random_tensor({3, 3}, 4)}, 1e-5), 1e-5);
}

TEST(Matmul, ChainOfDepthThreePassesGradCheck) {
  TapeFunction<double> f = [](Tape<double>&, const std::vector<Var<double>>& in) {
    return matmul(matmul(matmul(in[0], in[1]), in[2]), in[3]);
  };
  std::vector<T64> in{random_tensor({2, 3}, 5), random_tensor({3, 4}, 6), random_tensor({4, 2}, 7),
                      random_tensor({2, 3}, 8)};
  EXPECT_LT(grad_check<double>(f, in, 1e-5), 1e-5);
}

TEST(Softmax, ExamplesFromScalarOracle) {
  Tape<double> tape;
  auto two = tape.constant(T64({2}, {0, 0}));
  T64 mask({2}, {0, mask_value<double>()});
  EXPECT_EQ(values(masked_softmax_lastdim(two, &mask)), (std::vector<double>{1, 0}));

  auto four = tape.constant(T64({4}, {0, 0, 0, 0}));
  for (double v : values(masked_softmax_lastdim(four))) EXPECT_DOUBLE_EQ(v, 0.25);

  // Scalar oracle: exp(i) / sum_j exp(j).
  auto three = tape.constant(T64({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  auto y = values(masked_softmax_lastdim(three));
  EXPECT_NEAR(y[0], std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(y[1], std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(y[2], std::exp(3.0) / z, 1e-12);
  EXPECT_NEAR(y[0], 0.0900, 5e-5);
  EXPECT_NEAR(y[1], 0.2447, 5e-5);
  EXPECT_NEAR(y[2], 0.6652, 5e-5);
}

TEST(Softmax, AllMaskedRowNeedsOptIn) {
  Tape<double> tape;
  auto x = tape.constant(T64({2, 2}, {1, 2, 3, 4}));
  T64 mask({2, 2}, {0, 0, mask_value<double>(), mask_value<double>()});
  EXPECT_THROW(masked_softmax_lastdim(x, &mask), ContractError);
  SoftmaxStatus status;
  auto y = values(masked_softmax_lastdim(x, &mask, &status));
  EXPECT_EQ(status.all_masked_rows, 1u);
  EXPECT_EQ(status.row_all_masked, (std::vector<bool>{false, true}));
  EXPECT_EQ(y[2], 0.0);
  EXPECT_EQ(y[3], 0.0);
  EXPECT_NEAR(y[0] + y[1], 1.0, 1e-12);
}

TEST(Softmax, RowsSumToOneAndMaskedEntriesAreExactlyZero) {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> tape;
    auto x = tape.constant(random_tensor({3, 6, 6}, 100 + trial, -30, 30));
    T64 mask({6, 6}, 0.0);
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t c = 0; c < 6; ++c)
        if (rng() % 2) mask.at(r, c) = mask_value<double>();
      mask.at(r, rng() % 6) = 0.0;
    }
    auto y = values(masked_softmax_lastdim(x, &mask));
    for (std::size_t r = 0; r < 18; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 6; ++c) {
        if (is_masked(mask.at(r % 6, c))) EXPECT_EQ(y[r * 6 + c], 0.0);
        s += y[r * 6 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, MaskedGradCheck) {
  T64 mask({3, 4}, {0, mask_value<double>(), 0, 0, mask_value<double>(), 0, 0, 0, 0, 0, 0, mask_value<double>()});
  TapeFunction<double> f = [&mask](Tape<double>&, const std::vector<Var<double>>& in) {
    return masked_softmax_lastdim(in[0], &mask);
  };
  EXPECT_LT(grad_check<double>(f, {random_tensor({2, 3, 4}, 12)}, 1e-5), 1e-5);
}

TEST(LayerNorm, Examples) {
  Tape<double> tape;
  auto g4 = tape.constant(T64({4}, 1.0));
  auto b4 = tape.constant(T64({4}, 0.0));
  auto flat = layer_norm(tape.constant(T64({4}, 1.0)), g4, b4, 1e-5);
  for (double v : values(flat)) EXPECT_DOUBLE_EQ(v, 0.0);

  auto g2 = tape.constant(T64({2}, 1.0));
  auto b2 = tape.constant(T64({2}, 0.0));
  auto y = values(layer_norm(tape.constant(T64({2}, {-1, 1})), g2, b2, 1e-12));
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);

  EXPECT_THROW(layer_norm(tape.constant(T64({3}, 1.0)), g2, b2, 1e-5), DimensionError);
  EXPECT_THROW(layer_norm(tape.constant(T64({2}, 1.0)), g2, b2, 0.0), ContractError);
}

TEST(LayerNorm, GradCheckOnXGammaBeta) {
  TapeFunction<double> f = [](Tape<double>&, const std::vector<Var<double>>& in) {
    return layer_norm(in[0], in[1], in[2], 1e-5);
  };
  EXPECT_LT(grad_check<double>(f, {random_tensor({2, 8}, 13), random_tensor({8}, 14), random_tensor({8}, 15)}, 1e-5),
            1e-5);
}

TEST(Elementwise, ScalarExamples) {
  Tape<double> tape;
  EXPECT_DOUBLE_EQ(sigmoid(tape.constant(T64({1}, 0.0))).value()[0], 0.5);
  auto m = max_over_axis(tape.constant(T64({2, 2}, {1, -2, 0, 5})), 0);
  EXPECT_EQ(values(m), (std::vector<double>{1, 5}));
  // erf oracle evaluated in long double.
  const long double x = 1.0L;
  const long double oracle = 0.5L * x * (1.0L + std::erf(x / std::sqrt(2.0L)));
  EXPECT_NEAR(gelu(tape.constant(T64({1}, 1.0))).value()[0], static_cast<double>(oracle), 1e-12);
  EXPECT_NEAR(static_cast<double>(oracle), 0.841345, 1e-6);
  EXPECT_EQ(relu(tape.constant(T64({2}, {-1, 2}))).value()[1], 2.0);
}

TEST(Elementwise, MaxGradientGoesToFirstTiedIndex) {
  Tape<double> tape;
  auto x = tape.leaf(T64({3, 2}, {4, 1, 4, 7, 2, 7}));
  tape.backward(sum(max_over_axis(x, 0)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 1, 0, 0}));
}

TEST(Elementwise, AxisAndShapeErrors) {
  Tape<double> tape;
  auto x = tape.constant(T64({2, 3}));
  EXPECT_THROW(max_over_axis(x, 2), DimensionError);
  EXPECT_THROW(mean_over_axis(x, 5), DimensionError);
  EXPECT_THROW(add(x, tape.constant(T64({2}))), DimensionError);
  EXPECT_THROW(reshape(x, {4}), DimensionError);
  EXPECT_THROW(slice(x, 1, 2, 2), DimensionError);
  EXPECT_THROW(concat<double>({x, tape.constant(T64({3, 3}))}, 1), DimensionError);
}

TEST(Elementwise, EveryDifferentiableOpPassesGradCheck) {
  const std::vector<std::pair<const char*, TapeFunction<double>>> cases = {
      {"add", [](Tape<double>&, const auto& in) { return add(in[0], in[1]); }},
      {"add_broadcast", [](Tape<double>&, const auto& in) { return add(in[0], reshape(slice(in[1], 0, 0, 1), {4})); }},
      {"sub", [](Tape<double>&, const auto& in) { return sub(in[0], in[1]); }},
      {"mul", [](Tape<double>&, const auto& in) { return mul(in[0], in[1]); }},
      {"mul_broadcast", [](Tape<double>&, const auto& in) { return mul(in[0], reshape(slice(in[1], 0, 1, 2), {4})); }},
      {"scale", [](Tape<double>&, const auto& in) { return scale(in[0], 2.5); }},
      {"gelu", [](Tape<double>&, const auto& in) { return gelu(in[0]); }},
      {"relu", [](Tape<double>&, const auto& in) { return relu(in[0]); }},
      {"sigmoid", [](Tape<double>&, const auto& in) { return sigmoid(in[0]); }},
      {"max_axis0", [](Tape<double>&, const auto& in) { return max_over_axis(in[0], 0); }},
      {"max_axis1", [](Tape<double>&, const auto& in) { return max_over_axis(in[0], 1); }},
      {"mean_axis1", [](Tape<double>&, const auto& in) { return mean_over_axis(in[0], 1); }},
      {"sum", [](Tape<double>&, const auto& in) { return sum(in[0]); }},
      {"reshape", [](Tape<double>&, const auto& in) { return reshape(in[0], {2, 6}); }},
      {"transpose", [](Tape<double>&, const auto& in) { return transpose(in[0]); }},
      {"permute", [](Tape<double>&, const auto& in) { return permute(reshape(in[0], {3, 2, 2}), {1, 2, 0}); }},
      {"concat", [](Tape<double>&, const auto& in) { return concat<double>({in[0], in[1]}, 1); }},
      {"slice", [](Tape<double>&, const auto& in) { return slice(in[0], 1, 1, 3); }},
      {"mask_rows", [](Tape<double>&, const auto& in) { return mask_rows(in[0], {true, false, true}); }},
      {"softmax", [](Tape<double>&, const auto& in) { return masked_softmax_lastdim(in[0]); }},
  };
  // relu and max have kinks; inputs are spaced so no coordinate sits near one.
  T64 a({3, 4}, {0.9, -0.7, 0.3, -0.2, 0.5, 1.1, -1.3, 0.6, -0.4, 0.8, 0.15, -0.95});
  T64 b = random_tensor({3, 4}, 21);
  for (const auto& [name, f] : cases) {
    EXPECT_LT(grad_check<double>(f, {a, b}, 1e-6), 1e-5) << name;
  }
}

TEST(Backward, ExamplesAndContract) {
  {
    Tape<double> tape;
    auto x = tape.leaf(T64({3}, {1, 2, 3}));
    tape.backward(sum(x));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
  }
  {
    Tape<double> tape;
    auto x = tape.leaf(T64({3}, {1, 2, 3}));
    tape.backward(sum(mul(x, x)));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
  }
  {
    Tape<double> tape;
    auto x = tape.leaf(T64({3}, {1, 2, 3}));
    EXPECT_THROW(tape.backward(x), ContractError);
  }
}

TEST(Backward, ParametersAccumulateAndUnreachableStayEmpty) {
  T64 used({2}, {1, 2});
  T64 unused({2}, {3, 4});
  Tape<double> tape;
  auto u = tape.parameter(used);
  tape.parameter(unused);
  tape.backward(sum(scale(u, 3.0)));
  ASSERT_TRUE(used.has_grad());
  EXPECT_EQ(used.grad()[0], 3.0);
  EXPECT_FALSE(unused.has_grad());
}

TEST(Backward, RepeatedBackwardIsBitIdentical) {
  Tape<double> tape;
  auto x = tape.leaf(random_tensor({4, 5}, 31));
  auto w = tape.leaf(random_tensor({5, 3}, 32));
  auto loss = sum(gelu(matmul(x, w)));
  tape.backward(loss);
  std::vector<double> first(w.grad().begin(), w.grad().end());
  tape.backward(loss);
  EXPECT_EQ(first, std::vector<double>(w.grad().begin(), w.grad().end()));
}

TEST(ShapeOps, ConcatOfSlicesReproducesInput) {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tape<double> tape;
    Shape shape{2 + rng() % 3, 3 + rng() % 4, 1 + rng() % 3};
    auto x = tape.constant(random_tensor(shape, 40 + trial));
    const std::size_t axis = rng() % 3;
    const std::size_t cut = 1 + rng() % (shape[axis] > 1 ? shape[axis] - 1 : 1);
    if (cut >= shape[axis]) continue;
    auto joined = concat<double>({slice(x, axis, 0, cut), slice(x, axis, cut, shape[axis])}, axis);
    EXPECT_EQ(joined.shape(), shape);
    EXPECT_EQ(values(joined), values(x));
  }
}

TEST(TensorBlob, RoundTripBothDtypesAndRejectBadMagic) {
  T64 t = random_tensor({2, 3, 4}, 50);
  std::stringstream ss;
  write_tensor(ss, t);
  EXPECT_EQ(read_tensor<double>(ss), t);

  Tensor<float> f = t.cast<float>();
  std::stringstream sf;
  write_tensor(sf, f);
  const std::string bytes = sf.str();
  EXPECT_EQ(bytes.substr(0, 4), "MVTF");
  // magic + version + rank + 3 dims + dtype + 24 floats
  EXPECT_EQ(bytes.size(), 4u + 4 + 4 + 12 + 1 + 24 * 4);
  EXPECT_EQ(static_cast<int>(bytes[4 + 4 + 4 + 12]), 0);
  EXPECT_EQ(read_tensor<float>(sf), f);

  std::stringstream bad("XXXX");
  EXPECT_THROW(read_tensor<double>(bad), FormatError);
}
