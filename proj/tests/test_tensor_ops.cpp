#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "neurocell/ops.hpp"
#include "test_support.hpp"

using namespace neurocell;
using neurocell::testing::op_gradient_error;
using neurocell::testing::random_tensor;

namespace {

constexpr int kSeeds = 20;

Tape<double> no_grad() { return Tape<double>::no_grad(); }

// Direct-summation reference for conv2d on one CxHxW sample.
Tensor<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                            std::size_t stride, std::size_t pad) {
  const std::size_t c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t c_out = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor<double> y(Shape{c_out, oh, ow});
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = b.defined() ? b[o] : 0.0;
        for (std::size_t c = 0; c < c_in; ++c)
          for (std::size_t p = 0; p < kh; ++p)
            for (std::size_t q = 0; q < kw; ++q) {
              const long r = static_cast<long>(i * stride + p) - static_cast<long>(pad);
              const long s = static_cast<long>(j * stride + q) - static_cast<long>(pad);
              if (r < 0 || s < 0 || r >= static_cast<long>(h) || s >= static_cast<long>(wd)) continue;
              acc += x[(c * h + r) * wd + s] * w[((o * c_in + c) * kh + p) * kw + q];
            }
        y[(o * oh + i) * ow + j] = acc;
      }
  return y;
}

// Scatter reference for the transposed convolution.
Tensor<double> naive_conv_transpose(const Tensor<double>& x, const Tensor<double>& w,
                                    std::size_t stride) {
  const std::size_t c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t c_out = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h - 1) * stride + kh, ow = (wd - 1) * stride + kw;
  Tensor<double> y(Shape{c_out, oh, ow});
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < wd; ++j)
        for (std::size_t o = 0; o < c_out; ++o)
          for (std::size_t p = 0; p < kh; ++p)
            for (std::size_t q = 0; q < kw; ++q)
              y[(o * oh + i * stride + p) * ow + j * stride + q] +=
                  x[(c * h + i) * wd + j] * w[((c * c_out + o) * kh + p) * kw + q];
  return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST(Conv2d, TwoByTwoDiagonalKernel) {
  auto tape = no_grad();
  Tensor<double> x({1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> w({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor<double> b({1}, {0});
  Tensor<double> y = ops::conv2d(tape, x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 5.0);
}

TEST(Conv2d, IdentityKernelIsIdentity) {
  Rng rng(3);
  auto tape = no_grad();
  Tensor<double> x = random_tensor({3, 5, 7}, rng);
  Tensor<double> w({1, 1, 1, 1}, {1});
  for (std::size_t c = 0; c < 3; ++c) {
    Tensor<double> plane({1, 5, 7}, std::vector<double>(x.data().begin() + c * 35, x.data().begin() + (c + 1) * 35));
    Tensor<double> y = ops::conv2d(tape, plane, w, Tensor<double>({1}, {0}), 1, 0);
    EXPECT_EQ(y.values(), plane.values());
  }
}

TEST(Conv2d, MatchesDirectSummation) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(seed);
    const std::size_t stride = 1 + seed % 2, pad = seed % 3;
    Tensor<double> x = random_tensor({2, 7, 6}, rng);
    Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
    Tensor<double> b = random_tensor({3}, rng);
    auto tape = no_grad();
    EXPECT_LT(max_abs_diff(ops::conv2d(tape, x, w, b, stride, pad), naive_conv2d(x, w, b, stride, pad)), 1e-12);
  }
}

TEST(Conv2d, BatchedMatchesPerSample) {
  Rng rng(11);
  Tensor<double> x = random_tensor({3, 2, 6, 6}, rng);
  Tensor<double> w = random_tensor({4, 2, 3, 3}, rng);
  Tensor<double> b = random_tensor({4}, rng);
  auto tape = no_grad();
  Tensor<double> y = ops::conv2d(tape, x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{3, 4, 6, 6}));
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor<double> xs({2, 6, 6}, std::vector<double>(x.data().begin() + s * 72, x.data().begin() + (s + 1) * 72));
    Tensor<double> ys = naive_conv2d(xs, w, b, 1, 1);
    for (std::size_t i = 0; i < ys.size(); ++i) EXPECT_NEAR(y[s * 144 + i], ys[i], 1e-12);
  }
}

TEST(Conv2d, ShapeErrorsNameTheAxes) {
  auto tape = no_grad();
  Tensor<double> x({3, 4, 4});
  Tensor<double> w({2, 2, 3, 3});
  try {
    ops::conv2d(tape, x, w, Tensor<double>({2}), 1, 0);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("channel axis C=3"), std::string::npos);
  }
  EXPECT_THROW(ops::conv2d(tape, Tensor<double>({2, 2, 2}), w, Tensor<double>({2}), 1, 0), DimensionError);
  EXPECT_THROW(ops::conv2d(tape, Tensor<double>({2, 4, 4}), w, Tensor<double>({3}), 1, 0), DimensionError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(100 + seed);
    std::vector<Tensor<double>> in = {random_tensor({2, 8, 8}, rng), random_tensor({4, 2, 3, 3}, rng),
                                      random_tensor({4}, rng)};
    const std::size_t stride = 1 + seed % 2, pad = seed % 2;
    const double err = op_gradient_error(
        [&](Tape<double>& t, std::vector<Tensor<double>>& v) { return ops::conv2d(t, v[0], v[1], v[2], stride, pad); },
        in, rng);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

TEST(ConvTranspose2d, ScatterExample) {
  auto tape = no_grad();
  Tensor<double> y = ops::conv_transpose2d(tape, Tensor<double>({1, 1, 1}, {5}),
                                           Tensor<double>({1, 1, 2, 2}, {1, 0, 0, 1}), Tensor<double>({1}, {0}), 1);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(y.values(), (std::vector<double>{5, 0, 0, 5}));
}

TEST(ConvTranspose2d, UnitKernelIsIdentity) {
  Rng rng(5);
  auto tape = no_grad();
  Tensor<double> x = random_tensor({1, 4, 6}, rng);
  Tensor<double> y = ops::conv_transpose2d(tape, x, Tensor<double>({1, 1, 1, 1}, {1}), Tensor<double>({1}, {0}), 1);
  EXPECT_EQ(y.values(), x.values());
}

TEST(ConvTranspose2d, MatchesScatterReference) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(200 + seed);
    const std::size_t stride = 1 + seed % 3, k = 2 + seed % 2;
    Tensor<double> x = random_tensor({3, 4, 5}, rng);
    Tensor<double> w = random_tensor({3, 2, k, k}, rng);
    auto tape = no_grad();
    EXPECT_LT(max_abs_diff(ops::conv_transpose2d(tape, x, w, Tensor<double>(), stride), naive_conv_transpose(x, w, stride)),
              1e-12);
  }
}

TEST(ConvTranspose2d, IsAdjointOfConv2d) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(300 + seed);
    const std::size_t stride = 1 + seed % 2, k = 2 + seed % 2;
    // Choose H so that (H - k) is a multiple of stride; then conv and its
    // transpose map between the same two spaces.
    const std::size_t h = k + 3 * stride, w = k + 2 * stride;
    Tensor<double> x = random_tensor({2, h, w}, rng);
    Tensor<double> kernel = random_tensor({3, 2, k, k}, rng);
    auto tape = no_grad();
    Tensor<double> cx = ops::conv2d(tape, x, kernel, Tensor<double>(), stride, 0);
    Tensor<double> y = random_tensor(cx.shape(), rng);
    Tensor<double> cty = ops::conv_transpose2d(tape, y, kernel, Tensor<double>(), stride);
    ASSERT_EQ(cty.shape(), x.shape());
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * cty[i];
    EXPECT_NEAR(lhs, rhs, 1e-9);
  }
}

TEST(ConvTranspose2d, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(400 + seed);
    std::vector<Tensor<double>> in = {random_tensor({3, 4, 4}, rng), random_tensor({3, 2, 2, 2}, rng),
                                      random_tensor({2}, rng)};
    const double err = op_gradient_error(
        [](Tape<double>& t, std::vector<Tensor<double>>& v) { return ops::conv_transpose2d(t, v[0], v[1], v[2], 2); },
        in, rng);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

TEST(ConvTranspose2d, ChannelMismatchIsDimensionError) {
  auto tape = no_grad();
  EXPECT_THROW(ops::conv_transpose2d(tape, Tensor<double>({2, 3, 3}), Tensor<double>({3, 1, 2, 2}), Tensor<double>(), 2),
               DimensionError);
}

TEST(MaxPool2d, PicksWindowMaximum) {
  auto tape = no_grad();
  Tensor<double> y = ops::maxpool2d(tape, Tensor<double>({1, 2, 2}, {1, 2, 3, 4}), 2);
  EXPECT_EQ(y.values(), std::vector<double>{4});
}

TEST(MaxPool2d, ConstantStaysConstant) {
  auto tape = no_grad();
  Tensor<double> y = ops::maxpool2d(tape, Tensor<double>({2, 4, 6}, 0.25), 2);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 0.25);
}

TEST(MaxPool2d, TiesRouteGradientToFirstMaximum) {
  Tensor<double> x({1, 2, 2}, {7, 7, 7, 7}, true);
  Tape<double> tape;
  Tensor<double> loss = ops::sum(tape, ops::maxpool2d(tape, x, 2));
  tape.backward(loss);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPool2d, RejectsIndivisibleExtent) {
  auto tape = no_grad();
  EXPECT_THROW(ops::maxpool2d(tape, Tensor<double>({1, 3, 4}), 2), DimensionError);
}

TEST(MaxPool2d, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(500 + seed);
    std::vector<Tensor<double>> in = {random_tensor({1, 4, 4}, rng)};
    const double err = op_gradient_error(
        [](Tape<double>& t, std::vector<Tensor<double>>& v) { return ops::maxpool2d(t, v[0], 2); }, in, rng);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

TEST(AvgPool3x3, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(550 + seed);
    std::vector<Tensor<double>> in = {random_tensor({2, 2, 5, 4}, rng)};
    const double err = op_gradient_error(
        [](Tape<double>& t, std::vector<Tensor<double>>& v) { return ops::avgpool3x3(t, v[0]); }, in, rng);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

TEST(AvgPool3x3, InteriorIsNeighbourhoodMean) {
  auto tape = no_grad();
  std::vector<double> v(9);
  std::iota(v.begin(), v.end(), 1.0);
  Tensor<double> y = ops::avgpool3x3(tape, Tensor<double>({1, 3, 3}, v));
  EXPECT_DOUBLE_EQ(y[4], 5.0);
  EXPECT_DOUBLE_EQ(y[0], (1 + 2 + 4 + 5) / 9.0);
}

TEST(GlobalAvgPool, GradientMatchesFiniteDifferences) {
  Rng rng(600);
  std::vector<Tensor<double>> in = {random_tensor({2, 3, 4, 4}, rng)};
  const double err = op_gradient_error(
      [](Tape<double>& t, std::vector<Tensor<double>>& v) { return ops::global_avg_pool(t, v[0]); }, in, rng);
  EXPECT_LE(err, 1e-4);
}

TEST(Dense, IdentityWeight) {
  auto tape = no_grad();
  Tensor<double> x({3}, {0.5, -2, 7});
  Tensor<double> w({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(ops::dense(tape, x, w, Tensor<double>({3})).values(), x.values());
}

TEST(Dense, Arithmetic) {
  auto tape = no_grad();
  Tensor<double> y = ops::dense(tape, Tensor<double>({2}, {2, 3}), Tensor<double>({1, 2}, {1, 1}), Tensor<double>({1}, {1}));
  EXPECT_EQ(y.values(), std::vector<double>{6});
}

TEST(Dense, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(700 + seed);
    std::vector<Tensor<double>> in = {random_tensor({3, 5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng)};
    const double err = op_gradient_error(
        [](Tape<double>& t, std::vector<Tensor<double>>& v) { return ops::dense(t, v[0], v[1], v[2]); }, in, rng);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

TEST(Dense, ShapeMismatch) {
  auto tape = no_grad();
  EXPECT_THROW(ops::dense(tape, Tensor<double>({3}), Tensor<double>({2, 4}), Tensor<double>({2})), DimensionError);
}

TEST(Activations, SoftmaxOfZerosIsUniform) {
  auto tape = no_grad();
  Tensor<double> y = ops::softmax(tape, Tensor<double>({3}, {0, 0, 0}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Activations, Relu) {
  auto tape = no_grad();
  EXPECT_EQ(ops::relu(tape, Tensor<double>({2}, {-1, 2})).values(), (std::vector<double>{0, 2}));
}

TEST(Activations, SoftmaxShiftInvariance) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(800 + seed);
    Tensor<double> x = random_tensor({4, 5}, rng, -5, 5);
    const double c = rng.uniform(-50, 50);
    Tensor<double> shifted = x.clone();
    for (double& v : shifted.data()) v += c;
    auto tape = no_grad();
    Tensor<double> a = ops::softmax(tape, x), b = ops::softmax(tape, shifted);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    for (std::size_t r = 0; r < 4; ++r) {
      double row = 0.0;
      for (std::size_t j = 0; j < 5; ++j) row += a[r * 5 + j];
      EXPECT_NEAR(row, 1.0, 1e-9);
    }
  }
}

TEST(Activations, SigmoidRange) {
  Rng rng(9);
  auto tape = no_grad();
  Tensor<double> y = ops::sigmoid(tape, random_tensor({100}, rng, -20, 20));
  for (double v : y.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Activations, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    for (ops::Activation kind : {ops::Activation::Relu, ops::Activation::Sigmoid, ops::Activation::Softmax}) {
      Rng rng(900 + seed);
      std::vector<Tensor<double>> in = {random_tensor({3, 6}, rng, -3, 3)};
      const double err = op_gradient_error(
          [kind](Tape<double>& t, std::vector<Tensor<double>>& v) { return ops::activate(t, v[0], kind); }, in, rng);
      EXPECT_LE(err, 1e-4) << ops::activation_name(kind) << " seed " << seed;
    }
  }
}

TEST(ElementwiseAndConcat, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1000 + seed);
    std::vector<Tensor<double>> in = {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng),
                                      random_tensor({2, 1, 3, 3}, rng)};
    EXPECT_LE(op_gradient_error([](Tape<double>& t, std::vector<Tensor<double>>& v) { return ops::add(t, v[0], v[1]); },
                                in, rng),
              1e-4);
    EXPECT_LE(op_gradient_error([](Tape<double>& t, std::vector<Tensor<double>>& v) { return ops::mul(t, v[0], v[1]); },
                                in, rng),
              1e-4);
    EXPECT_LE(op_gradient_error(
                  [](Tape<double>& t, std::vector<Tensor<double>>& v) {
                    return ops::concat_channels(t, {v[0], v[2], v[1]});
                  },
                  in, rng),
              1e-4);
  }
}

TEST(Concat, RejectsSpatialMismatch) {
  auto tape = no_grad();
  EXPECT_THROW(ops::concat_channels(tape, {Tensor<double>({1, 2, 2}), Tensor<double>({1, 2, 3})}), DimensionError);
}

class BatchNormTest : public ::testing::Test {
 protected:
  static double channel_stat(const Tensor<double>& y, std::size_t c, bool variance) {
    const std::size_t b = y.dim(0), ch = y.dim(1), plane = y.dim(2) * y.dim(3);
    double mean = 0.0;
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t i = 0; i < plane; ++i) mean += y[(s * ch + c) * plane + i];
    mean /= static_cast<double>(b * plane);
    if (!variance) return mean;
    double var = 0.0;
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t i = 0; i < plane; ++i) var += std::pow(y[(s * ch + c) * plane + i] - mean, 2);
    return var / static_cast<double>(b * plane);
  }
};

TEST_F(BatchNormTest, TrainModeStandardizes) {
  Rng rng(12);
  Tensor<double> x = random_tensor({4, 3, 5, 5}, rng, -3, 7);
  ops::BatchNormState<double> state(3);
  state.epsilon = 0.0;
  auto tape = no_grad();
  Tensor<double> y = ops::batchnorm2d(tape, x, Tensor<double>({3}, 1.0), Tensor<double>({3}, 0.0), state, ops::Mode::Train);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(channel_stat(y, c, false), 0.0, 1e-6);
    EXPECT_NEAR(channel_stat(y, c, true), 1.0, 1e-6);
  }
}

TEST_F(BatchNormTest, DefaultEpsilonStandardizesWithinTolerance) {
  Rng rng(13);
  Tensor<double> x = random_tensor({4, 2, 6, 6}, rng, 0, 10);
  ops::BatchNormState<double> state(2);
  auto tape = no_grad();
  Tensor<double> y = ops::batchnorm2d(tape, x, Tensor<double>({2}, 1.0), Tensor<double>({2}, 0.0), state, ops::Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(channel_stat(y, c, false), 0.0, 1e-6);
    EXPECT_NEAR(channel_stat(y, c, true), 1.0, 1e-5);
  }
}

TEST_F(BatchNormTest, ConstantChannelMapsToBeta) {
  ops::BatchNormState<double> state(1);
  auto tape = no_grad();
  Tensor<double> y = ops::batchnorm2d(tape, Tensor<double>({2, 1, 3, 3}, 4.2), Tensor<double>({1}, 2.0),
                                      Tensor<double>({1}, 0.3), state, ops::Mode::Train);
  for (double v : y.data()) EXPECT_NEAR(v, 0.3, 1e-12);
}

TEST_F(BatchNormTest, RunningStatisticsUpdateWithMomentum) {
  ops::BatchNormState<double> state(1);
  auto tape = no_grad();
  Tensor<double> x({1, 1, 1, 4}, {1, 2, 3, 4});
  ops::batchnorm2d(tape, x, Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.0), state, ops::Mode::Train);
  EXPECT_NEAR(state.running_mean[0], 0.1 * 2.5, 1e-12);
  EXPECT_NEAR(state.running_var[0], 0.9 * 1.0 + 0.1 * (5.0 / 3.0), 1e-12);
  // Eval mode leaves the statistics untouched and uses them.
  Tensor<double> y = ops::batchnorm2d(tape, x, Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.0), state, ops::Mode::Eval);
  EXPECT_NEAR(state.running_mean[0], 0.25, 1e-12);
  EXPECT_NEAR(y[0], (1.0 - 0.25) / std::sqrt(state.running_var[0] + 1e-5), 1e-12);
}

TEST_F(BatchNormTest, DegenerateBatchRejectedInTrainMode) {
  ops::BatchNormState<double> state(2);
  auto tape = no_grad();
  EXPECT_THROW(ops::batchnorm2d(tape, Tensor<double>({1, 2, 1, 1}), Tensor<double>({2}, 1.0), Tensor<double>({2}),
                                state, ops::Mode::Train),
               DimensionError);
  EXPECT_NO_THROW(ops::batchnorm2d(tape, Tensor<double>({1, 2, 1, 1}), Tensor<double>({2}, 1.0), Tensor<double>({2}),
                                   state, ops::Mode::Eval));
}

TEST_F(BatchNormTest, GradientMatchesFiniteDifferences) {
  for (ops::Mode mode : {ops::Mode::Train, ops::Mode::Eval}) {
    for (int seed = 0; seed < kSeeds; ++seed) {
      Rng rng(1100 + seed);
      ops::BatchNormState<double> state(3);
      for (double& v : state.running_mean) v = rng.uniform(-1, 1);
      for (double& v : state.running_var) v = rng.uniform(0.5, 2);
      std::vector<Tensor<double>> in = {random_tensor({2, 3, 3, 3}, rng), random_tensor({3}, rng, 0.5, 1.5),
                                        random_tensor({3}, rng)};
      const double err = op_gradient_error(
          [&](Tape<double>& t, std::vector<Tensor<double>>& v) {
            ops::BatchNormState<double> s = state;
            return ops::batchnorm2d(t, v[0], v[1], v[2], s, mode);
          },
          in, rng);
      EXPECT_LE(err, 1e-3) << "seed " << seed;
    }
  }
}

TEST(CrossEntropy, PixelwiseHalfAgainstOnes) {
  auto tape = no_grad();
  Tensor<double> loss = ops::cross_entropy(tape, Tensor<double>({4, 4}, 0.5), Tensor<double>({4, 4}, 1.0),
                                           ops::CrossEntropyForm::PixelwiseBinary);
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, CategoricalCertainIsZero) {
  auto tape = no_grad();
  Tensor<double> loss = ops::cross_entropy(tape, Tensor<double>({3}, {1, 0, 0}), Tensor<double>({1}, {0}),
                                           ops::CrossEntropyForm::Categorical);
  EXPECT_NEAR(loss.item(), 0.0, 1e-12);
  // A zero probability on the target is clamped, not infinite.
  Tensor<double> wrong = ops::cross_entropy(tape, Tensor<double>({3}, {1, 0, 0}), Tensor<double>({1}, {2}),
                                            ops::CrossEntropyForm::Categorical);
  EXPECT_NEAR(wrong.item(), -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, ShapeMismatch) {
  auto tape = no_grad();
  EXPECT_THROW(ops::cross_entropy(tape, Tensor<double>({2, 2}, 0.5), Tensor<double>({4}, 1.0),
                                  ops::CrossEntropyForm::PixelwiseBinary),
               DimensionError);
  EXPECT_THROW(ops::cross_entropy(tape, Tensor<double>({2, 3}, 0.3), Tensor<double>({3}, 0.0),
                                  ops::CrossEntropyForm::Categorical),
               DimensionError);
}

TEST(CrossEntropy, GradientThroughSigmoidMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1200 + seed);
    Tensor<double> target = random_tensor({2, 4, 4}, rng, 0, 1);
    std::vector<Tensor<double>> in = {random_tensor({2, 4, 4}, rng, -3, 3)};
    const double err = op_gradient_error(
        [&](Tape<double>& t, std::vector<Tensor<double>>& v) {
          return ops::cross_entropy(t, ops::sigmoid(t, v[0]), target, ops::CrossEntropyForm::PixelwiseBinary);
        },
        in, rng);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

TEST(CrossEntropy, CategoricalGradientThroughSoftmax) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1300 + seed);
    Tensor<double> target({4}, {0, 2, 1, 2});
    std::vector<Tensor<double>> in = {random_tensor({4, 3}, rng, -2, 2)};
    const double err = op_gradient_error(
        [&](Tape<double>& t, std::vector<Tensor<double>>& v) {
          return ops::cross_entropy(t, ops::softmax(t, v[0]), target, ops::CrossEntropyForm::Categorical);
        },
        in, rng);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}
