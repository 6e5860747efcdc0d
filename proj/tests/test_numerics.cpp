#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dsmstcn/numerics.hpp"

using namespace dsmstcn;

namespace {

ChannelSequence random_sequence(std::size_t c, std::size_t t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  ChannelSequence s(c, t);
  for (double& v : s.values()) v = n(rng);
  return s;
}

KernelWeights random_kernel(std::size_t out, std::size_t in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  KernelWeights w = KernelWeights::zeros(out, in);
  for (double& v : w.taps.values()) v = n(rng);
  for (double& v : w.bias.values()) v = n(rng);
  return w;
}

// Direct evaluation of y[o,t] = b[o] + sum_k sum_i w[k,o,i] x[i, t + (k-1)d], zero outside [0,T).
ChannelSequence direct_conv(const ChannelSequence& x, KernelWeights w, std::size_t d) {
  ChannelSequence y(w.out_channels(), x.length());
  for (std::size_t o = 0; o < w.out_channels(); ++o) {
    for (std::size_t t = 0; t < x.length(); ++t) {
      double acc = w.bias[o];
      for (int k = 0; k < 3; ++k) {
        const long src = static_cast<long>(t) + (k - 1) * static_cast<long>(d);
        if (src < 0 || src >= static_cast<long>(x.length())) continue;
        for (std::size_t i = 0; i < x.channels(); ++i) acc += w.tap(k, o, i) * x(i, static_cast<std::size_t>(src));
      }
      y(o, t) = acc;
    }
  }
  return y;
}

}  // namespace

TEST(DilatedConv, IdentityKernelReproducesInput) {
  const auto x = random_sequence(3, 20, 1);
  for (std::size_t d : {1, 2, 7, 64}) {
    KernelWeights w = KernelWeights::zeros(3, 3);
    for (std::size_t c = 0; c < 3; ++c) w.tap(1, c, c) = 1.0;
    EXPECT_EQ(dilated_conv1d(x, w, d), x) << "dilation " << d;
  }
}

TEST(DilatedConv, ImpulseResponsePlacesTapsAtMinusZeroPlusD) {
  ChannelSequence x(1, 11);
  x(0, 5) = 1.0;
  KernelWeights w = KernelWeights::zeros(1, 1);
  const double a = 2.0, b = 3.0, c = 5.0;
  w.tap(0, 0, 0) = a;
  w.tap(1, 0, 0) = b;
  w.tap(2, 0, 0) = c;
  const auto y = dilated_conv1d(x, w, 2);
  for (std::size_t t = 0; t < 11; ++t) {
    const double want = t == 3 ? c : t == 5 ? b : t == 7 ? a : 0.0;
    EXPECT_DOUBLE_EQ(y(0, t), want) << "t=" << t;
  }
}

TEST(DilatedConv, MatchesDirectEvaluation) {
  for (std::size_t d : {1, 3, 8, 40}) {
    const auto x = random_sequence(4, 37, d);
    const auto w = random_kernel(5, 4, 10 + d);
    const auto got = dilated_conv1d(x, w, d);
    const auto want = direct_conv(x, w, d);
    ASSERT_EQ(got.channels(), 5u);
    ASSERT_EQ(got.length(), 37u);
    for (std::size_t i = 0; i < got.values().size(); ++i) EXPECT_NEAR(got.values()[i], want.values()[i], 1e-12);
  }
}

TEST(DilatedConv, RejectsChannelMismatchAndZeroDilation) {
  const auto x = random_sequence(3, 10, 2);
  EXPECT_THROW(dilated_conv1d(x, KernelWeights::zeros(2, 4), 1), shape_error);
  EXPECT_THROW(dilated_conv1d(x, KernelWeights::zeros(2, 3), 0), std::invalid_argument);
}

TEST(DilatedConv, StackedDoublingDilationsReach1023Samples) {
  // Support of an impulse pushed through nine identity-plus-neighbours layers.
  const std::size_t T = 2001, mid = 1000;
  ChannelSequence x(1, T);
  x(0, mid) = 1.0;
  KernelWeights w = KernelWeights::zeros(1, 1);
  w.tap(0, 0, 0) = w.tap(1, 0, 0) = w.tap(2, 0, 0) = 1.0;
  for (std::size_t l = 0; l < 9; ++l) x = dilated_conv1d(x, w, std::size_t{1} << l);
  std::size_t first = T, last = 0;
  for (std::size_t t = 0; t < T; ++t) {
    if (x(0, t) != 0.0) {
      first = std::min(first, t);
      last = t;
    }
  }
  EXPECT_EQ(last - first + 1, 1023u);
  EXPECT_EQ(first, mid - 511);
}

TEST(Relu, ClampsNegatives) {
  ChannelSequence neg(1, 3, std::vector<double>{-1.0, -2.0, -0.5});
  EXPECT_EQ(relu(neg), ChannelSequence(1, 3));
  ChannelSequence pos(1, 3, std::vector<double>{1.0, 2.0, 0.5});
  EXPECT_EQ(relu(pos), pos);
  ChannelSequence mixed(1, 3, std::vector<double>{-1.0, 0.0, 2.0});
  EXPECT_EQ(relu(mixed), ChannelSequence(1, 3, std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(Conv1x1, HandExamples) {
  const auto x = random_sequence(3, 8, 4);
  PointwiseWeights id = PointwiseWeights::zeros(3, 3);
  for (std::size_t c = 0; c < 3; ++c) id.matrix[c * 3 + c] = 1.0;
  EXPECT_EQ(conv1x1(x, id), x);

  ChannelSequence cols(2, 2);
  cols(0, 0) = 1;
  cols(1, 0) = 2;
  cols(0, 1) = 3;
  cols(1, 1) = 4;
  PointwiseWeights sum = PointwiseWeights::zeros(1, 2);
  sum.matrix[0] = sum.matrix[1] = 1.0;
  const auto y = conv1x1(cols, sum);
  EXPECT_DOUBLE_EQ(y(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(y(0, 1), 7.0);

  PointwiseWeights bias_only = PointwiseWeights::zeros(2, 3);
  bias_only.bias[0] = 1.5;
  bias_only.bias[1] = -2.0;
  const auto z = conv1x1(x, bias_only);
  for (std::size_t t = 0; t < 8; ++t) {
    EXPECT_EQ(z(0, t), 1.5);
    EXPECT_EQ(z(1, t), -2.0);
  }
}

TEST(Softmax, HandExamplesAndShiftInvariance) {
  ChannelSequence equal(4, 3, 0.7);
  const auto u = softmax_channels(equal);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(u(c, 1), 0.25);

  ChannelSequence two(2, 1);
  two(0, 0) = std::log(1.0);
  two(1, 0) = std::log(3.0);
  const auto p = softmax_channels(two);
  EXPECT_NEAR(p(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(p(1, 0), 0.75, 1e-15);

  auto x = random_sequence(5, 6, 9);
  const auto a = softmax_channels(x);
  for (std::size_t c = 0; c < 5; ++c) x(c, 2) += 123.0;
  const auto b = softmax_channels(x);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(a(c, 2), b(c, 2), 1e-15);
}

TEST(Softmax, ColumnsArePositiveAndSumToOne) {
  auto x = random_sequence(6, 200, 5);
  for (double& v : x.values()) v *= 30.0;
  const auto p = softmax_channels(x);
  for (std::size_t t = 0; t < p.length(); ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < p.classes(); ++c) {
      EXPECT_GT(p(c, t), 0.0);
      s += p(c, t);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  EXPECT_THROW(softmax_channels(ChannelSequence(1, 3)), std::invalid_argument);
}

TEST(Shapes, LayersPreserveLengthAndStayFinite) {
  const auto x = random_sequence(4, 33, 6);
  const auto y = dilated_conv1d(x, random_kernel(7, 4, 1), 16);
  EXPECT_EQ(y.length(), 33u);
  EXPECT_EQ(y.channels(), 7u);
  EXPECT_TRUE(y.all_finite());
  PointwiseWeights w = PointwiseWeights::zeros(2, 7);
  EXPECT_EQ(conv1x1(relu(y), w).length(), 33u);
}

TEST(Shapes, WindowZeroPadsPastTheEnd) {
  const auto x = random_sequence(2, 5, 8);
  const auto w = x.window(3, 4);
  EXPECT_EQ(w(1, 0), x(1, 3));
  EXPECT_EQ(w(1, 1), x(1, 4));
  EXPECT_EQ(w(1, 2), 0.0);
  EXPECT_EQ(w(0, 3), 0.0);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  const auto x = random_sequence(4, 50, 11);
  const auto w = random_kernel(4, 4, 12);
  EXPECT_EQ(dilated_conv1d(x, w, 4), dilated_conv1d(x, w, 4));
}
