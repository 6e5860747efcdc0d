#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "dsmstcn/loss.hpp"
#include "dsmstcn/model.hpp"

using namespace dsmstcn;

namespace {

ProbabilitySequence columns(std::size_t classes, const std::vector<std::vector<double>>& cols) {
  ChannelSequence s(classes, cols.size());
  for (std::size_t t = 0; t < cols.size(); ++t) {
    for (std::size_t c = 0; c < classes; ++c) s(c, t) = cols[t][c];
  }
  return ProbabilitySequence::from_columns(s);
}

ProbabilitySequence random_probs(std::size_t classes, std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  ChannelSequence logits(classes, length);
  for (double& v : logits.values()) v = 3.0 * n(rng);
  return softmax_channels(logits);
}

LabelTrack random_labels(std::size_t classes, std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LabelTrack out(length);
  for (int& v : out) v = static_cast<int>(rng() % classes);
  return out;
}

// Plain-loop oracles written against the definitions, not the library.
double ce_oracle(const ProbabilitySequence& p, const LabelTrack& y, const SampleMask& m) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < p.length(); ++t) {
    if (!m[t]) continue;
    ++n;
    sum += -std::log(std::max(p(static_cast<std::size_t>(y[t]), t), 1e-12));
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n * p.classes());
}

double tmse_oracle(const ProbabilitySequence& p, const SampleMask& m, double tau) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < p.length(); ++t) n += m[t] ? 1 : 0;
  for (std::size_t t = 1; t < p.length(); ++t) {
    if (!m[t] || !m[t - 1]) continue;
    for (std::size_t c = 0; c < p.classes(); ++c) {
      double d = std::abs(std::log(std::max(p(c, t), 1e-12)) - std::log(std::max(p(c, t - 1), 1e-12)));
      d = std::min(d, tau);
      sum += d * d;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n * p.classes());
}

ChannelSequence random_imu(std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  ChannelSequence x(6, length);
  for (double& v : x.values()) v = n(rng);
  return x;
}

LabelTrack micro_to_macro(const LabelTrack& micro) {
  LabelTrack out(micro.size());
  std::transform(micro.begin(), micro.end(), out.begin(), macro_of_micro);
  return out;
}

}  // namespace

TEST(TruncatedMse, LargeLogDropTruncatesToTauSquared) {
  // Class 0 loses exactly 5 nats between the two samples; 5 > tau = 4 so it contributes 16.
  const double p0 = 0.5, p1 = 0.5 * std::exp(-5.0);
  const auto p = columns(2, {{p0, 1 - p0}, {p1, 1 - p1}});
  const double other = std::log(1 - p1) - std::log(1 - p0);
  const double expected = (16.0 + other * other) / (2.0 * 2.0);
  EXPECT_NEAR(truncated_mse(p, SampleMask(2, 1), 4.0), expected, 1e-14);
  EXPECT_NEAR(truncated_mse(p, SampleMask(2, 1), 4.0) * 4.0 - other * other, 16.0, 1e-12);
}

TEST(TruncatedMse, BelowTauIsUntruncated) {
  const auto p = columns(2, {{0.5, 0.5}, {0.25, 0.75}});
  const double a = std::log(0.25 / 0.5), b = std::log(0.75 / 0.5);
  EXPECT_NEAR(truncated_mse(p, SampleMask(2, 1), 4.0), (a * a + b * b) / 4.0, 1e-15);
}

TEST(TruncatedMse, ConstantSequenceAndShortSequencesAreZero) {
  const auto p = columns(3, {{0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}});
  EXPECT_EQ(truncated_mse(p, SampleMask(3, 1), 4.0), 0.0);
  const auto one = columns(3, {{0.2, 0.3, 0.5}});
  EXPECT_EQ(truncated_mse(one, SampleMask(1, 1), 4.0), 0.0);
}

TEST(TruncatedMse, MatchesOracleOnRandomSequences) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto p = random_probs(5, 40, seed);
    SampleMask m(40, 1);
    for (std::size_t t = 30; t < 40; ++t) m[t] = seed % 2;
    for (double tau : {0.5, 4.0, 100.0}) {
      EXPECT_NEAR(truncated_mse(p, m, tau), tmse_oracle(p, m, tau), 1e-12) << seed;
    }
  }
}

TEST(CrossEntropy, UniformPredictionsGiveLogCOverC) {
  for (std::size_t c : {2u, 5u, 6u}) {
    ChannelSequence s(c, 12, 1.0 / static_cast<double>(c));
    const auto p = ProbabilitySequence::from_columns(s);
    LabelTrack y(12);
    for (std::size_t t = 0; t < 12; ++t) y[t] = static_cast<int>(t % c);
    EXPECT_NEAR(cross_entropy(p, y, SampleMask(12, 1)), std::log(static_cast<double>(c)) / static_cast<double>(c),
                1e-15);
  }
}

TEST(CrossEntropy, HandValueAndClamp) {
  const auto p = columns(2, {{0.25, 0.75}, {1.0, 0.0}});
  const LabelTrack y{1, 1};
  // -(log 0.75 + log 1e-12) / (2 * 2)
  EXPECT_NEAR(cross_entropy(p, y, SampleMask(2, 1)), -(std::log(0.75) + std::log(1e-12)) / 4.0, 1e-12);
  EXPECT_TRUE(std::isfinite(cross_entropy(p, y, SampleMask(2, 1))));
  EXPECT_THROW(cross_entropy(p, LabelTrack{0, 2}, SampleMask(2, 1)), std::out_of_range);
  EXPECT_THROW(cross_entropy(p, LabelTrack{0}, SampleMask(2, 1)), shape_error);
}

TEST(CrossEntropy, MaskedSamplesDoNotContribute) {
  const auto p = random_probs(5, 30, 3);
  const auto y = random_labels(5, 30, 4);
  SampleMask m(30, 1);
  for (std::size_t t = 20; t < 30; ++t) m[t] = 0;
  EXPECT_NEAR(cross_entropy(p, y, m), ce_oracle(p, y, m), 1e-14);
  EXPECT_EQ(cross_entropy(p, y, SampleMask(30, 0)), 0.0);
  EXPECT_EQ(truncated_mse(p, SampleMask(30, 0), 4.0), 0.0);
}

TEST(CrossEntropy, NonNegativeAndZeroOnlyAtOneHotTruth) {
  const auto p = columns(3, {{1, 0, 0}, {0, 1, 0}});
  EXPECT_EQ(cross_entropy(p, LabelTrack{0, 1}, SampleMask(2, 1)), 0.0);
  for (std::uint64_t seed = 1; seed < 10; ++seed) {
    EXPECT_GE(cross_entropy(random_probs(4, 10, seed), random_labels(4, 10, seed), SampleMask(10, 1)), 0.0);
    EXPECT_GE(truncated_mse(random_probs(4, 10, seed), SampleMask(10, 1), 4.0), 0.0);
  }
}

class CompositeLoss : public ::testing::TestWithParam<ModelMode> {};

TEST_P(CompositeLoss, TermsFollowStageScalesAndSumWithWeights) {
  ModelConfig mc;
  mc.mode = GetParam();
  mc.num_layers = 2;
  mc.num_filters = 4;
  const std::size_t T = 50;
  const auto params = init_parameters(mc, 7);
  const auto out = dsmstcn_forward(random_imu(T, 8), mc, params);
  const auto micro = random_labels(6, T, 9);
  const auto macro = micro_to_macro(micro);
  SampleMask mask(T, 1);
  for (std::size_t t = 45; t < T; ++t) mask[t] = 0;
  LossConfig cfg;
  cfg.eta = 0.7;
  cfg.lambda = 0.15;
  const Supervision sup{micro, macro, mask, {}};
  const auto br = total_loss(out, mc, sup, cfg);

  const auto scales = mc.stage_scales();
  double expected = 0.0;
  std::size_t mi = 0, ma = 0;
  std::set<std::string> names;
  for (std::size_t s = 0; s < scales.size(); ++s) {
    const std::string st = "/stage" + std::to_string(s + 1);
    if (scales[s] == Scale::micro) {
      const double v = ce_oracle(out.micro.at(mi++), micro, mask);
      EXPECT_NEAR(br.term("ce_micro" + st), v, 1e-12);
      expected += cfg.eta * v;
      names.insert("ce_micro" + st);
      continue;
    }
    const auto& p = out.macro.at(ma++);
    const double ce = ce_oracle(p, macro, mask);
    EXPECT_NEAR(br.term("ce_macro" + st), ce, 1e-12);
    names.insert("ce_macro" + st);
    if (s == 0) {
      expected += cfg.eta * ce;
      EXPECT_THROW(br.term("tmse" + st), std::out_of_range);
    } else {
      const double sm = tmse_oracle(p, mask, cfg.tau);
      EXPECT_NEAR(br.term("tmse" + st), sm, 1e-12);
      names.insert("tmse" + st);
      expected += ce + cfg.lambda * sm;
    }
  }
  EXPECT_EQ(br.terms.size(), names.size());
  EXPECT_NEAR(br.total, expected, 1e-12);
  EXPECT_TRUE(std::isfinite(br.total));
}

TEST_P(CompositeLoss, TapedValueMatchesDirectEvaluation) {
  ModelConfig mc;
  mc.mode = GetParam();
  mc.num_layers = 3;
  mc.num_filters = 5;
  const std::size_t T = 40;
  const auto params = init_parameters(mc, 11);
  const auto imu = random_imu(T, 12);
  const auto micro = random_labels(6, T, 13);
  const auto macro = micro_to_macro(micro);
  SampleMask mask(T, 1), micro_mask(T, 1);
  for (std::size_t t = 0; t < 15; ++t) micro_mask[t] = 0;
  const Supervision sup{micro, macro, mask, micro_mask};
  const LossConfig cfg;

  GradientTape tape;
  const auto taped = forward_on_tape(tape, imu, mc, params);
  const auto tl = total_loss_on_tape(tape, taped, mc, sup, cfg, normalizers_for(sup));
  const auto direct = total_loss(dsmstcn_forward(imu, mc, params), mc, sup, cfg);
  EXPECT_NEAR(tape.scalar(tl.total), direct.total, 1e-12);
  ASSERT_EQ(tl.terms.size(), direct.terms.size());
  for (std::size_t i = 0; i < tl.terms.size(); ++i) {
    EXPECT_EQ(tl.terms[i].first, direct.terms[i].name);
    EXPECT_NEAR(tape.scalar(tl.terms[i].second), direct.terms[i].value, 1e-12);
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, CompositeLoss,
                         ::testing::Values(ModelMode::dual_scale, ModelMode::ablation_no_micro,
                                           ModelMode::dual_scale_two_micro),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(CompositeLoss, LambdaZeroRemovesSmoothingAndEtaScalesFirstStage) {
  ModelConfig mc;
  mc.num_layers = 2;
  mc.num_filters = 3;
  const std::size_t T = 30;
  const auto out = dsmstcn_forward(random_imu(T, 1), mc, init_parameters(mc, 2));
  const auto micro = random_labels(6, T, 3);
  const auto macro = micro_to_macro(micro);
  const SampleMask mask(T, 1);
  const Supervision sup{micro, macro, mask, {}};
  LossConfig base;
  LossConfig no_smooth = base;
  no_smooth.lambda = 0.0;
  const auto a = total_loss(out, mc, sup, base);
  const auto b = total_loss(out, mc, sup, no_smooth);
  double tm = 0.0;
  for (int s = 2; s <= 4; ++s) tm += a.term("tmse/stage" + std::to_string(s));
  EXPECT_NEAR(a.total - b.total, base.lambda * tm, 1e-12);

  LossConfig eta2 = base;
  eta2.eta = 2.0;
  EXPECT_NEAR(total_loss(out, mc, sup, eta2).total - a.total, a.term("ce_micro/stage1"), 1e-12);
}

TEST(CompositeLoss, MicroMaskAffectsOnlyMicroCrossEntropy) {
  ModelConfig mc;
  mc.num_layers = 2;
  mc.num_filters = 3;
  const std::size_t T = 30;
  const auto out = dsmstcn_forward(random_imu(T, 4), mc, init_parameters(mc, 5));
  const auto micro = random_labels(6, T, 6);
  const auto macro = micro_to_macro(micro);
  const SampleMask mask(T, 1);
  SampleMask budget(T, 1);
  for (std::size_t t = 0; t < 20; ++t) budget[t] = 0;
  const auto full = total_loss(out, mc, {micro, macro, mask, {}}, {});
  const auto partial = total_loss(out, mc, {micro, macro, mask, budget}, {});
  EXPECT_NE(full.term("ce_micro/stage1"), partial.term("ce_micro/stage1"));
  EXPECT_NEAR(partial.term("ce_micro/stage1"), ce_oracle(out.micro[0], micro, budget), 1e-14);
  for (int s = 2; s <= 4; ++s) {
    const std::string st = "/stage" + std::to_string(s);
    EXPECT_EQ(full.term("ce_macro" + st), partial.term("ce_macro" + st));
    EXPECT_EQ(full.term("tmse" + st), partial.term("tmse" + st));
  }
}

TEST(CompositeLoss, BatchNormalizersMakeSummedTapesEqualTheJointLoss) {
  // Two sequences under shared normalisers sum to the loss of their concatenation when the
  // seam pair is masked out of the smoothing term.
  ModelConfig mc;
  mc.mode = ModelMode::ablation_no_micro;
  mc.num_layers = 1;
  mc.num_filters = 2;
  const auto params = init_parameters(mc, 3);
  const auto ya = random_labels(5, 10, 1), yb = random_labels(5, 12, 2);
  const SampleMask ma(10, 1), mb(12, 1);
  LossNormalizers norm{22.0, 22.0};
  const LossConfig cfg;
  double summed = 0.0;
  double ce_parts = 0.0;
  for (int k = 0; k < 2; ++k) {
    GradientTape tape;
    const auto imu = random_imu(k == 0 ? 10 : 12, 20 + k);
    const auto& y = k == 0 ? ya : yb;
    const auto& m = k == 0 ? ma : mb;
    const auto taped = forward_on_tape(tape, imu, mc, params);
    summed += tape.scalar(total_loss_on_tape(tape, taped, mc, {y, y, m, {}}, cfg, norm).total);
    const auto direct = total_loss(dsmstcn_forward(imu, mc, params), mc, {y, y, m, {}}, cfg);
    ce_parts += direct.total * static_cast<double>(y.size()) / 22.0;
  }
  EXPECT_NEAR(summed, ce_parts, 1e-12);
}

TEST(CompositeLoss, RejectsBadConfigAndShapes) {
  LossConfig c;
  c.eta = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.tau = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  ModelConfig mc;
  mc.num_layers = 1;
  mc.num_filters = 2;
  const auto out = dsmstcn_forward(random_imu(10, 1), mc, init_parameters(mc, 1));
  const LabelTrack y(9, 0);
  const SampleMask m(9, 1);
  EXPECT_THROW(total_loss(out, mc, {y, y, m, {}}, {}), shape_error);
  ModelConfig other = mc;
  other.mode = ModelMode::dual_scale_two_micro;
  const LabelTrack y10(10, 0);
  const SampleMask m10(10, 1);
  EXPECT_THROW(total_loss(out, other, {y10, y10, m10, {}}, {}), shape_error);
}
