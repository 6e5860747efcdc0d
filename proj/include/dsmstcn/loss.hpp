#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsmstcn/model.hpp"
#include "dsmstcn/numerics.hpp"
#include "dsmstcn/tape.hpp"

namespace dsmstcn {

struct LossConfig {
  double eta = 1.0;      // weight of the micro (first-stage) cross entropy
  double lambda = 0.15;  // weight of the smoothing term
  double tau = 4.0;      // truncation of adjacent log-probability differences
  // Treat the t-1 side of each smoothing difference as a constant when differentiating.
  bool detach_previous = true;

  void validate() const {
    if (!(eta >= 0.0)) throw std::invalid_argument("loss: eta must be >= 0");
    if (!(lambda >= 0.0)) throw std::invalid_argument("loss: lambda must be >= 0");
    if (!(tau > 0.0)) throw std::invalid_argument("loss: tau must be > 0");
  }
};

inline std::size_t count_unmasked(std::span<const std::uint8_t> mask) {
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  return n;
}

inline SampleMask full_mask(std::size_t length) { return SampleMask(length, 1); }

/// Mean of -log p[truth] over unmasked samples and classes: sum / (unmasked * C).
inline double cross_entropy(const ProbabilitySequence& probs, std::span<const int> truth,
                            std::span<const std::uint8_t> mask) {
  detail::require_dim(truth.size(), probs.length(), "cross_entropy truth length");
  detail::require_dim(mask.size(), probs.length(), "cross_entropy mask length");
  const std::size_t n = count_unmasked(mask);
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t t = 0; t < probs.length(); ++t) {
    if (!mask[t]) continue;
    if (truth[t] < 0 || static_cast<std::size_t>(truth[t]) >= probs.classes()) {
      throw std::out_of_range("cross_entropy: class id " + std::to_string(truth[t]));
    }
    sum -= clamped_log(probs(static_cast<std::size_t>(truth[t]), t));
  }
  return sum / (static_cast<double>(n) * static_cast<double>(probs.classes()));
}

/// Truncated squared adjacent log-probability differences, normalised by unmasked * C.
/// Pairs that touch a masked sample are skipped. Fewer than two samples gives zero.
inline double truncated_mse(const ProbabilitySequence& probs, std::span<const std::uint8_t> mask, double tau) {
  detail::require_dim(mask.size(), probs.length(), "truncated_mse mask length");
  const std::size_t n = count_unmasked(mask);
  if (probs.length() < 2 || n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t t = 1; t < probs.length(); ++t) {
    if (!mask[t] || !mask[t - 1]) continue;
    for (std::size_t c = 0; c < probs.classes(); ++c) {
      const double d = std::min(std::abs(clamped_log(probs(c, t)) - clamped_log(probs(c, t - 1))), tau);
      sum += d * d;
    }
  }
  return sum / (static_cast<double>(n) * static_cast<double>(probs.classes()));
}

/// Ground truth and masks for one sequence.
struct Supervision {
  std::span<const int> micro_truth;
  std::span<const int> macro_truth;
  std::span<const std::uint8_t> mask;        // padding mask for every term
  std::span<const std::uint8_t> micro_mask;  // mask for micro cross entropy (budget); empty = `mask`
};

struct LossTerm {
  std::string name;
  double weight = 1.0;
  double value = 0.0;
};

struct LossBreakdown {
  double total = 0.0;
  std::vector<LossTerm> terms;

  double term(const std::string& name) const {
    for (const auto& t : terms) {
      if (t.name == name) return t.value;
    }
    throw std::out_of_range("no loss term '" + name + "'");
  }
};

namespace detail {

// Which terms a stage contributes. Micro stages: eta * CE_micro. The first stage of the
// ablation model: eta * CE_macro. Every later macro stage: CE_macro + lambda * TMSE.
struct StageTerms {
  bool micro_ce = false;
  bool macro_ce = false;
  bool smoothing = false;
  double ce_weight = 1.0;
};

inline StageTerms stage_terms(Scale scale, std::size_t stage_index, const LossConfig& cfg) {
  StageTerms st;
  if (scale == Scale::micro) {
    st.micro_ce = true;
    st.ce_weight = cfg.eta;
  } else if (stage_index == 0) {
    st.macro_ce = true;
    st.ce_weight = cfg.eta;
  } else {
    st.macro_ce = true;
    st.smoothing = true;
  }
  return st;
}

inline std::string term_name(const char* kind, std::size_t stage_index) {
  return std::string(kind) + "/stage" + std::to_string(stage_index + 1);
}

inline void check_supervision(const Supervision& sup, std::size_t length) {
  require_dim(sup.micro_truth.size(), length, "micro truth length");
  require_dim(sup.macro_truth.size(), length, "macro truth length");
  require_dim(sup.mask.size(), length, "mask length");
  if (!sup.micro_mask.empty()) require_dim(sup.micro_mask.size(), length, "micro mask length");
}

}  // namespace detail

/// Composite objective over every stage output, evaluated directly on probabilities.
inline LossBreakdown total_loss(const ModelOutput& out, const ModelConfig& model, const Supervision& sup,
                                const LossConfig& cfg) {
  cfg.validate();
  const auto scales = model.stage_scales();
  if (out.micro.size() + out.macro.size() != scales.size()) throw shape_error("total_loss: stage count mismatch");
  const std::size_t length = out.macro.empty() ? 0 : out.macro.front().length();
  detail::check_supervision(sup, length);
  const auto micro_mask = sup.micro_mask.empty() ? sup.mask : sup.micro_mask;

  LossBreakdown br;
  std::size_t mi = 0, ma = 0;
  for (std::size_t s = 0; s < scales.size(); ++s) {
    const auto terms = detail::stage_terms(scales[s], s, cfg);
    const ProbabilitySequence& p = scales[s] == Scale::micro ? out.micro.at(mi++) : out.macro.at(ma++);
    detail::require_dim(p.length(), length, "stage output length");
    if (terms.micro_ce) {
      br.terms.push_back({detail::term_name("ce_micro", s), terms.ce_weight, cross_entropy(p, sup.micro_truth, micro_mask)});
    }
    if (terms.macro_ce) {
      br.terms.push_back({detail::term_name("ce_macro", s), terms.ce_weight, cross_entropy(p, sup.macro_truth, sup.mask)});
    }
    if (terms.smoothing) {
      br.terms.push_back({detail::term_name("tmse", s), cfg.lambda, truncated_mse(p, sup.mask, cfg.tau)});
    }
  }
  for (const auto& t : br.terms) br.total += t.weight * t.value;
  return br;
}

/// Denominators for a batch: the batch loss is the sum of per-sequence sums divided by the
/// batch-wide unmasked counts, so processing sequences one at a time gives the same gradient.
struct LossNormalizers {
  double micro_samples = 0.0;  // unmasked samples under the micro mask
  double samples = 0.0;        // unmasked samples under the padding mask
};

inline LossNormalizers normalizers_for(const Supervision& sup) {
  const auto micro_mask = sup.micro_mask.empty() ? sup.mask : sup.micro_mask;
  return {static_cast<double>(count_unmasked(micro_mask)), static_cast<double>(count_unmasked(sup.mask))};
}

struct TapedLoss {
  Var total;
  std::vector<std::pair<std::string, Var>> terms;  // unweighted term values
};

/// Records the composite objective on the tape. `previous_reference`, when non-empty, holds
/// one probability sequence per stage that supplies the detached t-1 side of the smoothing
/// term (used to finite-difference the detached gradient).
inline TapedLoss total_loss_on_tape(GradientTape& tape, const TapedOutput& out, const ModelConfig& model,
                                    const Supervision& sup, const LossConfig& cfg, const LossNormalizers& norm,
                                    const std::vector<ChannelSequence>& previous_reference = {}) {
  cfg.validate();
  const auto scales = model.stage_scales();
  if (out.stages.size() != scales.size()) throw shape_error("total_loss_on_tape: stage count mismatch");
  if (!previous_reference.empty() && previous_reference.size() != scales.size()) {
    throw shape_error("total_loss_on_tape: reference stage count mismatch");
  }
  const ChannelSequence first = tape.sequence(out.stages.front());
  detail::check_supervision(sup, first.length());
  const auto micro_mask = sup.micro_mask.empty() ? sup.mask : sup.micro_mask;
  const double micro_classes = static_cast<double>(model.micro_classes());
  const double macro_classes = static_cast<double>(model.macro_classes());

  TapedLoss tl;
  std::vector<std::pair<Var, double>> weighted;
  for (std::size_t s = 0; s < scales.size(); ++s) {
    const auto terms = detail::stage_terms(scales[s], s, cfg);
    const Var p = out.stages[s];
    if (terms.micro_ce) {
      Var v = tape.cross_entropy(p, sup.micro_truth, micro_mask, norm.micro_samples * micro_classes);
      tl.terms.emplace_back(detail::term_name("ce_micro", s), v);
      weighted.emplace_back(v, terms.ce_weight);
    }
    if (terms.macro_ce) {
      Var v = tape.cross_entropy(p, sup.macro_truth, sup.mask, norm.samples * macro_classes);
      tl.terms.emplace_back(detail::term_name("ce_macro", s), v);
      weighted.emplace_back(v, terms.ce_weight);
    }
    if (terms.smoothing) {
      const ChannelSequence* ref = previous_reference.empty() ? nullptr : &previous_reference[s];
      Var v = tape.truncated_mse(p, sup.mask, cfg.tau, norm.samples * macro_classes, cfg.detach_previous, ref);
      tl.terms.emplace_back(detail::term_name("tmse", s), v);
      weighted.emplace_back(v, cfg.lambda);
    }
  }
  tl.total = tape.weighted_sum(weighted);
  return tl;
}

}  // namespace dsmstcn
