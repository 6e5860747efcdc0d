#pragma once

// Independent reference computations used by the self-check command and the test suites.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dsmstcn/loss.hpp"
#include "dsmstcn/metrics.hpp"
#include "dsmstcn/model.hpp"

namespace dsmstcn::oracles {

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradientCheckOptions {
  ModelMode mode = ModelMode::dual_scale;
  std::size_t num_layers = 2;
  std::size_t num_filters = 4;
  std::size_t length = 32;
  std::uint64_t seed = 1;
  bool detach_previous = true;
  double step = 1e-4;
  double denominator_floor = 1e-6;
  double fault = 0.0;  // test hook: scales one analytic gradient entry by (1 + fault)
};

struct GradientCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose +/- step crosses a non-smooth branch
  std::string worst;
};

/// Central differences on every parameter of a small model. With a detached smoothing term
/// the analytic gradient is compared against a surrogate whose t-1 side is frozen at the
/// unperturbed forward pass, which is the function that gradient differentiates.
/// Coordinates where either perturbed evaluation takes a different relu/clamp/truncation
/// branch than the base point are not comparable by central differences and are skipped.
inline GradientCheckResult gradient_check(const GradientCheckOptions& opt) {
  ModelConfig cfg;
  cfg.mode = opt.mode;
  cfg.num_layers = opt.num_layers;
  cfg.num_filters = opt.num_filters;
  const ParameterSet params = init_parameters(cfg, opt.seed);

  std::mt19937_64 rng(mix_seed(opt.seed, "gradient-check"));
  std::normal_distribution<double> normal;
  const std::size_t T = opt.length;
  ChannelSequence x(cfg.input_channels, T);
  for (double& v : x.values()) v = normal(rng);
  LabelTrack micro(T), macro(T);
  for (std::size_t t = 0; t < T; ++t) {
    micro[t] = static_cast<int>((t / 5) % cfg.micro_classes());
    macro[t] = static_cast<int>((t / 8) % cfg.macro_classes());
  }
  SampleMask mask(T, 1);
  if (T > 4) mask[T - 1] = mask[T - 2] = 0;
  const Supervision sup{micro, macro, mask, {}};
  LossConfig lc;
  lc.detach_previous = opt.detach_previous;
  const LossNormalizers norm = normalizers_for(sup);

  GradientTape tape;
  tape.track_branches(true);
  const TapedOutput out = forward_on_tape(tape, x, cfg, params);
  std::vector<ChannelSequence> reference;
  if (opt.detach_previous) {
    for (Var v : out.stages) reference.push_back(tape.sequence(v));
  }
  const TapedLoss tl = total_loss_on_tape(tape, out, cfg, sup, lc, norm, reference);
  const std::uint64_t base_signature = tape.branch_signature();
  Gradients grads = tape.backward(tl.total);
  if (opt.fault != 0.0) {
    auto& g = grads.begin()->second;
    g[0] = (g[0] == 0.0 ? 1.0 : g[0]) * (1.0 + opt.fault);
  }

  auto evaluate = [&](const ParameterSet& p, std::uint64_t& signature) {
    GradientTape t;
    t.track_branches(true);
    const TapedOutput o = forward_on_tape(t, x, cfg, p);
    const double v = t.scalar(total_loss_on_tape(t, o, cfg, sup, lc, norm, reference).total);
    signature = t.branch_signature();
    return v;
  };

  GradientCheckResult r;
  ParameterSet probe = params;
  for (const auto& [name, tensor] : params) {
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      std::uint64_t sig_plus = 0, sig_minus = 0;
      probe[name][i] = tensor[i] + opt.step;
      const double f_plus = evaluate(probe, sig_plus);
      probe[name][i] = tensor[i] - opt.step;
      const double f_minus = evaluate(probe, sig_minus);
      probe[name][i] = tensor[i];
      if (sig_plus != base_signature || sig_minus != base_signature) {
        ++r.skipped;
        continue;
      }
      const double fd = (f_plus - f_minus) / (2.0 * opt.step);
      const double a = grads.at(name)[i];
      const double abs_err = std::abs(a - fd);
      const double rel = abs_err / std::max({std::abs(a), std::abs(fd), opt.denominator_floor});
      ++r.checked;
      r.max_absolute_error = std::max(r.max_absolute_error, abs_err);
      if (rel > r.max_relative_error) {
        r.max_relative_error = rel;
        r.worst = name + "[" + std::to_string(i) + "] analytic=" + format_double(a) + " numeric=" + format_double(fd);
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Receptive field

struct ReceptiveFieldResult {
  std::size_t expected_width = 0;
  std::size_t first_changed = 0;
  std::size_t last_changed = 0;
  std::size_t changed = 0;
  bool inside_window = false;
};

/// Perturbs one input sample and records which stage-1 outputs move.
inline ReceptiveFieldResult receptive_field_check(std::size_t num_layers = 9, std::size_t length = 3000,
                                                  std::size_t position = 1500, std::size_t num_filters = 8,
                                                  std::uint64_t seed = 3) {
  ModelConfig cfg;
  cfg.num_layers = num_layers;
  cfg.num_filters = num_filters;
  const ParameterSet params = init_parameters(cfg, seed);
  const StageConfig stage = cfg.stages().front();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  ChannelSequence x(cfg.input_channels, length);
  for (double& v : x.values()) v = normal(rng);
  const ChannelSequence base = sstcn_forward(x, stage, params, 0).as_sequence();
  for (std::size_t c = 0; c < x.channels(); ++c) x(c, position) += 1.0;
  const ChannelSequence moved = sstcn_forward(x, stage, params, 0).as_sequence();

  ReceptiveFieldResult r;
  r.expected_width = receptive_field(num_layers);
  const std::size_t half = r.expected_width / 2;
  r.first_changed = length;
  r.inside_window = true;
  for (std::size_t t = 0; t < length; ++t) {
    bool diff = false;
    for (std::size_t c = 0; c < base.channels(); ++c) diff = diff || base(c, t) != moved(c, t);
    if (!diff) continue;
    ++r.changed;
    r.first_changed = std::min(r.first_changed, t);
    r.last_changed = t;
    if (t + half < position || t > position + half) r.inside_window = false;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Loss hand values

/// Two samples, two classes; class 0's log-probability drops by exactly 5 so its squared
/// difference truncates to tau^2 = 16. Returns the truncated contribution recovered from the
/// library's normalised value by removing the class-1 term computed here.
inline double tmse_truncated_contribution(double tau = 4.0) {
  const double p0 = 0.5;
  const double p1 = 0.5 * std::exp(-5.0);
  ChannelSequence seq(2, 2);
  seq(0, 0) = p0;
  seq(1, 0) = 1.0 - p0;
  seq(0, 1) = p1;
  seq(1, 1) = 1.0 - p1;
  const auto probs = ProbabilitySequence::from_columns(seq);
  const SampleMask mask(2, 1);
  const double total = truncated_mse(probs, mask, tau) * 2.0 * 2.0;  // undo / (n * C)
  const double d1 = std::log1p(-p1) - std::log(1.0 - p0);
  return total - d1 * d1;
}

/// Cross entropy of uniform predictions over C classes, expected ln(C) / C.
inline double uniform_cross_entropy(std::size_t classes, std::size_t length = 10) {
  ChannelSequence seq(classes, length, 1.0 / static_cast<double>(classes));
  const auto probs = ProbabilitySequence::from_columns(seq);
  LabelTrack truth(length);
  for (std::size_t t = 0; t < length; ++t) truth[t] = static_cast<int>(t % classes);
  return cross_entropy(probs, truth, SampleMask(length, 1));
}

// ---------------------------------------------------------------------------
// Segment matching reference

/// Exhaustive reference for segmental counts: segments as explicit sample-index sets, IoU
/// by set counting against every true segment.
inline std::vector<Counts> reference_segment_counts(const std::vector<int>& truth, const std::vector<int>& pred,
                                                    std::size_t num_classes, double threshold) {
  struct Seg {
    int cls;
    std::set<std::size_t> samples;
  };
  auto runs = [](const std::vector<int>& track) {
    std::vector<Seg> out;
    for (std::size_t t = 0; t < track.size(); ++t) {
      if (track[t] == 0) continue;
      if (t == 0 || track[t - 1] != track[t]) out.push_back({track[t], {}});
      out.back().samples.insert(t);
    }
    return out;
  };
  const auto ts = runs(truth);
  const auto ps = runs(pred);
  std::vector<Counts> counts(num_classes);
  std::vector<bool> matched(ts.size(), false);
  for (const Seg& p : ps) {
    double best = 0.0;
    std::size_t best_i = ts.size();
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (ts[i].cls != p.cls) continue;
      std::size_t inter = 0;
      for (std::size_t s : p.samples) inter += ts[i].samples.count(s);
      const double iou = static_cast<double>(inter) / static_cast<double>(p.samples.size() + ts[i].samples.size() - inter);
      if (iou > best) {
        best = iou;
        best_i = i;
      }
    }
    if (best_i != ts.size() && best >= threshold && !matched[best_i]) {
      matched[best_i] = true;
      ++counts[p.cls].tp;
    } else {
      ++counts[p.cls].fp;
    }
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (!matched[i]) ++counts[ts[i].cls].fn;
  }
  return counts;
}

/// A random label track built from runs, biased toward "others".
inline LabelTrack random_track(std::mt19937_64& rng, std::size_t length, int num_classes) {
  LabelTrack track;
  std::uniform_int_distribution<std::size_t> run(1, 30);
  std::uniform_int_distribution<int> cls(0, num_classes - 1);
  std::bernoulli_distribution background(0.4);
  while (track.size() < length) {
    const int c = background(rng) ? 0 : cls(rng);
    track.insert(track.end(), std::min(run(rng), length - track.size()), c);
  }
  return track;
}

/// Moves boundaries, splits runs and relabels short stretches of a truth track.
inline LabelTrack perturb_track(std::mt19937_64& rng, const LabelTrack& truth, int num_classes) {
  LabelTrack pred = truth;
  std::uniform_int_distribution<std::size_t> pos(0, truth.size() - 1);
  std::uniform_int_distribution<std::size_t> len(1, 12);
  std::uniform_int_distribution<int> cls(0, num_classes - 1);
  std::uniform_int_distribution<int> edits(0, 4);
  for (int e = edits(rng); e > 0; --e) {
    const std::size_t at = pos(rng);
    const std::size_t n = std::min(len(rng), truth.size() - at);
    std::fill_n(pred.begin() + static_cast<long>(at), n, cls(rng));
  }
  return pred;
}

struct MatcherSweepResult {
  std::size_t pairs = 0;
  std::size_t mismatches = 0;
  std::string first_mismatch;
};

/// Compares segmental_counts against the exhaustive reference on random track pairs.
inline MatcherSweepResult matcher_sweep(std::size_t pairs, std::uint64_t seed, std::size_t max_length = 200,
                                        int num_classes = 5) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> length(1, max_length);
  std::bernoulli_distribution related(0.7);
  std::uniform_int_distribution<int> thr(0, 4);
  const ClassCatalog& catalog = ClassCatalog::macro();
  MatcherSweepResult r;
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::size_t T = length(rng);
    const LabelTrack truth = random_track(rng, T, num_classes);
    const LabelTrack pred = related(rng) ? perturb_track(rng, truth, num_classes) : random_track(rng, T, num_classes);
    const double threshold = 0.25 * thr(rng);
    const auto got = segmental_counts(truth, pred, catalog, threshold);
    const auto want = reference_segment_counts(truth, pred, catalog.size(), threshold);
    ++r.pairs;
    bool same = true;
    for (std::size_t c = 1; c < catalog.size(); ++c) same = same && got[c] == want[c];
    if (!same) {
      if (r.mismatches == 0) r.first_mismatch = "pair " + std::to_string(i) + " length " + std::to_string(T);
      ++r.mismatches;
    }
  }
  return r;
}

}  // namespace dsmstcn::oracles
