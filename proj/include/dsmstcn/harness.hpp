#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"

#include "dsmstcn/adam.hpp"
#include "dsmstcn/data.hpp"
#include "dsmstcn/loss.hpp"
#include "dsmstcn/metrics.hpp"
#include "dsmstcn/model.hpp"

namespace dsmstcn {

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  AdamHyper adam;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::uint64_t seed = 1;
  double micro_budget = 1.0;  // fraction of micro segments whose labels are used
  std::size_t log_every = 1;  // steps between step-log entries (0: epoch summaries only)
  std::size_t slice_length = kSliceLength;
  std::size_t slice_hop = kSliceHop;

  void validate() const {
    model.stages();
    loss.validate();
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(micro_budget >= 0.0 && micro_budget <= 1.0)) throw std::invalid_argument("train: micro_budget must lie in [0, 1]");
    if (!(adam.lr > 0.0 && adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 &&
          adam.eps > 0.0)) {
      throw std::invalid_argument("train: bad Adam hyperparameters");
    }
    if (slice_length < 1 || slice_hop < 1) throw std::invalid_argument("train: bad slicing");
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = {{"mode", to_string(c.model.mode)},
                {"num_layers", c.model.num_layers},
                {"num_filters", c.model.num_filters},
                {"input_channels", c.model.input_channels}};
  j["loss"] = {{"eta", c.loss.eta}, {"lambda", c.loss.lambda}, {"tau", c.loss.tau},
               {"detach_previous", c.loss.detach_previous}};
  j["adam"] = {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
  j["train"] = {{"batch_size", c.batch_size}, {"epochs", c.epochs},           {"seed", c.seed},
                {"micro_budget", c.micro_budget}, {"log_every", c.log_every}, {"slice_length", c.slice_length},
                {"slice_hop", c.slice_hop}};
  return j;
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const nlohmann::ordered_json& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

}  // namespace detail

/// Reads the "model", "loss", "adam" and "train" sections; missing keys keep defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  const auto known = to_json(c);
  try {
    for (const char* section : {"model", "loss", "adam", "train"}) {
      if (j.contains(section)) detail::reject_unknown(j.at(section), known.at(section), section);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("mode")) c.model.mode = parse_mode(m.at("mode").get<std::string>());
      c.model.num_layers = m.value("num_layers", c.model.num_layers);
      c.model.num_filters = m.value("num_filters", c.model.num_filters);
      c.model.input_channels = m.value("input_channels", c.model.input_channels);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      c.loss.eta = l.value("eta", c.loss.eta);
      c.loss.lambda = l.value("lambda", c.loss.lambda);
      c.loss.tau = l.value("tau", c.loss.tau);
      c.loss.detach_previous = l.value("detach_previous", c.loss.detach_previous);
    }
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      c.adam.lr = a.value("lr", c.adam.lr);
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.batch_size = t.value("batch_size", c.batch_size);
      c.epochs = t.value("epochs", c.epochs);
      c.seed = t.value("seed", c.seed);
      c.micro_budget = t.value("micro_budget", c.micro_budget);
      c.log_every = t.value("log_every", c.log_every);
      c.slice_length = t.value("slice_length", c.slice_length);
      c.slice_hop = t.value("slice_hop", c.slice_hop);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::string config_hash(const TrainConfig& c) { return sha256_hex(to_json(c).dump()); }

// ---------------------------------------------------------------------------
// Run log

struct StepLog {
  std::string fold;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  std::vector<std::pair<std::string, double>> terms;
  std::string batch_digest;  // hash of the slice identities in the batch
  double wall_seconds = 0.0;
};

struct EpochLog {
  std::string fold;
  std::size_t epoch = 0;
  double mean_loss = 0.0;
};

struct RunLog {
  std::string config_hash;
  std::map<std::string, std::uint64_t> seeds;  // fold -> fold seed
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
};

/// One text line per step. `with_wall_time = false` gives the replayable part only.
inline std::string format_step(const StepLog& s, bool with_wall_time = true) {
  std::ostringstream os;
  os << "fold=" << s.fold << " epoch=" << s.epoch << " step=" << s.step << " loss=" << format_double(s.loss);
  for (const auto& [name, v] : s.terms) os << ' ' << name << '=' << format_double(v);
  os << " batch=" << s.batch_digest;
  if (with_wall_time) os << " wall_s=" << format_double(s.wall_seconds);
  return os.str();
}

inline std::string format_epoch(const EpochLog& e) {
  return "fold=" + e.fold + " epoch=" + std::to_string(e.epoch) + " mean_loss=" + format_double(e.mean_loss);
}

// ---------------------------------------------------------------------------
// Training

/// Training-fold normalization statistics stored alongside the weights.
inline constexpr const char* kNormMean = "norm/mean";
inline constexpr const char* kNormStd = "norm/std";

inline std::map<std::string, Tensor> normalization_extras(const NormalizationStats& st) {
  return {{kNormMean, Tensor({st.mean.size()}, st.mean)}, {kNormStd, Tensor({st.stddev.size()}, st.stddev)}};
}

inline NormalizationStats normalization_from_extras(const std::map<std::string, Tensor>& extras) {
  auto m = extras.find(kNormMean), s = extras.find(kNormStd);
  if (m == extras.end() || s == extras.end()) throw std::invalid_argument("checkpoint has no normalization statistics");
  auto values = [](const Tensor& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
  return {values(m->second), values(s->second)};
}

/// Recording-level micro masks: the samples of a seeded random (1 - budget) share of all
/// micro segments are excluded from micro cross entropy. Macro supervision is untouched.
inline std::map<std::string, SampleMask> micro_budget_masks(const std::vector<const Recording*>& recordings,
                                                            double budget, std::uint64_t seed) {
  struct Ref {
    std::size_t rec;
    Segment seg;
  };
  std::vector<Ref> all;
  for (std::size_t r = 0; r < recordings.size(); ++r) {
    for (const auto& s : extract_segments(recordings[r]->micro)) all.push_back({r, s});
  }
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto keep = static_cast<std::size_t>(std::llround(budget * static_cast<double>(all.size())));
  std::map<std::string, SampleMask> masks;
  for (const Recording* rec : recordings) masks[rec->id].assign(rec->length(), 1);
  for (std::size_t i = keep; i < order.size(); ++i) {
    const Ref& ref = all[order[i]];
    auto& mask = masks[recordings[ref.rec]->id];
    std::fill(mask.begin() + static_cast<long>(ref.seg.start), mask.begin() + static_cast<long>(ref.seg.end), 0);
  }
  return masks;
}

struct TrainedModel {
  Checkpoint checkpoint;  // parameters plus normalization extras
  RunLog log;
};

inline void tune_allocator() {
#if defined(__GLIBC__)
  // The tape allocates and frees many equally sized multi-megabyte buffers per slice.
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
#endif
}

inline std::uint64_t fold_seed(std::uint64_t seed, const std::string& fold) { return mix_seed(seed, fold); }

using StepCallback = std::function<void(const StepLog&)>;

/// Trains one model on the fold's training recordings. Slices are reshuffled every epoch
/// with a seed derived from (config seed, fold id, epoch); each batch is one Adam step.
inline TrainedModel train_fold(const Fold& fold, const Dataset& dataset, const TrainConfig& config,
                               const StepCallback& on_step = {}) {
  config.validate();
  if (fold.train_recordings.empty()) throw std::invalid_argument("train_fold: empty training set");
  tune_allocator();
  const std::string fold_id = fold.test_subject;
  const std::uint64_t seed = fold_seed(config.seed, fold_id);

  std::vector<const Recording*> recs;
  for (const auto& id : fold.train_recordings) recs.push_back(&dataset.get(id));
  const auto budget_masks = micro_budget_masks(recs, config.micro_budget, mix_seed(seed, "micro-budget"));

  std::vector<Slice> slices;
  std::vector<std::string> slice_names;
  for (const Recording* rec : recs) {
    auto set = slice_recording(*rec, budget_masks.at(rec->id), config.slice_length, config.slice_hop);
    for (auto& s : set.slices) {
      slice_names.push_back(rec->id + "@" + std::to_string(s.start));
      slices.push_back(std::move(s));
    }
  }
  std::vector<const Slice*> slice_ptrs;
  for (const auto& s : slices) slice_ptrs.push_back(&s);
  const NormalizationStats stats = compute_normalization(slice_ptrs);
  for (auto& s : slices) s.imu = normalize(s.imu, stats, s.mask);

  TrainedModel out;
  out.checkpoint.config = config.model;
  out.checkpoint.params = init_parameters(config.model, mix_seed(seed, "init"));
  out.checkpoint.extras = normalization_extras(stats);
  out.log.config_hash = config_hash(config);
  out.log.seeds[fold_id] = seed;

  ParameterSet& params = out.checkpoint.params;
  AdamState adam;
  std::vector<std::size_t> order(slices.size());
  std::size_t step = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, "epoch-" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + config.batch_size);
      LossNormalizers norm;
      std::string identity;
      for (std::size_t i = b0; i < b1; ++i) {
        const Slice& s = slices[order[i]];
        const auto n = normalizers_for({s.micro, s.macro, s.mask, s.micro_mask});
        norm.micro_samples += n.micro_samples;
        norm.samples += n.samples;
        identity += slice_names[order[i]] + ";";
      }
      Gradients grads;
      double loss = 0.0;
      std::map<std::string, double> terms;
      std::vector<std::string> term_order;
      for (std::size_t i = b0; i < b1; ++i) {
        const Slice& s = slices[order[i]];
        GradientTape tape;
        const TapedOutput fwd = forward_on_tape(tape, s.imu, config.model, params);
        const TapedLoss tl =
            total_loss_on_tape(tape, fwd, config.model, {s.micro, s.macro, s.mask, s.micro_mask}, config.loss, norm);
        loss += tape.scalar(tl.total);
        for (const auto& [name, v] : tl.terms) {
          if (!terms.contains(name)) term_order.push_back(name);
          terms[name] += tape.scalar(v);
        }
        Gradients g = tape.backward(tl.total);
        for (auto& [name, t] : g) {
          auto [it, inserted] = grads.try_emplace(name, std::move(t));
          if (!inserted) {
            for (std::size_t k = 0; k < it->second.size(); ++k) it->second[k] += t[k];
          }
        }
      }
      adam_step(params, grads, adam, config.adam);
      epoch_loss += loss;
      ++batches;
      ++step;
      if (config.log_every > 0 && (step - 1) % config.log_every == 0) {
        StepLog sl;
        sl.fold = fold_id;
        sl.epoch = epoch;
        sl.step = step;
        sl.loss = loss;
        for (const auto& name : term_order) sl.terms.emplace_back(name, terms[name]);
        sl.batch_digest = sha256_hex(identity).substr(0, 16);
        sl.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (on_step) on_step(sl);
        out.log.steps.push_back(std::move(sl));
      }
    }
    out.log.epochs.push_back({fold_id, epoch, epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1))});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ConfuserStats {
  std::size_t total = 0;
  std::size_t rejected = 0;  // fewer than half the confuser's samples decoded as an exercise

  ConfuserStats& operator+=(const ConfuserStats& o) {
    total += o.total;
    rejected += o.rejected;
    return *this;
  }
  double rate() const { return total == 0 ? 1.0 : static_cast<double>(rejected) / static_cast<double>(total); }
  friend bool operator==(const ConfuserStats&, const ConfuserStats&) = default;
};

struct Evaluation {
  MetricsReport macro = MetricsReport::empty(Scale::macro);  // final stage
  std::vector<MetricsReport> stages;  // every stage in model order, each at its own scale
  ConfuserStats confusers;

  Evaluation& operator+=(const Evaluation& o) {
    macro += o.macro;
    if (stages.empty()) {
      stages = o.stages;
    } else {
      if (stages.size() != o.stages.size()) throw std::invalid_argument("evaluation: stage count mismatch");
      for (std::size_t s = 0; s < stages.size(); ++s) stages[s] += o.stages[s];
    }
    confusers += o.confusers;
    return *this;
  }
  friend bool operator==(const Evaluation&, const Evaluation&) = default;
};

/// Per-stage predicted tracks of one full sequence.
inline std::vector<LabelTrack> predict_stages(const ChannelSequence& imu, const Checkpoint& ckpt) {
  const NormalizationStats stats = normalization_from_extras(ckpt.extras);
  const ModelOutput out = dsmstcn_forward(normalize(imu, stats), ckpt.config, ckpt.params);
  std::vector<LabelTrack> tracks;
  std::size_t mi = 0, ma = 0;
  for (Scale s : ckpt.config.stage_scales()) {
    tracks.push_back(predict_labels(s == Scale::micro ? out.micro[mi++] : out.macro[ma++]));
  }
  return tracks;
}

/// Scores a model on whole recordings (no slicing).
inline Evaluation evaluate_recordings(const Checkpoint& ckpt, const Dataset& dataset,
                                      const std::vector<std::string>& recording_ids) {
  check_parameters(ckpt.config, ckpt.params);
  Evaluation ev;
  const auto scales = ckpt.config.stage_scales();
  for (Scale s : scales) ev.stages.push_back(MetricsReport::empty(s));
  for (const auto& id : recording_ids) {
    const Recording& rec = dataset.get(id);
    detail::require_dim(rec.imu.channels(), ckpt.config.input_channels, "evaluation input channels");
    const auto tracks = predict_stages(rec.imu, ckpt);
    for (std::size_t s = 0; s < scales.size(); ++s) {
      ev.stages[s] += evaluate_tracks(scales[s] == Scale::micro ? rec.micro : rec.macro, tracks[s], scales[s]);
    }
    ev.macro += evaluate_tracks(rec.macro, tracks.back(), Scale::macro);
    if (auto it = dataset.confusers.find(id); it != dataset.confusers.end()) {
      for (const Segment& c : it->second) {
        std::size_t active = 0;
        for (std::size_t t = c.start; t < c.end; ++t) active += tracks.back()[t] != classes::others;
        ++ev.confusers.total;
        if (2 * active < c.length()) ++ev.confusers.rejected;
      }
    }
  }
  return ev;
}

inline Evaluation evaluate_fold(const Checkpoint& ckpt, const Fold& fold, const Dataset& dataset) {
  return evaluate_recordings(ckpt, dataset, fold.test_recordings);
}

// ---------------------------------------------------------------------------
// Protocol

struct FoldResult {
  Fold fold;
  TrainedModel model;
  Evaluation evaluation;
  std::string error;  // non-empty when the fold failed
};

struct ProtocolResult {
  Protocol protocol = Protocol::lab_losocv;
  std::string config_hash;
  std::vector<FoldResult> folds;
  Evaluation aggregate;  // sum of the successful folds' counts

  bool ok() const {
    return std::all_of(folds.begin(), folds.end(), [](const FoldResult& f) { return f.error.empty(); });
  }
};

struct ProtocolOptions {
  std::size_t jobs = 1;
  StepCallback on_step;  // may be called concurrently from several folds
  std::function<void(const FoldResult&)> on_fold;
};

/// Trains and evaluates every fold. Folds are independent, so `jobs` only changes wall time.
inline ProtocolResult run_protocol(const Dataset& dataset, Protocol protocol, const TrainConfig& config,
                                   const ProtocolOptions& options = {}) {
  config.validate();
  const auto infos = dataset.infos();
  const FoldPlan plan = build_folds(infos, protocol);
  ProtocolResult result;
  result.protocol = protocol;
  result.config_hash = config_hash(config);
  result.folds.resize(plan.folds.size());

  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < plan.folds.size(); i = next++) {
      FoldResult& fr = result.folds[i];
      fr.fold = plan.folds[i];
      try {
        fr.model = train_fold(fr.fold, dataset, config, options.on_step);
        fr.evaluation = evaluate_fold(fr.model.checkpoint, fr.fold, dataset);
      } catch (const std::exception& e) {
        fr.error = "fold " + fr.fold.test_subject + ": " + e.what();
      }
      if (options.on_fold) {
        std::lock_guard lock(callback_mutex);
        options.on_fold(fr);
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, std::max<std::size_t>(plan.folds.size(), 1));
  std::vector<std::thread> threads;
  for (std::size_t j = 1; j < jobs; ++j) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();

  for (const auto& fr : result.folds) {
    if (fr.error.empty()) result.aggregate += fr.evaluation;
  }
  return result;
}

/// Text report of an evaluation: final macro metrics, then one block per stage with its
/// decoded segment count, then confuser rejection.
inline std::string evaluation_to_text(const Evaluation& ev) {
  std::ostringstream os;
  os << "# final macro\n" << report_to_tsv(ev.macro);
  for (std::size_t s = 0; s < ev.stages.size(); ++s) {
    os << "# stage " << s + 1 << ' ' << to_string(ev.stages[s].scale)
       << " predicted_segments=" << ev.stages[s].predicted_segments << '\n'
       << report_to_tsv(ev.stages[s]);
  }
  os << "# confusers total=" << ev.confusers.total << " rejected=" << ev.confusers.rejected << '\n';
  return os.str();
}

}  // namespace dsmstcn
