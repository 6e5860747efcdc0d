#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsmstcn/data.hpp"
#include "dsmstcn/util.hpp"

// Synthetic IMU recordings with nested micro/macro labels.
//
// A recording alternates background blocks (noise, slow drift, low-amplitude movement bumps,
// and a few isolated single repetitions) with exercise blocks. Each repetition is a half-sine
// pulse with a class-specific channel signature. Repetitions inside an exercise block are
// separated by unlabeled pauses; the block itself is one macro segment.

namespace dsmstcn {

struct MotifSpec {
  std::string micro_class;
  std::array<double, kImuChannels> signature{};  // per-channel amplitude weights, max |w| = 1
  double min_duration_s = 1.0;
  double max_duration_s = 2.0;

  void validate() const {
    const auto& names = ClassCatalog::micro().names();
    if (micro_class == "others" || std::find(names.begin(), names.end(), micro_class) == names.end()) {
      throw validation_error("motif: bad micro class '" + micro_class + "'");
    }
    if (!(min_duration_s >= 0.5 && max_duration_s <= 4.0 && min_duration_s <= max_duration_s)) {
      throw validation_error("motif " + micro_class + ": duration range must lie within [0.5 s, 4 s]");
    }
    for (double w : signature) {
      if (!std::isfinite(w)) throw validation_error("motif " + micro_class + ": non-finite signature");
    }
  }
};

inline std::vector<MotifSpec> default_motifs() {
  return {
      {"micro_ankle_plantarflexors", {0.15, 0.0, 1.0, 0.0, 0.55, 0.0}, 1.4, 2.4},
      {"micro_knee_bends", {0.0, 0.2, -1.0, 0.6, 0.0, 0.0}, 1.2, 2.2},
      {"micro_abdominal_muscles", {1.0, 0.0, 0.3, 0.0, 0.0, -0.6}, 2.5, 3.8},
      {"sit_to_stand", {0.7, 0.0, 0.7, 0.0, -1.0, 0.0}, 1.0, 1.8},
      {"stand_to_sit", {-0.7, 0.0, -0.7, 0.0, 1.0, 0.0}, 1.0, 1.8},
  };
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct ScenarioSpec {
  std::size_t subjects = 10;       // lab subjects, ids S01, S02, ...
  std::size_t home_subjects = 0;   // home subjects, ids H01, ...
  std::uint64_t seed = 1;

  std::vector<std::string> block_order{"ankle_plantarflexors", "knee_bends", "abdominal_muscles", "chair_rising"};
  bool shuffle_blocks = true;  // per-subject permutation of block_order
  // Repetitions per macro segment. For chair rising this is the number of
  // sit-to-stand / stand-to-sit pairs.
  std::map<std::string, std::size_t> reps{
      {"ankle_plantarflexors", 13}, {"knee_bends", 10}, {"abdominal_muscles", 6}, {"chair_rising", 5}};
  Range pause_s{0.6, 1.4};
  Range background_s{18.0, 26.0};  // each background block
  double home_background_factor = 2.0;

  double noise_sigma = 0.05;
  double drift_amplitude = 0.03;
  double drift_period_s = 30.0;
  double snr_db = 12.0;             // pulse power over background power on signature channels
  double adl_bumps_per_minute = 4.0;
  double adl_relative_amplitude = 0.35;

  std::size_t confusers_per_block = 2;
  double confuser_gap_s = 3.0;  // minimum clearance around a confuser

  double amplitude_jitter = 0.2;      // subject-level, per class: factor in [1-j, 1+j]
  double duration_jitter = 0.15;      // subject-level duration scale in [1-j, 1+j]
  double pause_jitter = 0.2;          // subject-level pause scale in [1-j, 1+j]
  double rep_amplitude_jitter = 0.1;  // per repetition

  std::vector<MotifSpec> motifs = default_motifs();

  const MotifSpec& motif(std::string_view micro_class) const {
    for (const auto& m : motifs) {
      if (m.micro_class == micro_class) return m;
    }
    throw validation_error("no motif for micro class '" + std::string(micro_class) + "'");
  }

  double background_power() const { return noise_sigma * noise_sigma + 0.5 * drift_amplitude * drift_amplitude; }

  /// Peak amplitude of a unit-signature pulse: A^2 / 2 = P_bg * 10^(snr/10).
  double pulse_amplitude() const { return std::sqrt(2.0 * background_power() * std::pow(10.0, snr_db / 10.0)); }

  void validate() const {
    if (subjects + home_subjects < 2) throw validation_error("scenario: need at least 2 subjects");
    if (block_order.empty()) throw validation_error("scenario: empty block order");
    for (const auto& b : block_order) {
      const int id = ClassCatalog::macro().id(b);
      if (id == classes::others) throw validation_error("scenario: 'others' is not an exercise block");
      auto it = reps.find(b);
      if (it == reps.end() || it->second == 0) throw validation_error("scenario: no repetitions for " + b);
    }
    for (const auto& m : motifs) m.validate();
    for (int c = 1; c < static_cast<int>(ClassCatalog::micro().size()); ++c) motif(ClassCatalog::micro().name(c));
    auto check_range = [](const Range& r, const char* what) {
      if (!(r.lo >= 0.0 && r.lo <= r.hi && std::isfinite(r.hi))) {
        throw validation_error(std::string("scenario: bad range for ") + what);
      }
    };
    check_range(pause_s, "pause_s");
    check_range(background_s, "background_s");
    if (pause_s.lo * (1.0 - pause_jitter) < 0.01) throw validation_error("scenario: pauses must be at least one sample");
    for (double j : {amplitude_jitter, duration_jitter, pause_jitter, rep_amplitude_jitter}) {
      if (!(j >= 0.0 && j < 1.0)) throw validation_error("scenario: jitter must lie in [0, 1)");
    }
    if (!(noise_sigma >= 0.0 && drift_amplitude >= 0.0 && drift_period_s > 0.0 && std::isfinite(snr_db))) {
      throw validation_error("scenario: bad background model");
    }
    if (background_power() <= 0.0) throw validation_error("scenario: background power must be positive");
    if (adl_bumps_per_minute < 0.0 || adl_relative_amplitude < 0.0) throw validation_error("scenario: bad ADL model");
    // Confusers must fit into the shortest background block.
    const double longest_motif = std::max_element(motifs.begin(), motifs.end(), [](auto& a, auto& b) {
                                   return a.max_duration_s < b.max_duration_s;
                                 })->max_duration_s * (1.0 + duration_jitter);
    const double need = static_cast<double>(confusers_per_block) * (longest_motif + confuser_gap_s) + confuser_gap_s;
    if (confusers_per_block > 0 && background_s.lo < need) {
      throw validation_error("scenario: " + std::to_string(confusers_per_block) + " confusers with " +
                             std::to_string(confuser_gap_s) + " s clearance do not fit a " +
                             std::to_string(background_s.lo) + " s background block");
    }
  }
};

inline void to_json(nlohmann::ordered_json& j, const MotifSpec& m) {
  j = nlohmann::ordered_json{{"micro_class", m.micro_class},
                             {"signature", m.signature},
                             {"duration_s", {m.min_duration_s, m.max_duration_s}}};
}

inline void from_json(const nlohmann::json& j, MotifSpec& m) {
  m.micro_class = j.at("micro_class").get<std::string>();
  m.signature = j.at("signature").get<std::array<double, kImuChannels>>();
  const auto d = j.at("duration_s").get<std::array<double, 2>>();
  m.min_duration_s = d[0];
  m.max_duration_s = d[1];
}

inline nlohmann::ordered_json spec_to_json(const ScenarioSpec& s) {
  nlohmann::ordered_json j;
  j["subjects"] = s.subjects;
  j["home_subjects"] = s.home_subjects;
  j["seed"] = s.seed;
  j["block_order"] = s.block_order;
  j["shuffle_blocks"] = s.shuffle_blocks;
  j["reps"] = s.reps;
  j["pause_s"] = {s.pause_s.lo, s.pause_s.hi};
  j["background_s"] = {s.background_s.lo, s.background_s.hi};
  j["home_background_factor"] = s.home_background_factor;
  j["noise_sigma"] = s.noise_sigma;
  j["drift_amplitude"] = s.drift_amplitude;
  j["drift_period_s"] = s.drift_period_s;
  j["snr_db"] = s.snr_db;
  j["adl_bumps_per_minute"] = s.adl_bumps_per_minute;
  j["adl_relative_amplitude"] = s.adl_relative_amplitude;
  j["confusers_per_block"] = s.confusers_per_block;
  j["confuser_gap_s"] = s.confuser_gap_s;
  j["amplitude_jitter"] = s.amplitude_jitter;
  j["duration_jitter"] = s.duration_jitter;
  j["pause_jitter"] = s.pause_jitter;
  j["rep_amplitude_jitter"] = s.rep_amplitude_jitter;
  j["motifs"] = s.motifs;
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ScenarioSpec spec_from_json(const nlohmann::json& j) {
  ScenarioSpec s;
  const auto known = spec_to_json(s);
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw validation_error("scenario: unknown key '" + key + "'");
  }
  try {
    auto range = [&](const char* key, Range& r) {
      if (!j.contains(key)) return;
      const auto v = j.at(key).get<std::array<double, 2>>();
      r = {v[0], v[1]};
    };
    s.subjects = j.value("subjects", s.subjects);
    s.home_subjects = j.value("home_subjects", s.home_subjects);
    s.seed = j.value("seed", s.seed);
    s.block_order = j.value("block_order", s.block_order);
    s.shuffle_blocks = j.value("shuffle_blocks", s.shuffle_blocks);
    if (j.contains("reps")) {
      for (const auto& [k, v] : j.at("reps").items()) s.reps[k] = v.get<std::size_t>();
    }
    range("pause_s", s.pause_s);
    range("background_s", s.background_s);
    s.home_background_factor = j.value("home_background_factor", s.home_background_factor);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.drift_amplitude = j.value("drift_amplitude", s.drift_amplitude);
    s.drift_period_s = j.value("drift_period_s", s.drift_period_s);
    s.snr_db = j.value("snr_db", s.snr_db);
    s.adl_bumps_per_minute = j.value("adl_bumps_per_minute", s.adl_bumps_per_minute);
    s.adl_relative_amplitude = j.value("adl_relative_amplitude", s.adl_relative_amplitude);
    s.confusers_per_block = j.value("confusers_per_block", s.confusers_per_block);
    s.confuser_gap_s = j.value("confuser_gap_s", s.confuser_gap_s);
    s.amplitude_jitter = j.value("amplitude_jitter", s.amplitude_jitter);
    s.duration_jitter = j.value("duration_jitter", s.duration_jitter);
    s.pause_jitter = j.value("pause_jitter", s.pause_jitter);
    s.rep_amplitude_jitter = j.value("rep_amplitude_jitter", s.rep_amplitude_jitter);
    if (j.contains("motifs")) s.motifs = j.at("motifs").get<std::vector<MotifSpec>>();
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("scenario: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------

struct SubjectProfile {
  std::string subject;
  Scenario scenario = Scenario::lab;
  std::uint64_t seed = 0;
  std::map<std::string, double> amplitude_factor;  // per micro class
  double duration_factor = 1.0;
  double pause_factor = 1.0;
  std::vector<std::string> block_order;
};

inline std::string subject_id(const ScenarioSpec& spec, std::size_t index) {
  char buf[16];
  if (index < spec.subjects) {
    std::snprintf(buf, sizeof buf, "S%02zu", index + 1);
  } else {
    std::snprintf(buf, sizeof buf, "H%02zu", index - spec.subjects + 1);
  }
  return buf;
}

/// Subject-level variability drawn from the subject's own seed, so it does not depend
/// on which other subjects are generated.
inline SubjectProfile subject_profile(const ScenarioSpec& spec, std::size_t index) {
  if (index >= spec.subjects + spec.home_subjects) throw std::out_of_range("subject index out of range");
  SubjectProfile p;
  p.subject = subject_id(spec, index);
  p.scenario = index < spec.subjects ? Scenario::lab : Scenario::home;
  p.seed = mix_seed(spec.seed, p.subject);
  std::mt19937_64 rng(mix_seed(p.seed, "profile"));
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  for (const auto& m : spec.motifs) p.amplitude_factor[m.micro_class] = 1.0 + spec.amplitude_jitter * sym(rng);
  p.duration_factor = 1.0 + spec.duration_jitter * sym(rng);
  p.pause_factor = 1.0 + spec.pause_jitter * sym(rng);
  p.block_order = spec.block_order;
  if (spec.shuffle_blocks) std::shuffle(p.block_order.begin(), p.block_order.end(), rng);
  return p;
}

struct GeneratedRecording {
  Recording recording;
  std::vector<Segment> confusers;  // cls = micro class of the embedded repetition
  std::vector<double> pulse_peaks;  // peak amplitude of every placed exercise repetition, in order
};

namespace detail {

class SignalBuilder {
 public:
  SignalBuilder(const ScenarioSpec& spec, std::mt19937_64& rng) : spec_(spec), rng_(rng) {}

  std::size_t samples(double seconds) const { return static_cast<std::size_t>(std::lround(seconds * kSampleRate)); }

  void append_background(std::size_t n) {
    for (auto& ch : channels_) ch.resize(ch.size() + n, 0.0);
    micro_.resize(micro_.size() + n, classes::others);
    macro_.resize(macro_.size() + n, classes::others);
  }

  // Adds a half-sine pulse over [start, start + n).
  void add_pulse(std::size_t start, std::size_t n, const std::array<double, kImuChannels>& signature, double amplitude) {
    for (std::size_t i = 0; i < n; ++i) {
      const double s = amplitude * std::sin(std::numbers::pi * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
      for (std::size_t c = 0; c < kImuChannels; ++c) channels_[c][start + i] += signature[c] * s;
    }
  }

  void label(std::size_t start, std::size_t end, LabelTrack& track, int cls) {
    std::fill(track.begin() + static_cast<long>(start), track.begin() + static_cast<long>(end), cls);
  }

  std::size_t size() const { return micro_.size(); }
  LabelTrack& micro() { return micro_; }
  LabelTrack& macro() { return macro_; }

  ChannelSequence finish() {
    const std::size_t T = size();
    std::normal_distribution<double> noise(0.0, spec_.noise_sigma);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::vector<double> values;
    values.reserve(kImuChannels * T);
    const double omega = 2.0 * std::numbers::pi / (spec_.drift_period_s * kSampleRate);
    for (std::size_t c = 0; c < kImuChannels; ++c) {
      const double ph = phase(rng_);
      for (std::size_t t = 0; t < T; ++t) {
        const double drift = spec_.drift_amplitude * std::sin(omega * static_cast<double>(t) + ph);
        values.push_back(channels_[c][t] + drift + (spec_.noise_sigma > 0.0 ? noise(rng_) : 0.0));
      }
    }
    return ChannelSequence(kImuChannels, T, std::move(values));
  }

 private:
  const ScenarioSpec& spec_;
  std::mt19937_64& rng_;
  std::array<std::vector<double>, kImuChannels> channels_;
  LabelTrack micro_, macro_;
};

inline double uniform(std::mt19937_64& rng, const Range& r) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

}  // namespace detail

/// One subject's recording. Deterministic in (spec, index).
inline GeneratedRecording generate_recording(const ScenarioSpec& spec, std::size_t index) {
  spec.validate();
  const SubjectProfile profile = subject_profile(spec, index);
  std::mt19937_64 rng(mix_seed(profile.seed, "signal"));
  detail::SignalBuilder b(spec, rng);
  GeneratedRecording out;
  const double base_amp = spec.pulse_amplitude();
  std::uniform_real_distribution<double> sym(-1.0, 1.0);

  auto rep_length = [&](const MotifSpec& m) {
    Range r{m.min_duration_s * profile.duration_factor, m.max_duration_s * profile.duration_factor};
    return std::max<std::size_t>(b.samples(detail::uniform(rng, r)), 2);
  };
  auto rep_amplitude = [&](const MotifSpec& m) {
    return base_amp * profile.amplitude_factor.at(m.micro_class) * (1.0 + spec.rep_amplitude_jitter * sym(rng));
  };
  auto pause_length = [&] {
    Range r{spec.pause_s.lo * profile.pause_factor, spec.pause_s.hi * profile.pause_factor};
    return std::max<std::size_t>(b.samples(detail::uniform(rng, r)), 1);
  };

  auto background_block = [&] {
    Range r = spec.background_s;
    if (profile.scenario == Scenario::home) r = {r.lo * spec.home_background_factor, r.hi * spec.home_background_factor};
    const std::size_t start = b.size();
    const std::size_t n = b.samples(detail::uniform(rng, r));
    b.append_background(n);

    // low-amplitude movement bumps with a random channel mix
    std::poisson_distribution<int> count(spec.adl_bumps_per_minute * (static_cast<double>(n) / kSampleRate) / 60.0);
    const int bumps = spec.adl_bumps_per_minute > 0.0 ? count(rng) : 0;
    for (int i = 0; i < bumps; ++i) {
      std::array<double, kImuChannels> sig{};
      double peak = 0.0;
      for (auto& w : sig) peak = std::max(peak, std::abs(w = sym(rng)));
      for (auto& w : sig) w /= peak;
      const std::size_t len = std::min(b.samples(detail::uniform(rng, {0.5, 3.0})), n);
      const std::size_t at = start + std::uniform_int_distribution<std::size_t>(0, n - len)(rng);
      b.add_pulse(at, len, sig, base_amp * spec.adl_relative_amplitude);
    }

    // isolated single repetitions, at least confuser_gap_s apart from each other and the block edges
    if (spec.confusers_per_block > 0) {
      const std::size_t k = spec.confusers_per_block;
      const std::size_t gap = b.samples(spec.confuser_gap_s);
      std::vector<int> cls(k);
      std::vector<std::size_t> len(k);
      std::vector<double> amp(k);
      std::size_t used = (k + 1) * gap;
      for (std::size_t i = 0; i < k; ++i) {
        cls[i] = std::uniform_int_distribution<int>(1, static_cast<int>(ClassCatalog::micro().size()) - 1)(rng);
        const MotifSpec& m = spec.motif(ClassCatalog::micro().name(cls[i]));
        len[i] = rep_length(m);
        amp[i] = rep_amplitude(m);
        used += len[i];
      }
      if (used > n) throw validation_error("scenario: confusers do not fit a background block");
      std::vector<std::size_t> cuts(k);
      for (auto& c : cuts) c = std::uniform_int_distribution<std::size_t>(0, n - used)(rng);
      std::sort(cuts.begin(), cuts.end());
      std::size_t offset = start;
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t at = start + (i + 1) * gap + cuts[i] + (offset - start);
        b.add_pulse(at, len[i], spec.motif(ClassCatalog::micro().name(cls[i])).signature, amp[i]);
        out.confusers.push_back({cls[i], at, at + len[i]});
        offset += len[i];
      }
    }
  };

  auto exercise_block = [&](const std::string& macro_name) {
    const int macro_id = ClassCatalog::macro().id(macro_name);
    std::vector<int> sequence;
    const std::size_t reps = spec.reps.at(macro_name);
    for (std::size_t r = 0; r < reps; ++r) {
      if (macro_id == classes::chair_rising) {
        sequence.push_back(classes::sit_to_stand);
        sequence.push_back(classes::stand_to_sit);
      } else {
        sequence.push_back(macro_id);  // micro exercise ids mirror macro ids 1..3
      }
    }
    const std::size_t block_start = b.size();
    for (std::size_t i = 0; i < sequence.size(); ++i) {
      if (i > 0) b.append_background(pause_length());
      const MotifSpec& m = spec.motif(ClassCatalog::micro().name(sequence[i]));
      const std::size_t len = rep_length(m);
      const std::size_t at = b.size();
      b.append_background(len);
      const double amp = rep_amplitude(m);
      b.add_pulse(at, len, m.signature, amp);
      out.pulse_peaks.push_back(amp);
      b.label(at, at + len, b.micro(), sequence[i]);
    }
    b.label(block_start, b.size(), b.macro(), macro_id);
  };

  background_block();
  for (const auto& block : profile.block_order) {
    exercise_block(block);
    background_block();
  }

  Recording& rec = out.recording;
  rec.subject = profile.subject;
  rec.id = profile.subject;
  rec.scenario = profile.scenario;
  rec.imu = b.finish();
  rec.micro = std::move(b.micro());
  rec.macro = std::move(b.macro());
  validate_recording(rec);
  return out;
}

struct DatasetFiles {
  std::string manifest_path;
  std::vector<std::string> signal_files;
  std::vector<std::string> annotation_files;
};

/// Writes subject_<id>.csv and subject_<id>.annotations.jsonl per subject plus manifest.json.
/// Existing files with different content are a collision; nothing is written in that case.
inline DatasetFiles generate_dataset(const ScenarioSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  spec.validate();
  fs::create_directories(out_dir);
  const fs::path root(out_dir);

  std::vector<std::pair<fs::path, std::string>> files;
  nlohmann::ordered_json manifest;
  manifest["format"] = "dsmstcn-dataset/1";
  manifest["sample_rate_hz"] = kSampleRate;
  manifest["spec"] = spec_to_json(spec);
  manifest["spec_sha256"] = sha256_hex(spec_to_json(spec).dump());
  manifest["recordings"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < spec.subjects + spec.home_subjects; ++i) {
    const GeneratedRecording g = generate_recording(spec, i);
    const Recording& rec = g.recording;
    const std::string stem = "subject_" + rec.subject;
    std::string signal = signal_to_csv(rec.imu);
    std::string ann = annotations_to_jsonl(annotations_from_tracks(rec));
    nlohmann::ordered_json e;
    e["id"] = rec.id;
    e["subject"] = rec.subject;
    e["scenario"] = to_string(rec.scenario);
    e["seed"] = subject_profile(spec, i).seed;
    e["samples"] = rec.length();
    e["signal"] = stem + ".csv";
    e["annotations"] = stem + ".annotations.jsonl";
    e["signal_sha256"] = sha256_hex(signal);
    e["annotations_sha256"] = sha256_hex(ann);
    e["confusers"] = nlohmann::ordered_json::array();
    for (const auto& c : g.confusers) e["confusers"].push_back({c.cls, c.start, c.end});
    manifest["recordings"].push_back(e);
    files.emplace_back(root / (stem + ".csv"), std::move(signal));
    files.emplace_back(root / (stem + ".annotations.jsonl"), std::move(ann));
  }
  files.emplace_back(root / "manifest.json", manifest.dump(2) + "\n");

  for (const auto& [path, content] : files) {
    if (fs::exists(path) && read_file(path.string()) != content) {
      throw validation_error("output collision: " + path.string() + " exists with different content");
    }
  }
  DatasetFiles out;
  for (const auto& [path, content] : files) {
    write_file(path.string(), content);
    const auto name = path.filename().string();
    if (name == "manifest.json") {
      out.manifest_path = path.string();
    } else if (path.extension() == ".csv") {
      out.signal_files.push_back(path.string());
    } else {
      out.annotation_files.push_back(path.string());
    }
  }
  return out;
}

}  // namespace dsmstcn
