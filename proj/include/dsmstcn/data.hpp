#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dsmstcn/catalog.hpp"
#include "dsmstcn/numerics.hpp"
#include "dsmstcn/segments.hpp"
#include "dsmstcn/tape.hpp"
#include "dsmstcn/util.hpp"

namespace dsmstcn {

inline constexpr double kSampleRate = 100.0;
inline constexpr std::size_t kImuChannels = 6;
inline constexpr std::size_t kSliceLength = 4000;  // 40 s
inline constexpr std::size_t kSliceHop = 2000;     // 50 % overlap

/// Raised for malformed recordings and annotations; messages carry segment coordinates.
class validation_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Scenario { lab, home };

inline std::string_view to_string(Scenario s) { return s == Scenario::lab ? "lab" : "home"; }

inline Scenario parse_scenario(std::string_view s) {
  if (s == "lab") return Scenario::lab;
  if (s == "home") return Scenario::home;
  throw validation_error("unknown scenario '" + std::string(s) + "'");
}

/// One subject session: 6-channel IMU (accelerometer x/y/z, gyroscope x/y/z) at 100 Hz
/// with per-sample micro and macro class tracks.
struct Recording {
  std::string id;
  std::string subject;
  Scenario scenario = Scenario::lab;
  ChannelSequence imu;
  LabelTrack micro;
  LabelTrack macro;

  std::size_t length() const noexcept { return imu.length(); }
};

/// One line of an annotation file.
struct AnnotationRecord {
  Scale scale = Scale::macro;
  std::string class_name;
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::string subject;
  Scenario scenario = Scenario::lab;

  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

// ---------------------------------------------------------------------------
// Validation

namespace detail {

inline std::string seg_text(Scale scale, const Segment& s) {
  return std::string(to_string(scale)) + " " + ClassCatalog::for_scale(scale).name(s.cls) + " [" +
         std::to_string(s.start) + ", " + std::to_string(s.end) + ")";
}

// Checks range and same-scale overlap; segments must already be sorted by start.
inline void check_scale_segments(Scale scale, const std::vector<Segment>& segs, std::size_t length) {
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const Segment& s = segs[i];
    if (s.cls == classes::others) throw validation_error("explicit 'others' segment " + seg_text(scale, s));
    if (s.start >= s.end) throw validation_error("empty or reversed segment " + seg_text(scale, s));
    if (s.end > length) {
      throw validation_error("segment " + seg_text(scale, s) + " exceeds recording length " + std::to_string(length));
    }
    if (i > 0 && segs[i - 1].end > s.start) {
      throw validation_error("overlapping segments " + seg_text(scale, segs[i - 1]) + " and " + seg_text(scale, s));
    }
  }
}

}  // namespace detail

/// Every non-"others" micro segment must sit entirely inside one macro segment of the
/// matching exercise, and same-class micro segments inside a macro segment must be separated
/// by at least one unlabeled sample.
inline void validate_nesting(const std::vector<Segment>& micro, const std::vector<Segment>& macro) {
  for (const Segment& m : micro) {
    const int want = macro_of_micro(m.cls);
    auto it = std::find_if(macro.begin(), macro.end(), [&](const Segment& M) { return M.contains(m); });
    if (it == macro.end() || it->cls != want) {
      throw validation_error("micro segment " + detail::seg_text(Scale::micro, m) + " is not inside a " +
                             ClassCatalog::macro().name(want) + " macro segment");
    }
  }
  for (std::size_t i = 1; i < micro.size(); ++i) {
    if (micro[i].cls == micro[i - 1].cls && micro[i - 1].end >= micro[i].start) {
      throw validation_error("micro segments " + detail::seg_text(Scale::micro, micro[i - 1]) + " and " +
                             detail::seg_text(Scale::micro, micro[i]) + " are not separated by an unlabeled sample");
    }
  }
}

/// Validates annotation records against a recording length and returns the per-scale
/// segment lists (sorted). Throws validation_error with coordinates on any violation.
inline std::pair<std::vector<Segment>, std::vector<Segment>> validate_annotations(
    std::span<const AnnotationRecord> records, std::size_t length) {
  std::vector<Segment> micro, macro;
  for (const auto& r : records) {
    const auto& cat = ClassCatalog::for_scale(r.scale);
    int id = 0;
    try {
      id = cat.id(r.class_name);
    } catch (const std::invalid_argument& e) {
      throw validation_error(e.what());
    }
    (r.scale == Scale::micro ? micro : macro).push_back({id, r.start, r.end});
  }
  auto by_start = [](const Segment& a, const Segment& b) { return a.start < b.start || (a.start == b.start && a.end < b.end); };
  std::sort(micro.begin(), micro.end(), by_start);
  std::sort(macro.begin(), macro.end(), by_start);
  detail::check_scale_segments(Scale::micro, micro, length);
  detail::check_scale_segments(Scale::macro, macro, length);
  validate_nesting(micro, macro);
  return {std::move(micro), std::move(macro)};
}

/// Checks the label tracks of a recording. Idempotent, no side effects.
inline void validate_recording(const Recording& rec) {
  if (rec.imu.channels() != kImuChannels) {
    throw validation_error("recording " + rec.id + ": expected 6 IMU channels, got " + std::to_string(rec.imu.channels()));
  }
  if (rec.micro.size() != rec.length() || rec.macro.size() != rec.length()) {
    throw validation_error("recording " + rec.id + ": label tracks do not match signal length");
  }
  for (std::size_t t = 0; t < rec.length(); ++t) {
    if (!ClassCatalog::micro().contains(rec.micro[t]) || !ClassCatalog::macro().contains(rec.macro[t])) {
      throw validation_error("recording " + rec.id + ": unknown class id at sample " + std::to_string(t));
    }
  }
  validate_nesting(extract_segments(rec.micro), extract_segments(rec.macro));
}

inline std::vector<AnnotationRecord> annotations_from_tracks(const Recording& rec) {
  std::vector<AnnotationRecord> out;
  for (Scale scale : {Scale::macro, Scale::micro}) {
    const auto& track = scale == Scale::micro ? rec.micro : rec.macro;
    for (const auto& s : extract_segments(track)) {
      out.push_back({scale, ClassCatalog::for_scale(scale).name(s.cls), s.start, s.end, rec.subject, rec.scenario});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  return out;
}

// ---------------------------------------------------------------------------
// File formats
//
// Signal: CSV with header "sample,ax,ay,az,gx,gy,gz", one row per sample.
// Annotations: one JSON object per line with keys scale, class_name, start_sample,
// end_sample_exclusive, subject, scenario; sorted by start_sample.

inline constexpr std::string_view kSignalHeader = "sample,ax,ay,az,gx,gy,gz";

inline std::string signal_to_csv(const ChannelSequence& imu) {
  detail::require_dim(imu.channels(), kImuChannels, "signal channels");
  std::string out(kSignalHeader);
  out += '\n';
  for (std::size_t t = 0; t < imu.length(); ++t) {
    out += std::to_string(t);
    for (std::size_t c = 0; c < kImuChannels; ++c) {
      out += ',';
      out += format_double(imu(c, t));
    }
    out += '\n';
  }
  return out;
}

inline ChannelSequence parse_signal_csv(std::string_view text, const std::string& origin = "signal") {
  std::vector<double> columns[kImuChannels];
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != kSignalHeader) throw validation_error(origin + ": bad header '" + std::string(line) + "'");
      header_seen = true;
      continue;
    }
    double fields[kImuChannels + 1];
    std::size_t f = 0, start = 0;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string_view::npos) comma = line.size();
      if (f > kImuChannels) throw validation_error(origin + ":" + std::to_string(line_no) + ": too many fields");
      const char* b = line.data() + start;
      const char* e = line.data() + comma;
      auto [ptr, ec] = std::from_chars(b, e, fields[f]);
      if (ec != std::errc{} || ptr != e) {
        throw validation_error(origin + ":" + std::to_string(line_no) + ": bad number '" + std::string(b, e) + "'");
      }
      ++f;
      start = comma + 1;
      if (comma == line.size()) break;
    }
    if (f != kImuChannels + 1) throw validation_error(origin + ":" + std::to_string(line_no) + ": expected 7 fields");
    const std::size_t expected_index = columns[0].size();
    if (fields[0] != static_cast<double>(expected_index)) {
      throw validation_error(origin + ":" + std::to_string(line_no) + ": sample index " + std::to_string(fields[0]) +
                             " out of sequence (expected " + std::to_string(expected_index) + ")");
    }
    for (std::size_t c = 0; c < kImuChannels; ++c) columns[c].push_back(fields[c + 1]);
  }
  if (!header_seen) throw validation_error(origin + ": empty signal file");
  const std::size_t length = columns[0].size();
  if (length == 0) throw validation_error(origin + ": no samples");
  std::vector<double> values;
  values.reserve(length * kImuChannels);
  for (auto& col : columns) values.insert(values.end(), col.begin(), col.end());
  return ChannelSequence(kImuChannels, length, std::move(values));
}

inline std::string annotations_to_jsonl(std::span<const AnnotationRecord> records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["scale"] = to_string(r.scale);
    j["class_name"] = r.class_name;
    j["start_sample"] = r.start;
    j["end_sample_exclusive"] = r.end;
    j["subject"] = r.subject;
    j["scenario"] = to_string(r.scenario);
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<AnnotationRecord> parse_annotations(std::string_view text, const std::string& origin = "annotations") {
  std::vector<AnnotationRecord> out;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      AnnotationRecord r;
      r.scale = parse_scale(j.at("scale").get<std::string>());
      r.class_name = j.at("class_name").get<std::string>();
      const auto start = j.at("start_sample").get<long long>();
      const auto end = j.at("end_sample_exclusive").get<long long>();
      if (start < 0 || end < 0) throw validation_error("negative sample index");
      r.start = static_cast<std::size_t>(start);
      r.end = static_cast<std::size_t>(end);
      r.subject = j.at("subject").get<std::string>();
      r.scenario = parse_scenario(j.at("scenario").get<std::string>());
      out.push_back(std::move(r));
    } catch (const validation_error& e) {
      throw validation_error(origin + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const std::exception& e) {
      throw validation_error(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].start < out[i - 1].start) {
      throw validation_error(origin + ":" + std::to_string(i + 1) + ": records not sorted by start_sample");
    }
  }
  return out;
}

/// Reads a signal and its annotations into a validated Recording. Unannotated samples are
/// class 0. Subject and scenario come from the annotation records; an empty annotation file
/// falls back to `subject` (or the signal file stem) and `scenario`.
inline Recording load_recording(const std::string& signal_path, const std::string& annotation_path,
                                std::string subject = {}, Scenario scenario = Scenario::lab) {
  Recording rec;
  rec.imu = parse_signal_csv(read_file(signal_path), signal_path);
  const auto records = parse_annotations(read_file(annotation_path), annotation_path);
  const auto [micro, macro] = validate_annotations(records, rec.length());
  if (!records.empty()) {
    subject = records.front().subject;
    scenario = records.front().scenario;
    for (const auto& r : records) {
      if (r.subject != subject || r.scenario != scenario) {
        throw validation_error(annotation_path + ": mixed subjects or scenarios in one file");
      }
    }
  }
  if (subject.empty()) subject = std::filesystem::path(signal_path).stem().string();
  rec.subject = subject;
  rec.id = subject;
  rec.scenario = scenario;
  rec.micro = paint_segments(micro, rec.length());
  rec.macro = paint_segments(macro, rec.length());
  validate_recording(rec);
  return rec;
}

inline void save_recording(const Recording& rec, const std::string& signal_path, const std::string& annotation_path) {
  validate_recording(rec);
  write_file(signal_path, signal_to_csv(rec.imu));
  write_file(annotation_path, annotations_to_jsonl(annotations_from_tracks(rec)));
}

// ---------------------------------------------------------------------------
// Encoding

/// Indicator matrix, classes x T, with exactly one 1 per column.
inline ChannelSequence one_hot(std::span<const int> track, const ClassCatalog& catalog) {
  ChannelSequence out(catalog.size(), track.size());
  for (std::size_t t = 0; t < track.size(); ++t) {
    if (!catalog.contains(track[t])) {
      throw validation_error("one_hot: unknown " + std::string(to_string(catalog.scale())) + " class id " +
                             std::to_string(track[t]) + " at sample " + std::to_string(t));
    }
    out(static_cast<std::size_t>(track[t]), t) = 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slicing

struct Slice {
  std::size_t start = 0;
  ChannelSequence imu;  // always `window` samples
  LabelTrack micro;
  LabelTrack macro;
  SampleMask mask;        // 0 on zero-padded samples past the end of the recording
  SampleMask micro_mask;  // `mask` further restricted by the micro-label budget
};

struct SliceSet {
  std::string recording_id;
  std::vector<Slice> slices;
};

/// Windows of `window` samples starting at 0, hop, 2*hop, ... until one reaches the end of
/// the recording. A final short window is zero-padded and its padding masked.
/// `micro_mask`, if non-empty, is a recording-level mask for the micro cross entropy.
inline SliceSet slice_recording(const Recording& rec, std::span<const std::uint8_t> micro_mask = {},
                                std::size_t window = kSliceLength, std::size_t hop = kSliceHop) {
  if (window == 0 || hop == 0) throw std::invalid_argument("slice_recording: window and hop must be positive");
  const std::size_t T = rec.length();
  if (T == 0) throw validation_error("slice_recording: empty recording " + rec.id);
  if (!micro_mask.empty()) detail::require_dim(micro_mask.size(), T, "micro mask length");
  SliceSet set;
  set.recording_id = rec.id;
  for (std::size_t start = 0;; start += hop) {
    Slice s;
    s.start = start;
    s.imu = rec.imu.window(start, window);
    s.micro.assign(window, classes::others);
    s.macro.assign(window, classes::others);
    s.mask.assign(window, 0);
    s.micro_mask.assign(window, 0);
    for (std::size_t i = 0; i < window && start + i < T; ++i) {
      s.micro[i] = rec.micro[start + i];
      s.macro[i] = rec.macro[start + i];
      s.mask[i] = 1;
      s.micro_mask[i] = micro_mask.empty() ? 1 : micro_mask[start + i];
    }
    set.slices.push_back(std::move(s));
    if (start + window >= T) break;
  }
  return set;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-channel mean and standard deviation.
struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Statistics over the unmasked samples of the given slices.
inline NormalizationStats compute_normalization(std::span<const Slice* const> slices) {
  if (slices.empty()) throw std::invalid_argument("compute_normalization: no slices");
  const std::size_t C = slices.front()->imu.channels();
  std::vector<double> sum(C, 0.0), sumsq(C, 0.0);
  double n = 0.0;
  for (const Slice* s : slices) {
    for (std::size_t t = 0; t < s->imu.length(); ++t) {
      if (!s->mask[t]) continue;
      n += 1.0;
      for (std::size_t c = 0; c < C; ++c) {
        sum[c] += s->imu(c, t);
        sumsq[c] += s->imu(c, t) * s->imu(c, t);
      }
    }
  }
  if (n == 0.0) throw std::invalid_argument("compute_normalization: every sample is masked");
  NormalizationStats st{std::vector<double>(C), std::vector<double>(C)};
  for (std::size_t c = 0; c < C; ++c) {
    st.mean[c] = sum[c] / n;
    const double var = std::max(sumsq[c] / n - st.mean[c] * st.mean[c], 0.0);
    st.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return st;
}

/// z-scores each channel. Samples with a zero mask entry stay exactly zero.
inline ChannelSequence normalize(const ChannelSequence& x, const NormalizationStats& st,
                                 std::span<const std::uint8_t> mask = {}) {
  detail::require_dim(st.mean.size(), x.channels(), "normalization channels");
  ChannelSequence out(x.channels(), x.length());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    for (std::size_t t = 0; t < x.length(); ++t) {
      if (!mask.empty() && !mask[t]) continue;
      out(c, t) = (x(c, t) - st.mean[c]) / st.stddev[c];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Folds

enum class Protocol { lab_losocv, home_generalization };

inline std::string_view to_string(Protocol p) {
  return p == Protocol::lab_losocv ? "lab_losocv" : "home_generalization";
}

inline Protocol parse_protocol(std::string_view s) {
  if (s == "lab_losocv") return Protocol::lab_losocv;
  if (s == "home_generalization") return Protocol::home_generalization;
  throw std::invalid_argument("unknown protocol '" + std::string(s) + "'");
}

struct RecordingInfo {
  std::string id;
  std::string subject;
  Scenario scenario = Scenario::lab;
};

struct Fold {
  std::string test_subject;
  std::vector<std::string> test_recordings;
  std::vector<std::string> train_recordings;
};

struct FoldPlan {
  Protocol protocol = Protocol::lab_losocv;
  std::vector<Fold> folds;
};

/// Leave-one-subject-out folds, ordered by subject id.
///  lab_losocv: one fold per lab subject; training = the other lab subjects' recordings.
///  home_generalization: one fold per home subject; training = every lab recording plus
///  the other home subjects' recordings.
inline FoldPlan build_folds(std::span<const RecordingInfo> recordings, Protocol protocol) {
  std::set<std::string> ids;
  std::map<std::string, Scenario> subject_scenario;
  for (const auto& r : recordings) {
    if (!ids.insert(r.id).second) throw validation_error("duplicate recording id '" + r.id + "'");
    auto [it, inserted] = subject_scenario.try_emplace(r.subject, r.scenario);
    if (!inserted && it->second != r.scenario) {
      throw validation_error("duplicate subject id '" + r.subject + "' across lab and home scenarios");
    }
  }
  const Scenario held_out = protocol == Protocol::lab_losocv ? Scenario::lab : Scenario::home;
  std::vector<std::string> test_subjects;
  for (const auto& [subject, scenario] : subject_scenario) {
    if (scenario == held_out) test_subjects.push_back(subject);
  }
  const std::size_t min_subjects = protocol == Protocol::lab_losocv ? 2 : 1;
  if (test_subjects.size() < min_subjects || subject_scenario.size() < 2) {
    throw validation_error("build_folds: need at least 2 subjects for " + std::string(to_string(protocol)));
  }
  FoldPlan plan;
  plan.protocol = protocol;
  for (const auto& subject : test_subjects) {
    Fold f;
    f.test_subject = subject;
    for (const auto& r : recordings) {
      if (r.subject == subject) {
        f.test_recordings.push_back(r.id);
      } else if (protocol == Protocol::home_generalization || r.scenario == Scenario::lab) {
        f.train_recordings.push_back(r.id);
      }
    }
    std::sort(f.test_recordings.begin(), f.test_recordings.end());
    std::sort(f.train_recordings.begin(), f.train_recordings.end());
    if (f.train_recordings.empty()) throw validation_error("build_folds: fold " + subject + " has no training data");
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Dataset directory
//
// manifest.json lists every recording: {"recordings": [{"id", "subject", "scenario",
// "signal", "annotations", "signal_sha256", "annotations_sha256",
// "confusers": [[micro_class_id, start, end], ...]}]}
// File names are relative to the manifest's directory.

struct Dataset {
  std::vector<Recording> recordings;
  // Isolated single repetitions embedded in background, per recording id (both tracks say "others").
  std::map<std::string, std::vector<Segment>> confusers;

  const Recording& get(const std::string& id) const {
    for (const auto& r : recordings) {
      if (r.id == id) return r;
    }
    throw std::out_of_range("no recording '" + id + "' in dataset");
  }

  std::vector<RecordingInfo> infos() const {
    std::vector<RecordingInfo> out;
    for (const auto& r : recordings) out.push_back({r.id, r.subject, r.scenario});
    return out;
  }
};

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const auto manifest = nlohmann::json::parse(read_file((root / "manifest.json").string()));
  Dataset ds;
  for (const auto& entry : manifest.at("recordings")) {
    const auto signal = (root / entry.at("signal").get<std::string>()).string();
    const auto ann = (root / entry.at("annotations").get<std::string>()).string();
    Recording rec = load_recording(signal, ann, entry.at("subject").get<std::string>(),
                                   parse_scenario(entry.at("scenario").get<std::string>()));
    rec.id = entry.at("id").get<std::string>();
    if (entry.contains("confusers")) {
      auto& list = ds.confusers[rec.id];
      for (const auto& c : entry.at("confusers")) {
        list.push_back({c.at(0).get<int>(), c.at(1).get<std::size_t>(), c.at(2).get<std::size_t>()});
      }
    }
    ds.recordings.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace dsmstcn
