#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsmstcn/catalog.hpp"
#include "dsmstcn/segments.hpp"
#include "dsmstcn/util.hpp"

namespace dsmstcn {

inline constexpr double kIouThreshold = 0.5;

struct Counts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const Counts&, const Counts&) = default;

  // An empty denominator gives 0.
  double precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
  double recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
};

/// Per-class sample-wise counts, indexed by class id (entry 0 is "others").
inline std::vector<Counts> samplewise_counts(std::span<const int> truth, std::span<const int> pred,
                                             const ClassCatalog& catalog) {
  if (truth.size() != pred.size()) {
    throw std::invalid_argument("samplewise: length mismatch " + std::to_string(truth.size()) + " vs " +
                                std::to_string(pred.size()));
  }
  std::vector<Counts> out(catalog.size());
  for (std::size_t t = 0; t < truth.size(); ++t) {
    if (!catalog.contains(truth[t]) || !catalog.contains(pred[t])) {
      throw std::invalid_argument("samplewise: unknown class id at sample " + std::to_string(t));
    }
    if (truth[t] == pred[t]) {
      ++out[truth[t]].tp;
    } else {
      ++out[pred[t]].fp;
      ++out[truth[t]].fn;
    }
  }
  return out;
}

struct ClassPrf {
  Counts counts;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool present = false;  // class occurs in truth or prediction
};

inline ClassPrf to_prf(const Counts& c) {
  return {c, c.precision(), c.recall(), c.f1(), c.tp + c.fp + c.fn > 0};
}

/// Sample-wise precision, recall and F1 per class id.
inline std::vector<ClassPrf> samplewise_prf(std::span<const int> truth, std::span<const int> pred,
                                            const ClassCatalog& catalog) {
  std::vector<ClassPrf> out;
  for (const auto& c : samplewise_counts(truth, pred, catalog)) out.push_back(to_prf(c));
  return out;
}

inline double segment_iou(const Segment& a, const Segment& b) {
  if (a.cls != b.cls) throw std::invalid_argument("segment_iou: class mismatch");
  const std::size_t lo = std::max(a.start, b.start);
  const std::size_t hi = std::min(a.end, b.end);
  const std::size_t inter = hi > lo ? hi - lo : 0;
  const std::size_t uni = a.length() + b.length() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Segment-level counts for one class. Predicted segments are visited in temporal order;
/// each picks the overlapping true segment with the largest IoU (earliest on ties). It is a
/// true positive if that IoU reaches the threshold and the true segment is still unmatched,
/// otherwise a false positive. True segments left unmatched are false negatives.
inline Counts segment_counts(std::span<const Segment> truth, std::span<const Segment> pred, int cls,
                             double threshold = kIouThreshold) {
  Counts c;
  std::vector<const Segment*> ts;
  for (const auto& s : truth) {
    if (s.cls == cls) ts.push_back(&s);
  }
  std::vector<char> used(ts.size(), 0);
  std::size_t first = 0;  // first true segment that may still overlap
  for (const auto& p : pred) {
    if (p.cls != cls) continue;
    while (first < ts.size() && ts[first]->end <= p.start) ++first;
    double best = 0.0;
    std::size_t best_i = ts.size();
    for (std::size_t i = first; i < ts.size() && ts[i]->start < p.end; ++i) {
      const double iou = segment_iou(*ts[i], p);
      if (iou > best) {
        best = iou;
        best_i = i;
      }
    }
    if (best_i < ts.size() && best >= threshold && !used[best_i]) {
      used[best_i] = 1;
      ++c.tp;
    } else {
      ++c.fp;
    }
  }
  for (char u : used) c.fn += u ? 0 : 1;
  return c;
}

/// Segmental counts per class id (entry 0 unused).
inline std::vector<Counts> segmental_counts(std::span<const int> truth, std::span<const int> pred,
                                            const ClassCatalog& catalog, double threshold = kIouThreshold) {
  if (truth.size() != pred.size()) {
    throw std::invalid_argument("segmental: length mismatch " + std::to_string(truth.size()) + " vs " +
                                std::to_string(pred.size()));
  }
  const auto ts = extract_segments(truth);
  const auto ps = extract_segments(pred);
  std::vector<Counts> out(catalog.size());
  for (int c = 1; c < static_cast<int>(catalog.size()); ++c) out[c] = segment_counts(ts, ps, c, threshold);
  return out;
}

inline std::vector<ClassPrf> segmental_f1(std::span<const int> truth, std::span<const int> pred,
                                          const ClassCatalog& catalog, double threshold = kIouThreshold) {
  std::vector<ClassPrf> out;
  for (const auto& c : segmental_counts(truth, pred, catalog, threshold)) out.push_back(to_prf(c));
  return out;
}

// ---------------------------------------------------------------------------

/// Per-class sample-wise and segmental counts, "others" excluded. Reports from several
/// sequences or folds combine by adding counts (micro-averaging).
struct MetricsReport {
  Scale scale = Scale::macro;
  double threshold = kIouThreshold;
  std::vector<Counts> sample;   // indexed by class id, entry 0 unused
  std::vector<Counts> segment;  // indexed by class id, entry 0 unused
  std::uint64_t predicted_segments = 0;  // all classes

  static MetricsReport empty(Scale scale, double threshold = kIouThreshold) {
    const auto n = ClassCatalog::for_scale(scale).size();
    return {scale, threshold, std::vector<Counts>(n), std::vector<Counts>(n), 0};
  }

  const ClassCatalog& catalog() const { return ClassCatalog::for_scale(scale); }

  MetricsReport& operator+=(const MetricsReport& o) {
    if (o.scale != scale || o.threshold != threshold || o.sample.size() != sample.size()) {
      throw std::invalid_argument("cannot combine reports of different scale or threshold");
    }
    for (std::size_t c = 0; c < sample.size(); ++c) {
      sample[c] += o.sample[c];
      segment[c] += o.segment[c];
    }
    predicted_segments += o.predicted_segments;
    return *this;
  }

  /// Mean over exercise classes (ids 1..C-1).
  double mean_sample_f1() const {
    double s = 0.0;
    for (std::size_t c = 1; c < sample.size(); ++c) s += sample[c].f1();
    return s / static_cast<double>(sample.size() - 1);
  }
  double mean_segment_f1() const {
    double s = 0.0;
    for (std::size_t c = 1; c < segment.size(); ++c) s += segment[c].f1();
    return s / static_cast<double>(segment.size() - 1);
  }

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline MetricsReport evaluate_tracks(std::span<const int> truth, std::span<const int> pred, Scale scale,
                                     double threshold = kIouThreshold) {
  const auto& cat = ClassCatalog::for_scale(scale);
  MetricsReport r{scale, threshold, samplewise_counts(truth, pred, cat), segmental_counts(truth, pred, cat, threshold),
                  extract_segments(pred).size()};
  r.sample[0] = {};
  return r;
}

/// Tab-separated text, one row per class per metric family:
///   family  class  tp  fp  fn  precision  recall  f1
/// where family is "sample" or "segment@<threshold>".
inline std::string report_to_tsv(const MetricsReport& r) {
  std::ostringstream os;
  os << "family\tclass\ttp\tfp\tfn\tprecision\trecall\tf1\n";
  const std::string seg_family = "segment@" + format_double(r.threshold);
  for (const auto& [family, rows] : {std::pair<std::string, const std::vector<Counts>*>{"sample", &r.sample},
                                     std::pair<std::string, const std::vector<Counts>*>{seg_family, &r.segment}}) {
    for (std::size_t c = 1; c < rows->size(); ++c) {
      const Counts& k = (*rows)[c];
      os << family << '\t' << r.catalog().name(static_cast<int>(c)) << '\t' << k.tp << '\t' << k.fp << '\t' << k.fn
         << '\t' << format_double(k.precision()) << '\t' << format_double(k.recall()) << '\t'
         << format_double(k.f1()) << '\n';
    }
  }
  return os.str();
}

inline MetricsReport report_from_tsv(const std::string& text, Scale scale) {
  MetricsReport r = MetricsReport::empty(scale);
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  if (line != "family\tclass\ttp\tfp\tfn\tprecision\trecall\tf1") throw std::invalid_argument("report: bad header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string family, cls;
    Counts k;
    if (!(std::getline(ls, family, '\t') && std::getline(ls, cls, '\t') && ls >> k.tp >> k.fp >> k.fn)) {
      throw std::invalid_argument("report: bad row '" + line + "'");
    }
    const int id = r.catalog().id(cls);
    if (family == "sample") {
      r.sample[id] = k;
    } else if (family.rfind("segment@", 0) == 0) {
      r.threshold = std::stod(family.substr(8));
      r.segment[id] = k;
    } else {
      throw std::invalid_argument("report: unknown family '" + family + "'");
    }
  }
  return r;
}

}  // namespace dsmstcn
