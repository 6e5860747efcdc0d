#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsmstcn/catalog.hpp"

namespace dsmstcn {

/// A maximal run of one class: samples [start, end).
struct Segment {
  int cls = 0;
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const noexcept { return end - start; }
  bool contains(const Segment& other) const noexcept { return start <= other.start && other.end <= end; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Maximal constant-class runs of a track, skipping class 0. Sorted and disjoint.
inline std::vector<Segment> extract_segments(std::span<const int> track) {
  std::vector<Segment> out;
  std::size_t t = 0;
  while (t < track.size()) {
    std::size_t u = t + 1;
    while (u < track.size() && track[u] == track[t]) ++u;
    if (track[t] != classes::others) out.push_back({track[t], t, u});
    t = u;
  }
  return out;
}

/// Writes segments back into a track of the given length; unlabeled samples are class 0.
inline LabelTrack paint_segments(std::span<const Segment> segments, std::size_t length) {
  LabelTrack track(length, classes::others);
  for (const auto& s : segments) {
    if (s.start >= s.end || s.end > length) throw std::out_of_range("paint_segments: segment out of range");
    std::fill(track.begin() + static_cast<long>(s.start), track.begin() + static_cast<long>(s.end), s.cls);
  }
  return track;
}

}  // namespace dsmstcn
