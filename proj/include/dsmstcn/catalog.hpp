#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dsmstcn {

/// Per-sample class ids. Id 0 is "others" at both scales.
using LabelTrack = std::vector<int>;

enum class Scale { micro, macro };

inline std::string_view to_string(Scale s) { return s == Scale::micro ? "micro" : "macro"; }

inline Scale parse_scale(std::string_view s) {
  if (s == "micro") return Scale::micro;
  if (s == "macro") return Scale::macro;
  throw std::invalid_argument("unknown scale '" + std::string(s) + "'");
}

namespace classes {
inline constexpr int others = 0;

// macro ids
inline constexpr int ankle_plantarflexors = 1;
inline constexpr int knee_bends = 2;
inline constexpr int abdominal_muscles = 3;
inline constexpr int chair_rising = 4;

// micro ids
inline constexpr int micro_ankle_plantarflexors = 1;
inline constexpr int micro_knee_bends = 2;
inline constexpr int micro_abdominal_muscles = 3;
inline constexpr int sit_to_stand = 4;
inline constexpr int stand_to_sit = 5;
}  // namespace classes

class ClassCatalog {
 public:
  ClassCatalog(Scale scale, std::vector<std::string> names) : scale_(scale), names_(std::move(names)) {
    if (names_.empty() || names_.front() != "others") {
      throw std::invalid_argument("class catalog must start with 'others'");
    }
  }

  static const ClassCatalog& macro() {
    static const ClassCatalog c(Scale::macro,
                                {"others", "ankle_plantarflexors", "knee_bends", "abdominal_muscles", "chair_rising"});
    return c;
  }

  static const ClassCatalog& micro() {
    static const ClassCatalog c(Scale::micro, {"others", "micro_ankle_plantarflexors", "micro_knee_bends",
                                               "micro_abdominal_muscles", "sit_to_stand", "stand_to_sit"});
    return c;
  }

  static const ClassCatalog& for_scale(Scale s) { return s == Scale::micro ? micro() : macro(); }

  Scale scale() const noexcept { return scale_; }
  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  bool contains(int id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < names_.size(); }

  int id(std::string_view name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) {
      throw std::invalid_argument("unknown " + std::string(to_string(scale_)) + " class '" + std::string(name) + "'");
    }
    return static_cast<int>(it - names_.begin());
  }

 private:
  Scale scale_;
  std::vector<std::string> names_;
};

/// The macro exercise a micro movement belongs to. Both chair-rising movements map to chair rising.
inline int macro_of_micro(int micro_id) {
  switch (micro_id) {
    case classes::others: return classes::others;
    case classes::micro_ankle_plantarflexors: return classes::ankle_plantarflexors;
    case classes::micro_knee_bends: return classes::knee_bends;
    case classes::micro_abdominal_muscles: return classes::abdominal_muscles;
    case classes::sit_to_stand:
    case classes::stand_to_sit: return classes::chair_rising;
    default: throw std::out_of_range("unknown micro class id " + std::to_string(micro_id));
  }
}

}  // namespace dsmstcn
