#pragma once

#include <map>
#include <string>
#include <vector>

#include "veil/extractor.hpp"
#include "veil/image.hpp"
#include "veil/rng.hpp"

namespace veil {

enum class TargetMode { kMaximal, kAverage };

std::string to_string(TargetMode mode);
/// Parses "maximal" / "average"; throws ParamError otherwise.
TargetMode target_mode_from_string(const std::string& s);

struct TargetSelection {
  int chosen_class = -1;
  int candidate_count = 0;
  TargetMode mode = TargetMode::kMaximal;
  /// class id -> min over user images of the distance to that class centroid
  std::map<int, double> scores;

  bool operator==(const TargetSelection&) const = default;
};

/// Mean embedding of `images`; throws DatasetError when empty.
FeatureVector class_centroid(const FeatureExtractor& phi, const std::vector<Image>& images);

/// Pick the cloak target class among `candidates`.
///
/// Each candidate k is scored min_{x in user} ||phi(x) - C_k||. Maximal mode
/// returns the highest score; average mode returns the score closest to the
/// mean score. Scores within a relative 1e-12 count as ties and go to the
/// lowest class id. At most `max_candidates` classes are considered (drawn
/// from `rng` when more are supplied); 0 means all.
TargetSelection select_target(const FeatureExtractor& phi, const std::vector<Image>& user_images,
                              const std::map<int, std::vector<Image>>& candidates,
                              TargetMode mode, SeededRng& rng, int max_candidates = 20);

}  // namespace veil
