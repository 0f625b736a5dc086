#include "veil/targeting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "veil/errors.hpp"

namespace veil {

std::string to_string(TargetMode mode) {
  return mode == TargetMode::kMaximal ? "maximal" : "average";
}

TargetMode target_mode_from_string(const std::string& s) {
  if (s == "maximal") return TargetMode::kMaximal;
  if (s == "average") return TargetMode::kAverage;
  throw ParamError("unknown target mode '" + s + "' (expected maximal or average)");
}

FeatureVector class_centroid(const FeatureExtractor& phi, const std::vector<Image>& images) {
  if (images.empty()) throw DatasetError("centroid of an empty image set");
  const auto embeddings = phi.embed_batch(std::span<const Image>(images));
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(phi.embedding_dim());
  for (const auto& e : embeddings) sum += e.values;
  return FeatureVector(sum / static_cast<double>(images.size()));
}

namespace {

bool nearly_equal(double a, double b) {
  return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace

TargetSelection select_target(const FeatureExtractor& phi, const std::vector<Image>& user_images,
                              const std::map<int, std::vector<Image>>& candidates,
                              TargetMode mode, SeededRng& rng, int max_candidates) {
  if (candidates.empty()) throw DatasetError("no candidate target classes");
  if (user_images.empty()) throw DatasetError("no user images for target selection");

  std::vector<int> ids;
  for (const auto& [id, images] : candidates) {
    if (images.empty()) throw DatasetError("candidate class " + std::to_string(id) + " is empty");
    ids.push_back(id);
  }
  if (max_candidates > 0 && ids.size() > static_cast<std::size_t>(max_candidates)) {
    const auto order = rng.permutation(ids.size());
    std::vector<int> sampled;
    for (int i = 0; i < max_candidates; ++i) sampled.push_back(ids[order[i]]);
    std::sort(sampled.begin(), sampled.end());
    ids = std::move(sampled);
  }

  const auto user = phi.embed_batch(std::span<const Image>(user_images));
  TargetSelection sel;
  sel.mode = mode;
  sel.candidate_count = static_cast<int>(ids.size());
  for (int id : ids) {
    const FeatureVector c = class_centroid(phi, candidates.at(id));
    double score = std::numeric_limits<double>::infinity();
    for (const auto& u : user) score = std::min(score, feature_distance(u, c));
    sel.scores[id] = score;
  }

  // ids ascend, so a strict improvement test keeps the lowest id on ties.
  if (mode == TargetMode::kMaximal) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& [id, score] : sel.scores) {
      if (sel.chosen_class < 0 || (score > best && !nearly_equal(score, best))) {
        best = score;
        sel.chosen_class = id;
      }
    }
  } else {
    double mean = 0.0;
    for (const auto& [_, score] : sel.scores) mean += score;
    mean /= static_cast<double>(sel.scores.size());
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [id, score] : sel.scores) {
      const double gap = std::abs(score - mean);
      if (sel.chosen_class < 0 || (gap < best && !nearly_equal(gap, best))) {
        best = gap;
        sel.chosen_class = id;
      }
    }
  }
  return sel;
}

}  // namespace veil
