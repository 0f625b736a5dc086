#pragma once

#include <ostream>
#include <vector>

#include "veil/cloak.hpp"

namespace veil {

/// Decoy-image job: candidate images are cloaked toward the user's
/// uncloaked anchors so a separate identity occupies the user's feature region.
struct SybilSpec {
  std::vector<Image> candidates;
  std::vector<Image> anchors;
  int per_anchor = 1;
  CloakParams params;

  void validate() const;
};

struct SybilImage {
  Image image;
  std::size_t anchor_index = 0;
  std::size_t candidate_index = 0;
  double initial_distance = 0.0;
  double final_distance = 0.0;
  double final_dssim = 0.0;
};

/// Cloak `candidate` toward `anchor`'s embedding.
CloakResult make_sybil(const ExtractorSet& phis, const Image& candidate, const Image& anchor,
                       const CloakParams& params);

/// For each anchor (in order), draw `per_anchor` candidates without
/// replacement from the pool (refilling the pool once exhausted) and cloak
/// each toward that anchor.
std::vector<SybilImage> build_sybil_set(const ExtractorSet& phis, const SybilSpec& spec,
                                        SeededRng& rng);

/// CSV manifest: sybil file, anchor file, indices, distances, dssim.
void write_sybil_manifest(std::ostream& os, const std::vector<SybilImage>& set,
                          const std::vector<std::string>& sybil_files,
                          const std::vector<std::string>& anchor_files);

}  // namespace veil
