#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "veil/dataset.hpp"
#include "veil/image.hpp"

namespace veil {

/// Procedural face-like corpus: each class is an identity with its own
/// geometry and palette; each image jitters pose, scale, lighting,
/// background and sensor noise. Pixels are quantized to 8 bits so the
/// in-memory corpus equals its PNG round trip.
struct CorpusSpec {
  int classes = 20;
  int images_per_class = 30;
  int height = 32;
  int width = 32;
  int channels = 3;

  void validate() const;
};

/// images[class][i]; identities depend only on (seed, class index).
std::vector<std::vector<Image>> generate_corpus(const CorpusSpec& spec, std::uint64_t seed);

/// Write `root/class_XX/img_YYY.png` for the generated corpus.
void make_desk_corpus(const CorpusSpec& spec, std::uint64_t seed,
                      const std::filesystem::path& root);

/// In-memory equivalent of make_desk_corpus followed by load_dataset.
LabeledDataset desk_dataset(const CorpusSpec& spec, std::uint64_t seed, double split_fraction,
                            std::uint64_t split_seed);

}  // namespace veil
