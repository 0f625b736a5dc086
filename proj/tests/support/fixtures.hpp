#pragma once

#include <filesystem>

#include "veil/dataset.hpp"
#include "veil/extractor.hpp"
#include "veil/image.hpp"
#include "veil/rng.hpp"

namespace veil::testing {

Image random_image(int h, int w, int c, SeededRng& rng, double lo = 0.0, double hi = 1.0);

/// Scratch directory unique to this process, removed at exit.
std::filesystem::path temp_dir(const std::string& tag);

/// The tracker-side desk corpus: 20 classes x 30 images, 32x32x3.
const LabeledDataset& desk_data();
/// The public pretraining corpus: 40 classes x 30 images.
const LabeledDataset& public_data();

/// Extractor trained on desk_data() (30 epochs, seed 5). Cached on disk
/// under the test cache directory; a cache miss trains it.
const FeatureExtractor& desk_extractor();
/// Extractor trained on public_data() (30 epochs, seed 5), cached likewise.
const FeatureExtractor& public_extractor();

/// Disk cache shared by the test binaries.
std::filesystem::path cache_dir();

}  // namespace veil::testing
