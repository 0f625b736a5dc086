#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "veil/image.hpp"

namespace veil {

/// Images of one class, already split into train and test.
struct ClassImages {
  std::string name;
  std::vector<Image> train;
  std::vector<Image> test;
  std::vector<std::string> train_paths;
  std::vector<std::string> test_paths;
};

/// Class-indexed image collection with a train/test split per class.
struct LabeledDataset {
  std::string id;
  std::map<int, ClassImages> classes;
  double split_fraction = 0.8;
  std::uint64_t split_seed = 0;

  std::vector<int> labels() const;
  std::size_t class_count() const { return classes.size(); }
  std::size_t train_size() const;
  std::size_t test_size() const;

  /// Keep only the listed classes.
  LabeledDataset subset(const std::vector<int>& keep) const;

  /// Throws DatasetError on any violated invariant (image shapes must agree,
  /// images must be valid).
  void validate() const;
};

/// Flat (image, label) view used by the training loops.
struct Samples {
  std::vector<const Image*> images;
  std::vector<int> labels;
  std::size_t size() const { return images.size(); }
};

Samples train_samples(const LabeledDataset& data);
Samples test_samples(const LabeledDataset& data);

/// Read `root/<class>/<*.png>`; class ids are assigned in sorted directory
/// order. Each class is shuffled with a seed derived from (seed, class id)
/// and the first round(fraction * n) files go to train.
LabeledDataset load_dataset(const std::filesystem::path& root, double split_fraction,
                            std::uint64_t seed);

struct NamedImage {
  std::string path;
  Image image;
};

/// Every PNG directly under `dir`, sorted by file name. Throws DatasetError
/// when there are none.
std::vector<NamedImage> load_image_dir(const std::filesystem::path& dir);

}  // namespace veil
