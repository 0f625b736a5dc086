#include "veil/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "veil/errors.hpp"
#include "veil/rng.hpp"

namespace veil {

std::vector<int> LabeledDataset::labels() const {
  std::vector<int> out;
  out.reserve(classes.size());
  for (const auto& [label, _] : classes) out.push_back(label);
  return out;
}

std::size_t LabeledDataset::train_size() const {
  std::size_t n = 0;
  for (const auto& [_, c] : classes) n += c.train.size();
  return n;
}

std::size_t LabeledDataset::test_size() const {
  std::size_t n = 0;
  for (const auto& [_, c] : classes) n += c.test.size();
  return n;
}

LabeledDataset LabeledDataset::subset(const std::vector<int>& keep) const {
  LabeledDataset out;
  out.id = id;
  out.split_fraction = split_fraction;
  out.split_seed = split_seed;
  for (int label : keep) {
    auto it = classes.find(label);
    if (it == classes.end()) {
      throw DatasetError("class " + std::to_string(label) + " not in dataset " + id);
    }
    out.classes.emplace(label, it->second);
  }
  return out;
}

void LabeledDataset::validate() const {
  const Image* first = nullptr;
  for (const auto& [label, c] : classes) {
    for (const auto* group : {&c.train, &c.test}) {
      for (const auto& img : *group) {
        img.validate();
        if (!first) first = &img;
        if (!img.same_shape(*first)) {
          throw DatasetError("class " + std::to_string(label) + " has mismatched image shape");
        }
      }
    }
  }
}

Samples train_samples(const LabeledDataset& data) {
  Samples s;
  for (const auto& [label, c] : data.classes) {
    for (const auto& img : c.train) {
      s.images.push_back(&img);
      s.labels.push_back(label);
    }
  }
  return s;
}

Samples test_samples(const LabeledDataset& data) {
  Samples s;
  for (const auto& [label, c] : data.classes) {
    for (const auto& img : c.test) {
      s.images.push_back(&img);
      s.labels.push_back(label);
    }
  }
  return s;
}

LabeledDataset load_dataset(const std::filesystem::path& root, double split_fraction,
                            std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!(split_fraction > 0.0 && split_fraction <= 1.0)) {
    throw ParamError("split fraction must be in (0, 1]");
  }
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());

  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DatasetError("no class directories under " + root.string());

  LabeledDataset data;
  data.id = root.filename().string();
  data.split_fraction = split_fraction;
  data.split_seed = seed;

  for (std::size_t k = 0; k < dirs.size(); ++k) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dirs[k])) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") {
        files.push_back(entry.path());
      }
    }
    if (files.empty()) throw DatasetError("class directory has no PNG files: " + dirs[k].string());
    std::sort(files.begin(), files.end());

    const int label = static_cast<int>(k);
    SeededRng rng(mix_seed(seed, static_cast<std::uint64_t>(label)));
    const auto order = rng.permutation(files.size());
    const auto n_train = static_cast<std::size_t>(std::lround(split_fraction * files.size()));

    ClassImages c;
    c.name = dirs[k].filename().string();
    for (std::size_t i = 0; i < order.size(); ++i) {
      const auto& path = files[order[i]];
      Image img = load_png(path);
      if (i < n_train) {
        c.train.push_back(std::move(img));
        c.train_paths.push_back(path.string());
      } else {
        c.test.push_back(std::move(img));
        c.test_paths.push_back(path.string());
      }
    }
    data.classes.emplace(label, std::move(c));
  }
  data.validate();
  return data;
}

std::vector<NamedImage> load_image_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  }
  if (files.empty()) throw DatasetError("no PNG files in " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<NamedImage> out;
  for (const auto& f : files) out.push_back({f.string(), load_png(f)});
  return out;
}

}  // namespace veil
