#include "fixtures.hpp"

#include <cstdlib>
#include <mutex>
#include <unistd.h>

#include "veil/corpus.hpp"

namespace veil::testing {

namespace fs = std::filesystem;

Image random_image(int h, int w, int c, SeededRng& rng, double lo, double hi) {
  Image img(h, w, c);
  for (double& p : img.data()) p = rng.uniform(lo, hi);
  return img;
}

namespace {

struct TempRoot {
  fs::path path;
  ~TempRoot() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

}  // namespace

fs::path temp_dir(const std::string& tag) {
  static TempRoot root{fs::temp_directory_path() / ("veil_test_" + std::to_string(::getpid()))};
  const fs::path p = root.path / tag;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path cache_dir() {
  if (const char* env = std::getenv("VEIL_TEST_CACHE")) return env;
  return VEIL_TEST_CACHE_DEFAULT;
}

const LabeledDataset& desk_data() {
  static const LabeledDataset data = desk_dataset(CorpusSpec{}, 2, 0.8, 12);
  return data;
}

const LabeledDataset& public_data() {
  static const LabeledDataset data = [] {
    CorpusSpec spec;
    spec.classes = 40;
    return desk_dataset(spec, 1, 0.8, 11);
  }();
  return data;
}

namespace {

FeatureExtractor cached(const std::string& name, const LabeledDataset& data) {
  const fs::path path = cache_dir() / (name + ".ckpt");
  if (fs::exists(path)) return FeatureExtractor::load(path);
  TrainOptions opt;
  opt.seed = 5;
  FeatureExtractor phi = train_extractor(data, ArchConfig{}, opt);
  fs::create_directories(cache_dir());
  // Write then rename so concurrent test processes never read a partial file.
  const fs::path tmp = path.string() + ".tmp" + std::to_string(::getpid());
  phi.save(tmp);
  fs::rename(tmp, path);
  return phi;
}

}  // namespace

const FeatureExtractor& desk_extractor() {
  static const FeatureExtractor phi = cached("desk_phi", desk_data());
  return phi;
}

const FeatureExtractor& public_extractor() {
  static const FeatureExtractor phi = cached("public_phi", public_data());
  return phi;
}

}  // namespace veil::testing
