#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "veil/dataset.hpp"
#include "veil/image.hpp"
#include "veil/rng.hpp"

namespace veil {

/// Embedding produced by a feature extractor.
struct FeatureVector {
  Eigen::VectorXd values;

  FeatureVector() = default;
  explicit FeatureVector(Eigen::VectorXd v) : values(std::move(v)) {}

  Eigen::Index dim() const { return values.size(); }
  bool operator==(const FeatureVector& other) const {
    return values.size() == other.values.size() && values == other.values;
  }
};

/// Euclidean distance; throws DimensionError on mismatched sizes.
double feature_distance(const FeatureVector& u, const FeatureVector& v);

/// Network shape. A convolutional extractor is `conv_widths.size()` blocks of
/// 3x3 conv -> ReLU -> 2x2 average pool, then a global average pool and a
/// dense layer to `embed_dim`. A flatten extractor has no weights and embeds
/// an image as its raw pixel vector.
struct ArchConfig {
  int height = 32;
  int width = 32;
  int channels = 3;
  std::vector<int> conv_widths{16, 32, 64};
  int embed_dim = 64;
  bool flatten = false;

  static ArchConfig flatten_pixels(int height, int width, int channels);

  int embedding_dim() const;
  std::size_t param_count() const;
  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

struct PgdConfig {
  int steps = 100;
  double step_size = 0.01;
  double epsilon = 8.0 / 255.0;

  void validate() const;
  bool operator==(const PgdConfig&) const = default;
};

/// Where a set of weights came from.
struct Provenance {
  std::string dataset_id;
  std::string mode = "untrained";  // "extractor", "scratch" or "untrained"
  int epochs = 0;
  std::uint64_t seed = 0;
  bool robust = false;
  int robust_epochs = 0;
  std::optional<PgdConfig> pgd;
  double train_accuracy = 0.0;
};

/// Affine classification layer over embeddings, rows indexed by class.
struct LinearHead {
  std::vector<int> labels;  // row -> class id
  Eigen::MatrixXd weights;  // classes x dim
  Eigen::VectorXd bias;

  int rows() const { return static_cast<int>(labels.size()); }
  /// Row of `label`, or -1.
  int row_of(int label) const;
  Eigen::VectorXd logits(const FeatureVector& z) const;
};

/// Scalar functional of an embedding. Returns the value and writes
/// d value / d embedding into `grad` (pre-sized to the embedding dimension).
using EmbeddingLoss = std::function<double(const Eigen::VectorXd& embedding, Eigen::VectorXd& grad)>;

struct PixelGradient {
  double value = 0.0;
  std::vector<double> grad;  // same layout as Image::pixels()
};

/// Per-image training knobs for the supervised loops.
struct TrainOptions {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

/// Differentiable map from images to d-dimensional embeddings, optionally
/// carrying a classification head.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;

  /// Freshly initialized (He-normal) weights, rounded to float32 precision.
  static FeatureExtractor initialize(const ArchConfig& arch, std::uint64_t seed);

  const ArchConfig& arch() const { return arch_; }
  const Provenance& provenance() const { return provenance_; }
  Provenance& provenance() { return provenance_; }
  int embedding_dim() const { return arch_.embedding_dim(); }

  std::span<const double> weights() const { return params_; }
  std::span<double> mutable_weights() { return params_; }
  /// FNV-1a over the float32 image of the backbone weights.
  std::uint64_t checksum() const;

  bool has_head() const { return head_.has_value(); }
  const LinearHead& head() const;
  LinearHead& head();
  void set_head(LinearHead head) { head_ = std::move(head); }
  void drop_head() { head_.reset(); }

  FeatureVector embed(const Image& x) const;
  std::vector<FeatureVector> embed_batch(std::span<const Image> xs) const;
  std::vector<FeatureVector> embed_batch(std::span<const Image* const> xs) const;

  /// Loss value and its gradient with respect to every pixel of x.
  PixelGradient embed_with_grad(const Image& x, const EmbeddingLoss& loss) const;

  /// Batched form: one loss per image (losses.size() == xs.size()).
  std::vector<PixelGradient> embed_with_grad_batch(std::span<const Image* const> xs,
                                                   std::span<const EmbeddingLoss> losses) const;

  /// Head logits; throws ModelError without a head.
  Eigen::VectorXd logits(const Image& x) const;
  /// Predicted class id and softmax confidence.
  std::pair<int, double> predict(const Image& x) const;

  void save(const std::filesystem::path& path) const;
  static FeatureExtractor load(const std::filesystem::path& path);

  /// Throws DimensionError unless x matches the input shape.
  void check_input(const Image& x) const;

 private:
  friend class ExtractorTrainer;

  ArchConfig arch_;
  std::vector<double> params_;
  std::optional<LinearHead> head_;
  Provenance provenance_;
};

/// Supervised classification training of backbone + head with cross-entropy
/// (Adam, minibatches). Requires >= 2 classes with >= 5 train images each.
FeatureExtractor train_extractor(const LabeledDataset& data, const ArchConfig& arch,
                                 const TrainOptions& options);

/// Head-accuracy of phi over the test split (classes missing from the head
/// count as errors).
double classification_accuracy(const FeatureExtractor& phi, const Samples& samples);

/// Iterated sign-gradient ascent on the head's cross-entropy for `label`,
/// projected onto the max-norm ball and unit box each step, from a random
/// start inside the ball.
Image pgd_perturb(const FeatureExtractor& phi, const Image& x, int label, const PgdConfig& cfg,
                  SeededRng& rng);

/// Fraction of samples whose predicted label changes away from the true
/// label under pgd_perturb.
double pgd_success_rate(const FeatureExtractor& phi, const Samples& samples, const PgdConfig& cfg,
                        std::uint64_t seed);

/// Continue training a trained extractor for `extra_epochs` epochs on
/// batches that mix clean inputs with their PGD perturbations (true labels).
FeatureExtractor robust_train(const FeatureExtractor& phi, const LabeledDataset& data,
                              int extra_epochs, const PgdConfig& cfg, std::uint64_t seed,
                              const TrainOptions& options = {});

}  // namespace veil
