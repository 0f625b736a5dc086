#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "veil/dataset.hpp"
#include "veil/extractor.hpp"

namespace veil {

enum class TrainingMode { kTransfer, kScratch };

std::string to_string(TrainingMode mode);

/// The tracker's recognition model: a backbone plus a softmax head.
class Classifier {
 public:
  Classifier(FeatureExtractor model, TrainingMode mode)
      : model_(std::move(model)), mode_(mode) {}

  const FeatureExtractor& model() const { return model_; }
  const LinearHead& head() const { return model_.head(); }
  TrainingMode mode() const { return mode_; }
  const std::vector<int>& labels() const { return model_.head().labels; }

  std::pair<int, double> predict(const Image& x) const { return model_.predict(x); }
  std::vector<std::pair<int, double>> predict_batch(std::span<const Image* const> xs) const;

 private:
  FeatureExtractor model_;
  TrainingMode mode_;
};

struct HeadTrainOptions {
  int epochs = 20;
  double learning_rate = 1e-2;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

/// Fit a softmax head on frozen embeddings of `data`'s train split. The
/// backbone weights are copied untouched.
Classifier transfer_train(const FeatureExtractor& phi, const LabeledDataset& data,
                          const HeadTrainOptions& options);

/// Train backbone and head from random initialization.
Classifier scratch_train(const ArchConfig& arch, const LabeledDataset& data,
                         const TrainOptions& options);

struct Prediction {
  std::string image;
  int true_label = 0;
  int predicted = 0;
  double confidence = 0.0;
};

struct ProtectionReport {
  int user_label = 0;
  double protection_success_rate = 0.0;
  double normal_accuracy = 0.0;
  std::vector<Prediction> user_predictions;
  std::vector<Prediction> other_predictions;

  /// Rates recomputed from the stored predictions.
  std::pair<double, double> recompute() const;
};

/// Protection = fraction of the user's clean test images NOT predicted as
/// `user_label`; normal accuracy = accuracy over `others` (user excluded).
ProtectionReport evaluate_protection(const Classifier& model, int user_label,
                                     const std::vector<Image>& user_clean_test,
                                     const Samples& others,
                                     const std::vector<std::string>& user_names = {},
                                     const std::vector<std::string>& other_names = {});

nlohmann::json to_json(const ProtectionReport& report);
/// image path, true label, predicted label, confidence.
void write_predictions_csv(std::ostream& os, const ProtectionReport& report);

/// Per-class detector statistics. `score` is the quantity compared against
/// the threshold: the nearest-centroid distance for the centroid detector,
/// the 2-means centroid separation for the bimodality detector.
struct ClassDetection {
  int label = 0;
  double score = 0.0;
  double reference_mean = 0.0;
  double reference_std = 0.0;
  double z = 0.0;  // signed deviation in reference standard deviations
  bool flagged = false;
};

struct DetectionResult {
  std::string detector;
  double z_threshold = 3.0;
  std::vector<ClassDetection> classes;

  std::vector<int> flagged() const;
};

using ClassEmbeddings = std::map<int, std::vector<FeatureVector>>;

/// Flag classes whose nearest other-centroid distance lies more than
/// z_threshold standard deviations below the mean pairwise centroid
/// separation, where the population is every unordered pair of classes other
/// than the class under test. Needs >= 3 classes.
DetectionResult detect_centroid_anomaly(const ClassEmbeddings& embeddings,
                                        double z_threshold = 3.0);
DetectionResult detect_centroid_anomaly(const FeatureExtractor& phi, const LabeledDataset& data,
                                        double z_threshold = 3.0);

/// 2-means result for one class (farthest-pair seeding, Lloyd iterations to
/// a fixed point).
struct TwoMeans {
  Eigen::VectorXd centroid_a;
  Eigen::VectorXd centroid_b;
  std::vector<int> assignment;
  double separation = 0.0;
  int iterations = 0;
};

TwoMeans two_means(const std::vector<FeatureVector>& points);

/// Flag classes whose 2-means centroid separation exceeds the mean over the
/// other classes by more than z_threshold standard deviations. Needs >= 3
/// classes with >= 4 images each.
DetectionResult detect_bimodal_classes(const ClassEmbeddings& embeddings,
                                       double z_threshold = 3.0);
DetectionResult detect_bimodal_classes(const FeatureExtractor& phi, const LabeledDataset& data,
                                       double z_threshold = 3.0);

nlohmann::json to_json(const DetectionResult& result);

/// Embeddings of every train image, grouped by class.
ClassEmbeddings embed_classes(const FeatureExtractor& phi, const LabeledDataset& data);

}  // namespace veil
