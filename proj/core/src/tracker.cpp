#include "veil/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include <nlohmann/json.hpp>

#include "network.hpp"
#include "veil/errors.hpp"

namespace veil {

using detail::Matrix;

std::string to_string(TrainingMode mode) {
  return mode == TrainingMode::kTransfer ? "transfer" : "scratch";
}

std::vector<std::pair<int, double>> Classifier::predict_batch(
    std::span<const Image* const> xs) const {
  const auto emb = model_.embed_batch(xs);
  const LinearHead& head = model_.head();
  std::vector<std::pair<int, double>> out;
  out.reserve(emb.size());
  for (const auto& z : emb) {
    const Eigen::VectorXd logits = head.logits(z);
    Eigen::Index best;
    const double m = logits.maxCoeff(&best);
    out.emplace_back(head.labels[best], 1.0 / (logits.array() - m).exp().sum());
  }
  return out;
}

Classifier transfer_train(const FeatureExtractor& phi, const LabeledDataset& data,
                          const HeadTrainOptions& options) {
  if (data.class_count() < 2) {
    throw DatasetError("tracker training needs at least 2 classes, got " +
                       std::to_string(data.class_count()));
  }
  const Samples samples = train_samples(data);
  if (samples.size() == 0) throw DatasetError("tracker training set is empty");

  const auto embeddings = phi.embed_batch(std::span<const Image* const>(samples.images));
  const int dim = phi.embedding_dim();
  const std::vector<int> labels = data.labels();

  LinearHead head;
  head.labels = labels;
  head.weights = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), dim);
  head.bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(labels.size()));

  std::vector<int> rows(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) rows[i] = head.row_of(samples.labels[i]);

  const std::size_t n_w = static_cast<std::size_t>(head.weights.size());
  std::vector<double> params(n_w + labels.size(), 0.0), grad(params.size());
  detail::Adam opt(params.size(), options.learning_rate);
  SeededRng rng(options.seed);
  const auto batch_size = static_cast<std::size_t>(std::max(1, options.batch_size));

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = rng.permutation(samples.size());
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      Matrix emb(dim, static_cast<Eigen::Index>(end - start));
      std::vector<int> batch_rows;
      for (std::size_t i = start; i < end; ++i) {
        emb.col(static_cast<Eigen::Index>(i - start)) = embeddings[order[i]].values;
        batch_rows.push_back(rows[order[i]]);
      }
      Matrix d_logits;
      detail::softmax_xent(detail::head_logits(head, emb), batch_rows, d_logits);
      const Matrix d_w = d_logits * emb.transpose();
      const Eigen::VectorXd d_b = d_logits.rowwise().sum();
      std::memcpy(grad.data(), d_w.data(), sizeof(double) * n_w);
      std::memcpy(grad.data() + n_w, d_b.data(), sizeof(double) * labels.size());
      opt.step(params, grad);
      detail::round_to_float(params);
      std::memcpy(head.weights.data(), params.data(), sizeof(double) * n_w);
      std::memcpy(head.bias.data(), params.data() + n_w, sizeof(double) * labels.size());
    }
  }

  FeatureExtractor model = phi;
  model.set_head(std::move(head));
  return Classifier(std::move(model), TrainingMode::kTransfer);
}

Classifier scratch_train(const ArchConfig& arch, const LabeledDataset& data,
                         const TrainOptions& options) {
  FeatureExtractor model = train_extractor(data, arch, options);
  model.provenance().mode = "scratch";
  return Classifier(std::move(model), TrainingMode::kScratch);
}

std::pair<double, double> ProtectionReport::recompute() const {
  std::size_t not_user = 0, correct = 0;
  for (const auto& p : user_predictions) not_user += p.predicted != user_label;
  for (const auto& p : other_predictions) correct += p.predicted == p.true_label;
  const double protection =
      user_predictions.empty() ? 0.0 : static_cast<double>(not_user) / user_predictions.size();
  const double normal =
      other_predictions.empty() ? 0.0 : static_cast<double>(correct) / other_predictions.size();
  return {protection, normal};
}

ProtectionReport evaluate_protection(const Classifier& model, int user_label,
                                     const std::vector<Image>& user_clean_test,
                                     const Samples& others,
                                     const std::vector<std::string>& user_names,
                                     const std::vector<std::string>& other_names) {
  if (user_clean_test.empty()) throw DatasetError("no clean user test images");
  if (others.size() == 0) throw DatasetError("no test images for other classes");
  if (model.head().row_of(user_label) < 0) {
    throw ModelError("user label " + std::to_string(user_label) + " not in the tracker model");
  }
  ProtectionReport report;
  report.user_label = user_label;

  std::vector<const Image*> user_ptrs;
  for (const auto& img : user_clean_test) user_ptrs.push_back(&img);
  const auto user_pred = model.predict_batch(user_ptrs);
  for (std::size_t i = 0; i < user_pred.size(); ++i) {
    report.user_predictions.push_back({i < user_names.size() ? user_names[i] : "user/" + std::to_string(i),
                                       user_label, user_pred[i].first, user_pred[i].second});
  }
  const auto other_pred = model.predict_batch(std::span<const Image* const>(others.images));
  for (std::size_t i = 0; i < other_pred.size(); ++i) {
    report.other_predictions.push_back(
        {i < other_names.size() ? other_names[i] : "other/" + std::to_string(i), others.labels[i],
         other_pred[i].first, other_pred[i].second});
  }
  std::tie(report.protection_success_rate, report.normal_accuracy) = report.recompute();
  return report;
}

nlohmann::json to_json(const ProtectionReport& report) {
  return {{"user_label", report.user_label},
          {"protection_success_rate", report.protection_success_rate},
          {"normal_accuracy", report.normal_accuracy},
          {"user_test_count", report.user_predictions.size()},
          {"other_test_count", report.other_predictions.size()}};
}

void write_predictions_csv(std::ostream& os, const ProtectionReport& report) {
  os << "image,true_label,predicted_label,confidence\n";
  for (const auto* group : {&report.user_predictions, &report.other_predictions}) {
    for (const auto& p : *group) {
      os << p.image << ',' << p.true_label << ',' << p.predicted << ',' << p.confidence << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Detection

std::vector<int> DetectionResult::flagged() const {
  std::vector<int> out;
  for (const auto& c : classes) {
    if (c.flagged) out.push_back(c.label);
  }
  return out;
}

namespace {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size()));
  return r;
}

// Spread used in the z test; a relative floor keeps exactly-equidistant
// configurations (zero variance up to round-off) from flagging anything.
double spread(const MeanStd& s) { return std::max(s.std, 1e-9 * std::abs(s.mean)); }

Eigen::VectorXd mean_of(const std::vector<FeatureVector>& points) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(points.front().dim());
  for (const auto& p : points) m += p.values;
  return m / static_cast<double>(points.size());
}

}  // namespace

DetectionResult detect_centroid_anomaly(const ClassEmbeddings& embeddings, double z_threshold) {
  if (embeddings.size() < 3) {
    throw DatasetError("centroid anomaly detection needs at least 3 classes");
  }
  std::vector<int> labels;
  std::vector<Eigen::VectorXd> centroids;
  for (const auto& [label, points] : embeddings) {
    if (points.empty()) throw DatasetError("class " + std::to_string(label) + " has no images");
    labels.push_back(label);
    centroids.push_back(mean_of(points));
  }
  const std::size_t n = labels.size();
  Matrix dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) dist(i, j) = (centroids[i] - centroids[j]).norm();
  }

  DetectionResult result;
  result.detector = "centroid";
  result.z_threshold = z_threshold;
  for (std::size_t c = 0; c < n; ++c) {
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != c) nearest = std::min(nearest, dist(c, j));
    }
    std::vector<double> population;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (i != c && j != c) population.push_back(dist(i, j));
      }
    }
    const MeanStd s = mean_std(population);
    ClassDetection d;
    d.label = labels[c];
    d.score = nearest;
    d.reference_mean = s.mean;
    d.reference_std = s.std;
    d.z = (nearest - s.mean) / spread(s);
    d.flagged = nearest < s.mean - z_threshold * spread(s);
    result.classes.push_back(d);
  }
  return result;
}

TwoMeans two_means(const std::vector<FeatureVector>& points) {
  if (points.size() < 2) throw DatasetError("2-means needs at least 2 points");
  const std::size_t n = points.size();
  std::size_t seed_a = 0, seed_b = 1;
  double far = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = (points[i].values - points[j].values).squaredNorm();
      if (d > far) {
        far = d;
        seed_a = i;
        seed_b = j;
      }
    }
  }
  TwoMeans r;
  r.centroid_a = points[seed_a].values;
  r.centroid_b = points[seed_b].values;
  r.assignment.assign(n, -1);
  for (int it = 0; it < 1000; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const double da = (points[i].values - r.centroid_a).squaredNorm();
      const double db = (points[i].values - r.centroid_b).squaredNorm();
      const int a = db < da ? 1 : 0;
      if (a != r.assignment[i]) {
        r.assignment[i] = a;
        changed = true;
      }
    }
    r.iterations = it + 1;
    if (!changed) break;
    Eigen::VectorXd sum_a = Eigen::VectorXd::Zero(r.centroid_a.size());
    Eigen::VectorXd sum_b = sum_a;
    std::size_t count_a = 0, count_b = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (r.assignment[i] == 0) {
        sum_a += points[i].values;
        ++count_a;
      } else {
        sum_b += points[i].values;
        ++count_b;
      }
    }
    if (count_a > 0) r.centroid_a = sum_a / static_cast<double>(count_a);
    if (count_b > 0) r.centroid_b = sum_b / static_cast<double>(count_b);
  }
  r.separation = (r.centroid_a - r.centroid_b).norm();
  return r;
}

DetectionResult detect_bimodal_classes(const ClassEmbeddings& embeddings, double z_threshold) {
  if (embeddings.size() < 3) throw DatasetError("bimodality detection needs at least 3 classes");
  std::vector<int> labels;
  std::vector<double> separations;
  for (const auto& [label, points] : embeddings) {
    if (points.size() < 4) {
      throw DatasetError("class " + std::to_string(label) + " has fewer than 4 images for 2-means");
    }
    labels.push_back(label);
    separations.push_back(two_means(points).separation);
  }
  DetectionResult result;
  result.detector = "two_means";
  result.z_threshold = z_threshold;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    std::vector<double> others;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (j != c) others.push_back(separations[j]);
    }
    const MeanStd s = mean_std(others);
    ClassDetection d;
    d.label = labels[c];
    d.score = separations[c];
    d.reference_mean = s.mean;
    d.reference_std = s.std;
    d.z = (separations[c] - s.mean) / spread(s);
    d.flagged = separations[c] > s.mean + z_threshold * spread(s);
    result.classes.push_back(d);
  }
  return result;
}

ClassEmbeddings embed_classes(const FeatureExtractor& phi, const LabeledDataset& data) {
  ClassEmbeddings out;
  for (const auto& [label, c] : data.classes) {
    out[label] = phi.embed_batch(std::span<const Image>(c.train));
  }
  return out;
}

DetectionResult detect_centroid_anomaly(const FeatureExtractor& phi, const LabeledDataset& data,
                                        double z_threshold) {
  if (data.class_count() < 3) throw DatasetError("centroid anomaly detection needs at least 3 classes");
  return detect_centroid_anomaly(embed_classes(phi, data), z_threshold);
}

DetectionResult detect_bimodal_classes(const FeatureExtractor& phi, const LabeledDataset& data,
                                       double z_threshold) {
  if (data.class_count() < 3) throw DatasetError("bimodality detection needs at least 3 classes");
  return detect_bimodal_classes(embed_classes(phi, data), z_threshold);
}

nlohmann::json to_json(const DetectionResult& result) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : result.classes) {
    classes.push_back({{"label", c.label},
                       {"score", c.score},
                       {"reference_mean", c.reference_mean},
                       {"reference_std", c.reference_std},
                       {"z", c.z},
                       {"flagged", c.flagged}});
  }
  return {{"detector", result.detector},
          {"z_threshold", result.z_threshold},
          {"flagged", result.flagged()},
          {"classes", classes}};
}

}  // namespace veil
