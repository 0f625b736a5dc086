#include <doctest.h>

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "../support/fixtures.hpp"
#include "veil/errors.hpp"
#include "veil/tracker.hpp"

using namespace veil;
using veil::testing::random_image;

namespace {

// Sylvester construction: rows are mutually equidistant +-1 vectors.
Eigen::MatrixXd hadamard(int n) {
  Eigen::MatrixXd h(1, 1);
  h(0, 0) = 1.0;
  while (h.rows() < n) {
    const Eigen::Index m = h.rows();
    Eigen::MatrixXd g(2 * m, 2 * m);
    g << h, h, h, -h;
    h = g;
  }
  return h;
}

// Points at centre +- jitter along each axis; their mean is exactly `centre`.
std::vector<FeatureVector> cloud(const Eigen::VectorXd& centre, double jitter) {
  std::vector<FeatureVector> out;
  for (Eigen::Index i = 0; i < centre.size(); ++i) {
    for (double s : {-1.0, 1.0}) {
      Eigen::VectorXd p = centre;
      p[i] += s * jitter;
      out.emplace_back(p);
    }
  }
  return out;
}

LabeledDataset tiny_dataset(int classes, std::uint64_t seed) {
  SeededRng rng(seed);
  LabeledDataset d;
  for (int k = 0; k < classes; ++k) {
    ClassImages c;
    const double base = (k + 0.5) / classes;
    for (int i = 0; i < 10; ++i) {
      Image img = random_image(4, 4, 1, rng, base - 0.05, base + 0.05);
      (i < 7 ? c.train : c.test).push_back(img);
    }
    d.classes.emplace(k, std::move(c));
  }
  return d;
}

}  // namespace

TEST_CASE("centroid detector flags exactly a class planted at the centre of a Hadamard grid") {
  const Eigen::MatrixXd h = hadamard(16);
  ClassEmbeddings emb;
  for (int k = 0; k < 16; ++k) emb[k] = cloud(h.row(k).transpose(), 0.05);
  const int planted = 99;
  emb[planted] = cloud(Eigen::VectorXd::Zero(16), 0.05);

  const DetectionResult r = detect_centroid_anomaly(emb, 3.0);
  CHECK(r.detector == "centroid");
  CHECK(r.flagged() == std::vector<int>{planted});
  for (const auto& c : r.classes) {
    if (c.label == planted) {
      CHECK(c.score == doctest::Approx(4.0));
      CHECK(c.reference_mean == doctest::Approx(std::sqrt(32.0)));
    } else {
      CHECK(c.score == doctest::Approx(4.0));
      CHECK(c.z > -3.0);
    }
  }
}

TEST_CASE("centroid detector flags exactly a planted pair among grid centroids") {
  const Eigen::MatrixXd h = hadamard(16);
  const double spacing = std::sqrt(32.0);
  ClassEmbeddings emb;
  for (int k = 0; k < 10; ++k) emb[k] = cloud(h.row(k).transpose(), 0.05);
  Eigen::VectorXd partner = h.row(3).transpose();
  partner[0] += spacing / 100.0;
  emb[10] = cloud(partner, 0.05);
  CHECK(detect_centroid_anomaly(emb).flagged() == std::vector<int>{3, 10});
}

TEST_CASE("a regular simplex of centroids flags nothing") {
  ClassEmbeddings emb;
  for (int k = 0; k < 6; ++k) emb[k] = cloud(3.0 * Eigen::VectorXd::Unit(6, k), 0.1);
  const DetectionResult r = detect_centroid_anomaly(emb);
  CHECK(r.flagged().empty());
  for (const auto& c : r.classes) CHECK(c.score == doctest::Approx(3.0 * std::sqrt(2.0)));
}

TEST_CASE("an exactly equidistant configuration flags nothing") {
  const Eigen::MatrixXd h = hadamard(8);
  ClassEmbeddings emb;
  for (int k = 0; k < 8; ++k) emb[k] = cloud(h.row(k).transpose(), 0.1);
  CHECK(detect_centroid_anomaly(emb).flagged().empty());
}

TEST_CASE("two_means separates two blobs and reports the distance between their means") {
  SeededRng rng(1);
  std::vector<FeatureVector> pts;
  Eigen::VectorXd ma = Eigen::VectorXd::Zero(3), mb = Eigen::VectorXd::Zero(3);
  for (int i = 0; i < 20; ++i) {
    Eigen::VectorXd p(3);
    for (int d = 0; d < 3; ++d) p[d] = rng.normal() * 0.1 + (i < 12 ? 0.0 : 5.0);
    (i < 12 ? ma : mb) += p;
    pts.emplace_back(p);
  }
  ma /= 12;
  mb /= 8;
  const TwoMeans r = two_means(pts);
  for (int i = 1; i < 12; ++i) CHECK(r.assignment[i] == r.assignment[0]);
  for (int i = 12; i < 20; ++i) CHECK(r.assignment[i] != r.assignment[0]);
  CHECK(r.separation == doctest::Approx((ma - mb).norm()).epsilon(1e-12));
  CHECK_THROWS_AS(two_means({pts[0]}), DatasetError);
}

TEST_CASE("bimodality detector flags exactly a split class among simplex blobs") {
  SeededRng rng(2);
  ClassEmbeddings emb;
  const int dims = 8;
  for (int k = 0; k < dims; ++k) {
    for (int i = 0; i < 12; ++i) {
      Eigen::VectorXd p = Eigen::VectorXd::Zero(dims);
      p[k] = 4.0;
      for (int d = 0; d < dims; ++d) p[d] += rng.normal() * 0.1;
      if (k == 5 && i % 2 == 0) p[(k + 1) % dims] += 3.0;
      emb[k].emplace_back(p);
    }
  }
  const DetectionResult r = detect_bimodal_classes(emb, 3.0);
  CHECK(r.detector == "two_means");
  CHECK(r.flagged() == std::vector<int>{5});
  const auto j = to_json(r);
  CHECK(j.at("flagged") == nlohmann::json::array({5}));
}

TEST_CASE("translated copies of one unimodal cloud are never bimodal outliers") {
  SeededRng rng(3);
  std::vector<Eigen::VectorXd> blob;
  for (int i = 0; i < 12; ++i) {
    Eigen::VectorXd p(8);
    for (int d = 0; d < 8; ++d) p[d] = rng.normal() * 0.1;
    blob.push_back(p);
  }
  ClassEmbeddings emb;
  for (int k = 0; k < 8; ++k) {
    for (const auto& p : blob) emb[k].emplace_back(Eigen::VectorXd(p + 4.0 * Eigen::VectorXd::Unit(8, k)));
  }
  const DetectionResult r = detect_bimodal_classes(emb);
  CHECK(r.flagged().empty());
  for (const auto& c : r.classes) CHECK(c.score == doctest::Approx(r.classes[0].score).epsilon(1e-12));
}

TEST_CASE("detectors reject degenerate inputs") {
  ClassEmbeddings two;
  two[0] = cloud(Eigen::VectorXd::Zero(2), 1.0);
  two[1] = cloud(Eigen::VectorXd::Ones(2), 1.0);
  CHECK_THROWS_AS(detect_centroid_anomaly(two), DatasetError);
  CHECK_THROWS_AS(detect_bimodal_classes(two), DatasetError);
  two[2] = {FeatureVector(Eigen::VectorXd::Zero(2))};
  CHECK_THROWS_AS(detect_bimodal_classes(two), DatasetError);
  two[2].clear();
  CHECK_THROWS_AS(detect_centroid_anomaly(two), DatasetError);
}

TEST_CASE("transfer training keeps the backbone and learns the head") {
  const LabeledDataset data = tiny_dataset(4, 3);
  const FeatureExtractor phi = FeatureExtractor::initialize(ArchConfig::flatten_pixels(4, 4, 1), 0);
  HeadTrainOptions opt;
  opt.epochs = 200;
  opt.learning_rate = 0.1;
  const Classifier c = transfer_train(phi, data, opt);
  CHECK(c.mode() == TrainingMode::kTransfer);
  CHECK(c.labels() == std::vector<int>{0, 1, 2, 3});
  CHECK(c.model().checksum() == phi.checksum());
  CHECK(classification_accuracy(c.model(), test_samples(data)) == 1.0);
  const Classifier again = transfer_train(phi, data, opt);
  CHECK(again.head().weights == c.head().weights);
}

TEST_CASE("protection report counts user misses and other-class accuracy") {
  const LabeledDataset data = tiny_dataset(4, 4);
  const FeatureExtractor phi = FeatureExtractor::initialize(ArchConfig::flatten_pixels(4, 4, 1), 0);
  HeadTrainOptions opt;
  opt.epochs = 200;
  opt.learning_rate = 0.1;
  const Classifier c = transfer_train(phi, data, opt);

  // User class 1, but "clean test" images drawn from class 3: never predicted as 1.
  const std::vector<Image> user = data.classes.at(3).test;
  const LabeledDataset others = data.subset({0, 2});
  const ProtectionReport r = evaluate_protection(c, 1, user, test_samples(others));
  CHECK(r.protection_success_rate == 1.0);
  CHECK(r.normal_accuracy == 1.0);
  CHECK(r.user_predictions.size() == user.size());
  CHECK(r.other_predictions.size() == 6);
  const auto [p, a] = r.recompute();
  CHECK(p == r.protection_success_rate);
  CHECK(a == r.normal_accuracy);

  const ProtectionReport same = evaluate_protection(c, 1, data.classes.at(1).test, test_samples(others));
  CHECK(same.protection_success_rate == 0.0);

  std::ostringstream os;
  write_predictions_csv(os, r);
  int lines = 0;
  for (char ch : os.str()) lines += ch == '\n';
  CHECK(lines == 1 + 3 + 6);
  CHECK(to_json(r).at("protection_success_rate") == 1.0);

  CHECK_THROWS_AS(evaluate_protection(c, 42, user, test_samples(others)), ModelError);
  CHECK_THROWS_AS(evaluate_protection(c, 1, {}, test_samples(others)), DatasetError);
}

TEST_CASE("a 2-class subset yields a 2-row head") {
  const LabeledDataset data = tiny_dataset(4, 8).subset({1, 3});
  const FeatureExtractor phi = FeatureExtractor::initialize(ArchConfig::flatten_pixels(4, 4, 1), 0);
  const Classifier c = transfer_train(phi, data, HeadTrainOptions{});
  CHECK(c.head().rows() == 2);
  CHECK(c.head().weights.rows() == 2);
  CHECK_THROWS_AS(transfer_train(phi, tiny_dataset(4, 8).subset({2}), HeadTrainOptions{}), DatasetError);
}

TEST_CASE("desk corpus: transfer >= 0.80 and scratch >= 0.75 held-out accuracy") {
  const LabeledDataset& data = veil::testing::desk_data();
  const Classifier t = transfer_train(veil::testing::public_extractor(), data, HeadTrainOptions{});
  const double transfer_acc = classification_accuracy(t.model(), test_samples(data));
  MESSAGE("transfer accuracy " << transfer_acc);
  CHECK(transfer_acc >= 0.80);
  TrainOptions opt;
  opt.seed = 21;
  const Classifier s = scratch_train(ArchConfig{}, data, opt);
  const double scratch_acc = classification_accuracy(s.model(), test_samples(data));
  MESSAGE("scratch accuracy " << scratch_acc);
  CHECK(scratch_acc >= 0.75);
}

TEST_CASE("scratch training is deterministic") {
  const LabeledDataset data = tiny_dataset(3, 5);
  ArchConfig a;
  a.height = 4;
  a.width = 4;
  a.channels = 1;
  a.conv_widths = {4};
  a.embed_dim = 8;
  TrainOptions opt;
  opt.epochs = 3;
  opt.seed = 6;
  const Classifier x = scratch_train(a, data, opt), y = scratch_train(a, data, opt);
  CHECK(x.mode() == TrainingMode::kScratch);
  CHECK(x.model().checksum() == y.model().checksum());
  CHECK(x.head().weights == y.head().weights);
}
