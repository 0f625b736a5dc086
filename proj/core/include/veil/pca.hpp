#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "veil/extractor.hpp"

namespace veil {

struct PcaProjection {
  Eigen::MatrixXd projection;          // n x 2
  Eigen::MatrixXd components;          // d x 2, unit columns
  Eigen::Vector2d explained_variance_ratio;
  Eigen::VectorXd mean;
};

/// Two-component PCA of the rows of `points` via the eigendecomposition of
/// the sample covariance. Components are sign-normalized so their largest
/// magnitude entry is positive. Throws NumericalError when every row is
/// identical.
PcaProjection pca_2d(const Eigen::MatrixXd& points);

struct PcaPoint {
  std::string group;
  int point_id = 0;
  double pc1 = 0.0;
  double pc2 = 0.0;
};

struct PcaTable {
  std::vector<PcaPoint> points;
  Eigen::Vector2d explained_variance_ratio;
};

using NamedImageSets = std::vector<std::pair<std::string, std::vector<Image>>>;

/// Embed every group with phi, fit PCA on the union and project.
PcaTable emit_pca(const FeatureExtractor& phi, const NamedImageSets& groups);

/// group,point_id,pc1,pc2
void write_pca_csv(std::ostream& os, const PcaTable& table);

}  // namespace veil
