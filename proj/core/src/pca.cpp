#include "veil/pca.hpp"

#include <Eigen/Eigenvalues>

#include "veil/errors.hpp"

namespace veil {

PcaProjection pca_2d(const Eigen::MatrixXd& points) {
  const Eigen::Index n = points.rows(), d = points.cols();
  if (n < 2) throw DatasetError("PCA needs at least 2 points");
  if (d < 1) throw DimensionError("PCA needs at least one feature");

  PcaProjection out;
  out.mean = points.colwise().mean().transpose();
  const Eigen::MatrixXd centered = points.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);

  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericalError("covariance eigendecomposition failed");
  // Eigenvalues come back ascending.
  const Eigen::VectorXd values = solver.eigenvalues().cwiseMax(0.0);
  const double total = values.sum();
  if (!(total > 0.0)) throw NumericalError("PCA input has rank 0 (all points identical)");

  out.components.resize(d, 2);
  for (int k = 0; k < 2; ++k) {
    const Eigen::Index idx = d - 1 - k;
    if (idx < 0) {
      out.components.col(k).setZero();
      out.explained_variance_ratio[k] = 0.0;
      continue;
    }
    Eigen::VectorXd v = solver.eigenvectors().col(idx);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    out.components.col(k) = v;
    out.explained_variance_ratio[k] = values[idx] / total;
  }
  out.projection = centered * out.components;
  return out;
}

PcaTable emit_pca(const FeatureExtractor& phi, const NamedImageSets& groups) {
  std::vector<std::pair<std::string, int>> ids;
  std::vector<FeatureVector> embeddings;
  for (const auto& [name, images] : groups) {
    const auto emb = phi.embed_batch(std::span<const Image>(images));
    for (std::size_t i = 0; i < emb.size(); ++i) {
      ids.emplace_back(name, static_cast<int>(i));
      embeddings.push_back(emb[i]);
    }
  }
  if (embeddings.size() < 2) throw DatasetError("PCA needs at least 2 images in total");
  Eigen::MatrixXd points(static_cast<Eigen::Index>(embeddings.size()), phi.embedding_dim());
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    points.row(static_cast<Eigen::Index>(i)) = embeddings[i].values.transpose();
  }
  const PcaProjection p = pca_2d(points);
  PcaTable table;
  table.explained_variance_ratio = p.explained_variance_ratio;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    table.points.push_back({ids[i].first, ids[i].second, p.projection(r, 0), p.projection(r, 1)});
  }
  return table;
}

void write_pca_csv(std::ostream& os, const PcaTable& table) {
  os << "group,point_id,pc1,pc2\n";
  for (const auto& p : table.points) {
    os << p.group << ',' << p.point_id << ',' << p.pc1 << ',' << p.pc2 << '\n';
  }
}

}  // namespace veil
