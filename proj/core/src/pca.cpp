#include "modeldiff/pca.hpp"

#include <Eigen/SVD>

#include "modeldiff/common.hpp"

namespace modeldiff {

double PcaResult::explained_ratio(Eigen::Index k) const {
  if (total_variance <= 0.0) return 0.0;
  k = std::min<Eigen::Index>(k, explained_variance.size());
  return explained_variance.head(k).sum() / total_variance;
}

PcaResult reduce_dimensions(const Eigen::MatrixXd& data, Eigen::Index k) {
  const Eigen::Index n = data.rows();
  const Eigen::Index d = data.cols();
  if (n < 2) throw PreconditionError("PCA needs at least 2 rows");
  if (k < 1 || k > std::min(n, d)) {
    throw PreconditionError("PCA: k=" + std::to_string(k) + " outside [1, min(n, d)=" +
                            std::to_string(std::min(n, d)) + "]");
  }
  if (!data.allFinite()) throw PreconditionError("PCA input contains NaN or infinite values");

  PcaResult out;
  out.mean = data.colwise().mean().transpose();
  Eigen::MatrixXd centered = data.rowwise() - out.mean.transpose();
  const double denom = static_cast<double>(n - 1);
  out.total_variance = centered.squaredNorm() / denom;

  if (out.total_variance == 0.0) {
    out.zero_variance = true;
    out.projected = Eigen::MatrixXd::Zero(n, k);
    out.components = Eigen::MatrixXd::Identity(d, k);
    out.explained_variance = Eigen::VectorXd::Zero(k);
    return out;
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  out.components = svd.matrixV().leftCols(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index arg = 0;
    out.components.col(c).cwiseAbs().maxCoeff(&arg);
    if (out.components(arg, c) < 0.0) out.components.col(c) *= -1.0;
  }
  out.explained_variance = svd.singularValues().head(k).array().square() / denom;
  out.projected = centered * out.components;
  return out;
}

Eigen::MatrixXd back_project(const PcaResult& pca) {
  Eigen::MatrixXd rec = pca.projected * pca.components.transpose();
  return rec.rowwise() + pca.mean.transpose();
}

double reconstruction_error(const Eigen::MatrixXd& data, const PcaResult& pca) {
  Eigen::MatrixXd centered = data.rowwise() - pca.mean.transpose();
  Eigen::MatrixXd residual = centered - centered * pca.components * pca.components.transpose();
  return residual.squaredNorm() / static_cast<double>(data.rows() - 1);
}

}  // namespace modeldiff
