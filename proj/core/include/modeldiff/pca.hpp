#pragma once

#include <Eigen/Dense>

namespace modeldiff {

struct PcaResult {
  Eigen::MatrixXd projected;            // n x k scores
  Eigen::MatrixXd components;           // d x k, orthonormal columns
  Eigen::VectorXd mean;                 // d
  Eigen::VectorXd explained_variance;   // k covariance eigenvalues, non-increasing
  double total_variance = 0.0;          // trace of the covariance
  bool zero_variance = false;           // all rows identical; projection is all zeros

  /// Fraction of total variance captured by the first `k` components.
  double explained_ratio(Eigen::Index k) const;
};

/// Projects `data` (n x d) onto its top-k principal components. Covariances use
/// the 1/(n-1) normalization. Each component's sign is fixed so its largest
/// magnitude coordinate is positive.
/// Throws PreconditionError when n < 2, k < 1, k > min(n, d), or data has NaN.
PcaResult reduce_dimensions(const Eigen::MatrixXd& data, Eigen::Index k);

/// Maps scores back to the input space: mean + projected * components^T.
Eigen::MatrixXd back_project(const PcaResult& pca);

/// ||Xc - Xc V V^T||_F^2 / (n-1): the variance left out by the projection.
double reconstruction_error(const Eigen::MatrixXd& data, const PcaResult& pca);

}  // namespace modeldiff
