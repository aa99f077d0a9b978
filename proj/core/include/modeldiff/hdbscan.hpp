#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace modeldiff {

struct HdbscanParams {
  std::size_t min_cluster_size = 8;
  /// Core-distance neighbourhood size, counting the point itself. 0 means
  /// "same as min_cluster_size".
  std::size_t min_samples = 0;
  /// Let excess-of-mass selection pick the root cluster.
  bool allow_single_cluster = false;
};

/// Flat labelling produced by HDBSCAN: labels[i] is a cluster index in
/// [0, n_clusters) or -1 for noise. Clusters are numbered by their lowest
/// member index.
struct HdbscanResult {
  std::vector<int> labels;
  int n_clusters = 0;
};

/// Euclidean HDBSCAN: mutual-reachability graph, Prim MST with
/// (distance, lower index) tie-breaking, single-linkage hierarchy condensed at
/// min_cluster_size, excess-of-mass selection. If nothing is selected and
/// n >= min_cluster_size, every point is returned as one cluster.
/// Throws PreconditionError on non-finite coordinates.
HdbscanResult hdbscan(const Eigen::MatrixXd& points, const HdbscanParams& params);

}  // namespace modeldiff
