#include <gtest/gtest.h>

#include <random>
#include <set>

#include <modeldiff/common.hpp>
#include <modeldiff/hdbscan.hpp>

#include "oracles.hpp"

using namespace modeldiff;

namespace {

struct Blobs {
  Eigen::MatrixXd points;
  std::vector<int> truth;
  std::vector<Eigen::VectorXd> centers;
};

Blobs make_blobs(int per_blob, int dim, double separation, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Blobs b;
  b.centers = {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Constant(dim, separation)};
  b.points.resize(2 * per_blob, dim);
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < per_blob; ++i) {
      for (int k = 0; k < dim; ++k) b.points(c * per_blob + i, k) = b.centers[c][k] + g(rng);
      b.truth.push_back(c);
    }
  }
  return b;
}

}  // namespace

TEST(Hdbscan, TwoBlobsMatchNearestCenterOracle) {
  auto b = make_blobs(100, 8, 6.0, 5);
  auto res = hdbscan(b.points, {8, 8, false});
  EXPECT_EQ(res.n_clusters, 2);
  auto oracle_labels = oracle::nearest_center(b.points, b.centers);
  EXPECT_GE(oracle::label_agreement(res.labels, oracle_labels), 0.95);
}

TEST(Hdbscan, FarOutliersAreNoise) {
  auto b = make_blobs(50, 3, 8.0, 9);
  Eigen::MatrixXd pts(b.points.rows() + 2, 3);
  pts << b.points, Eigen::RowVector3d(200, -200, 200), Eigen::RowVector3d(-300, 300, 0);
  auto res = hdbscan(pts, {8, 0, false});
  EXPECT_EQ(res.labels[100], -1);
  EXPECT_EQ(res.labels[101], -1);
}

TEST(Hdbscan, LabelsNumberedByLowestMember) {
  auto b = make_blobs(40, 2, 20.0, 4);
  // Put blob 1 first so the numbering has to follow member order.
  Eigen::MatrixXd swapped(80, 2);
  swapped << b.points.bottomRows(40), b.points.topRows(40);
  auto res = hdbscan(swapped, {5, 0, false});
  ASSERT_EQ(res.n_clusters, 2);
  EXPECT_EQ(res.labels.front(), 0);
  EXPECT_EQ(res.labels.back(), 1);
}

TEST(Hdbscan, DeterministicAndLabelRange) {
  auto b = make_blobs(30, 4, 5.0, 12);
  auto r1 = hdbscan(b.points, {6, 0, false});
  auto r2 = hdbscan(b.points, {6, 0, false});
  EXPECT_EQ(r1.labels, r2.labels);
  for (int l : r1.labels) {
    EXPECT_GE(l, -1);
    EXPECT_LT(l, r1.n_clusters);
  }
}

TEST(Hdbscan, ClustersRespectMinimumSize) {
  for (unsigned seed = 0; seed < 10; ++seed) {
    auto b = make_blobs(25, 3, 3.0 + seed, seed);
    const std::size_t mcs = 5 + seed % 4;
    auto res = hdbscan(b.points, {mcs, 0, false});
    std::map<int, std::size_t> sizes;
    for (int l : res.labels) {
      if (l >= 0) ++sizes[l];
    }
    for (const auto& [label, size] : sizes) EXPECT_GE(size, mcs) << "seed " << seed;
  }
}

TEST(Hdbscan, UniformPointsFallBackToOneCluster) {
  Eigen::MatrixXd line(12, 1);
  for (int i = 0; i < 12; ++i) line(i, 0) = i;
  auto res = hdbscan(line, {4, 0, false});
  EXPECT_EQ(res.n_clusters, 1);
  for (int l : res.labels) EXPECT_EQ(l, 0);
}

TEST(Hdbscan, RejectsNonFinite) {
  Eigen::MatrixXd pts = Eigen::MatrixXd::Zero(10, 2);
  pts(3, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(hdbscan(pts, {4, 0, false}), PreconditionError);
}
