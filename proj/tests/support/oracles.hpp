#pragma once

// Reference implementations used to check the library. Each one takes a
// different route to the same number: plain loops, dense matrices, or a
// textbook algorithm, never the library code path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues
/// in non-increasing order with matching eigenvector columns.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> jacobi_eigen(Eigen::MatrixXd a, int max_sweeps = 100) {
  const Eigen::Index n = a.rows();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    if (off < 1e-30) break;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return a(x, x) > a(y, y); });
  Eigen::VectorXd values(n);
  Eigen::MatrixXd vectors(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    values[i] = a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]);
    vectors.col(i) = v.col(order[static_cast<std::size_t>(i)]);
  }
  return {values, vectors};
}

/// Sample covariance with the 1/(n-1) normalization.
inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  return c.transpose() * c / static_cast<double>(x.rows() - 1);
}

/// Variance left out by the top-k eigenvectors: the tail eigenvalue sum.
inline double tail_variance(const Eigen::VectorXd& eigenvalues, Eigen::Index k) {
  double s = 0.0;
  for (Eigen::Index i = k; i < eigenvalues.size(); ++i) s += std::max(0.0, eigenvalues[i]);
  return s;
}

/// Dense per-text activation table: values[text][token][feature].
struct DenseDump {
  std::vector<std::size_t> completion_start;
  std::vector<std::vector<std::vector<double>>> values;
};

/// Counts texts where any completion token has a positive value.
inline std::vector<std::size_t> active_counts(const DenseDump& d, std::size_t n_features) {
  std::vector<std::size_t> counts(n_features, 0);
  for (std::size_t t = 0; t < d.values.size(); ++t) {
    for (std::size_t f = 0; f < n_features; ++f) {
      bool on = false;
      for (std::size_t tok = d.completion_start[t]; tok < d.values[t].size(); ++tok) on = on || d.values[t][tok][f] > 0.0;
      counts[f] += on ? 1 : 0;
    }
  }
  return counts;
}

struct DenseStat {
  std::uint32_t feature;
  double diff;
};

/// Every feature active on either side, with diff = freq_a - freq_b.
inline std::vector<DenseStat> dense_diff(const DenseDump& a, const DenseDump& b, std::size_t n_features) {
  auto ca = active_counts(a, n_features);
  auto cb = active_counts(b, n_features);
  std::vector<DenseStat> out;
  for (std::size_t f = 0; f < n_features; ++f) {
    if (ca[f] == 0 && cb[f] == 0) continue;
    out.push_back({static_cast<std::uint32_t>(f), static_cast<double>(ca[f]) / static_cast<double>(a.values.size()) -
                                                      static_cast<double>(cb[f]) / static_cast<double>(b.values.size())});
  }
  return out;
}

/// Top-k by |diff| via a full stable sort on (−|diff|, id).
inline std::vector<DenseStat> dense_top_k(std::vector<DenseStat> stats, std::size_t k) {
  std::stable_sort(stats.begin(), stats.end(), [](const DenseStat& x, const DenseStat& y) {
    if (std::abs(x.diff) != std::abs(y.diff)) return std::abs(x.diff) > std::abs(y.diff);
    return x.feature < y.feature;
  });
  if (stats.size() > k) stats.resize(k);
  return stats;
}

struct KlOracle {
  double kl;
  double h1;
  double h2;
  double score;
};

/// Direct summation over the union support. Inputs are probabilities keyed by
/// token; a token missing on one side gets `floor` before renormalization.
inline KlOracle kl_direct(const std::map<std::string, double>& p1, const std::map<std::string, double>& p2,
                          double floor = 1e-6) {
  std::map<std::string, std::pair<double, double>> joint;
  for (const auto& [t, p] : p1) joint[t] = {p, floor};
  for (const auto& [t, p] : p2) {
    auto it = joint.find(t);
    if (it == joint.end()) {
      joint[t] = {floor, p};
    } else {
      it->second.second = p;
    }
  }
  double z1 = 0.0;
  double z2 = 0.0;
  for (const auto& [t, pq] : joint) {
    z1 += pq.first;
    z2 += pq.second;
  }
  KlOracle o{0.0, 0.0, 0.0, 0.0};
  for (const auto& [t, pq] : joint) {
    const double a = pq.first / z1;
    const double b = pq.second / z2;
    o.kl += a * (std::log(a) - std::log(b));
    o.h1 += -a * std::log(a);
    o.h2 += -b * std::log(b);
  }
  o.score = o.h1 + o.h2 > 0.0 ? o.kl / (o.h1 + o.h2) : 0.0;
  return o;
}

/// Fraction of points whose predicted label matches the truth after mapping
/// every predicted cluster to its most common true label.
inline double label_agreement(const std::vector<int>& predicted, const std::vector<int>& truth) {
  std::map<int, std::map<int, std::size_t>> table;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] >= 0) ++table[predicted[i]][truth[i]];
  }
  std::map<int, int> mapping;
  for (const auto& [p, row] : table) {
    mapping[p] = std::max_element(row.begin(), row.end(), [](auto& x, auto& y) { return x.second < y.second; })->first;
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] >= 0 && mapping[predicted[i]] == truth[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

/// Brute-force nearest-center assignment.
inline std::vector<int> nearest_center(const Eigen::MatrixXd& points, const std::vector<Eigen::VectorXd>& centers) {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      double d = (points.row(i).transpose() - centers[c]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace oracle
