#include "modeldiff/hdbscan.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "modeldiff/common.hpp"

namespace modeldiff {

namespace {

// 1/d for d = 0 would be infinite; capping keeps stabilities finite.
constexpr double kMaxLambda = 1e300;

double lambda_of(double distance) { return distance > 0.0 ? std::min(1.0 / distance, kMaxLambda) : kMaxLambda; }

struct Merge {
  std::size_t left;
  std::size_t right;
  double distance;
  std::size_t size;
};

struct CondensedEdge {
  std::size_t parent;
  std::size_t child;  // < n: a point, >= n: a cluster label
  double lambda;
  std::size_t child_size;
};

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void link(std::size_t child, std::size_t root) { parent_[child] = root; }

 private:
  std::vector<std::size_t> parent_;
};

std::vector<Merge> single_linkage(const Eigen::MatrixXd& points, std::size_t min_samples) {
  const auto n = static_cast<std::size_t>(points.rows());
  Eigen::MatrixXd dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    dist(i, i) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double d = (points.row(i) - points.row(j)).norm();
      dist(i, j) = d;
      dist(j, i) = d;
    }
  }

  std::vector<double> core(n);
  const std::size_t kth = std::min(min_samples, n) - 1;
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) row[j] = dist(i, j);
    std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(kth), row.end());
    core[i] = row[kth];
  }

  // Prim on the dense mutual-reachability graph.
  struct Edge {
    std::size_t a, b;
    double w;
  };
  std::vector<Edge> edges;
  edges.reserve(n - 1);
  std::vector<bool> in_tree(n, false);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> from(n, 0);
  std::size_t current = 0;
  in_tree[0] = true;
  for (std::size_t step = 1; step < n; ++step) {
    std::size_t next = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (in_tree[j]) continue;
      double mr = std::max({core[current], core[j], dist(current, j)});
      if (mr < best[j]) {
        best[j] = mr;
        from[j] = current;
      }
      if (next == n || best[j] < best[next]) next = j;
    }
    in_tree[next] = true;
    edges.push_back({std::min(from[next], next), std::max(from[next], next), best[next]});
    current = next;
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) {
    if (x.w != y.w) return x.w < y.w;
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });

  std::vector<Merge> merges;
  merges.reserve(n - 1);
  UnionFind uf(2 * n - 1);
  std::vector<std::size_t> size(2 * n - 1, 1);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    std::size_t ra = uf.find(edges[e].a);
    std::size_t rb = uf.find(edges[e].b);
    std::size_t node = n + e;
    size[node] = size[ra] + size[rb];
    uf.link(ra, node);
    uf.link(rb, node);
    merges.push_back({ra, rb, edges[e].w, size[node]});
  }
  return merges;
}

std::vector<CondensedEdge> condense(const std::vector<Merge>& merges, std::size_t n, std::size_t min_cluster_size) {
  const std::size_t root = 2 * n - 2;
  auto node_size = [&](std::size_t node) { return node < n ? std::size_t{1} : merges[node - n].size; };

  std::vector<std::size_t> relabel(2 * n - 1, 0);
  std::vector<bool> ignore(2 * n - 1, false);
  std::size_t next_label = n + 1;
  relabel[root] = n;
  std::vector<CondensedEdge> out;

  auto leaves_of = [&](std::size_t node, auto&& emit) {
    std::vector<std::size_t> stack{node};
    while (!stack.empty()) {
      std::size_t cur = stack.back();
      stack.pop_back();
      if (cur < n) {
        emit(cur);
      } else {
        ignore[cur] = true;
        stack.push_back(merges[cur - n].right);
        stack.push_back(merges[cur - n].left);
      }
    }
  };

  // Breadth-first from the root so parents are always labelled before children.
  std::vector<std::size_t> queue{root};
  for (std::size_t head = 0; head < queue.size(); ++head) {
    std::size_t node = queue[head];
    if (node < n || ignore[node]) continue;
    const Merge& m = merges[node - n];
    const double lambda = lambda_of(m.distance);
    const std::size_t parent = relabel[node];
    const std::size_t ls = node_size(m.left);
    const std::size_t rs = node_size(m.right);
    const bool left_big = ls >= min_cluster_size;
    const bool right_big = rs >= min_cluster_size;

    if (left_big && right_big) {
      relabel[m.left] = next_label++;
      out.push_back({parent, relabel[m.left], lambda, ls});
      relabel[m.right] = next_label++;
      out.push_back({parent, relabel[m.right], lambda, rs});
      queue.push_back(m.left);
      queue.push_back(m.right);
    } else if (!left_big && !right_big) {
      leaves_of(m.left, [&](std::size_t p) { out.push_back({parent, p, lambda, 1}); });
      leaves_of(m.right, [&](std::size_t p) { out.push_back({parent, p, lambda, 1}); });
    } else {
      std::size_t big = left_big ? m.left : m.right;
      std::size_t small = left_big ? m.right : m.left;
      relabel[big] = parent;
      queue.push_back(big);
      leaves_of(small, [&](std::size_t p) { out.push_back({parent, p, lambda, 1}); });
    }
  }
  return out;
}

}  // namespace

HdbscanResult hdbscan(const Eigen::MatrixXd& points, const HdbscanParams& params) {
  if (params.min_cluster_size < 2) throw PreconditionError("min_cluster_size must be >= 2");
  if (!points.allFinite()) throw PreconditionError("clustering input contains NaN or infinite coordinates");
  const auto n = static_cast<std::size_t>(points.rows());
  HdbscanResult result;
  result.labels.assign(n, -1);
  if (n < params.min_cluster_size || n < 2) return result;

  const std::size_t min_samples = params.min_samples == 0 ? params.min_cluster_size : params.min_samples;
  auto merges = single_linkage(points, min_samples);
  auto tree = condense(merges, n, params.min_cluster_size);

  // Cluster labels run from n (root) to max_label; children have larger labels.
  std::size_t max_label = n;
  for (const auto& e : tree) max_label = std::max(max_label, e.parent);
  for (const auto& e : tree) {
    if (e.child >= n) max_label = std::max(max_label, e.child);
  }
  const std::size_t n_nodes = max_label - n + 1;
  auto idx = [&](std::size_t label) { return label - n; };

  std::vector<double> birth(n_nodes, 0.0);
  std::vector<std::size_t> parent_of(n_nodes, 0);
  std::vector<std::vector<std::size_t>> children(n_nodes);
  for (const auto& e : tree) {
    if (e.child >= n) {
      birth[idx(e.child)] = e.lambda;
      parent_of[idx(e.child)] = e.parent;
      children[idx(e.parent)].push_back(e.child);
    }
  }
  std::vector<double> stability(n_nodes, 0.0);
  for (const auto& e : tree) {
    stability[idx(e.parent)] += (e.lambda - birth[idx(e.parent)]) * static_cast<double>(e.child_size);
  }

  std::vector<bool> selected(n_nodes, false);
  for (std::size_t c = 1; c < n_nodes; ++c) selected[c] = true;
  selected[0] = params.allow_single_cluster;
  auto deselect_below = [&](std::size_t label) {
    std::vector<std::size_t> stack(children[idx(label)]);
    while (!stack.empty()) {
      std::size_t c = stack.back();
      stack.pop_back();
      selected[idx(c)] = false;
      for (auto g : children[idx(c)]) stack.push_back(g);
    }
  };
  const std::size_t last = params.allow_single_cluster ? 0 : 1;
  for (std::size_t k = n_nodes; k-- > last;) {
    double subtree = 0.0;
    for (auto c : children[k]) subtree += stability[idx(c)];
    if (children[k].empty()) continue;
    if (subtree > stability[k]) {
      selected[k] = false;
      stability[k] = subtree;
    } else {
      deselect_below(k + n);
    }
  }

  // Each point belongs to the nearest selected ancestor of the cluster it
  // fell out of; points with no selected ancestor are noise.
  std::vector<long> owner(n, -1);
  for (const auto& e : tree) {
    if (e.child < n) {
      std::size_t label = e.parent;
      long chosen = -1;
      for (;;) {
        if (selected[idx(label)]) chosen = static_cast<long>(label);
        if (label == n) break;
        label = parent_of[idx(label)];
      }
      owner[e.child] = chosen;
    }
  }

  bool any = std::any_of(owner.begin(), owner.end(), [](long o) { return o >= 0; });
  if (!any) std::fill(owner.begin(), owner.end(), static_cast<long>(n));

  std::vector<long> dense(n_nodes, -1);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (owner[i] < 0) continue;
    auto& d = dense[idx(static_cast<std::size_t>(owner[i]))];
    if (d < 0) d = next++;
    result.labels[i] = static_cast<int>(d);
  }
  result.n_clusters = next;
  return result;
}

}  // namespace modeldiff
