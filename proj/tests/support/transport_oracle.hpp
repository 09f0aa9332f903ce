#pragma once

// Brute-force transportation-polytope oracle for tiny instances.
//
// Every vertex of the polytope {gamma >= 0, gamma 1 = 1/N, gamma^T 1 = 1/M} is a
// basic feasible solution supported on a spanning tree of the complete
// bipartite graph K_{N,M}. The oracle enumerates all spanning trees, solves the
// flows on each by leaf elimination, keeps the feasible ones and returns the
// cheapest. Independent of the simplex code path.

#include <Eigen/Dense>

#include <functional>
#include <limits>
#include <vector>

namespace mosaic::oracle {

struct OracleResult {
  double cost = std::numeric_limits<double>::infinity();
  long trees = 0;
  long feasible = 0;
};

inline OracleResult brute_force_transport(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  const int nodes = n + m;
  const int need = nodes - 1;
  const int edges = n * m;

  std::vector<int> parent(nodes), rank(nodes, 0);
  for (int i = 0; i < nodes; ++i) parent[i] = i;
  std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : find(parent[x]); };

  std::vector<int> chosen;
  OracleResult best;

  auto evaluate = [&]() {
    ++best.trees;
    std::vector<double> mass(nodes);
    for (int i = 0; i < n; ++i) mass[i] = 1.0 / n;
    for (int j = 0; j < m; ++j) mass[n + j] = 1.0 / m;
    std::vector<int> degree(nodes, 0);
    std::vector<char> alive(chosen.size(), 1);
    for (int e : chosen) {
      ++degree[e / m];
      ++degree[n + e % m];
    }
    double total = 0;
    for (int round = 0; round < need; ++round) {
      // First live edge touching a degree-1 node.
      int pick = -1, leaf = -1;
      for (std::size_t k = 0; k < chosen.size() && pick < 0; ++k) {
        if (!alive[k]) continue;
        const int r = chosen[k] / m, c = n + chosen[k] % m;
        if (degree[r] == 1) { pick = static_cast<int>(k); leaf = r; }
        else if (degree[c] == 1) { pick = static_cast<int>(k); leaf = c; }
      }
      const int r = chosen[pick] / m, c = n + chosen[pick] % m;
      const int other = leaf == r ? c : r;
      const double flow = mass[leaf];
      if (flow < -1e-12) return;
      total += flow * cost(r, c - n);
      mass[other] -= flow;
      mass[leaf] = 0;
      alive[pick] = 0;
      --degree[r];
      --degree[c];
    }
    ++best.feasible;
    if (total < best.cost) best.cost = total;
  };

  std::function<void(int)> recurse = [&](int next) {
    if (static_cast<int>(chosen.size()) == need) { evaluate(); return; }
    if (edges - next < need - static_cast<int>(chosen.size())) return;
    const int r = next / m, c = n + next % m;
    const int a = find(r), b = find(c);
    if (a != b) {
      // Union by rank without path compression, so it can be undone.
      const bool swap = rank[a] < rank[b];
      const int lo = swap ? a : b, hi = swap ? b : a;
      const bool bump = rank[a] == rank[b];
      parent[lo] = hi;
      if (bump) ++rank[hi];
      chosen.push_back(next);
      recurse(next + 1);
      chosen.pop_back();
      parent[lo] = lo;
      if (bump) --rank[hi];
    }
    recurse(next + 1);
  };
  recurse(0);
  return best;
}

}  // namespace mosaic::oracle
