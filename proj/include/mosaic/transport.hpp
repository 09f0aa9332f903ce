#pragma once

// Exact discrete optimal transport between two uniform measures.
//
// Solved as a transportation problem with the primal network simplex (MODI
// potentials on a spanning-tree basis). Masses are scaled to integers (each row
// supplies M units, each column demands N units), so flows stay exact and the
// returned plan meets the marginals up to a single division.
//
// Pivoting: Dantzig's most-negative reduced cost, switching to Bland's
// lowest-index rule after a run of degenerate pivots until the next
// non-degenerate one. This keeps the solve deterministic and finite.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "mosaic/error.hpp"

namespace mosaic {

struct TransportPlan {
  Eigen::MatrixXd gamma;  // N x M
  double cost = 0.0;
  int pivots = 0;
};

namespace detail {

class TransportSimplex {
 public:
  explicit TransportSimplex(const Eigen::MatrixXd& cost)
      : cost_(cost), rows_(static_cast<int>(cost.rows())), cols_(static_cast<int>(cost.cols())) {}

  TransportPlan solve() {
    initial_basis();
    const double scale = 1.0 + cost_.cwiseAbs().maxCoeff();
    const double tol = 1e-12 * scale;
    const long max_pivots = 50L * rows_ * cols_ * (rows_ + cols_) + 1000;
    int degenerate_run = 0;
    int pivots = 0;

    for (;;) {
      compute_potentials();
      const bool bland = degenerate_run >= kDegenerateRunLimit;
      int enter_r = -1, enter_c = -1;
      double best = -tol;
      for (int r = 0; r < rows_ && !(bland && enter_r >= 0); ++r) {
        for (int c = 0; c < cols_; ++c) {
          if (is_basic_[idx(r, c)]) continue;
          const double rc = cost_(r, c) - u_[r] - v_[c];
          if (rc < best) {
            best = bland ? -tol : rc;
            enter_r = r;
            enter_c = c;
            if (bland) break;
          }
        }
      }
      if (enter_r < 0) break;
      if (++pivots > max_pivots) throw Error("transport simplex exceeded pivot limit");
      const bool degenerate = pivot(enter_r, enter_c);
      degenerate_run = degenerate ? degenerate_run + 1 : 0;
    }

    TransportPlan plan;
    plan.pivots = pivots;
    plan.gamma = Eigen::MatrixXd::Zero(rows_, cols_);
    const double total = static_cast<double>(rows_) * static_cast<double>(cols_);
    for (const Cell& cell : basis_) {
      plan.gamma(cell.r, cell.c) = static_cast<double>(cell.flow) / total;
    }
    plan.cost = (plan.gamma.array() * cost_.array()).sum();
    return plan;
  }

 private:
  static constexpr int kDegenerateRunLimit = 32;

  struct Cell {
    int r;
    int c;
    std::int64_t flow;
  };

  std::size_t idx(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(cols_) + static_cast<std::size_t>(c);
  }
  int col_node(int c) const { return rows_ + c; }

  // North-west corner rule. On a tie both marginals are exhausted; only the row
  // advances, so the next cell enters the basis with zero flow and the basis
  // stays a spanning tree of rows_ + cols_ - 1 cells.
  void initial_basis() {
    is_basic_.assign(static_cast<std::size_t>(rows_) * static_cast<std::size_t>(cols_), 0);
    basis_.clear();
    std::vector<std::int64_t> supply(static_cast<std::size_t>(rows_), cols_);
    std::vector<std::int64_t> demand(static_cast<std::size_t>(cols_), rows_);
    int r = 0, c = 0;
    while (r < rows_ && c < cols_) {
      const std::int64_t f = std::min(supply[r], demand[c]);
      add_cell(r, c, f);
      supply[r] -= f;
      demand[c] -= f;
      if (r == rows_ - 1 && c == cols_ - 1) break;
      if (supply[r] == 0 && r < rows_ - 1) {
        ++r;
      } else {
        ++c;
      }
    }
    rebuild_adjacency();
  }

  void add_cell(int r, int c, std::int64_t flow) {
    basis_.push_back({r, c, flow});
    is_basic_[idx(r, c)] = 1;
  }

  void rebuild_adjacency() {
    adjacency_.assign(static_cast<std::size_t>(rows_ + cols_), {});
    for (std::size_t e = 0; e < basis_.size(); ++e) {
      adjacency_[basis_[e].r].push_back(static_cast<int>(e));
      adjacency_[col_node(basis_[e].c)].push_back(static_cast<int>(e));
    }
  }

  int other_end(int node, const Cell& cell) const {
    return node < rows_ ? col_node(cell.c) : cell.r;
  }

  // Potentials with u[0] = 0, plus parent links for cycle search.
  void compute_potentials() {
    const int nodes = rows_ + cols_;
    u_.assign(static_cast<std::size_t>(rows_), 0.0);
    v_.assign(static_cast<std::size_t>(cols_), 0.0);
    parent_edge_.assign(static_cast<std::size_t>(nodes), -1);
    depth_.assign(static_cast<std::size_t>(nodes), -1);
    parent_node_.assign(static_cast<std::size_t>(nodes), -1);
    std::vector<int> stack{0};
    depth_[0] = 0;
    while (!stack.empty()) {
      const int node = stack.back();
      stack.pop_back();
      for (int e : adjacency_[node]) {
        const Cell& cell = basis_[e];
        const int next = other_end(node, cell);
        if (depth_[next] >= 0) continue;
        depth_[next] = depth_[node] + 1;
        parent_edge_[next] = e;
        parent_node_[next] = node;
        if (next < rows_) {
          u_[next] = cost_(cell.r, cell.c) - v_[cell.c];
        } else {
          v_[cell.c] = cost_(cell.r, cell.c) - u_[cell.r];
        }
        stack.push_back(next);
      }
    }
  }

  // Returns true when the pivot was degenerate (zero step).
  bool pivot(int enter_r, int enter_c) {
    // Tree path from the column node to the row node of the entering cell.
    int a = col_node(enter_c);
    int b = enter_r;
    std::vector<int> from_a, from_b;
    while (depth_[a] > depth_[b]) { from_a.push_back(parent_edge_[a]); a = parent_node_[a]; }
    while (depth_[b] > depth_[a]) { from_b.push_back(parent_edge_[b]); b = parent_node_[b]; }
    while (a != b) {
      from_a.push_back(parent_edge_[a]);
      a = parent_node_[a];
      from_b.push_back(parent_edge_[b]);
      b = parent_node_[b];
    }
    std::vector<int> path = std::move(from_a);
    path.insert(path.end(), from_b.rbegin(), from_b.rend());

    // Edges alternate -, +, -, ... starting next to the entering cell's column.
    std::int64_t theta = std::numeric_limits<std::int64_t>::max();
    int leave = -1;
    for (std::size_t k = 0; k < path.size(); k += 2) {
      const Cell& cell = basis_[path[k]];
      const std::size_t key = idx(cell.r, cell.c);
      if (cell.flow < theta ||
          (cell.flow == theta && key < idx(basis_[leave].r, basis_[leave].c))) {
        theta = cell.flow;
        leave = path[k];
      }
    }
    for (std::size_t k = 0; k < path.size(); ++k) {
      basis_[path[k]].flow += (k % 2 == 0) ? -theta : theta;
    }

    Cell& out = basis_[leave];
    is_basic_[idx(out.r, out.c)] = 0;
    out = Cell{enter_r, enter_c, theta};
    is_basic_[idx(enter_r, enter_c)] = 1;
    rebuild_adjacency();
    return theta == 0;
  }

  const Eigen::MatrixXd& cost_;
  int rows_;
  int cols_;
  std::vector<Cell> basis_;
  std::vector<char> is_basic_;
  std::vector<std::vector<int>> adjacency_;
  std::vector<double> u_, v_;
  std::vector<int> parent_edge_, parent_node_, depth_;
};

}  // namespace detail

/// Minimum-cost coupling of uniform masses 1/N (rows) and 1/M (columns).
inline TransportPlan solve_ot(const Eigen::MatrixXd& cost) {
  if (cost.rows() < 1 || cost.cols() < 1) throw InvalidArgument("empty cost matrix");
  if (!cost.allFinite()) throw InvalidArgument("cost matrix has non-finite entries");
  return detail::TransportSimplex(cost).solve();
}

}  // namespace mosaic
