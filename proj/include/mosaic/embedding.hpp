#pragma once

// Wasserstein task embeddings.
//
// A batch of N state-action-reward rows is coupled to a fixed reference cloud of
// M points by an exact OT plan under squared Euclidean cost; the embedding is
// the barycentric projection  v_m = sum_t gamma_tm x_t  (an M x d matrix, not
// renormalized by the column mass 1/M).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>

#include "mosaic/error.hpp"
#include "mosaic/rng.hpp"
#include "mosaic/transport.hpp"

namespace mosaic {

using AgentId = std::uint32_t;

/// Reference points drawn once from Uniform(-1, 1)^d, filled row by row.
/// Every agent that uses the same (M, d, seed) gets bit-identical points.
struct ReferenceSet {
  Eigen::MatrixXd points;  // M x d

  static ReferenceSet generate(int m, int d, std::uint64_t seed) {
    if (m < 1 || d < 1) throw InvalidArgument("reference set needs M >= 1 and d >= 1");
    Rng rng(derive_seed(seed, 0x5EF5E7));
    ReferenceSet ref;
    ref.points.resize(m, d);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < d; ++j) ref.points(i, j) = rng.uniform(-1.0, 1.0);
    }
    return ref;
  }

  int size() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }
};

struct SarBatch {
  Eigen::MatrixXd rows;  // N x d, one (s, onehot(a), r) row per transition

  int size() const { return static_cast<int>(rows.rows()); }
  int dim() const { return static_cast<int>(rows.cols()); }
};

/// Writes (s, onehot(a), r) into `row`; row.size() must be |s| + num_actions + 1.
template <typename Derived>
void encode_sar(std::span<const double> state, int action, int num_actions, double reward,
                Eigen::MatrixBase<Derived>&& row) {
  const auto ds = static_cast<Eigen::Index>(state.size());
  if (row.size() != ds + num_actions + 1) throw ShapeMismatch("SAR row has wrong width");
  if (action < 0 || action >= num_actions) throw InvalidArgument("action out of range in SAR encoding");
  for (Eigen::Index k = 0; k < ds; ++k) row(k) = state[static_cast<std::size_t>(k)];
  for (int a = 0; a < num_actions; ++a) row(ds + a) = a == action ? 1.0 : 0.0;
  row(ds + num_actions) = reward;
}

struct TaskEmbedding {
  Eigen::MatrixXd v;  // M x d
  int version = 0;
  AgentId owner = 0;

  static TaskEmbedding zeros(int m, int d, AgentId owner) {
    return TaskEmbedding{Eigen::MatrixXd::Zero(m, d), 0, owner};
  }
};

inline Eigen::MatrixXd squared_distance_cost(const Eigen::MatrixXd& batch, const Eigen::MatrixXd& ref) {
  Eigen::MatrixXd cost(batch.rows(), ref.rows());
  for (Eigen::Index t = 0; t < batch.rows(); ++t) {
    for (Eigen::Index m = 0; m < ref.rows(); ++m) {
      cost(t, m) = (batch.row(t) - ref.row(m)).squaredNorm();
    }
  }
  return cost;
}

inline TaskEmbedding embed(const SarBatch& batch, const ReferenceSet& ref, TransportPlan* plan_out = nullptr) {
  if (batch.size() < 1) throw InvalidArgument("SAR batch is empty");
  if (batch.dim() != ref.dim()) {
    throw ShapeMismatch("SAR dimension " + std::to_string(batch.dim()) + " != reference dimension " +
                        std::to_string(ref.dim()));
  }
  if (!batch.rows.allFinite()) throw InvalidArgument("SAR batch has non-finite entries");
  TransportPlan plan = solve_ot(squared_distance_cost(batch.rows, ref.points));
  TaskEmbedding out;
  out.v = plan.gamma.transpose() * batch.rows;
  out.version = 1;
  if (plan_out) *plan_out = std::move(plan);
  return out;
}

/// v <- (v_old + v_new) / 2, version = v_old.version + 1.
inline TaskEmbedding update_moving_average(const TaskEmbedding& v_old, const TaskEmbedding& v_new) {
  if (v_old.v.rows() != v_new.v.rows() || v_old.v.cols() != v_new.v.cols()) {
    throw ShapeMismatch("embedding shapes differ in moving average");
  }
  TaskEmbedding out;
  out.v = 0.5 * (v_old.v + v_new.v);
  out.version = v_old.version + 1;
  out.owner = v_old.owner;
  return out;
}

/// Cosine similarity of two equally sized value arrays.
template <typename A, typename B>
double cosine_similarity(const A& a, const B& b) {
  if (a.size() != b.size()) throw ShapeMismatch("cosine of differently sized embeddings");
  const double na = a.squaredNorm();
  const double nb = b.squaredNorm();
  if (!(na > 0.0) || !(nb > 0.0)) throw InvalidArgument("cosine of a zero-norm embedding");
  return std::clamp(a.dot(b) / std::sqrt(na * nb), -1.0, 1.0);
}

inline double cosine(const TaskEmbedding& a, const TaskEmbedding& b) {
  if (a.v.rows() != b.v.rows() || a.v.cols() != b.v.cols()) {
    throw ShapeMismatch("cosine of differently shaped embeddings");
  }
  return cosine_similarity(a.v.reshaped(), b.v.reshaped());
}

}  // namespace mosaic
