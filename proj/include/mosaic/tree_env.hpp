#pragma once

// Sparse-reward tree navigation with procedurally generated vector observations.
//
// Each episode starts at the root of a complete `branching`-ary tree of height
// `depth`. Every action descends to a child; reaching the goal leaf pays 1.0,
// every other leaf pays 0.0.
//
// Observation of node `path` for family `dataset_id`, coordinate k:
//
//   code(path)  = fold over branches b of  c <- mix64(c ^ (b + 1)),
//                 starting from c = mix64(kPathTag ^ |path|)
//   node_key    = k < obs_dim / 2 ? kSignatureTag : code(path)
//   h           = mix64(mix64(dataset_id ^ kDatasetTag) ^ mix64(node_key) ^ mix64(k + kCoordTag))
//   obs[k]      = 2 * unit_double(h) - 1
//
// The first half of the coordinates is a per-family signature shared by every
// node of the same dataset; the second half identifies the node.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mosaic/error.hpp"
#include "mosaic/rng.hpp"

namespace mosaic {

struct TreeTaskSpec {
  std::uint32_t dataset_id = 0;
  int depth = 2;
  int branching = 2;
  std::uint64_t goal_leaf = 0;
  int obs_dim = 64;
  int max_steps = 0;  // 0 selects the default 2 * depth
  std::uint64_t env_seed = 0;

  int step_limit() const { return max_steps > 0 ? max_steps : 2 * depth; }

  std::uint64_t leaf_count() const {
    std::uint64_t n = 1;
    for (int i = 0; i < depth; ++i) n *= static_cast<std::uint64_t>(branching);
    return n;
  }

  void validate() const {
    if (depth < 1) throw InvalidArgument("tree depth must be >= 1");
    if (branching < 2) throw InvalidArgument("tree branching must be >= 2");
    if (obs_dim < 1) throw InvalidArgument("obs_dim must be >= 1");
    if (goal_leaf >= leaf_count()) {
      throw InvalidArgument("goal_leaf " + std::to_string(goal_leaf) + " outside [0, " +
                            std::to_string(leaf_count()) + ")");
    }
  }
};

using BranchPath = std::vector<int>;
using Observation = std::vector<double>;

/// Leaf index of a full path; the first branch is the most significant digit.
inline std::uint64_t leaf_index(const BranchPath& path, int branching) {
  std::uint64_t leaf = 0;
  for (int b : path) leaf = leaf * static_cast<std::uint64_t>(branching) + static_cast<std::uint64_t>(b);
  return leaf;
}

/// Branch sequence leading to `leaf` in a tree of the given shape.
inline BranchPath leaf_path(std::uint64_t leaf, int depth, int branching) {
  BranchPath path(static_cast<std::size_t>(depth));
  for (int i = depth - 1; i >= 0; --i) {
    path[static_cast<std::size_t>(i)] = static_cast<int>(leaf % static_cast<std::uint64_t>(branching));
    leaf /= static_cast<std::uint64_t>(branching);
  }
  return path;
}

namespace detail {
inline constexpr std::uint64_t kPathTag = 0x50A7'4C0D'E000'0001ULL;
inline constexpr std::uint64_t kSignatureTag = 0x5167'0000'FA41'7700ULL;
inline constexpr std::uint64_t kDatasetTag = 0xD1B5'4A32'D192'ED03ULL;
inline constexpr std::uint64_t kCoordTag = 0x8CB9'2BA7'2F3D'8DD7ULL;

inline std::uint64_t path_code(const BranchPath& path) {
  std::uint64_t c = mix64(kPathTag ^ static_cast<std::uint64_t>(path.size()));
  for (int b : path) c = mix64(c ^ static_cast<std::uint64_t>(b + 1));
  return c;
}
}  // namespace detail

inline Observation observation_for_node(const TreeTaskSpec& spec, const BranchPath& node_path) {
  if (node_path.size() > static_cast<std::size_t>(spec.depth)) {
    throw InvalidArgument("node path longer than tree depth");
  }
  for (int b : node_path) {
    if (b < 0 || b >= spec.branching) {
      throw InvalidArgument("invalid branch index " + std::to_string(b));
    }
  }
  const std::uint64_t family = mix64(spec.dataset_id ^ detail::kDatasetTag);
  const std::uint64_t node = mix64(detail::path_code(node_path));
  const std::uint64_t signature = mix64(detail::kSignatureTag);
  const int shared = spec.obs_dim / 2;

  Observation obs(static_cast<std::size_t>(spec.obs_dim));
  for (int k = 0; k < spec.obs_dim; ++k) {
    const std::uint64_t key = k < shared ? signature : node;
    const std::uint64_t h = mix64(family ^ key ^ mix64(static_cast<std::uint64_t>(k) + detail::kCoordTag));
    obs[static_cast<std::size_t>(k)] = 2.0 * unit_double(h) - 1.0;
  }
  return obs;
}

struct EnvState {
  BranchPath current_node;
  int steps_taken = 0;
  bool done = false;
};

struct StepResult {
  EnvState state;
  Observation observation;
  double reward = 0.0;
  bool done = false;
};

/// The environment is stateless: all episode state travels in EnvState.
/// `episode_seed` is accepted for interface symmetry; the tree has no stochastic
/// transitions, so it does not influence the episode.
inline std::pair<EnvState, Observation> reset(const TreeTaskSpec& spec, std::uint64_t /*episode_seed*/ = 0) {
  spec.validate();
  EnvState state;
  return {state, observation_for_node(spec, state.current_node)};
}

inline StepResult step(const TreeTaskSpec& spec, const EnvState& state, int action) {
  if (state.done) throw InvalidArgument("step called on a finished episode");
  if (action < 0 || action >= spec.branching) {
    throw InvalidArgument("action " + std::to_string(action) + " out of range");
  }
  StepResult out;
  out.state = state;
  out.state.current_node.push_back(action);
  out.state.steps_taken += 1;

  const bool at_leaf = out.state.current_node.size() == static_cast<std::size_t>(spec.depth);
  if (at_leaf && leaf_index(out.state.current_node, spec.branching) == spec.goal_leaf) {
    out.reward = 1.0;
  }
  out.state.done = at_leaf || out.state.steps_taken >= spec.step_limit();
  out.done = out.state.done;
  out.observation = observation_for_node(spec, out.state.current_node);
  return out;
}

/// Single-owner convenience wrapper holding the current episode.
class TreeEnv {
 public:
  explicit TreeEnv(TreeTaskSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const TreeTaskSpec& spec() const { return spec_; }
  int num_actions() const { return spec_.branching; }
  int obs_dim() const { return spec_.obs_dim; }
  const EnvState& state() const { return state_; }

  Observation reset(std::uint64_t episode_seed = 0) {
    auto [state, obs] = mosaic::reset(spec_, episode_seed);
    state_ = std::move(state);
    return obs;
  }

  StepResult step(int action) {
    StepResult r = mosaic::step(spec_, state_, action);
    state_ = r.state;
    return r;
  }

 private:
  TreeTaskSpec spec_;
  EnvState state_;
};

}  // namespace mosaic
