#pragma once

// Frozen actor-critic backbone modulated by binarized mask scores.
//
// Every weight matrix of the backbone has a score matrix of the same shape;
// biases are never masked. The effective weights are
//
//   W_eff = W (.) g(beta_0 * phi_local + sum_k beta_k * phi_k),   g(s) = [s > 0]
//
// with beta = softmax(logits). With no peer masks the combination is phi_local
// itself. Gradients pass through g unchanged (straight-through); peer scores are
// constants.

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mosaic/embedding.hpp"
#include "mosaic/error.hpp"
#include "mosaic/rng.hpp"

namespace mosaic {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr std::uint64_t kDefaultBackboneSeed = 9157;

struct Architecture {
  int input_dim = 0;
  std::vector<int> hidden{200, 200, 200};
  int num_actions = 0;

  /// Index of the critic head among the weight matrices; the actor follows it.
  std::size_t critic_index() const { return hidden.size(); }
  std::size_t actor_index() const { return hidden.size() + 1; }
  std::size_t layer_count() const { return hidden.size() + 2; }

  /// (rows, cols) = (fan_out, fan_in) of weight matrix i.
  std::pair<int, int> weight_shape(std::size_t i) const {
    if (i < hidden.size()) return {hidden[i], i == 0 ? input_dim : hidden[i - 1]};
    const int features = hidden.empty() ? input_dim : hidden.back();
    return {i == critic_index() ? 1 : num_actions, features};
  }

  bool operator==(const Architecture&) const = default;
};

template <typename Scalar>
struct DenseLayer {
  Matrix<Scalar> weight;  // fan_out x fan_in
  Vector<Scalar> bias;
};

/// Shared frozen network. Weights W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)),
/// biases b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn in double from the
/// portable Rng in layer order (features, critic, actor), weights row-major
/// before biases, then rounded to Scalar.
template <typename Scalar>
class Backbone {
 public:
  static Backbone init(const Architecture& arch, std::uint64_t seed = kDefaultBackboneSeed) {
    if (arch.input_dim < 1 || arch.num_actions < 1) throw InvalidArgument("backbone needs input and action dims");
    Backbone net;
    net.arch_ = arch;
    net.seed_ = seed;
    Rng rng(derive_seed(seed, 0xBAC4B0E));
    for (std::size_t i = 0; i < arch.layer_count(); ++i) {
      const auto [rows, cols] = arch.weight_shape(i);
      const double w_bound = std::sqrt(6.0 / cols);
      const double b_bound = 1.0 / std::sqrt(static_cast<double>(cols));
      DenseLayer<Scalar> layer{Matrix<Scalar>(rows, cols), Vector<Scalar>(rows)};
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) layer.weight(r, c) = static_cast<Scalar>(rng.uniform(-w_bound, w_bound));
      for (int r = 0; r < rows; ++r) layer.bias(r) = static_cast<Scalar>(rng.uniform(-b_bound, b_bound));
      net.layers_.push_back(std::move(layer));
    }
    return net;
  }

  /// Test constructor for hand-built networks.
  static Backbone from_layers(const Architecture& arch, std::vector<DenseLayer<Scalar>> layers) {
    if (layers.size() != arch.layer_count()) throw ShapeMismatch("layer count does not match architecture");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto [rows, cols] = arch.weight_shape(i);
      if (layers[i].weight.rows() != rows || layers[i].weight.cols() != cols || layers[i].bias.size() != rows) {
        throw ShapeMismatch("layer " + std::to_string(i) + " shape does not match architecture");
      }
    }
    Backbone net;
    net.arch_ = arch;
    net.layers_ = std::move(layers);
    return net;
  }

  const Architecture& architecture() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<DenseLayer<Scalar>>& layers() const { return layers_; }
  const DenseLayer<Scalar>& layer(std::size_t i) const { return layers_[i]; }

  /// FNV-1a over the raw weight and bias bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&](const Scalar* data, Eigen::Index n) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < static_cast<std::size_t>(n) * sizeof(Scalar); ++i) {
        h = (h ^ bytes[i]) * 0x100000001b3ULL;
      }
    };
    for (const auto& l : layers_) {
      feed(l.weight.data(), l.weight.size());
      feed(l.bias.data(), l.bias.size());
    }
    return h;
  }

 private:
  Architecture arch_;
  std::uint64_t seed_ = 0;
  std::vector<DenseLayer<Scalar>> layers_;
};

/// Real-valued scores, one matrix per backbone weight matrix.
template <typename Scalar>
struct MaskScores {
  std::vector<Matrix<Scalar>> layers;
  AgentId owner = 0;
  std::uint64_t mask_id = 0;

  /// Scores ~ U(-range, range) from the agent's own seed.
  static MaskScores random(const Architecture& arch, std::uint64_t seed, double range = 0.02) {
    Rng rng(derive_seed(seed, 0x5C0BE5));
    MaskScores m;
    for (std::size_t i = 0; i < arch.layer_count(); ++i) {
      const auto [rows, cols] = arch.weight_shape(i);
      Matrix<Scalar> s(rows, cols);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) s(r, c) = static_cast<Scalar>(rng.uniform(-range, range));
      m.layers.push_back(std::move(s));
    }
    return m;
  }

  static MaskScores constant(const Architecture& arch, Scalar value) {
    MaskScores m;
    for (std::size_t i = 0; i < arch.layer_count(); ++i) {
      const auto [rows, cols] = arch.weight_shape(i);
      m.layers.push_back(Matrix<Scalar>::Constant(rows, cols, value));
    }
    return m;
  }

  bool same_shape(const MaskScores& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].rows() != other.layers[i].rows() || layers[i].cols() != other.layers[i].cols()) return false;
    }
    return true;
  }

  bool matches(const Architecture& arch) const {
    if (layers.size() != arch.layer_count()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto [rows, cols] = arch.weight_shape(i);
      if (layers[i].rows() != rows || layers[i].cols() != cols) return false;
    }
    return true;
  }

  bool all_finite() const {
    return std::all_of(layers.begin(), layers.end(), [](const auto& m) { return m.allFinite(); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& m : layers) n += static_cast<std::size_t>(m.size());
    return n;
  }
};

template <typename Scalar>
using BinaryMask = std::vector<Matrix<Scalar>>;  // entries in {0, 1}

/// Composition weights. Logits and weights are kept in double so the
/// weights sum to one within 1e-9 whatever the network precision.
struct BetaMixture {
  Eigen::VectorXd logits = Eigen::VectorXd::Zero(1);

  std::size_t size() const { return static_cast<std::size_t>(logits.size()); }

  Eigen::VectorXd weights() const {
    const double top = logits.maxCoeff();
    Eigen::VectorXd e = (logits.array() - top).exp();
    return e / e.sum();
  }

  static BetaMixture from_weights(const Eigen::VectorXd& w, double floor = 1e-6) {
    BetaMixture b;
    b.logits = w.array().max(floor).log();
    return b;
  }
};

template <typename Scalar>
struct PeerMaskSet {
  std::vector<MaskScores<Scalar>> masks;

  std::size_t size() const { return masks.size(); }
  bool empty() const { return masks.empty(); }
};

inline constexpr double kRgiLogitFloor = 1e-6;

/// Reward-guided initialization: beta_local = 0.5 + 0.5 r, beta_k = 0.5 (1 - r) / K.
/// Targets are floored at 1e-6 before the log so r = 1 stays finite.
inline BetaMixture rgi_init(double r_bar, std::size_t k) {
  if (!(r_bar >= 0.0 && r_bar <= 1.0)) {
    spdlog::warn("rgi_init: r_bar {} outside [0, 1], clamping", r_bar);
    r_bar = std::isnan(r_bar) ? 0.0 : std::clamp(r_bar, 0.0, 1.0);
  }
  if (k == 0) return BetaMixture{};
  Eigen::VectorXd w(static_cast<Eigen::Index>(k + 1));
  w(0) = 0.5 + 0.5 * r_bar;
  w.tail(static_cast<Eigen::Index>(k)).setConstant(0.5 * (1.0 - r_bar) / static_cast<double>(k));
  return BetaMixture::from_weights(w, kRgiLogitFloor);
}

/// Fixed split used by the no-RGI ablation: 0.5 local, 0.5 shared by the peers.
inline BetaMixture fixed_split_init(std::size_t k) {
  if (k == 0) return BetaMixture{};
  Eigen::VectorXd w(static_cast<Eigen::Index>(k + 1));
  w(0) = 0.5;
  w.tail(static_cast<Eigen::Index>(k)).setConstant(0.5 / static_cast<double>(k));
  return BetaMixture::from_weights(w, kRgiLogitFloor);
}

template <typename Scalar>
BinaryMask<Scalar> binarize(const std::vector<Matrix<Scalar>>& scores) {
  BinaryMask<Scalar> out;
  out.reserve(scores.size());
  for (const auto& s : scores) out.push_back((s.array() > Scalar(0)).template cast<Scalar>().matrix());
  return out;
}

template <typename Scalar>
BinaryMask<Scalar> binarize(const MaskScores<Scalar>& scores) {
  return binarize(scores.layers);
}

namespace detail {
template <typename Scalar>
void check_composition(const MaskScores<Scalar>& local, const PeerMaskSet<Scalar>& peers, const BetaMixture& beta) {
  if (beta.size() != peers.size() + 1) {
    throw ShapeMismatch("beta has " + std::to_string(beta.size()) + " entries for " + std::to_string(peers.size()) +
                        " peer masks");
  }
  for (const auto& p : peers.masks) {
    if (!p.same_shape(local)) throw ShapeMismatch("peer mask shape differs from local mask");
  }
}
}  // namespace detail

/// beta_0 * local + sum_k beta_k * peer_k, or `local` when there are no peers.
/// compose() and consolidate() both go through here, so they agree bit for bit.
template <typename Scalar>
std::vector<Matrix<Scalar>> combined_scores(const MaskScores<Scalar>& local, const PeerMaskSet<Scalar>& peers,
                                            const BetaMixture& beta) {
  detail::check_composition(local, peers, beta);
  if (peers.empty()) return local.layers;
  const Eigen::VectorXd w = beta.weights();
  std::vector<Matrix<Scalar>> out;
  out.reserve(local.layers.size());
  for (std::size_t i = 0; i < local.layers.size(); ++i) {
    Matrix<Scalar> s = static_cast<Scalar>(w(0)) * local.layers[i];
    for (std::size_t k = 0; k < peers.size(); ++k) {
      s += static_cast<Scalar>(w(static_cast<Eigen::Index>(k + 1))) * peers.masks[k].layers[i];
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename Scalar>
BinaryMask<Scalar> compose(const MaskScores<Scalar>& local, const PeerMaskSet<Scalar>& peers, const BetaMixture& beta) {
  return binarize(combined_scores(local, peers, beta));
}

/// Collapses local and peer masks into one score set with the current weights.
template <typename Scalar>
MaskScores<Scalar> consolidate(const MaskScores<Scalar>& local, const PeerMaskSet<Scalar>& peers,
                               const BetaMixture& beta) {
  MaskScores<Scalar> out;
  out.layers = combined_scores(local, peers, beta);
  out.owner = local.owner;
  out.mask_id = local.mask_id;
  return out;
}

/// How scores become the multiplicative mask. kIdentity is a test hook that
/// makes the network differentiable for finite-difference checks.
enum class MaskMode { kThreshold, kIdentity };

template <typename Scalar>
struct PolicyOutput {
  Matrix<Scalar> logits;  // num_actions x batch
  Matrix<Scalar> values;  // 1 x batch
};

template <typename Scalar>
struct ForwardCache {
  std::vector<Matrix<Scalar>> inputs;       // input of every feature layer
  std::vector<Matrix<Scalar>> preactivations;
  Matrix<Scalar> features;
  std::uint64_t params_version = 0;
  bool valid = false;
};

template <typename Scalar>
struct Gradients {
  std::vector<Matrix<Scalar>> local_scores;
  Eigen::VectorXd beta_logits;

  double squared_norm() const {
    double s = beta_logits.squaredNorm();
    for (const auto& g : local_scores) s += g.template cast<double>().squaredNorm();
    return s;
  }

  void scale(double f) {
    for (auto& g : local_scores) g *= static_cast<Scalar>(f);
    beta_logits *= f;
  }
};

/// Local scores, peer masks and beta around a shared frozen backbone.
template <typename Scalar>
class MaskedPolicy {
 public:
  MaskedPolicy(std::shared_ptr<const Backbone<Scalar>> backbone, MaskScores<Scalar> local)
      : backbone_(std::move(backbone)), local_(std::move(local)) {
    if (!local_.matches(backbone_->architecture())) throw ShapeMismatch("local mask does not match backbone");
  }

  const Backbone<Scalar>& backbone() const { return *backbone_; }
  std::shared_ptr<const Backbone<Scalar>> backbone_ptr() const { return backbone_; }
  const Architecture& architecture() const { return backbone_->architecture(); }
  const MaskScores<Scalar>& local() const { return local_; }
  const PeerMaskSet<Scalar>& peers() const { return peers_; }
  const BetaMixture& beta() const { return beta_; }
  MaskMode mask_mode() const { return mode_; }
  std::uint64_t params_version() const { return version_; }

  void set_mask_mode(MaskMode mode) { mode_ = mode; touch(); }

  /// Replaces the whole composition state at once.
  void set_composition(MaskScores<Scalar> local, PeerMaskSet<Scalar> peers, BetaMixture beta) {
    if (!local.matches(architecture())) throw ShapeMismatch("local mask does not match backbone");
    detail::check_composition(local, peers, beta);
    local_ = std::move(local);
    peers_ = std::move(peers);
    beta_ = std::move(beta);
    touch();
  }

  void set_beta(BetaMixture beta) {
    detail::check_composition(local_, peers_, beta);
    beta_ = std::move(beta);
    touch();
  }

  /// Gradient step hook: the optimizer writes local scores and beta logits here.
  template <typename Fn>
  void update_parameters(Fn&& fn) {
    fn(local_.layers, beta_.logits);
    touch();
  }

  /// Binary (or, under the test hook, real) mask applied to the backbone.
  const std::vector<Matrix<Scalar>>& effective_mask() {
    refresh();
    return mask_;
  }

  /// obs: input_dim x batch.
  PolicyOutput<Scalar> forward(const Matrix<Scalar>& obs, ForwardCache<Scalar>* cache = nullptr) {
    const Architecture& arch = architecture();
    if (obs.rows() != arch.input_dim) {
      throw ShapeMismatch("observation has " + std::to_string(obs.rows()) + " rows, backbone expects " +
                          std::to_string(arch.input_dim));
    }
    refresh();
    if (cache) {
      cache->inputs.clear();
      cache->preactivations.clear();
    }
    Matrix<Scalar> h = obs;
    for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
      Matrix<Scalar> z = weights_[i] * h;
      z.colwise() += backbone_->layer(i).bias;
      if (cache) {
        cache->inputs.push_back(std::move(h));
        cache->preactivations.push_back(z);
      }
      h = z.cwiseMax(Scalar(0));
    }
    PolicyOutput<Scalar> out;
    out.values = weights_[arch.critic_index()] * h;
    out.values.colwise() += backbone_->layer(arch.critic_index()).bias;
    out.logits = weights_[arch.actor_index()] * h;
    out.logits.colwise() += backbone_->layer(arch.actor_index()).bias;
    if (cache) {
      cache->features = std::move(h);
      cache->params_version = version_;
      cache->valid = true;
    }
    return out;
  }

  /// Gradients of a loss w.r.t. local scores and beta logits, given dL/dlogits
  /// and dL/dvalues for the batch cached by forward().
  Gradients<Scalar> backward(const Matrix<Scalar>& dlogits, const Matrix<Scalar>& dvalues,
                             const ForwardCache<Scalar>& cache) const {
    if (!cache.valid || cache.params_version != version_ || dirty_) {
      throw Error("stale forward cache: parameters changed since forward()");
    }
    const Architecture& arch = architecture();
    const std::size_t layers = arch.layer_count();
    std::vector<Matrix<Scalar>> d_weight(layers);

    d_weight[arch.actor_index()] = dlogits * cache.features.transpose();
    d_weight[arch.critic_index()] = dvalues * cache.features.transpose();
    Matrix<Scalar> d_h = weights_[arch.actor_index()].transpose() * dlogits +
                         weights_[arch.critic_index()].transpose() * dvalues;
    for (std::size_t i = arch.hidden.size(); i-- > 0;) {
      Matrix<Scalar> d_z = (cache.preactivations[i].array() > Scalar(0)).select(d_h, Scalar(0));
      d_weight[i] = d_z * cache.inputs[i].transpose();
      if (i > 0) d_h = weights_[i].transpose() * d_z;
    }

    // W_eff = W (.) m(S): dL/dS = dL/dW_eff (.) W under the straight-through rule.
    Gradients<Scalar> g;
    g.local_scores.resize(layers);
    const Eigen::VectorXd w = beta_.weights();
    Eigen::VectorXd d_beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(beta_.size()));
    const Scalar local_weight = peers_.empty() ? Scalar(1) : static_cast<Scalar>(w(0));
    for (std::size_t i = 0; i < layers; ++i) {
      Matrix<Scalar> d_score = d_weight[i].cwiseProduct(backbone_->layer(i).weight);
      if (!peers_.empty()) {
        d_beta(0) += static_cast<double>(d_score.cwiseProduct(local_.layers[i]).sum());
        for (std::size_t k = 0; k < peers_.size(); ++k) {
          d_beta(static_cast<Eigen::Index>(k + 1)) +=
              static_cast<double>(d_score.cwiseProduct(peers_.masks[k].layers[i]).sum());
        }
      }
      g.local_scores[i] = local_weight * d_score;
    }
    // Softmax Jacobian: dL/dlogit_j = beta_j (dL/dbeta_j - sum_k beta_k dL/dbeta_k).
    g.beta_logits = w.cwiseProduct((d_beta.array() - w.dot(d_beta)).matrix());
    return g;
  }

 private:
  void touch() {
    ++version_;
    dirty_ = true;
  }

  void refresh() {
    if (!dirty_) return;
    auto scores = combined_scores(local_, peers_, beta_);
    mask_.clear();
    weights_.clear();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const auto& w = backbone_->layer(i).weight;
      if (mode_ == MaskMode::kThreshold) {
        mask_.push_back((scores[i].array() > Scalar(0)).template cast<Scalar>().matrix());
        weights_.push_back((scores[i].array() > Scalar(0)).select(w, Scalar(0)));
      } else {
        weights_.push_back(w.cwiseProduct(scores[i]));
        mask_.push_back(std::move(scores[i]));
      }
    }
    dirty_ = false;
  }

  std::shared_ptr<const Backbone<Scalar>> backbone_;
  MaskScores<Scalar> local_;
  PeerMaskSet<Scalar> peers_;
  BetaMixture beta_;
  MaskMode mode_ = MaskMode::kThreshold;

  bool dirty_ = true;
  std::uint64_t version_ = 1;
  std::vector<Matrix<Scalar>> mask_;
  std::vector<Matrix<Scalar>> weights_;
};

}  // namespace mosaic
