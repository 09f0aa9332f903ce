#pragma once

// PPO with GAE over a MaskedPolicy. Only the local mask scores and the beta
// logits are optimized; the backbone is shared and const.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "mosaic/error.hpp"
#include "mosaic/masked_net.hpp"
#include "mosaic/rng.hpp"
#include "mosaic/tree_env.hpp"

namespace mosaic {

struct PpoConfig {
  double learning_rate = 2.5e-4;
  double gamma = 0.99;
  double gae_lambda = 0.99;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  int opt_epochs = 8;
  int minibatch_size = 64;  // samples per minibatch; 512 / 64 = 8 minibatches per epoch
  double ratio_clip = 0.1;
  double grad_clip = 5.0;
  int rollout_length = 512;
  std::int64_t total_steps = 102400;
  double adam_eps = 1e-5;
  bool normalize_advantages = true;

  int iterations() const { return static_cast<int>(total_steps / rollout_length); }

  void validate() const {
    if (!(learning_rate >= 0.0)) throw InvalidArgument("learning_rate must be >= 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw InvalidArgument("gamma must be in (0, 1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw InvalidArgument("gae_lambda must be in [0, 1]");
    if (entropy_coef < 0.0 || value_coef < 0.0) throw InvalidArgument("loss coefficients must be >= 0");
    if (opt_epochs < 1 || minibatch_size < 1 || rollout_length < 1 || total_steps < 1) {
      throw InvalidArgument("epochs, minibatch size, rollout length and total steps must be positive");
    }
    if (!(ratio_clip > 0.0) || !(grad_clip > 0.0)) throw InvalidArgument("clip values must be positive");
  }
};

/// One iteration's rollout. Columns of `obs` are the observations the actions
/// were taken from.
template <typename Scalar>
struct RolloutBuffer {
  Matrix<Scalar> obs;  // obs_dim x z
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<double> log_probs;
  std::vector<std::uint8_t> dones;
  double bootstrap_value = 0.0;  // V(s_z) for an episode still running at the end
  std::vector<double> episode_returns;
  std::vector<int> episode_lengths;

  int size() const { return static_cast<int>(actions.size()); }
};

struct IterationStats {
  int iteration = 0;
  std::int64_t steps = 0;
  int episodes = 0;
  double mean_return = 0.0;  // NaN when no episode completed
  double r_bar = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;  // mean pre-clip global norm over minibatches
  int clipped_updates = 0;
};

/// Log-softmax of one logit column, in double.
template <typename Derived>
Eigen::VectorXd log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  Eigen::VectorXd z = logits.template cast<double>();
  const double top = z.maxCoeff();
  const double lse = top + std::log((z.array() - top).exp().sum());
  return z.array() - lse;
}

/// Inverse-CDF draw from softmax(logits). Returns (action, log-prob).
template <typename Derived>
std::pair<int, double> sample_action(const Eigen::MatrixBase<Derived>& logits, Rng& rng) {
  const Eigen::VectorXd lp = log_softmax(logits);
  const double u = rng.uniform();
  double acc = 0.0;
  const int n = static_cast<int>(lp.size());
  for (int a = 0; a < n; ++a) {
    acc += std::exp(lp(a));
    if (u < acc) return {a, lp(a)};
  }
  return {n - 1, lp(n - 1)};
}

/// Steps `env` z times under `policy`, resetting after every terminal step.
/// The environment keeps its state across calls, so an episode may straddle
/// two rollouts.
template <typename Scalar>
RolloutBuffer<Scalar> collect_rollout(TreeEnv& env, MaskedPolicy<Scalar>& policy, int z, Rng& rng,
                                      Observation& current, double& episode_return, int& episode_length) {
  if (env.obs_dim() != policy.architecture().input_dim || env.num_actions() != policy.architecture().num_actions) {
    throw ShapeMismatch("environment and policy dimensions differ");
  }
  if (z < 1) throw InvalidArgument("rollout length must be >= 1");
  RolloutBuffer<Scalar> buf;
  const int d = env.obs_dim();
  buf.obs.resize(d, z);
  buf.actions.reserve(z);
  buf.rewards.reserve(z);
  buf.values.reserve(z);
  buf.log_probs.reserve(z);
  buf.dones.reserve(z);
  if (current.empty()) current = env.reset();
  Matrix<Scalar> x(d, 1);
  for (int t = 0; t < z; ++t) {
    for (int k = 0; k < d; ++k) x(k, 0) = static_cast<Scalar>(current[static_cast<std::size_t>(k)]);
    buf.obs.col(t) = x.col(0);
    const auto out = policy.forward(x);
    const auto [action, logp] = sample_action(out.logits.col(0), rng);
    const StepResult r = env.step(action);
    buf.actions.push_back(action);
    buf.rewards.push_back(r.reward);
    buf.values.push_back(static_cast<double>(out.values(0, 0)));
    buf.log_probs.push_back(logp);
    buf.dones.push_back(r.done ? 1 : 0);
    episode_return += r.reward;
    ++episode_length;
    if (r.done) {
      buf.episode_returns.push_back(episode_return);
      buf.episode_lengths.push_back(episode_length);
      episode_return = 0.0;
      episode_length = 0;
      current = env.reset();
    } else {
      current = r.observation;
    }
  }
  if (!buf.dones.back()) {
    for (int k = 0; k < d; ++k) x(k, 0) = static_cast<Scalar>(current[static_cast<std::size_t>(k)]);
    buf.bootstrap_value = static_cast<double>(policy.forward(x).values(0, 0));
  }
  return buf;
}

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// delta_t = r_t + gamma v_{t+1} (1 - done_t) - v_t,  A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}.
/// v_T is `bootstrap_value`.
inline GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                             std::span<const std::uint8_t> dones, double bootstrap_value, double gamma,
                             double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw ShapeMismatch("GAE inputs have different lengths");
  GaeResult g;
  g.advantages.assign(n, 0.0);
  g.returns.assign(n, 0.0);
  double next_adv = 0.0;
  double next_value = bootstrap_value;
  for (std::size_t t = n; t-- > 0;) {
    const double live = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * next_value * live - values[t];
    next_adv = delta + gamma * lambda * live * next_adv;
    g.advantages[t] = next_adv;
    g.returns[t] = next_adv + values[t];
    next_value = values[t];
  }
  return g;
}

/// Mean completed-episode return over R_max = 1, clamped to [0, 1]; with no
/// completed episode the previous value is kept.
inline double iteration_return(std::span<const double> episode_returns, double previous) {
  if (episode_returns.empty()) return previous;
  const double mean =
      std::accumulate(episode_returns.begin(), episode_returns.end(), 0.0) / static_cast<double>(episode_returns.size());
  return std::clamp(mean, 0.0, 1.0);
}

/// Adam over local scores (Scalar) and beta logits (double).
template <typename Scalar>
class Adam {
 public:
  Adam(double lr, double eps = 1e-5, double beta1 = 0.9, double beta2 = 0.999)
      : lr_(lr), eps_(eps), b1_(beta1), b2_(beta2) {}

  /// Drops the beta moments, e.g. after beta was re-initialized with a new size.
  void reset_beta() {
    m_beta_.resize(0);
    v_beta_.resize(0);
    t_beta_ = 0;
  }

  void step(MaskedPolicy<Scalar>& policy, const Gradients<Scalar>& g) {
    ++t_;
    if (m_.empty()) {
      for (const auto& x : g.local_scores) {
        m_.push_back(Matrix<Scalar>::Zero(x.rows(), x.cols()));
        v_.push_back(Matrix<Scalar>::Zero(x.rows(), x.cols()));
      }
    }
    if (m_beta_.size() != g.beta_logits.size()) {
      m_beta_ = Eigen::VectorXd::Zero(g.beta_logits.size());
      v_beta_ = Eigen::VectorXd::Zero(g.beta_logits.size());
      t_beta_ = 0;
    }
    ++t_beta_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const Scalar step = static_cast<Scalar>(lr_ * std::sqrt(c2) / c1);
    const Scalar eps = static_cast<Scalar>(eps_ * std::sqrt(c2));
    const Scalar b1 = static_cast<Scalar>(b1_), b2 = static_cast<Scalar>(b2_);
    policy.update_parameters([&](std::vector<Matrix<Scalar>>& scores, Eigen::VectorXd& logits) {
      for (std::size_t i = 0; i < scores.size(); ++i) {
        m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g.local_scores[i];
        v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.local_scores[i].cwiseAbs2();
        scores[i].array() -= step * m_[i].array() / (v_[i].array().sqrt() + eps);
      }
      const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_beta_));
      const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_beta_));
      m_beta_ = b1_ * m_beta_ + (1.0 - b1_) * g.beta_logits;
      v_beta_ = b2_ * v_beta_ + (1.0 - b2_) * g.beta_logits.cwiseAbs2();
      logits.array() -= lr_ * (m_beta_.array() / bc1) / ((v_beta_.array() / bc2).sqrt() + eps_);
    });
  }

 private:
  double lr_, eps_, b1_, b2_;
  std::int64_t t_ = 0;
  std::int64_t t_beta_ = 0;
  std::vector<Matrix<Scalar>> m_, v_;
  Eigen::VectorXd m_beta_, v_beta_;
};

/// In-place (a - mean) / (std + 1e-8), population std.
inline void normalize_advantages(std::vector<double>& adv) {
  if (adv.empty()) return;
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / n);
  for (double& a : adv) a = (a - mean) / (sd + 1e-8);
}

/// Rescales `g` by max_norm / (norm + 1e-6) if its global norm exceeds
/// `max_norm`. Returns the pre-clip norm.
template <typename Scalar>
double clip_global_norm(Gradients<Scalar>& g, double max_norm) {
  const double norm = std::sqrt(g.squared_norm());
  if (norm > max_norm) g.scale(max_norm / (norm + 1e-6));
  return norm;
}

/// Loss terms of one sample and their gradients. The minibatch loss is the
/// mean over samples of  policy + value_coef * value - entropy_coef * entropy.
struct SampleLoss {
  double policy = 0.0;   // -min(r A, clip(r) A)
  double value = 0.0;    // (v - R)^2 / 2
  double entropy = 0.0;
  double log_ratio = 0.0;
  bool clipped = false;
  Eigen::VectorXd dlogits;  // d(sample loss)/dlogits
  double dvalue = 0.0;
};

template <typename Derived>
SampleLoss ppo_sample_loss(const Eigen::MatrixBase<Derived>& logits, int action, double old_log_prob,
                           double advantage, double value, double ret, const PpoConfig& cfg) {
  SampleLoss s;
  const Eigen::VectorXd lp = log_softmax(logits);
  const Eigen::VectorXd p = lp.array().exp();
  s.entropy = -(p.array() * lp.array()).sum();
  s.log_ratio = lp(action) - old_log_prob;
  const double ratio = std::exp(s.log_ratio);
  const double clipped = std::clamp(ratio, 1.0 - cfg.ratio_clip, 1.0 + cfg.ratio_clip);
  s.clipped = !(ratio * advantage <= clipped * advantage);
  s.policy = -std::min(ratio * advantage, clipped * advantage);
  s.value = 0.5 * (value - ret) * (value - ret);

  // Unclipped branch: d/dlogits of -A r is -A r (onehot - p).
  // Entropy: d(-c H)/dlogits_k = c p_k (log p_k + H).
  s.dlogits = cfg.entropy_coef * (p.array() * (lp.array() + s.entropy)).matrix();
  if (!s.clipped) {
    s.dlogits += advantage * ratio * p;
    s.dlogits(action) -= advantage * ratio;
  }
  s.dvalue = cfg.value_coef * (value - ret);
  return s;
}

/// Clipped-surrogate PPO over the buffer. Fills the loss fields of the result;
/// episode statistics are the caller's.
template <typename Scalar>
IterationStats ppo_update(const RolloutBuffer<Scalar>& buf, MaskedPolicy<Scalar>& policy, Adam<Scalar>& opt,
                          const PpoConfig& cfg, Rng& rng) {
  const int n = buf.size();
  if (n < 1) throw InvalidArgument("empty rollout buffer");
  const GaeResult gae =
      compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap_value, cfg.gamma, cfg.gae_lambda);
  std::vector<double> adv = gae.advantages;
  if (cfg.normalize_advantages) normalize_advantages(adv);

  const int num_actions = policy.architecture().num_actions;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  IterationStats st;
  int minibatches = 0;
  double clipped_samples = 0.0;
  ForwardCache<Scalar> cache;
  for (int epoch = 0; epoch < cfg.opt_epochs; ++epoch) {
    rng.shuffle(std::span<int>(order));
    for (int start = 0; start < n; start += cfg.minibatch_size) {
      const int b = std::min(cfg.minibatch_size, n - start);
      Matrix<Scalar> x(buf.obs.rows(), b);
      for (int j = 0; j < b; ++j) x.col(j) = buf.obs.col(order[static_cast<std::size_t>(start + j)]);
      const auto out = policy.forward(x, &cache);

      Matrix<Scalar> dlogits(num_actions, b);
      Matrix<Scalar> dvalues(1, b);
      double pl = 0.0, vl = 0.0, ent = 0.0, kl = 0.0;
      for (int j = 0; j < b; ++j) {
        const auto i = static_cast<std::size_t>(order[static_cast<std::size_t>(start + j)]);
        const SampleLoss s = ppo_sample_loss(out.logits.col(j), buf.actions[i], buf.log_probs[i], adv[i],
                                             static_cast<double>(out.values(0, j)), gae.returns[i], cfg);
        pl += s.policy;
        vl += s.value;
        ent += s.entropy;
        kl += std::expm1(s.log_ratio) - s.log_ratio;
        clipped_samples += s.clipped ? 1.0 : 0.0;
        dlogits.col(j) = (s.dlogits / b).template cast<Scalar>();
        dvalues(0, j) = static_cast<Scalar>(s.dvalue / b);
      }
      const double loss = pl / b + cfg.value_coef * vl / b - cfg.entropy_coef * ent / b;
      if (!std::isfinite(loss)) throw Divergence("non-finite PPO loss");

      Gradients<Scalar> g = policy.backward(dlogits, dvalues, cache);
      const double norm = clip_global_norm(g, cfg.grad_clip);
      if (!std::isfinite(norm)) throw Divergence("non-finite gradient norm");
      if (norm > cfg.grad_clip) ++st.clipped_updates;
      opt.step(policy, g);

      st.policy_loss += pl / b;
      st.value_loss += vl / b;
      st.entropy += ent / b;
      st.approx_kl += kl / b;
      st.grad_norm += norm;
      ++minibatches;
    }
  }
  st.policy_loss /= minibatches;
  st.value_loss /= minibatches;
  st.entropy /= minibatches;
  st.approx_kl /= minibatches;
  st.grad_norm /= minibatches;
  st.clip_fraction = clipped_samples / (static_cast<double>(n) * cfg.opt_epochs);
  if (!policy.local().all_finite() || !policy.beta().logits.allFinite()) {
    throw Divergence("non-finite parameters after PPO update");
  }
  return st;
}

}  // namespace mosaic
