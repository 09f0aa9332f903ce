#pragma once

// One agent of a collective: the training loop with embedding refresh, periodic
// communication events, peer-mask replacement at iteration boundaries, and idle
// serving once training is over.
//
// Threads: the trainer (caller of run_agent), the CommNode server, and, in
// async mode, a communication client worker. The trainer hands event requests
// to the worker and picks up finished events at the start of each iteration;
// that is the only place the policy composition changes.

#include <spdlog/spdlog.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mosaic/embedding.hpp"
#include "mosaic/masked_net.hpp"
#include "mosaic/peer.hpp"
#include "mosaic/ppo.hpp"
#include "mosaic/tree_env.hpp"

namespace mosaic {

struct AblationFlags {
  bool disable_criterion1 = false;
  bool disable_criterion2 = false;
  bool disable_rgi = false;
};

struct AgentConfig {
  AgentId id = 0;
  TreeTaskSpec task;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::vector<PeerAddress> peers;

  std::vector<int> hidden{200, 200, 200};
  PpoConfig ppo;
  int comm_interval = 10;
  int embed_interval = 1;
  int embed_samples = 128;
  int reference_size = 50;
  double theta = 0.5;
  AblationFlags ablation;
  ProtocolConfig protocol;
  bool async_comm = true;
  bool protocol_enabled = true;

  std::uint64_t backbone_seed = kDefaultBackboneSeed;
  std::uint64_t reference_seed = 1;
  std::uint64_t agent_seed = 0;
  std::uint64_t env_seed = 0;

  std::string metrics_path;     // JSONL, empty disables
  std::string checkpoint_path;  // final consolidated mask, empty disables
  std::string done_path;        // touched when training finished
  std::string config_hash;
  int embedding_log_interval = 10;  // 0 disables embedding snapshots
  bool idle_after_training = false;
  int wait_for_peers_ms = 0;  // before training, wait this long for every peer to listen

  Architecture architecture() const { return Architecture{task.obs_dim, hidden, task.branching}; }
  int sar_dim() const { return task.obs_dim + task.branching + 1; }

  void validate() const {
    task.validate();
    ppo.validate();
    if (comm_interval < 1) throw InvalidArgument("comm_interval must be >= 1");
    if (embed_interval < 1) throw InvalidArgument("embed_interval must be >= 1");
    if (embed_samples < 1 || reference_size < 1) throw InvalidArgument("embedding sizes must be >= 1");
    if (embed_samples > ppo.rollout_length) throw InvalidArgument("embed_samples exceeds the rollout length");
    for (const auto& p : peers)
      if (p.id == id) throw InvalidArgument("peer list contains the agent itself");
  }
};

/// One TEQ -> QR -> select -> MR -> MTR cycle as seen by the requester.
struct CommunicationEvent {
  std::uint32_t event = 0;
  int iteration = 0;
  std::string status;  // "ok", "skipped_unembedded"
  int teq_sent = 0;
  std::vector<AgentId> responders;
  std::vector<AgentId> selected;
  std::vector<AgentId> received;
  std::vector<AgentId> discarded;  // arrived but failed shape validation
  std::uint64_t bytes_out = 0;
  std::uint64_t bytes_in = 0;
  double wall_ms = 0.0;
  int applied_iteration = -1;
};

struct EventOutcome {
  CommunicationEvent info;
  std::vector<MaskScores<float>> masks;
};

struct EventRequest {
  std::uint32_t event = 0;
  int iteration = 0;
  Eigen::MatrixXd embedding;
  double r_bar = 0.0;
};

/// Runs one event on `node`. Masks are validated against `arch`; failures are
/// logged and dropped, the rest are returned in selection order.
inline EventOutcome communication_event(CommNode& node, const EventRequest& req, const Architecture& arch,
                                        double theta, SelectionFlags flags) {
  const auto t0 = std::chrono::steady_clock::now();
  const ProtocolConfig& pc = node.config();
  EventOutcome out;
  out.info.event = req.event;
  out.info.iteration = req.iteration;
  out.info.status = "ok";

  node.open_event(req.event);
  out.info.teq_sent = node.broadcast_teq(req.event, req.embedding, req.r_bar, &out.info.bytes_out);
  std::vector<wire::Qr> responses;
  if (out.info.teq_sent > 0) responses = node.collect_responses(out.info.teq_sent, pc.qr_wait_ms);
  for (const auto& q : responses) out.info.responders.push_back(q.responder);

  const auto selected = select_peers(responses, req.embedding, req.r_bar, theta, node.id(), flags);
  for (const auto& q : selected) out.info.selected.push_back(q.responder);
  const auto arrived = node.request_masks(req.event, selected, pc.mtr_wait_ms, &out.info.bytes_out);
  out.info.bytes_in = node.event_bytes_in();
  node.close_event();

  for (const auto& rm : arrived) {
    auto scores = from_wire(rm.mtr, arch);
    if (!scores) {
      spdlog::warn("agent {}: mask {:#x} from peer {} has the wrong shape, discarded", node.id(), rm.mtr.mask_id,
                   rm.mtr.sender);
      out.info.discarded.push_back(rm.mtr.sender);
      continue;
    }
    out.info.received.push_back(rm.mtr.sender);
    out.masks.push_back(std::move(*scores));
  }
  out.info.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Communication client worker: events run one at a time in submission order.
class EventWorker {
 public:
  using Fn = std::function<EventOutcome(const EventRequest&)>;

  explicit EventWorker(Fn fn) : fn_(std::move(fn)), thread_([this] { loop(); }) {}

  ~EventWorker() {
    {
      std::lock_guard lk(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    thread_.join();
  }

  void submit(EventRequest req) {
    {
      std::lock_guard lk(mu_);
      pending_.push_back(std::move(req));
    }
    cv_.notify_all();
  }

  std::vector<EventOutcome> take_finished() {
    std::lock_guard lk(mu_);
    std::vector<EventOutcome> out(std::make_move_iterator(done_.begin()), std::make_move_iterator(done_.end()));
    done_.clear();
    return out;
  }

  /// Blocks until everything submitted so far has finished.
  void drain() {
    std::unique_lock lk(mu_);
    idle_cv_.wait(lk, [&] { return pending_.empty() && !busy_; });
  }

 private:
  void loop() {
    std::unique_lock lk(mu_);
    while (true) {
      cv_.wait(lk, [&] { return stopping_ || !pending_.empty(); });
      if (pending_.empty()) return;
      EventRequest req = std::move(pending_.front());
      pending_.pop_front();
      busy_ = true;
      lk.unlock();
      EventOutcome o;
      try {
        o = fn_(req);
      } catch (const std::exception& e) {
        spdlog::warn("communication event {} failed: {}", req.event, e.what());
        o.info.event = req.event;
        o.info.iteration = req.iteration;
        o.info.status = std::string("failed: ") + e.what();
      }
      lk.lock();
      done_.push_back(std::move(o));
      busy_ = false;
      idle_cv_.notify_all();
    }
  }

  Fn fn_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::deque<EventRequest> pending_;
  std::vector<EventOutcome> done_;
  bool busy_ = false;
  bool stopping_ = false;
  std::thread thread_;
};

/// The trainable side of an agent: policy, optimizer and composition lineage.
class PolicyState {
 public:
  PolicyState(std::shared_ptr<const Backbone<float>> backbone, MaskScores<float> local, AgentId owner,
              const PpoConfig& ppo)
      : policy_(std::move(backbone), std::move(local)), opt_(ppo.learning_rate, ppo.adam_eps), owner_(owner) {}

  MaskedPolicy<float>& policy() { return policy_; }
  const MaskedPolicy<float>& policy() const { return policy_; }
  Adam<float>& optimizer() { return opt_; }
  std::uint32_t epoch() const { return epoch_; }
  std::uint64_t mask_id() const { return make_mask_id(owner_, epoch_); }

  /// Owner of each beta entry; the first is the agent itself.
  std::vector<AgentId> sources() const {
    std::vector<AgentId> s{owner_};
    s.insert(s.end(), peer_sources_.begin(), peer_sources_.end());
    return s;
  }

  /// Consolidate, replace the peer set, re-initialize beta. Masks whose shape
  /// does not match are skipped. Returns the number of masks installed.
  std::size_t replace_peer_masks(std::vector<MaskScores<float>> incoming, double r_bar, bool disable_rgi) {
    const Architecture& arch = policy_.architecture();
    PeerMaskSet<float> next;
    std::vector<AgentId> next_sources;
    for (auto& m : incoming) {
      if (!m.matches(arch) || !m.all_finite()) {
        spdlog::warn("agent {}: dropping mis-shaped mask from {}", owner_, m.owner);
        continue;
      }
      next_sources.push_back(m.owner);
      next.masks.push_back(std::move(m));
    }
    MaskScores<float> merged = consolidate(policy_.local(), policy_.peers(), policy_.beta());
    merged.owner = owner_;
    const std::size_t k = next.size();
    BetaMixture beta = disable_rgi ? fixed_split_init(k) : rgi_init(r_bar, k);
    policy_.set_composition(std::move(merged), std::move(next), std::move(beta));
    opt_.reset_beta();
    peer_sources_ = std::move(next_sources);
    ++epoch_;
    return k;
  }

  /// The lineage served to peers: composed scores under the current beta.
  std::shared_ptr<const MaskScores<float>> served_mask() const {
    auto m = std::make_shared<MaskScores<float>>(consolidate(policy_.local(), policy_.peers(), policy_.beta()));
    m->owner = owner_;
    m->mask_id = mask_id();
    return m;
  }

 private:
  MaskedPolicy<float> policy_;
  Adam<float> opt_;
  AgentId owner_;
  std::uint32_t epoch_ = 0;
  std::vector<AgentId> peer_sources_;
};

/// SAR rows of the most recent `n` transitions of the rollout.
inline SarBatch recent_sar_batch(const RolloutBuffer<float>& buf, int n, int num_actions) {
  const int z = buf.size();
  if (n > z) throw InvalidArgument("not enough transitions for the embedding batch");
  const int ds = static_cast<int>(buf.obs.rows());
  SarBatch b{Eigen::MatrixXd(n, ds + num_actions + 1)};
  std::vector<double> s(static_cast<std::size_t>(ds));
  for (int t = 0; t < n; ++t) {
    const int i = z - n + t;
    for (int k = 0; k < ds; ++k) s[static_cast<std::size_t>(k)] = static_cast<double>(buf.obs(k, i));
    encode_sar(std::span<const double>(s), buf.actions[static_cast<std::size_t>(i)], num_actions,
               buf.rewards[static_cast<std::size_t>(i)], b.rows.row(t));
  }
  return b;
}

struct AgentResult {
  std::string status = "completed";  // or "diverged"
  std::vector<IterationStats> iterations;
  std::vector<CommunicationEvent> events;
  Eigen::VectorXd beta;
  std::vector<AgentId> beta_sources;
  std::uint64_t bytes_in = 0;
  std::uint64_t bytes_out = 0;
  std::uint64_t served_masks = 0;

  bool ok() const { return status == "completed"; }
};

namespace detail {

inline nlohmann::json to_json(const CommunicationEvent& e) {
  return {{"event", e.event},
          {"iteration", e.iteration},
          {"status", e.status},
          {"teq_sent", e.teq_sent},
          {"responders", e.responders},
          {"selected", e.selected},
          {"received", e.received},
          {"discarded", e.discarded},
          {"bytes_out", e.bytes_out},
          {"bytes_in", e.bytes_in},
          {"wall_ms", e.wall_ms},
          {"applied_iteration", e.applied_iteration >= 0 ? nlohmann::json(e.applied_iteration) : nlohmann::json()}};
}

inline std::vector<double> as_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

class MetricsLog {
 public:
  MetricsLog(const std::string& path, std::string config_hash, AgentId agent)
      : hash_(std::move(config_hash)), agent_(agent) {
    if (path.empty()) return;
    out_.open(path, std::ios::out | std::ios::trunc);
    if (!out_) throw Error("cannot open metrics log " + path);
  }

  void write(const std::string& type, nlohmann::json rec) {
    if (!out_.is_open()) return;
    rec["type"] = type;
    rec["agent"] = agent_;
    rec["config_hash"] = hash_;
    out_ << rec.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::string hash_;
  AgentId agent_;
};

inline void touch_file(const std::string& path) {
  if (path.empty()) return;
  std::ofstream f(path, std::ios::out | std::ios::trunc);
  f << "done\n";
}

}  // namespace detail

/// Final consolidated mask as a single MTR frame.
inline void save_mask_checkpoint(const std::string& path, const MaskScores<float>& mask, AgentId owner) {
  const auto frame = wire::encode(to_wire(mask, owner, 0, mask.mask_id));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write checkpoint " + path);
  f.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size()));
}

inline MaskScores<float> load_mask_checkpoint(const std::string& path, const Architecture& arch) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto msg = wire::decode(bytes);
  const auto* mtr = std::get_if<wire::Mtr>(&msg);
  if (!mtr) throw Error("checkpoint " + path + " is not a mask frame");
  auto scores = from_wire(*mtr, arch);
  if (!scores) throw ShapeMismatch("checkpoint " + path + " does not match the architecture");
  return *scores;
}

namespace detail {

/// The loop itself. kProtocol = false compiles every protocol path out; an
/// agent with an empty peer list must behave exactly like that build.
template <bool kProtocol>
AgentResult run_agent_impl(const AgentConfig& cfg, const std::atomic<bool>* stop) {
  cfg.validate();
  const Architecture arch = cfg.architecture();
  const auto backbone = std::make_shared<const Backbone<float>>(Backbone<float>::init(arch, cfg.backbone_seed));
  const ReferenceSet reference = ReferenceSet::generate(cfg.reference_size, cfg.sar_dim(), cfg.reference_seed);

  auto local = MaskScores<float>::random(arch, derive_seed(cfg.agent_seed, 1));
  local.owner = cfg.id;
  PolicyState state(backbone, std::move(local), cfg.id, cfg.ppo);
  Rng rng(derive_seed(cfg.agent_seed, 2));
  TreeEnv env(cfg.task);
  Observation current = env.reset(cfg.env_seed);
  double episode_return = 0.0;
  int episode_length = 0;

  MetricsLog log(cfg.metrics_path, cfg.config_hash, cfg.id);
  AgentResult result;

  std::unique_ptr<CommNode> node;
  std::unique_ptr<EventWorker> worker;
  std::vector<EventOutcome> sync_done;
  const bool communicating = kProtocol && !cfg.peers.empty();
  if constexpr (kProtocol) {
    ProtocolConfig pc = cfg.protocol;
    pc.theta = cfg.theta;
    node = std::make_unique<CommNode>(cfg.id, cfg.host, cfg.port, cfg.peers, pc);
    node->start();
    if (communicating && cfg.async_comm) {
      const SelectionFlags flags{!cfg.ablation.disable_criterion1, !cfg.ablation.disable_criterion2};
      CommNode* n = node.get();
      worker = std::make_unique<EventWorker>(
          [n, arch, theta = cfg.theta, flags](const EventRequest& r) {
            return communication_event(*n, r, arch, theta, flags);
          });
    }
  }

  if constexpr (kProtocol) {
    if (cfg.wait_for_peers_ms > 0) {
      const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(cfg.wait_for_peers_ms);
      for (const auto& p : cfg.peers) {
        while (!net::probe(p.host, p.port, 200) && std::chrono::steady_clock::now() < deadline) {
          std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
      }
    }
  }

  nlohmann::json start{{"task",
                        {{"dataset_id", cfg.task.dataset_id},
                         {"depth", cfg.task.depth},
                         {"branching", cfg.task.branching},
                         {"goal_leaf", cfg.task.goal_leaf},
                         {"obs_dim", cfg.task.obs_dim}}},
                       {"port", node ? node->port() : 0},
                       {"peers", cfg.peers.size()},
                       {"iterations", cfg.ppo.iterations()},
                       {"protocol", kProtocol}};
  log.write("start", start);

  TaskEmbedding embedding = TaskEmbedding::zeros(cfg.reference_size, cfg.sar_dim(), cfg.id);
  double r_bar = 0.0;
  std::uint32_t next_event = 1;
  std::int64_t steps = 0;
  const int iterations = cfg.ppo.iterations();
  const auto t_start = std::chrono::steady_clock::now();

  auto record_event = [&](CommunicationEvent e) {
    log.write("event", to_json(e));
    result.events.push_back(std::move(e));
  };

  auto apply_finished = [&](int iteration) {
    if constexpr (kProtocol) {
      std::vector<EventOutcome> done = worker ? worker->take_finished() : std::move(sync_done);
      sync_done.clear();
      for (auto& o : done) {
        if (!o.masks.empty()) {
          const std::size_t k = state.replace_peer_masks(std::move(o.masks), r_bar, cfg.ablation.disable_rgi);
          o.info.applied_iteration = iteration;
          log.write("swap", {{"iteration", iteration},
                             {"event", o.info.event},
                             {"installed", k},
                             {"r_bar", r_bar},
                             {"beta", as_vector(state.policy().beta().weights())},
                             {"beta_sources", state.sources()},
                             {"mask_epoch", state.epoch()}});
        }
        record_event(std::move(o.info));
      }
    }
  };

  try {
    for (int it = 1; it <= iterations; ++it) {
      if (stop && stop->load()) throw Error("stopped before training finished");
      apply_finished(it);  // the swap point

      auto buf = collect_rollout(env, state.policy(), cfg.ppo.rollout_length, rng, current, episode_return,
                                 episode_length);
      IterationStats st = ppo_update(buf, state.policy(), state.optimizer(), cfg.ppo, rng);
      steps += buf.size();
      r_bar = iteration_return(buf.episode_returns, r_bar);
      st.iteration = it;
      st.steps = steps;
      st.episodes = static_cast<int>(buf.episode_returns.size());
      st.mean_return = buf.episode_returns.empty()
                           ? std::numeric_limits<double>::quiet_NaN()
                           : std::accumulate(buf.episode_returns.begin(), buf.episode_returns.end(), 0.0) /
                                 static_cast<double>(buf.episode_returns.size());
      st.r_bar = r_bar;

      if (it % cfg.embed_interval == 0 && buf.size() >= cfg.embed_samples) {
        TaskEmbedding fresh = embed(recent_sar_batch(buf, cfg.embed_samples, cfg.task.branching), reference);
        fresh.owner = cfg.id;
        embedding = embedding.version == 0 ? fresh : update_moving_average(embedding, fresh);
      }

      if constexpr (kProtocol) {
        RegistrySnapshot snap;
        snap.embedding = embedding.v;
        snap.embedding_version = embedding.version;
        snap.r_bar = r_bar;
        snap.mask_id = state.mask_id();
        snap.mask = state.served_mask();
        node->publish(std::move(snap));

        if (communicating && it % cfg.comm_interval == 0) {
          const std::uint32_t c = next_event++;
          if (embedding.version < 1) {
            CommunicationEvent skipped;
            skipped.event = c;
            skipped.iteration = it;
            skipped.status = "skipped_unembedded";
            record_event(std::move(skipped));
          } else {
            EventRequest req{c, it, embedding.v, r_bar};
            if (worker) {
              worker->submit(std::move(req));
            } else {
              const SelectionFlags flags{!cfg.ablation.disable_criterion1, !cfg.ablation.disable_criterion2};
              sync_done.push_back(communication_event(*node, req, arch, cfg.theta, flags));
            }
          }
        }
      }

      const Eigen::VectorXd beta = state.policy().beta().weights();
      nlohmann::json rec{{"iteration", it},
                         {"steps", steps},
                         {"episodes", st.episodes},
                         {"mean_return", st.mean_return},
                         {"r_bar", r_bar},
                         {"beta", as_vector(beta)},
                         {"beta_sources", state.sources()},
                         {"mask_epoch", state.epoch()},
                         {"embedding_version", embedding.version},
                         {"policy_loss", st.policy_loss},
                         {"value_loss", st.value_loss},
                         {"entropy", st.entropy},
                         {"approx_kl", st.approx_kl},
                         {"clip_fraction", st.clip_fraction},
                         {"grad_norm", st.grad_norm},
                         {"clipped_updates", st.clipped_updates},
                         {"wall_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count()}};
      log.write("iteration", std::move(rec));
      if (cfg.embedding_log_interval > 0 && it % cfg.embedding_log_interval == 0 && embedding.version > 0) {
        std::vector<float> values;
        values.reserve(static_cast<std::size_t>(embedding.v.size()));
        for (Eigen::Index i = 0; i < embedding.v.rows(); ++i)
          for (Eigen::Index j = 0; j < embedding.v.cols(); ++j) values.push_back(static_cast<float>(embedding.v(i, j)));
        log.write("embedding", {{"iteration", it},
                                {"version", embedding.version},
                                {"rows", embedding.v.rows()},
                                {"cols", embedding.v.cols()},
                                {"values", values}});
      }
      result.iterations.push_back(st);
    }
  } catch (const Divergence& e) {
    spdlog::error("agent {}: training diverged: {}", cfg.id, e.what());
    result.status = "diverged";
  }

  // Events still in flight finish, but nothing is installed after the last iteration.
  if constexpr (kProtocol) {
    if (worker) {
      worker->drain();
      for (auto& o : worker->take_finished()) record_event(std::move(o.info));
    }
    for (auto& o : sync_done) record_event(std::move(o.info));
    sync_done.clear();
  }

  result.beta = state.policy().beta().weights();
  result.beta_sources = state.sources();
  const auto final_mask = state.served_mask();
  if (!cfg.checkpoint_path.empty()) save_mask_checkpoint(cfg.checkpoint_path, *final_mask, cfg.id);

  auto final_record = [&] {
    nlohmann::json rec{{"status", result.status},
                       {"iterations", result.iterations.size()},
                       {"steps", steps},
                       {"beta", as_vector(result.beta)},
                       {"beta_sources", result.beta_sources},
                       {"mask_epoch", state.epoch()},
                       {"events", result.events.size()},
                       {"checkpoint", cfg.checkpoint_path}};
    if constexpr (kProtocol) {
      result.bytes_in = node->counters().bytes_in.load();
      result.bytes_out = node->counters().bytes_out.load();
      result.served_masks = node->counters().mtr_sent.load();
      rec["bytes_in"] = result.bytes_in;
      rec["bytes_out"] = result.bytes_out;
      rec["masks_served"] = result.served_masks;
      rec["late_dropped"] = node->counters().late_dropped.load();
      rec["malformed"] = node->counters().malformed.load();
    } else {
      rec["bytes_in"] = 0;
      rec["bytes_out"] = 0;
    }
    return rec;
  };
  log.write("final", final_record());
  detail::touch_file(cfg.done_path);

  if constexpr (kProtocol) {
    if (cfg.idle_after_training && result.ok()) {
      // Keep answering TEQ/MR with the final snapshot until told to stop.
      spdlog::info("agent {}: training done, serving on port {}", cfg.id, node->port());
      while (!(stop && stop->load())) std::this_thread::sleep_for(std::chrono::milliseconds(50));
      log.write("idle_end", final_record());
    }
    worker.reset();
    node->stop();
  }
  return result;
}

}  // namespace detail

/// Trains one agent. With protocol_enabled = false the build contains no
/// protocol code at all; that is the reference for isolated agents.
inline AgentResult run_agent(const AgentConfig& cfg, const std::atomic<bool>* stop = nullptr) {
  if (cfg.protocol_enabled) return detail::run_agent_impl<true>(cfg, stop);
  return detail::run_agent_impl<false>(cfg, stop);
}

}  // namespace mosaic
