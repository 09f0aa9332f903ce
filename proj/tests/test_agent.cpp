#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "mosaic/agent.hpp"

using namespace mosaic;
using namespace std::chrono_literals;
namespace fs = std::filesystem;

namespace {

// Small enough that a 50-iteration run takes well under a second.
AgentConfig tiny_agent(AgentId id, int depth, std::uint64_t seed) {
  AgentConfig c;
  c.id = id;
  c.task.dataset_id = 0;
  c.task.depth = depth;
  c.task.branching = 2;
  c.task.goal_leaf = (std::uint64_t{1} << depth) - 1;
  c.task.obs_dim = 8;
  c.hidden = {16};
  c.ppo.rollout_length = 64;
  c.ppo.minibatch_size = 32;
  c.ppo.opt_epochs = 2;
  c.ppo.learning_rate = 5e-3;
  c.ppo.total_steps = 64 * 20;
  c.embed_samples = 32;
  c.reference_size = 6;
  c.comm_interval = 5;
  c.agent_seed = seed;
  c.embedding_log_interval = 0;
  c.protocol.qr_wait_ms = 500;
  c.protocol.mtr_wait_ms = 2000;
  return c;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mosaic_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream f(p);
  std::string line;
  while (std::getline(f, line)) out.push_back(nlohmann::json::parse(line));
  return out;
}

std::uint16_t free_port() {
  std::uint16_t port = 0;
  net::listen_on("127.0.0.1", 0, port);
  return port;
}

/// Agents on threads of this process, fully wired over loopback.
std::vector<AgentResult> run_collective(std::vector<AgentConfig> cfgs) {
  for (auto& c : cfgs) c.port = free_port();
  for (auto& c : cfgs) {
    c.peers.clear();
    for (const auto& o : cfgs)
      if (o.id != c.id) c.peers.push_back(PeerAddress{o.id, "127.0.0.1", o.port});
  }
  // Agents keep serving until everyone has finished training.
  std::atomic<bool> stop{false};
  std::atomic<int> finished{0};
  std::vector<AgentResult> results(cfgs.size());
  std::vector<std::thread> ts;
  const auto dir = temp_dir("collective");
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    cfgs[i].idle_after_training = true;
    cfgs[i].wait_for_peers_ms = 5000;
    cfgs[i].done_path = (dir / ("done_" + std::to_string(i))).string();
    ts.emplace_back([&, i] { results[i] = run_agent(cfgs[i], &stop); });
  }
  while (true) {
    int n = 0;
    for (std::size_t i = 0; i < cfgs.size(); ++i) n += fs::exists(cfgs[i].done_path) ? 1 : 0;
    if (n == static_cast<int>(cfgs.size())) break;
    std::this_thread::sleep_for(20ms);
  }
  stop = true;
  for (auto& t : ts) t.join();
  fs::remove_all(dir);
  return results;
}

/// Trains `cfgs` to completion on threads and leaves them serving until the
/// returned guard is destroyed.
struct IdleServers {
  std::atomic<bool> stop{false};
  std::vector<std::thread> threads;
  fs::path dir = temp_dir("servers");

  explicit IdleServers(std::vector<AgentConfig>& cfgs) {
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
      cfgs[i].port = free_port();
      cfgs[i].idle_after_training = true;
      cfgs[i].done_path = (dir / ("done_" + std::to_string(i))).string();
      threads.emplace_back([this, c = cfgs[i]] { run_agent(c, &stop); });
    }
    for (const auto& c : cfgs)
      while (!fs::exists(c.done_path)) std::this_thread::sleep_for(20ms);
  }

  ~IdleServers() {
    stop = true;
    for (auto& t : threads) t.join();
    fs::remove_all(dir);
  }
};

std::vector<PeerAddress> addresses(const std::vector<AgentConfig>& cfgs) {
  std::vector<PeerAddress> out;
  for (const auto& c : cfgs) out.push_back(PeerAddress{c.id, "127.0.0.1", c.port});
  return out;
}

}  // namespace

// --- mask replacement -------------------------------------------------------------

class ReplaceTest : public ::testing::Test {
 protected:
  Architecture arch{6, {5, 4}, 3};
  std::shared_ptr<const Backbone<float>> net = std::make_shared<const Backbone<float>>(Backbone<float>::init(arch));
  PpoConfig ppo;

  MaskScores<float> peer(std::uint64_t seed, AgentId owner) {
    auto m = MaskScores<float>::random(arch, seed, 1.0);
    m.owner = owner;
    return m;
  }

  Matrix<float> probe() {
    Rng rng(77);
    Matrix<float> x(arch.input_dim, 20);
    for (auto& v : x.reshaped()) v = static_cast<float>(rng.uniform(-1, 1));
    return x;
  }
};

TEST_F(ReplaceTest, SingleQualifyingPeerGetsRgiWeights) {
  PolicyState s(net, MaskScores<float>::random(arch, 1, 1.0), 0, ppo);
  EXPECT_EQ(s.replace_peer_masks({peer(2, 5)}, 0.3, false), 1u);
  const auto w = s.policy().beta().weights();
  ASSERT_EQ(w.size(), 2);
  EXPECT_NEAR(w(0), 0.5 + 0.5 * 0.3, 1e-12);
  EXPECT_NEAR(w(1), 0.5 * 0.7, 1e-12);
  EXPECT_EQ(s.sources(), (std::vector<AgentId>{0, 5}));
  EXPECT_EQ(s.epoch(), 1u);
  EXPECT_EQ(s.mask_id(), make_mask_id(0, 1));
}

TEST_F(ReplaceTest, FixedSplitIgnoresReturn) {
  PolicyState s(net, MaskScores<float>::random(arch, 1, 1.0), 0, ppo);
  s.replace_peer_masks({peer(2, 1), peer(3, 2)}, 0.9, true);
  const auto w = s.policy().beta().weights();
  ASSERT_EQ(w.size(), 3);
  EXPECT_NEAR(w(0), 0.5, 1e-12);
  EXPECT_NEAR(w(1), 0.25, 1e-12);
  EXPECT_NEAR(w(2), 0.25, 1e-12);
}

TEST_F(ReplaceTest, ConsolidationHalfKeepsPolicyOutputs) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    PolicyState s(net, MaskScores<float>::random(arch, rng.next_u64(), 1.0), 0, ppo);
    std::vector<MaskScores<float>> first;
    const int k = 1 + static_cast<int>(rng.index(3));
    for (int j = 0; j < k; ++j) first.push_back(peer(rng.next_u64(), static_cast<AgentId>(j + 1)));
    s.replace_peer_masks(first, rng.uniform(), false);
    Eigen::VectorXd logits(k + 1);
    for (auto& v : logits) v = rng.uniform(-2, 2);
    s.policy().set_beta(BetaMixture{logits});

    const auto x = probe();
    const Matrix<float> before = s.policy().forward(x).logits;
    // Install nothing: only the consolidation half runs.
    s.replace_peer_masks({}, 0.5, false);
    const Matrix<float> after = s.policy().forward(x).logits;
    EXPECT_EQ((before - after).cwiseAbs().maxCoeff(), 0.0f);
    EXPECT_TRUE(s.policy().peers().empty());
    EXPECT_EQ(s.policy().beta().size(), 1u);
  }
}

TEST_F(ReplaceTest, PeerCountNeverAccumulates) {
  PolicyState s(net, MaskScores<float>::random(arch, 1, 1.0), 0, ppo);
  s.replace_peer_masks({peer(2, 1), peer(3, 2), peer(4, 3)}, 0.1, false);
  EXPECT_EQ(s.policy().peers().size(), 3u);
  s.replace_peer_masks({peer(5, 4)}, 0.1, false);
  EXPECT_EQ(s.policy().peers().size(), 1u);
  EXPECT_EQ(s.sources(), (std::vector<AgentId>{0, 4}));
}

TEST_F(ReplaceTest, MisShapedMaskIsDroppedRestApplied) {
  PolicyState s(net, MaskScores<float>::random(arch, 1, 1.0), 0, ppo);
  auto bad = MaskScores<float>::random(Architecture{6, {5, 5}, 3}, 9);
  bad.owner = 8;
  EXPECT_EQ(s.replace_peer_masks({peer(2, 1), bad, peer(3, 2)}, 0.0, false), 2u);
  EXPECT_EQ(s.sources(), (std::vector<AgentId>{0, 1, 2}));
}

TEST_F(ReplaceTest, ServedMaskIsTheComposedPolicy) {
  PolicyState s(net, MaskScores<float>::random(arch, 1, 1.0), 3, ppo);
  s.replace_peer_masks({peer(2, 1), peer(3, 2)}, 0.4, false);
  const auto served = s.served_mask();
  EXPECT_EQ(served->mask_id, s.mask_id());
  MaskedPolicy<float> alone(net, *served);
  const auto x = probe();
  EXPECT_EQ((alone.forward(x).logits - s.policy().forward(x).logits).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(SarBatchTest, UsesMostRecentTransitions) {
  RolloutBuffer<float> buf;
  buf.obs.resize(2, 5);
  for (int t = 0; t < 5; ++t) {
    buf.obs(0, t) = static_cast<float>(t);
    buf.obs(1, t) = -static_cast<float>(t);
    buf.actions.push_back(t % 3);
    buf.rewards.push_back(t == 4 ? 1.0 : 0.0);
  }
  const auto b = recent_sar_batch(buf, 2, 3);
  ASSERT_EQ(b.rows.rows(), 2);
  ASSERT_EQ(b.rows.cols(), 2 + 3 + 1);
  Eigen::RowVectorXd r0(6), r1(6);
  r0 << 3, -3, 1, 0, 0, 0;  // t=3, action 0
  r1 << 4, -4, 0, 1, 0, 1;  // t=4, action 1, goal reward
  EXPECT_EQ(b.rows.row(0), r0);
  EXPECT_EQ(b.rows.row(1), r1);
  EXPECT_THROW(recent_sar_batch(buf, 6, 3), InvalidArgument);
}

// --- training loop -------------------------------------------------------------

TEST(AgentTest, IterationCountFromBudget) {
  auto c = tiny_agent(0, 2, 1);
  c.protocol_enabled = false;
  const auto r = run_agent(c);
  EXPECT_TRUE(r.ok());
  ASSERT_EQ(r.iterations.size(), 20u);
  EXPECT_EQ(r.iterations.back().steps, 64 * 20);
  EXPECT_TRUE(r.events.empty());
}

TEST(AgentTest, EmptyPeerListMatchesProtocolFreeBuildBitForBit) {
  auto c = tiny_agent(0, 3, 42);
  c.ppo.total_steps = 64 * 50;
  c.protocol_enabled = false;
  const auto off = run_agent(c);
  c.protocol_enabled = true;
  const auto on = run_agent(c);
  ASSERT_EQ(off.iterations.size(), 50u);
  ASSERT_EQ(on.iterations.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(std::memcmp(&off.iterations[i].mean_return, &on.iterations[i].mean_return, sizeof(double)), 0)
        << "iteration " << i + 1;
    EXPECT_EQ(off.iterations[i].policy_loss, on.iterations[i].policy_loss);
  }
  EXPECT_TRUE(on.events.empty());
  EXPECT_EQ(on.bytes_out, 0u);
}

TEST(AgentTest, DivergenceIsReportedAndCheckpointWritten) {
  const auto dir = temp_dir("diverge");
  auto c = tiny_agent(0, 2, 3);
  c.protocol_enabled = false;
  c.ppo.learning_rate = 1e300;  // float parameters overflow on the first step
  c.checkpoint_path = (dir / "mask.bin").string();
  c.metrics_path = (dir / "m.jsonl").string();
  const auto r = run_agent(c);
  EXPECT_EQ(r.status, "diverged");
  EXPECT_TRUE(fs::exists(c.checkpoint_path));
  const auto recs = read_jsonl(c.metrics_path);
  ASSERT_FALSE(recs.empty());
  EXPECT_EQ(recs.back()["type"], "final");
  EXPECT_EQ(recs.back()["status"], "diverged");
  fs::remove_all(dir);
}

TEST(AgentTest, MetricsLogAndCheckpoint) {
  const auto dir = temp_dir("metrics");
  auto c = tiny_agent(4, 2, 9);
  c.metrics_path = (dir / "m.jsonl").string();
  c.checkpoint_path = (dir / "mask.bin").string();
  c.config_hash = "abc123";
  c.embedding_log_interval = 10;
  const auto r = run_agent(c);
  const auto recs = read_jsonl(c.metrics_path);
  int iters = 0, embeds = 0;
  for (const auto& j : recs) {
    EXPECT_EQ(j["config_hash"], "abc123");
    EXPECT_EQ(j["agent"], 4);
    if (j["type"] == "iteration") {
      ++iters;
      EXPECT_EQ(j["iteration"], iters);
      EXPECT_NEAR(j["beta"][0].get<double>(), 1.0, 1e-12);
    }
    if (j["type"] == "embedding") {
      ++embeds;
      EXPECT_EQ(j["values"].size(), 6u * (8 + 2 + 1));
    }
  }
  EXPECT_EQ(iters, 20);
  EXPECT_EQ(embeds, 2);
  EXPECT_EQ(recs.front()["type"], "start");
  EXPECT_EQ(recs.back()["type"], "final");

  const auto mask = load_mask_checkpoint(c.checkpoint_path, c.architecture());
  EXPECT_EQ(mask.owner, 4u);
  fs::remove_all(dir);
}

// --- collectives over loopback ----------------------------------------------------

TEST(CollectiveTest, EventsHappenOnScheduleAndMasksAreSubsetOfSelected) {
  std::vector<AgentConfig> cfgs;
  for (AgentId i = 0; i < 3; ++i) cfgs.push_back(tiny_agent(i, 1 + static_cast<int>(i), 100 + i));
  const auto results = run_collective(cfgs);
  for (const auto& r : results) {
    ASSERT_TRUE(r.ok());
    ASSERT_EQ(r.events.size(), 4u);  // iterations 5, 10, 15, 20
    for (std::size_t e = 0; e < r.events.size(); ++e) {
      const auto& ev = r.events[e];
      EXPECT_EQ(ev.iteration, 5 * static_cast<int>(e + 1));
      EXPECT_EQ(ev.teq_sent, 2);
      for (AgentId got : ev.received)
        EXPECT_NE(std::find(ev.selected.begin(), ev.selected.end(), got), ev.selected.end());
      for (AgentId sel : ev.selected)
        EXPECT_NE(std::find(ev.responders.begin(), ev.responders.end(), sel), ev.responders.end());
      // Async events land at whichever boundary follows them, if any is left.
      if (ev.applied_iteration != -1) {
        EXPECT_GT(ev.applied_iteration, ev.iteration);
      }
      if (ev.received.empty()) {
        EXPECT_EQ(ev.applied_iteration, -1);
      }
    }
    // Nothing is installed after the last iteration.
    EXPECT_EQ(r.events.back().applied_iteration, -1);
    EXPECT_EQ(r.beta.size(), static_cast<Eigen::Index>(r.beta_sources.size()));
    EXPECT_NEAR(r.beta.sum(), 1.0, 1e-9);
  }
}

TEST(CollectiveTest, IndiscriminateAblationSelectsEveryResponder) {
  std::vector<AgentConfig> servers{tiny_agent(0, 1, 200), tiny_agent(1, 3, 201)};
  servers[1].task.dataset_id = 7;
  IdleServers guard(servers);

  auto c = tiny_agent(2, 4, 202);
  c.peers = addresses(servers);
  c.ablation.disable_criterion1 = true;
  c.ablation.disable_criterion2 = true;
  c.async_comm = false;
  const auto r = run_agent(c);
  ASSERT_EQ(r.events.size(), 4u);
  for (const auto& ev : r.events) {
    EXPECT_EQ(ev.responders.size(), 2u);
    EXPECT_EQ(ev.selected, ev.responders);
    EXPECT_EQ(ev.received.size(), 2u);
  }
}

TEST(CollectiveTest, NoTransferWhileEveryoneIsAtZero) {
  // Depth-8 tasks: nobody finds the goal in 10 iterations, so all r_bar stay 0
  // and the strict performance criterion rejects every peer.
  std::vector<AgentConfig> cfgs;
  for (AgentId i = 0; i < 3; ++i) {
    auto c = tiny_agent(i, 8, 300 + i);
    c.task.goal_leaf = 0;
    c.task.branching = 8;
    c.ppo.total_steps = 64 * 10;
    c.comm_interval = 2;
    cfgs.push_back(c);
  }
  const auto results = run_collective(cfgs);
  for (const auto& r : results) {
    for (const auto& it : r.iterations) ASSERT_EQ(it.r_bar, 0.0);
    ASSERT_EQ(r.events.size(), 5u);
    for (const auto& ev : r.events) {
      EXPECT_LE(ev.responders.size(), 2u);
      EXPECT_TRUE(ev.selected.empty());
      EXPECT_TRUE(ev.received.empty());
    }
    EXPECT_EQ(r.beta.size(), 1);
  }
}

TEST(CollectiveTest, SyncModeInstallsAtTheNextBoundary) {
  // Agent 0 trains first and then only serves, so every event of agent 1 sees it.
  const auto dir = temp_dir("sync");
  auto server = tiny_agent(0, 1, 400);
  server.port = free_port();
  server.idle_after_training = true;
  server.done_path = (dir / "done").string();
  std::atomic<bool> stop{false};
  std::thread t([&] { run_agent(server, &stop); });
  while (!fs::exists(server.done_path)) std::this_thread::sleep_for(20ms);

  auto c = tiny_agent(1, 2, 401);
  c.peers = {PeerAddress{0, "127.0.0.1", server.port}};
  c.async_comm = false;
  c.ablation.disable_criterion1 = true;
  c.ablation.disable_criterion2 = true;
  const auto r = run_agent(c);
  stop = true;
  t.join();

  ASSERT_EQ(r.events.size(), 4u);
  for (std::size_t e = 0; e < r.events.size(); ++e) {
    EXPECT_EQ(r.events[e].received, std::vector<AgentId>{0});
    EXPECT_EQ(r.events[e].applied_iteration, e + 1 < r.events.size() ? r.events[e].iteration + 1 : -1);
  }
  EXPECT_EQ(r.beta_sources, (std::vector<AgentId>{1, 0}));
  fs::remove_all(dir);
}

TEST(IdleTest, FinishedAgentKeepsAnswering) {
  const auto dir = temp_dir("idle");
  auto c = tiny_agent(1, 2, 5);
  c.port = free_port();
  c.idle_after_training = true;
  c.done_path = (dir / "done").string();
  std::atomic<bool> stop{false};
  AgentResult r;
  std::thread t([&] { r = run_agent(c, &stop); });
  while (!fs::exists(c.done_path)) std::this_thread::sleep_for(20ms);

  CommNode asker(9, "127.0.0.1", 0, {PeerAddress{1, "127.0.0.1", c.port}});
  asker.start();
  for (std::uint32_t ev = 1; ev <= 3; ++ev) {
    asker.open_event(ev);
    Eigen::MatrixXd v = Eigen::MatrixXd::Ones(c.reference_size, c.sar_dim());
    ASSERT_EQ(asker.broadcast_teq(ev, v, 0.0), 1);
    const auto qr = asker.collect_responses(1, 2000);
    ASSERT_EQ(qr.size(), 1u);
    const auto masks = asker.request_masks(ev, qr, 2000);
    ASSERT_EQ(masks.size(), 1u);
    EXPECT_TRUE(from_wire(masks[0].mtr, c.architecture()).has_value());
    asker.close_event();
  }
  stop = true;
  t.join();
  EXPECT_TRUE(r.ok());
  EXPECT_EQ(r.served_masks, 3u);
  fs::remove_all(dir);
}
