#pragma once

// Experiment orchestration: resolve a config into one collective per
// (condition, seed), launch every agent as its own process on loopback,
// supervise them, and turn the JSONL logs into tables.
//
// Layout of a results directory:
//   <out>/<label>/seed_<s>/manifest.json    written once, before any agent starts
//   <out>/<label>/seed_<s>/completion.json  exit statuses and end time
//   <out>/<label>/seed_<s>/agent_<i>.jsonl  metrics
//   <out>/<label>/seed_<s>/agent_<i>.mask   final consolidated mask
//   <out>/<label>/seed_<s>/agent_<i>.log    agent stdout/stderr

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mosaic/agent.hpp"
#include "mosaic/analysis.hpp"

namespace mosaic {

inline void to_json(nlohmann::json& j, const PpoConfig& p) {
  j = nlohmann::json{{"learning_rate", p.learning_rate}, {"gamma", p.gamma},
           {"gae_lambda", p.gae_lambda},       {"entropy_coef", p.entropy_coef},
           {"value_coef", p.value_coef},       {"opt_epochs", p.opt_epochs},
           {"minibatch_size", p.minibatch_size}, {"ratio_clip", p.ratio_clip},
           {"grad_clip", p.grad_clip},         {"rollout_length", p.rollout_length},
           {"total_steps", p.total_steps},     {"adam_eps", p.adam_eps},
           {"normalize_advantages", p.normalize_advantages}};
}

inline void from_json(const nlohmann::json& j, PpoConfig& p) {
  p.learning_rate = j.value("learning_rate", p.learning_rate);
  p.gamma = j.value("gamma", p.gamma);
  p.gae_lambda = j.value("gae_lambda", p.gae_lambda);
  p.entropy_coef = j.value("entropy_coef", p.entropy_coef);
  p.value_coef = j.value("value_coef", p.value_coef);
  p.opt_epochs = j.value("opt_epochs", p.opt_epochs);
  p.minibatch_size = j.value("minibatch_size", p.minibatch_size);
  p.ratio_clip = j.value("ratio_clip", p.ratio_clip);
  p.grad_clip = j.value("grad_clip", p.grad_clip);
  p.rollout_length = j.value("rollout_length", p.rollout_length);
  p.total_steps = j.value("total_steps", p.total_steps);
  p.adam_eps = j.value("adam_eps", p.adam_eps);
  p.normalize_advantages = j.value("normalize_advantages", p.normalize_advantages);
}

inline void to_json(nlohmann::json& j, const AblationFlags& a) {
  j = nlohmann::json{{"disable_criterion1", a.disable_criterion1},
           {"disable_criterion2", a.disable_criterion2},
           {"disable_rgi", a.disable_rgi}};
}

inline void from_json(const nlohmann::json& j, AblationFlags& a) {
  a.disable_criterion1 = j.value("disable_criterion1", a.disable_criterion1);
  a.disable_criterion2 = j.value("disable_criterion2", a.disable_criterion2);
  a.disable_rgi = j.value("disable_rgi", a.disable_rgi);
}

inline void to_json(nlohmann::json& j, const ProtocolConfig& p) {
  j = nlohmann::json{{"qr_wait_ms", p.qr_wait_ms},
           {"mtr_wait_ms", p.mtr_wait_ms},
           {"connect_timeout_ms", p.connect_timeout_ms},
           {"io_timeout_ms", p.io_timeout_ms},
           {"server_side_selection", p.server_side_selection}};
}

inline void from_json(const nlohmann::json& j, ProtocolConfig& p) {
  p.qr_wait_ms = j.value("qr_wait_ms", p.qr_wait_ms);
  p.mtr_wait_ms = j.value("mtr_wait_ms", p.mtr_wait_ms);
  p.connect_timeout_ms = j.value("connect_timeout_ms", p.connect_timeout_ms);
  p.io_timeout_ms = j.value("io_timeout_ms", p.io_timeout_ms);
  p.server_side_selection = j.value("server_side_selection", p.server_side_selection);
}

}  // namespace mosaic

namespace mosaic::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// --- config -----------------------------------------------------------------------

struct ExperimentConfig {
  std::string name = "desk";
  std::vector<std::uint32_t> datasets{0, 1};
  std::vector<int> depths{2, 3, 4, 5};
  int branching = 8;
  int obs_dim = 64;
  std::uint64_t goal_seed = 1000;  // goal paths of dataset d are prefixes of one path drawn from goal_seed + d
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string condition = "communicating";  // or "isolated"
  std::uint64_t backbone_seed = kDefaultBackboneSeed;
  std::uint64_t reference_seed = 1;
  int reference_size = 50;
  int embed_samples = 128;
  int embed_interval = 1;
  int comm_interval = 10;
  double theta = 0.5;
  std::vector<int> hidden{200, 200, 200};
  PpoConfig ppo;
  AblationFlags ablation;
  ProtocolConfig protocol;
  bool async_comm = true;
  std::string host = "127.0.0.1";
  std::string output = "results";
  std::string label;  // directory name under output; defaults to the condition
  int embedding_log_interval = 10;
  int final_window = 10;        // iterations averaged into a run's final return
  int wait_for_peers_ms = 30000;
  int timeout_s = 0;            // per collective, 0 = none

  std::size_t agent_count() const { return datasets.size() * depths.size(); }
  std::string effective_label() const { return label.empty() ? condition : label; }

  void validate() const {
    if (datasets.empty() || depths.empty()) throw InvalidArgument("task grid is empty");
    if (seeds.empty()) throw InvalidArgument("no seeds given");
    if (condition != "communicating" && condition != "isolated") {
      throw InvalidArgument("condition must be communicating or isolated, got '" + condition + "'");
    }
    if (std::set<std::uint32_t>(datasets.begin(), datasets.end()).size() != datasets.size())
      throw InvalidArgument("duplicate dataset id");
    if (std::set<int>(depths.begin(), depths.end()).size() != depths.size())
      throw InvalidArgument("duplicate depth");
    if (final_window < 1) throw InvalidArgument("final_window must be >= 1");
    ppo.validate();
  }
};

inline void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"name", c.name},
           {"datasets", c.datasets},
           {"depths", c.depths},
           {"branching", c.branching},
           {"obs_dim", c.obs_dim},
           {"goal_seed", c.goal_seed},
           {"seeds", c.seeds},
           {"condition", c.condition},
           {"backbone_seed", c.backbone_seed},
           {"reference_seed", c.reference_seed},
           {"reference_size", c.reference_size},
           {"embed_samples", c.embed_samples},
           {"embed_interval", c.embed_interval},
           {"comm_interval", c.comm_interval},
           {"theta", c.theta},
           {"hidden", c.hidden},
           {"ppo", c.ppo},
           {"ablation", c.ablation},
           {"protocol", c.protocol},
           {"async_comm", c.async_comm},
           {"host", c.host},
           {"output", c.output},
           {"label", c.label},
           {"embedding_log_interval", c.embedding_log_interval},
           {"final_window", c.final_window},
           {"wait_for_peers_ms", c.wait_for_peers_ms},
           {"timeout_s", c.timeout_s}};
}

inline void from_json(const json& j, ExperimentConfig& c) {
  static const std::set<std::string> known{
      "name",          "datasets",      "depths",         "branching",     "obs_dim",
      "goal_seed",     "seeds",         "condition",      "backbone_seed", "reference_seed",
      "reference_size", "embed_samples", "embed_interval", "comm_interval", "theta",
      "hidden",        "ppo",           "ablation",       "protocol",      "async_comm",
      "host",          "output",        "label",          "embedding_log_interval",
      "final_window",  "wait_for_peers_ms", "timeout_s"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw InvalidArgument("unknown config key '" + k + "'");
  }
  c.name = j.value("name", c.name);
  c.datasets = j.value("datasets", c.datasets);
  c.depths = j.value("depths", c.depths);
  c.branching = j.value("branching", c.branching);
  c.obs_dim = j.value("obs_dim", c.obs_dim);
  c.goal_seed = j.value("goal_seed", c.goal_seed);
  c.seeds = j.value("seeds", c.seeds);
  c.condition = j.value("condition", c.condition);
  c.backbone_seed = j.value("backbone_seed", c.backbone_seed);
  c.reference_seed = j.value("reference_seed", c.reference_seed);
  c.reference_size = j.value("reference_size", c.reference_size);
  c.embed_samples = j.value("embed_samples", c.embed_samples);
  c.embed_interval = j.value("embed_interval", c.embed_interval);
  c.comm_interval = j.value("comm_interval", c.comm_interval);
  c.theta = j.value("theta", c.theta);
  c.hidden = j.value("hidden", c.hidden);
  if (j.contains("ppo")) c.ppo = j.at("ppo").get<PpoConfig>();
  if (j.contains("ablation")) c.ablation = j.at("ablation").get<AblationFlags>();
  if (j.contains("protocol")) c.protocol = j.at("protocol").get<ProtocolConfig>();
  c.async_comm = j.value("async_comm", c.async_comm);
  c.host = j.value("host", c.host);
  c.output = j.value("output", c.output);
  c.label = j.value("label", c.label);
  c.embedding_log_interval = j.value("embedding_log_interval", c.embedding_log_interval);
  c.final_window = j.value("final_window", c.final_window);
  c.wait_for_peers_ms = j.value("wait_for_peers_ms", c.wait_for_peers_ms);
  c.timeout_s = j.value("timeout_s", c.timeout_s);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open config " + path);
  json j;
  try {
    j = json::parse(f, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    throw InvalidArgument("config " + path + ": " + e.what());
  }
  auto c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

/// FNV-1a over the compact dump; stable across builds and platforms.
inline std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

// --- task grid ----------------------------------------------------------------------

struct GridEntry {
  std::size_t index = 0;
  AgentId id = 0;
  TreeTaskSpec task;
};

/// Dataset-major grid. Agent ids are index + 1.
inline std::vector<GridEntry> task_grid(const ExperimentConfig& c) {
  const int max_depth = *std::max_element(c.depths.begin(), c.depths.end());
  std::vector<GridEntry> out;
  for (std::uint32_t ds : c.datasets) {
    Rng g(derive_seed(c.goal_seed + ds, 3));
    BranchPath seq(static_cast<std::size_t>(max_depth));
    for (auto& b : seq) b = static_cast<int>(g.index(static_cast<std::size_t>(c.branching)));
    for (int d : c.depths) {
      GridEntry e;
      e.index = out.size();
      e.id = static_cast<AgentId>(e.index + 1);
      e.task.dataset_id = ds;
      e.task.depth = d;
      e.task.branching = c.branching;
      e.task.obs_dim = c.obs_dim;
      e.task.goal_leaf = leaf_index(BranchPath(seq.begin(), seq.begin() + d), c.branching);
      e.task.validate();
      out.push_back(e);
    }
  }
  return out;
}

/// Seeds an agent from the run seed and its grid position. The same agent gets
/// the same seeds under every condition, so conditions differ only in wiring.
inline std::uint64_t agent_seed(std::uint64_t run_seed, std::size_t index) {
  return derive_seed(run_seed, 0xA6E0 + index);
}

inline std::uint64_t env_seed(std::uint64_t run_seed, std::size_t index) {
  return derive_seed(run_seed, 0xE0E0 + index);
}

/// Ports for n listeners, held open together so they are distinct.
inline std::vector<std::uint16_t> pick_free_ports(std::size_t n, const std::string& host) {
  std::vector<int> fds;
  std::vector<std::uint16_t> ports;
  for (std::size_t i = 0; i < n; ++i) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw Error("socket() failed while picking ports");
    fds.push_back(fd);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = 0;
    if (::inet_pton(AF_INET, host.c_str(), &a.sin_addr) != 1) throw InvalidArgument("bad IPv4 host " + host);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&a), sizeof a) != 0) throw Error("bind() failed while picking ports");
    socklen_t len = sizeof a;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&a), &len);
    ports.push_back(ntohs(a.sin_port));
  }
  for (int fd : fds) ::close(fd);
  return ports;
}

inline std::string collective_dir(const ExperimentConfig& c, std::uint64_t seed) {
  return (fs::path(c.output) / c.effective_label() / ("seed_" + std::to_string(seed))).string();
}

inline std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  ::gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// The resolved snapshot for one collective: the experiment config narrowed to
/// one seed, plus every agent's task, seeds, address and output paths.
inline json resolve_collective(const ExperimentConfig& c, std::uint64_t seed, const std::vector<std::uint16_t>& ports) {
  const auto grid = task_grid(c);
  if (ports.size() != grid.size()) throw InvalidArgument("port count does not match the task grid");
  const fs::path dir = collective_dir(c, seed);
  json cfg = c;
  cfg["seeds"] = {seed};
  cfg["seed"] = seed;
  json agents = json::array();
  for (const auto& e : grid) {
    const std::string stem = "agent_" + std::to_string(e.index);
    agents.push_back({{"index", e.index},
                      {"id", e.id},
                      {"dataset_id", e.task.dataset_id},
                      {"depth", e.task.depth},
                      {"goal_leaf", e.task.goal_leaf},
                      {"host", c.host},
                      {"port", ports[e.index]},
                      {"agent_seed", agent_seed(seed, e.index)},
                      {"env_seed", env_seed(seed, e.index)},
                      {"metrics", (dir / (stem + ".jsonl")).string()},
                      {"checkpoint", (dir / (stem + ".mask")).string()},
                      {"done", (dir / (stem + ".done")).string()},
                      {"log", (dir / (stem + ".log")).string()}});
  }
  cfg["agents"] = agents;
  return cfg;
}

/// Agent config for entry `index` of a manifest. Throws if the snapshot no
/// longer matches its recorded hash.
inline AgentConfig agent_config_from_manifest(const json& manifest, std::size_t index) {
  const json& cfg = manifest.at("config");
  if (config_hash(cfg) != manifest.at("config_hash").get<std::string>()) {
    throw Error("manifest config does not match its hash");
  }
  json base = cfg;
  base.erase("agents");
  base.erase("seed");
  const auto exp = base.get<ExperimentConfig>();
  const json& agents = cfg.at("agents");
  if (index >= agents.size()) throw InvalidArgument("agent index out of range");
  const json& me = agents.at(index);

  AgentConfig a;
  a.id = me.at("id").get<AgentId>();
  a.task.dataset_id = me.at("dataset_id").get<std::uint32_t>();
  a.task.depth = me.at("depth").get<int>();
  a.task.branching = exp.branching;
  a.task.obs_dim = exp.obs_dim;
  a.task.goal_leaf = me.at("goal_leaf").get<std::uint64_t>();
  a.host = me.at("host").get<std::string>();
  a.port = me.at("port").get<std::uint16_t>();
  if (exp.condition == "communicating") {
    for (const auto& p : agents) {
      if (p.at("index").get<std::size_t>() == index) continue;
      a.peers.push_back(
          PeerAddress{p.at("id").get<AgentId>(), p.at("host").get<std::string>(), p.at("port").get<std::uint16_t>()});
    }
  }
  a.hidden = exp.hidden;
  a.ppo = exp.ppo;
  a.comm_interval = exp.comm_interval;
  a.embed_interval = exp.embed_interval;
  a.embed_samples = exp.embed_samples;
  a.reference_size = exp.reference_size;
  a.theta = exp.theta;
  a.ablation = exp.ablation;
  a.protocol = exp.protocol;
  a.async_comm = exp.async_comm;
  a.backbone_seed = exp.backbone_seed;
  a.reference_seed = exp.reference_seed;
  a.agent_seed = me.at("agent_seed").get<std::uint64_t>();
  a.env_seed = me.at("env_seed").get<std::uint64_t>();
  a.metrics_path = me.at("metrics").get<std::string>();
  a.checkpoint_path = me.at("checkpoint").get<std::string>();
  a.done_path = me.at("done").get<std::string>();
  a.config_hash = manifest.at("config_hash").get<std::string>();
  a.embedding_log_interval = exp.embedding_log_interval;
  a.idle_after_training = !a.peers.empty();
  a.wait_for_peers_ms = a.peers.empty() ? 0 : exp.wait_for_peers_ms;
  return a;
}

// --- supervision ----------------------------------------------------------------------

struct AgentOutcome {
  std::size_t index = 0;
  int pid = -1;
  int exit_code = -1;  // -1 if killed by a signal
  int signal = 0;
  bool reached_done = false;
  std::string status;  // from the final log record; "missing" if none
};

struct CollectiveOutcome {
  std::string dir;
  std::uint64_t seed = 0;
  std::vector<AgentOutcome> agents;
  bool all_completed() const {
    for (const auto& a : agents)
      if (a.exit_code != 0 || a.status != "completed") return false;
    return !agents.empty();
  }
};

/// Last "final" record of a metrics log, or null.
inline json final_record(const std::string& path) {
  std::ifstream f(path);
  json last;
  std::string line;
  while (std::getline(f, line)) {
    if (line.find("\"final\"") == std::string::npos) continue;
    try {
      auto j = json::parse(line);
      if (j.value("type", "") == "final") last = std::move(j);
    } catch (const json::exception&) {
    }
  }
  return last;
}

namespace detail {

inline int spawn_agent(const std::string& exe, const std::string& manifest, std::size_t index,
                       const std::string& log_path) {
  const std::string idx = std::to_string(index);
  std::vector<std::string> args{exe, "agent", "--manifest", manifest, "--index", idx};
  const pid_t pid = ::fork();
  if (pid < 0) throw Error("fork() failed");
  if (pid == 0) {
    const int fd = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd >= 0) {
      ::dup2(fd, STDOUT_FILENO);
      ::dup2(fd, STDERR_FILENO);
      ::close(fd);
    }
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    ::execv(exe.c_str(), argv.data());
    std::perror("execv");
    ::_exit(127);
  }
  return pid;
}

inline void record_exit(AgentOutcome& o, int status) {
  if (WIFEXITED(status)) {
    o.exit_code = WEXITSTATUS(status);
  } else if (WIFSIGNALED(status)) {
    o.signal = WTERMSIG(status);
  }
}

inline void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw Error("cannot write " + p.string());
  f << j.dump(2) << '\n';
}

}  // namespace detail

/// One collective: write the manifest, spawn, wait until every agent has
/// finished training (or exited), then stop the idle servers.
inline CollectiveOutcome run_collective(const ExperimentConfig& c, std::uint64_t seed, const std::string& agent_exe) {
  const fs::path dir = collective_dir(c, seed);
  fs::create_directories(dir);
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("agent_", 0) == 0 || name == "manifest.json" || name == "completion.json") fs::remove(entry.path());
  }
  const auto ports = pick_free_ports(c.agent_count(), c.host);
  const json cfg = resolve_collective(c, seed, ports);
  const std::string hash = config_hash(cfg);
  json manifest{{"config", cfg},
                {"config_hash", hash},
                {"start", now_iso()},
                {"seed_design",
                 "one run per algorithm seed; environment seeds are derived from it because tree transitions are "
                 "deterministic, so crossing with separate environment seeds would repeat identical episodes"}};
  const fs::path manifest_path = dir / "manifest.json";
  detail::write_json(manifest_path, manifest);

  CollectiveOutcome out;
  out.dir = dir.string();
  out.seed = seed;
  const auto& agents = cfg.at("agents");
  for (std::size_t i = 0; i < agents.size(); ++i) {
    AgentOutcome o;
    o.index = i;
    o.pid = detail::spawn_agent(agent_exe, manifest_path.string(), i, agents[i].at("log").get<std::string>());
    out.agents.push_back(o);
  }
  spdlog::info("{} seed {}: {} agents started in {}", c.effective_label(), seed, agents.size(), dir.string());

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<bool> alive(out.agents.size(), true);
  auto reap = [&](bool block) {
    for (std::size_t i = 0; i < out.agents.size(); ++i) {
      if (!alive[i]) continue;
      int status = 0;
      const pid_t r = ::waitpid(out.agents[i].pid, &status, block ? 0 : WNOHANG);
      if (r == out.agents[i].pid) {
        detail::record_exit(out.agents[i], status);
        alive[i] = false;
      }
    }
  };
  bool timed_out = false;
  while (true) {
    reap(false);
    bool all = true;
    for (std::size_t i = 0; i < out.agents.size(); ++i) {
      if (fs::exists(agents[i].at("done").get<std::string>())) out.agents[i].reached_done = true;
      if (alive[i] && !out.agents[i].reached_done) all = false;
    }
    if (all) break;
    if (c.timeout_s > 0 && std::chrono::steady_clock::now() - t0 > std::chrono::seconds(c.timeout_s)) {
      spdlog::error("{} seed {}: timeout after {} s", c.effective_label(), seed, c.timeout_s);
      timed_out = true;
      break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  for (std::size_t i = 0; i < out.agents.size(); ++i)
    if (alive[i]) ::kill(out.agents[i].pid, SIGTERM);
  const auto kill_deadline = std::chrono::steady_clock::now() + std::chrono::seconds(20);
  while (std::any_of(alive.begin(), alive.end(), [](bool b) { return b; })) {
    reap(false);
    if (std::chrono::steady_clock::now() > kill_deadline) {
      for (std::size_t i = 0; i < out.agents.size(); ++i)
        if (alive[i]) ::kill(out.agents[i].pid, SIGKILL);
      reap(true);
      break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }

  json exits = json::array();
  for (auto& o : out.agents) {
    const json fin = final_record(agents[o.index].at("metrics").get<std::string>());
    o.status = fin.is_null() ? "missing" : fin.value("status", "missing");
    exits.push_back({{"index", o.index},
                     {"pid", o.pid},
                     {"exit_code", o.exit_code},
                     {"signal", o.signal},
                     {"reached_done", o.reached_done},
                     {"status", o.status}});
    if (o.exit_code != 0 || o.status != "completed") {
      spdlog::warn("{} seed {}: agent {} exit {} signal {} status {}", c.effective_label(), seed, o.index, o.exit_code,
                   o.signal, o.status);
    }
  }
  detail::write_json(dir / "completion.json", {{"config_hash", hash},
                                               {"end", now_iso()},
                                               {"timed_out", timed_out},
                                               {"all_completed", out.all_completed()},
                                               {"agents", exits}});
  for (const auto& a : agents) fs::remove(a.at("done").get<std::string>());
  return out;
}

/// Every seed of the config, one collective after another.
inline std::vector<CollectiveOutcome> run_experiment(const ExperimentConfig& c, const std::string& agent_exe) {
  c.validate();
  std::vector<CollectiveOutcome> out;
  for (std::uint64_t s : c.seeds) out.push_back(run_collective(c, s, agent_exe));
  return out;
}

// --- reading logs -----------------------------------------------------------------------

struct AgentLog {
  std::size_t index = 0;
  AgentId id = 0;
  std::uint32_t dataset_id = 0;
  int depth = 0;
  bool present = false;
  std::string hash;  // config_hash seen in the log; empty if absent
  bool hash_consistent = true;
  std::map<int, double> returns;  // iteration -> mean episode return
  std::map<int, std::vector<double>> embeddings;
  json final_record;
};

struct CollectiveLogs {
  std::string label;
  std::uint64_t seed = 0;
  std::string config_hash;
  int final_window = 10;
  std::vector<AgentLog> agents;
};

inline CollectiveLogs read_collective(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw Error("no manifest in " + dir.string());
  const json manifest = json::parse(mf);
  const json& cfg = manifest.at("config");
  CollectiveLogs out;
  out.label = dir.parent_path().filename().string();
  out.seed = cfg.at("seed").get<std::uint64_t>();
  out.config_hash = manifest.at("config_hash").get<std::string>();
  out.final_window = cfg.value("final_window", 10);
  for (const auto& a : cfg.at("agents")) {
    AgentLog l;
    l.index = a.at("index").get<std::size_t>();
    l.id = a.at("id").get<AgentId>();
    l.dataset_id = a.at("dataset_id").get<std::uint32_t>();
    l.depth = a.at("depth").get<int>();
    // Resolve relative to the collective directory so results can be moved.
    const fs::path log = dir / fs::path(a.at("metrics").get<std::string>()).filename();
    std::ifstream f(log);
    if (f) {
      l.present = true;
      std::string line;
      while (std::getline(f, line)) {
        json j;
        try {
          j = json::parse(line);
        } catch (const json::exception&) {
          continue;  // truncated last line of a killed agent
        }
        const std::string h = j.value("config_hash", "");
        if (l.hash.empty()) l.hash = h;
        if (h != out.config_hash) l.hash_consistent = false;
        const std::string type = j.value("type", "");
        if (type == "iteration") {
          const auto& r = j.at("mean_return");
          if (r.is_number()) l.returns[j.at("iteration").get<int>()] = r.get<double>();
        } else if (type == "embedding") {
          l.embeddings[j.at("iteration").get<int>()] = j.at("values").get<std::vector<double>>();
        } else if (type == "final") {
          l.final_record = j;
        }
      }
    }
    out.agents.push_back(std::move(l));
  }
  return out;
}

/// All collectives below a results directory, grouped by label and sorted by seed.
inline std::map<std::string, std::vector<CollectiveLogs>> read_results(const fs::path& root) {
  std::map<std::string, std::vector<CollectiveLogs>> out;
  if (!fs::is_directory(root)) throw Error("results directory " + root.string() + " does not exist");
  std::vector<fs::path> dirs;
  for (const auto& cond : fs::directory_iterator(root)) {
    if (!cond.is_directory()) continue;
    for (const auto& seed : fs::directory_iterator(cond.path())) {
      if (seed.is_directory() && fs::exists(seed.path() / "manifest.json")) dirs.push_back(seed.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    auto c = read_collective(d);
    out[c.label].push_back(std::move(c));
  }
  for (auto& [k, v] : out)
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.seed < b.seed; });
  return out;
}

/// Mean return over the last `window` logged iterations; NaN if nothing logged.
inline double final_return(const AgentLog& a, int window) {
  if (a.returns.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  int n = 0;
  for (auto it = a.returns.rbegin(); it != a.returns.rend() && n < window; ++it, ++n) s += it->second;
  return s / n;
}

inline double final_total(const CollectiveLogs& c) {
  double s = 0.0;
  for (const auto& a : c.agents) {
    const double r = final_return(a, c.final_window);
    if (std::isfinite(r)) s += r;
  }
  return s;
}

// --- aggregate ----------------------------------------------------------------------

struct TotalRow {
  std::string label;
  int iteration = 0;
  int n_seeds = 0;
  stats::MeanCi total;
  double running_max = 0.0;  // of the mean curve
  std::string warning;
};

struct ConditionSummary {
  std::string label;
  std::vector<std::uint64_t> seeds;
  std::vector<double> final_totals;  // per seed, same order as seeds
  stats::MeanCi final_total;
  double max_mean_total = 0.0;
  int threshold_iteration = -1;  // first iteration with mean total >= half the task count
  int task_count = 0;
};

struct Comparison {
  std::string a, b;
  stats::MeanCi ma, mb;
  double delta = 0.0;
  std::optional<stats::WelchResult> welch;
  std::optional<stats::Interval> bci;
  std::string note;
};

struct Aggregate {
  std::vector<TotalRow> rows;
  std::vector<ConditionSummary> summaries;
  std::vector<Comparison> comparisons;
};

inline std::vector<TotalRow> total_return_curve(const std::string& label, const std::vector<CollectiveLogs>& runs) {
  std::set<int> iterations;
  for (const auto& r : runs)
    for (const auto& a : r.agents)
      for (const auto& [it, v] : a.returns) iterations.insert(it);
  std::vector<TotalRow> rows;
  double running = -std::numeric_limits<double>::infinity();
  for (int it : iterations) {
    std::vector<double> totals;
    std::set<std::string> missing;
    for (const auto& r : runs) {
      double s = 0.0;
      for (const auto& a : r.agents) {
        const auto f = a.returns.find(it);
        if (f == a.returns.end()) {
          missing.insert("seed " + std::to_string(r.seed) + " agent " + std::to_string(a.index));
          continue;
        }
        s += f->second;
      }
      totals.push_back(s);
    }
    TotalRow row;
    row.label = label;
    row.iteration = it;
    row.n_seeds = static_cast<int>(totals.size());
    row.total = stats::t_interval(totals);
    running = std::max(running, row.total.mean);
    row.running_max = running;
    if (!missing.empty()) {
      row.warning = "missing: ";
      bool first = true;
      for (const auto& m : missing) {
        row.warning += (first ? "" : "; ") + m;
        first = false;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Comparison compare(const ConditionSummary& a, const ConditionSummary& b, std::uint64_t seed = 20240101) {
  Comparison c;
  c.a = a.label;
  c.b = b.label;
  c.ma = a.final_total;
  c.mb = b.final_total;
  c.delta = a.final_total.mean - b.final_total.mean;
  try {
    c.welch = stats::welch_t(a.final_totals, b.final_totals);
  } catch (const InvalidArgument& e) {
    c.note = e.what();
  }
  if (a.seeds == b.seeds && a.seeds.size() >= 2) {
    c.bci = stats::bootstrap_ci(a.final_totals, b.final_totals, 10000, 0.05, seed);
  } else if (c.note.empty()) {
    c.note = "seed sets differ; no paired bootstrap";
  }
  return c;
}

/// Pure function of the logs under `root`. Every other condition is compared
/// against "communicating" when that condition exists.
inline Aggregate aggregate(const fs::path& root) {
  const auto results = read_results(root);
  if (results.empty()) throw Error("no runs found under " + root.string());
  Aggregate out;
  for (const auto& [label, runs] : results) {
    auto rows = total_return_curve(label, runs);
    ConditionSummary s;
    s.label = label;
    s.task_count = static_cast<int>(runs.front().agents.size());
    for (const auto& r : runs) {
      s.seeds.push_back(r.seed);
      s.final_totals.push_back(final_total(r));
    }
    s.final_total = stats::t_interval(s.final_totals);
    for (const auto& row : rows) {
      s.max_mean_total = std::max(s.max_mean_total, row.total.mean);
      if (s.threshold_iteration < 0 && row.total.mean >= 0.5 * s.task_count) s.threshold_iteration = row.iteration;
    }
    out.rows.insert(out.rows.end(), rows.begin(), rows.end());
    out.summaries.push_back(std::move(s));
  }
  const auto ref = std::find_if(out.summaries.begin(), out.summaries.end(),
                                [](const auto& s) { return s.label == "communicating"; });
  if (ref != out.summaries.end()) {
    for (const auto& s : out.summaries)
      if (s.label != ref->label) out.comparisons.push_back(compare(*ref, s));
  }
  return out;
}

namespace detail {

inline std::string num(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

}  // namespace detail

/// total_return.csv, summary.csv, final_returns.csv and significance.csv.
inline void write_aggregate(const fs::path& root, const Aggregate& agg) {
  using detail::csv_field;
  using detail::num;
  {
    std::ofstream f(root / "total_return.csv", std::ios::trunc);
    f << "condition,iteration,n_seeds,mean_total_return,ci95_low,ci95_high,ci_degenerate,running_max_of_mean,"
         "warning\n";
    for (const auto& r : agg.rows) {
      f << csv_field(r.label) << ',' << r.iteration << ',' << r.n_seeds << ',' << num(r.total.mean) << ','
        << num(r.total.low) << ',' << num(r.total.high) << ',' << (r.total.degenerate ? 1 : 0) << ','
        << num(r.running_max) << ',' << csv_field(r.warning) << '\n';
    }
  }
  {
    std::ofstream f(root / "summary.csv", std::ios::trunc);
    f << "condition,n_seeds,tasks,final_total_return,ci95_low,ci95_high,ci_degenerate,max_mean_total_return,"
         "iteration_at_50pct\n";
    for (const auto& s : agg.summaries) {
      f << csv_field(s.label) << ',' << s.seeds.size() << ',' << s.task_count << ',' << num(s.final_total.mean) << ','
        << num(s.final_total.low) << ',' << num(s.final_total.high) << ',' << (s.final_total.degenerate ? 1 : 0)
        << ',' << num(s.max_mean_total) << ',' << (s.threshold_iteration >= 0 ? std::to_string(s.threshold_iteration) : "")
        << '\n';
    }
  }
  {
    std::ofstream f(root / "significance.csv", std::ios::trunc);
    f << "a,b,final_a,ci_a_low,ci_a_high,final_b,ci_b_low,ci_b_high,delta,welch_t,welch_df,welch_p,bci95_low,"
         "bci95_high,note\n";
    for (const auto& c : agg.comparisons) {
      f << csv_field(c.a) << ',' << csv_field(c.b) << ',' << num(c.ma.mean) << ',' << num(c.ma.low) << ','
        << num(c.ma.high) << ',' << num(c.mb.mean) << ',' << num(c.mb.low) << ',' << num(c.mb.high) << ','
        << num(c.delta) << ',' << (c.welch ? num(c.welch->t) : "") << ',' << (c.welch ? num(c.welch->df) : "") << ','
        << (c.welch ? num(c.welch->p) : "") << ',' << (c.bci ? num(c.bci->low) : "") << ','
        << (c.bci ? num(c.bci->high) : "") << ',' << csv_field(c.note) << '\n';
    }
  }
  {
    std::ofstream f(root / "final_returns.csv", std::ios::trunc);
    f << "condition,seed,agent,dataset,depth,final_return,status\n";
    for (const auto& [label, runs] : read_results(root)) {
      for (const auto& r : runs) {
        for (const auto& a : r.agents) {
          const std::string status =
              a.final_record.is_null() ? (a.present ? "incomplete" : "missing") : a.final_record.value("status", "");
          f << csv_field(label) << ',' << r.seed << ',' << a.index << ',' << a.dataset_id << ',' << a.depth << ','
            << num(final_return(a, r.final_window)) << ',' << status << '\n';
        }
      }
    }
  }
}

// --- matrices ----------------------------------------------------------------------

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeMismatch("embedding snapshots differ in size");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

/// S(i, j): cosine of the two agents' snapshots averaged over the iterations
/// where both logged one. The diagonal is 1 by construction.
inline Eigen::MatrixXd similarity_matrix(const CollectiveLogs& c) {
  const auto n = static_cast<Eigen::Index>(c.agents.size());
  Eigen::MatrixXd s = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const auto& ei = c.agents[static_cast<std::size_t>(i)].embeddings;
      const auto& ej = c.agents[static_cast<std::size_t>(j)].embeddings;
      double acc = 0.0;
      int k = 0;
      for (const auto& [it, v] : ei) {
        const auto f = ej.find(it);
        if (f == ej.end()) continue;
        acc += cosine(v, f->second);
        ++k;
      }
      s(i, j) = s(j, i) = k > 0 ? acc / k : 0.0;
    }
  }
  return s;
}

/// B(i, j): final beta mass agent i puts on masks whose lineage starts at agent j.
inline Eigen::MatrixXd beta_matrix(const CollectiveLogs& c) {
  const auto n = static_cast<Eigen::Index>(c.agents.size());
  std::map<AgentId, Eigen::Index> by_id;
  for (Eigen::Index i = 0; i < n; ++i) by_id[c.agents[static_cast<std::size_t>(i)].id] = i;
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const json& fin = c.agents[static_cast<std::size_t>(i)].final_record;
    if (fin.is_null() || !fin.contains("beta")) {
      b(i, i) = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const auto beta = fin.at("beta").get<std::vector<double>>();
    const auto src = fin.at("beta_sources").get<std::vector<AgentId>>();
    for (std::size_t k = 0; k < beta.size() && k < src.size(); ++k) {
      const auto f = by_id.find(src[k]);
      if (f != by_id.end()) b(i, f->second) += beta[k];
    }
  }
  return b;
}

struct StructureReport {
  std::uint64_t seed = 0;
  Eigen::MatrixXd s, b;
  stats::Dendrogram tree;
  bool top_split_matches_datasets = false;
  double within_beta = 0.0;  // mean off-diagonal entry over same-dataset pairs
  double cross_beta = 0.0;   // mean entry over different-dataset pairs
};

inline StructureReport structure(const CollectiveLogs& c) {
  StructureReport r;
  r.seed = c.seed;
  r.s = similarity_matrix(c);
  r.b = beta_matrix(c);
  const auto n = c.agents.size();
  if (n >= 2) {
    r.tree = stats::wpgma(stats::distance_from_similarity(r.s));
    auto [left, right] = r.tree.top_split();
    std::map<std::uint32_t, std::set<int>> planted;
    for (std::size_t i = 0; i < n; ++i) planted[c.agents[i].dataset_id].insert(static_cast<int>(i));
    if (planted.size() == 2) {
      const std::set<int> l(left.begin(), left.end()), rr(right.begin(), right.end());
      const auto& p0 = planted.begin()->second;
      const auto& p1 = std::next(planted.begin())->second;
      r.top_split_matches_datasets = (l == p0 && rr == p1) || (l == p1 && rr == p0);
    }
  }
  double w = 0, x = 0;
  int nw = 0, nx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double v = r.b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (!std::isfinite(v)) continue;
      if (c.agents[i].dataset_id == c.agents[j].dataset_id) {
        w += v;
        ++nw;
      } else {
        x += v;
        ++nx;
      }
    }
  }
  r.within_beta = nw ? w / nw : 0.0;
  r.cross_beta = nx ? x / nx : 0.0;
  return r;
}

inline json dendrogram_json(const stats::Dendrogram& d, const std::vector<std::string>& labels) {
  json merges = json::array();
  for (const auto& m : d.merges) merges.push_back({{"a", m.a}, {"b", m.b}, {"height", m.height}, {"members", m.leaves}});
  json j{{"n", d.n}, {"labels", labels}, {"merges", merges}, {"leaf_order", d.leaf_order()}};
  if (!d.merges.empty()) {
    auto [l, r] = d.top_split();
    j["top_split"] = {l, r};
  }
  return j;
}

inline void write_matrix_csv(const fs::path& p, const Eigen::MatrixXd& m, const std::vector<std::string>& labels) {
  std::ofstream f(p, std::ios::trunc);
  f << "agent";
  for (const auto& l : labels) f << ',' << l;
  f << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    f << labels[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.cols(); ++j) f << ',' << detail::num(m(i, j));
    f << '\n';
  }
}

inline std::vector<std::string> agent_labels(const CollectiveLogs& c) {
  std::vector<std::string> out;
  for (const auto& a : c.agents)
    out.push_back("d" + std::to_string(a.dataset_id) + "_depth" + std::to_string(a.depth));
  return out;
}

/// Per-seed S and B matrices, dendrograms, and a structure summary for one
/// condition, written to <root>/matrices/<label>/.
inline std::vector<StructureReport> export_matrices(const fs::path& root, const std::string& label = "communicating") {
  const auto results = read_results(root);
  const auto f = results.find(label);
  if (f == results.end()) throw Error("no '" + label + "' runs under " + root.string());
  const fs::path out = root / "matrices" / label;
  fs::create_directories(out);
  std::vector<StructureReport> reports;
  json summary = json::array();
  Eigen::MatrixXd s_mean, b_mean;
  for (const auto& c : f->second) {
    auto r = structure(c);
    const auto labels = agent_labels(c);
    const std::string stem = "seed_" + std::to_string(c.seed);
    write_matrix_csv(out / (stem + "_S.csv"), r.s, labels);
    write_matrix_csv(out / (stem + "_B.csv"), r.b, labels);
    detail::write_json(out / (stem + "_dendrogram.json"), dendrogram_json(r.tree, labels));
    summary.push_back({{"seed", c.seed},
                       {"top_split_matches_datasets", r.top_split_matches_datasets},
                       {"within_beta", r.within_beta},
                       {"cross_beta", r.cross_beta}});
    if (s_mean.size() == 0) {
      s_mean = r.s;
      b_mean = r.b;
    } else if (s_mean.rows() == r.s.rows()) {
      s_mean += r.s;
      b_mean += r.b;
    }
    reports.push_back(std::move(r));
  }
  const double k = static_cast<double>(reports.size());
  const auto labels = agent_labels(f->second.front());
  write_matrix_csv(out / "mean_S.csv", s_mean / k, labels);
  write_matrix_csv(out / "mean_B.csv", b_mean / k, labels);
  if (s_mean.rows() >= 2) detail::write_json(out / "mean_dendrogram.json",
                                             dendrogram_json(stats::wpgma(stats::distance_from_similarity(s_mean / k)), labels));
  detail::write_json(out / "structure.json", summary);
  return reports;
}

}  // namespace mosaic::harness
