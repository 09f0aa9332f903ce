// mosaic: run collectives, aggregate their logs, export similarity/beta matrices.

#include <signal.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <atomic>
#include <climits>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "mosaic/harness.hpp"

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

std::string self_exe() {
  char buf[PATH_MAX];
  const ssize_t n = ::readlink("/proc/self/exe", buf, sizeof buf - 1);
  if (n <= 0) throw mosaic::Error("cannot resolve /proc/self/exe");
  return std::string(buf, static_cast<std::size_t>(n));
}

int agent_main(const std::string& manifest_path, std::size_t index) {
  struct sigaction sa {};
  sa.sa_handler = on_signal;
  sigemptyset(&sa.sa_mask);
  ::sigaction(SIGTERM, &sa, nullptr);
  ::sigaction(SIGINT, &sa, nullptr);

  std::ifstream f(manifest_path);
  if (!f) throw mosaic::Error("cannot open manifest " + manifest_path);
  const auto manifest = nlohmann::json::parse(f);
  const auto cfg = mosaic::harness::agent_config_from_manifest(manifest, index);
  spdlog::info("agent {} (dataset {}, depth {}) on port {}, {} peers", cfg.id, cfg.task.dataset_id, cfg.task.depth,
               cfg.port, cfg.peers.size());
  const auto result = mosaic::run_agent(cfg, &g_stop);
  spdlog::info("agent {} finished: {}", cfg.id, result.status);
  return result.ok() ? 0 : 3;
}

bool run_conditions(mosaic::harness::ExperimentConfig cfg, const std::vector<std::string>& conditions) {
  bool ok = true;
  const std::string exe = self_exe();
  for (const auto& c : conditions) {
    cfg.condition = c;
    if (conditions.size() > 1) cfg.label.clear();
    for (const auto& out : mosaic::harness::run_experiment(cfg, exe)) {
      if (!out.all_completed()) {
        spdlog::error("{}: not every agent completed", out.dir);
        ok = false;
      }
    }
  }
  return ok;
}

void print_aggregate(const mosaic::harness::Aggregate& agg) {
  for (const auto& s : agg.summaries) {
    fmt::print("{:<28} seeds={} final total={:.3f} [{:.3f}, {:.3f}] max mean={:.3f} 50% at {}\n", s.label,
               s.seeds.size(), s.final_total.mean, s.final_total.low, s.final_total.high, s.max_mean_total,
               s.threshold_iteration);
  }
  for (const auto& c : agg.comparisons) {
    fmt::print("{} vs {}: delta={:.3f} p={} bci=[{}, {}] {}\n", c.a, c.b, c.delta,
               c.welch ? fmt::format("{:.4g}", c.welch->p) : "n/a", c.bci ? fmt::format("{:.3f}", c.bci->low) : "n/a",
               c.bci ? fmt::format("{:.3f}", c.bci->high) : "n/a", c.note);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MOSAIC collective experiments"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "launch collectives for every seed");
  std::string config_path, condition, out_dir;
  std::vector<std::uint64_t> seeds;
  run->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--condition", condition, "communicating, isolated or both")
      ->check(CLI::IsMember({"communicating", "isolated", "both"}));
  run->add_option("--seeds", seeds, "override the config's seed list");
  run->add_option("--out", out_dir, "override the output directory");

  auto* agg = app.add_subcommand("aggregate", "total-return tables and significance from a results directory");
  std::string results_dir;
  agg->add_option("--results", results_dir, "results directory")->required()->check(CLI::ExistingDirectory);

  auto* mat = app.add_subcommand("matrices", "similarity and beta matrices, dendrograms");
  std::string mat_results, mat_condition = "communicating";
  mat->add_option("--results", mat_results, "results directory")->required()->check(CLI::ExistingDirectory);
  mat->add_option("--condition", mat_condition, "condition label to analyse");

  auto* abl = app.add_subcommand("ablate", "communicating collectives with parts of the method switched off");
  std::string abl_config, abl_out;
  std::vector<std::uint64_t> abl_seeds;
  bool no_c1 = false, no_c2 = false, no_rgi = false;
  int query_freq = 0;
  abl->add_option("--config", abl_config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  abl->add_flag("--no-criterion1", no_c1, "skip the similarity filter");
  abl->add_flag("--no-criterion2", no_c2, "skip the performance filter");
  abl->add_flag("--no-rgi", no_rgi, "fixed beta split instead of reward-guided initialization");
  abl->add_option("--query-freq", query_freq, "iterations between communication events")->check(CLI::PositiveNumber);
  abl->add_option("--seeds", abl_seeds, "override the config's seed list");
  abl->add_option("--out", abl_out, "override the output directory");

  auto* agent = app.add_subcommand("agent", "run one agent of a manifest (used by run)");
  std::string manifest;
  std::size_t index = 0;
  agent->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  agent->add_option("--index", index)->required();
  agent->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*agent) return agent_main(manifest, index);

    if (*run) {
      auto cfg = mosaic::harness::load_config(config_path);
      if (!seeds.empty()) cfg.seeds = seeds;
      if (!out_dir.empty()) cfg.output = out_dir;
      std::vector<std::string> conditions{condition.empty() ? cfg.condition : condition};
      if (condition == "both") conditions = {"communicating", "isolated"};
      return run_conditions(cfg, conditions) ? 0 : 1;
    }

    if (*abl) {
      auto cfg = mosaic::harness::load_config(abl_config);
      if (!abl_seeds.empty()) cfg.seeds = abl_seeds;
      if (!abl_out.empty()) cfg.output = abl_out;
      cfg.condition = "communicating";
      cfg.ablation.disable_criterion1 = no_c1;
      cfg.ablation.disable_criterion2 = no_c2;
      cfg.ablation.disable_rgi = no_rgi;
      std::string label = "ablate";
      if (no_c1) label += "_no_c1";
      if (no_c2) label += "_no_c2";
      if (no_rgi) label += "_no_rgi";
      if (query_freq > 0) {
        cfg.comm_interval = query_freq;
        label += "_qf" + std::to_string(query_freq);
      }
      if (label == "ablate") {
        spdlog::error("ablate: choose at least one of --no-criterion1, --no-criterion2, --no-rgi, --query-freq");
        return 2;
      }
      cfg.label = label;
      return run_conditions(cfg, {"communicating"}) ? 0 : 1;
    }

    if (*agg) {
      const auto a = mosaic::harness::aggregate(results_dir);
      mosaic::harness::write_aggregate(results_dir, a);
      print_aggregate(a);
      return 0;
    }

    if (*mat) {
      for (const auto& r : mosaic::harness::export_matrices(mat_results, mat_condition)) {
        fmt::print("seed {}: top split matches datasets={} within beta={:.4f} cross beta={:.4f}\n", r.seed,
                   r.top_split_matches_datasets, r.within_beta, r.cross_beta);
      }
      return 0;
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
