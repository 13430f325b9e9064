#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <doctest.h>

#include "hitl/checkpoint.hpp"
#include "hitl/error.hpp"
#include "hitl/harness.hpp"

using namespace hitl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hitl_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

nlohmann::json small_config(const std::string& kind, const fs::path& out) {
  return {{"kind", kind},
          {"seed", 5},
          {"total_steps", 1500},
          {"out", out.string()},
          {"checkpoint_every", 0},
          {"agent", {{"learn_start", 200}}},
          {"intervention", {{"h_freq", 300}, {"h_steps", 40}, {"h_limit", 3}}},
          {"eval", {{"episodes", 2}, {"tracks", {"loop"}}}}};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HITL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path write_config(const fs::path& path, const nlohmann::json& j) {
  std::ofstream(path) << j.dump(2);
  return path;
}

}  // namespace

TEST_CASE("interactive run without help reduces to the vanilla run") {
  const fs::path root = scratch("reduce");
  auto a = small_config("iddqn", root / "iddqn");
  a["agent"]["lambda_h"] = 0.0;
  a["intervention"]["h_limit"] = 0;
  a["label"] = "same";
  auto b = small_config("ddqn", root / "ddqn");
  b["label"] = "same";
  run_experiment(config_from_json(a));
  run_experiment(config_from_json(b));
  CHECK(slurp(root / "iddqn" / "metrics.jsonl") == slurp(root / "ddqn" / "metrics.jsonl"));
  CHECK(slurp(root / "iddqn" / "evaluative.jsonl") == slurp(root / "ddqn" / "evaluative.jsonl"));
  CHECK(slurp(root / "iddqn" / "checkpoint.bin") == slurp(root / "ddqn" / "checkpoint.bin"));
}

TEST_CASE("experiment artifacts are reproducible") {
  const fs::path root = scratch("repro");
  const auto r1 = run_experiment(config_from_json(small_config("iddqn", root / "a")));
  run_experiment(config_from_json(small_config("iddqn", root / "b")));
  for (const char* f : {"metrics.jsonl", "evaluative.jsonl", "trace.jsonl", "summary.json", "checkpoint.bin"}) {
    CHECK_MESSAGE(slurp(root / "a" / f) == slurp(root / "b" / f), f);
  }
  CHECK(r1.summary.at("intervened_transitions").get<std::uint64_t>() <= 3 * 40);
  CHECK(r1.summary.at("intervened_transitions").get<std::uint64_t>() > 0);

  const auto e1 = cmd_eval(root / "a" / "checkpoint.bin", "loop", 5, EnvConfig{}, 1, 9);
  CHECK(e1.rewards.size() == 1);
  CHECK(e1.stddev == 0.0);
  const auto e2 = cmd_eval(root / "a" / "checkpoint.bin", "loop", 5, EnvConfig{}, 1, 9);
  CHECK(e1.to_json().dump() == e2.to_json().dump());
  CHECK_THROWS_AS(cmd_eval(root / "missing.bin", "loop", 5, EnvConfig{}, 1, 9), ConfigError);
}

TEST_CASE("resampling and comparison") {
  const std::vector<std::pair<std::uint64_t, double>> pts{{100, 1.0}, {300, 3.0}};
  const auto r = resample(pts, {0, 100, 200, 250, 300, 400});
  CHECK(r[0] == 1.0);
  CHECK(r[1] == 1.0);
  CHECK(r[2] == 2.0);
  CHECK(r[3] == 2.5);
  CHECK(r[4] == 3.0);
  CHECK(std::isnan(r[5]));

  const fs::path root = scratch("compare");
  auto a = small_config("iddqn", root / "x");
  a["label"] = "x";
  auto b = a;
  b["out"] = (root / "y").string();
  b["label"] = "y";
  run_experiment(config_from_json(a));
  run_experiment(config_from_json(b));
  const SeriesTable t = compare_runs({root / "x", root / "y"}, 100);
  REQUIRE(t.labels.size() == 2);
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    if (std::isnan(t.mean[0][i])) continue;
    CHECK(t.mean[0][i] == t.mean[1][i]);
    CHECK(t.stddev[0][i] == 0.0);
  }
  cmd_plot({root / "x", root / "y"}, root / "plot", 100);
  CHECK(fs::exists(root / "plot" / "merged.tsv"));
  CHECK(fs::exists(root / "plot" / "series_x.tsv"));
}

TEST_CASE("a one-cell sweep equals a single run") {
  const fs::path root = scratch("sweep");
  auto base = small_config("ddqn", root / "unused");
  base["label"] = "cell";
  const nlohmann::ordered_json grid = {{"agent.gamma", {0.99}}};
  const auto cells = cmd_sweep(base, grid, root / "sweep");
  REQUIRE(cells.size() == 1);
  auto single = base;
  single["out"] = (root / "single").string();
  run_experiment(config_from_json(single));
  CHECK(slurp(cells[0] / "metrics.jsonl") == slurp(root / "single" / "metrics.jsonl"));
  CHECK(fs::exists(root / "sweep" / "sweep.json"));
  CHECK_THROWS_AS(cmd_sweep(base, nlohmann::ordered_json::object(), root / "empty"), ConfigError);
}

TEST_CASE("EPM on a run without interventions is not applicable") {
  const fs::path root = scratch("epm");
  run_experiment(config_from_json(small_config("ddqn", root / "run")));
  EpmConfig cfg;
  cfg.oracle_mode = true;
  EpmEvalInputs in;
  in.store = root / "run";
  const EpmReport rep = cmd_epm_eval(in, cfg, root / "run" / "epm");
  CHECK(rep.verdicts.empty());
  const auto summary = nlohmann::json::parse(slurp(root / "run" / "epm" / "epm_summary.json"));
  CHECK(summary.at("agreement_rate") == "not applicable");
}

TEST_CASE("command-line exit codes") {
  const fs::path root = scratch("cli");
  const fs::path cfg = write_config(root / "cfg.json", small_config("iddqn", root / "run"));
  CHECK(run_cli("--config " + (root / "nope.json").string() + " train") == 2);
  CHECK(run_cli("--frobnicate train") == 2);
  CHECK(run_cli("--config " + write_config(root / "bad.json", {{"agent", {{"gama", 1}}}}).string() + " train") ==
        2);
  CHECK(run_cli("--config " + cfg.string() + " train") == 0);
  CHECK(fs::exists(root / "run" / "summary.json"));
  CHECK(run_cli("eval --run " + (root / "run").string() + " --episodes 1") == 0);
  CHECK(fs::exists(root / "run" / "eval_loop.json"));

  auto j = small_config("iddqn", root / "live");
  j["intervention"]["source"] = "live";
  CHECK(run_cli("--config " + write_config(root / "live.json", j).string() + " train") == 2);

  std::ofstream(root / "garbage.bin") << "not a checkpoint";
  CHECK(run_cli("eval --checkpoint " + (root / "garbage.bin").string() + " --track loop --episodes 1") == 2);

  const std::string full = slurp(root / "run" / "checkpoint.bin");
  std::ofstream(root / "torn.bin", std::ios::binary) << full.substr(0, full.size() / 2);
  CHECK(run_cli("eval --checkpoint " + (root / "torn.bin").string() + " --track loop --episodes 1") == 3);

  nn::DuelingNetPair odd(1, nn::AdamConfig{});
  odd.q1 = nn::DuelingNet(1, 13, {16}, 33);
  save_checkpoint(root / "odd.bin", odd, TrainingCounters{});
  CHECK(run_cli("eval --checkpoint " + (root / "odd.bin").string() + " --track loop --episodes 1") == 2);
}
