#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hitl/error.hpp"
#include "hitl/harness.hpp"
#include "hitl/session.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

hitl::RunConfig resolve_config(const Globals& g) {
  hitl::RunConfig cfg = g.config.empty() ? hitl::RunConfig{} : hitl::load_config(g.config);
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.sync_seeds();
  }
  if (!g.out.empty()) cfg.out = g.out;
  cfg.validate();
  return cfg;
}

nlohmann::json read_json_file(const fs::path& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw hitl::ConfigError(what + " not found: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw hitl::ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw hitl::StorageError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Human-in-the-loop reinforcement learning lab"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config, "Run configuration (JSON)");
  app.add_option("--seed", g.seed, "Run seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory or file");

  auto* train = app.add_subcommand("train", "Train the configured agent");
  std::optional<std::uint64_t> train_steps;
  train->add_option("--steps", train_steps, "Override total environment steps");

  auto* eval = app.add_subcommand("eval", "Greedy evaluation of a checkpoint");
  std::string eval_run;
  std::string eval_checkpoint;
  std::vector<std::string> eval_tracks;
  std::optional<std::size_t> eval_episodes;
  std::optional<std::uint64_t> eval_track_seed;
  eval->add_option("--run", eval_run, "Run directory (config and checkpoint)");
  eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file");
  eval->add_option("--track", eval_tracks, "Track name or file (repeatable)");
  eval->add_option("--episodes", eval_episodes, "Episodes per track");
  eval->add_option("--track-seed", eval_track_seed, "Seed for generated track details");

  auto* compare = app.add_subcommand("compare", "Align and merge learning curves");
  std::vector<std::string> compare_runs;
  std::uint64_t compare_grid = 1000;
  compare->add_option("runs", compare_runs, "Run directories")->required();
  compare->add_option("--grid", compare_grid, "Step grid spacing");

  auto* serve = app.add_subcommand("serve", "Train with a live websocket operator");
  hitl::SessionOptions serve_opts;
  serve->add_option("--port", serve_opts.port, "Listen port (0 = ephemeral)");
  serve->add_option("--bind", serve_opts.bind, "Listen address");
  serve->add_option("--frame-hz", serve_opts.frame_hz, "Frame rate");
  serve->add_option("--step-hz", serve_opts.step_hz, "Training step rate limit (0 = none)");

  auto* epm = app.add_subcommand("epm", "Evaluation prediction module");
  epm->require_subcommand(1);
  auto* epm_train = epm->add_subcommand("train", "Fit the predictive model and crash classifier");
  std::vector<std::string> epm_stores;
  epm_train->add_option("--store", epm_stores, "Run directory or evaluative store (repeatable)")->required();
  auto* epm_eval = epm->add_subcommand("eval", "Counterfactual verdicts for intervention windows");
  std::string epm_store;
  std::string epm_models;
  std::string epm_checkpoint;
  std::string epm_track;
  std::optional<std::uint64_t> epm_track_seed;
  bool epm_oracle = false;
  bool epm_global = false;
  epm_eval->add_option("--store", epm_store, "Run directory or evaluative store")->required();
  epm_eval->add_option("--models", epm_models, "Directory with predictive.json and classifier.json");
  epm_eval->add_option("--checkpoint", epm_checkpoint, "Checkpoint whose Q1 drives the rollouts");
  epm_eval->add_option("--track", epm_track, "Track for oracle rollouts");
  epm_eval->add_option("--track-seed", epm_track_seed, "Seed for generated track details");
  epm_eval->add_flag("--oracle", epm_oracle, "Roll out in the simulator instead of the learned models");
  epm_eval->add_flag("--global", epm_global, "Single verdict over the whole store");

  auto* sweep = app.add_subcommand("sweep", "Run a grid of configurations");
  std::string sweep_grid;
  sweep->add_option("--grid", sweep_grid, "JSON object of dotted key -> value list")->required();

  auto* plot = app.add_subcommand("plot", "Emit plain-text series files");
  std::vector<std::string> plot_runs;
  std::uint64_t plot_grid = 1000;
  plot->add_option("runs", plot_runs, "Run directories")->required();
  plot->add_option("--grid", plot_grid, "Step grid spacing");

  auto* demo = app.add_subcommand("demo-collect", "Record scripted-expert demonstrations");
  std::optional<std::size_t> demo_n;
  demo->add_option("--n", demo_n, "Number of transitions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) {
      hitl::RunConfig cfg = resolve_config(g);
      if (train_steps) cfg.total_steps = *train_steps;
      const auto res = hitl::run_experiment(cfg);
      std::cout << res.summary.dump(2) << '\n';
    } else if (*eval) {
      hitl::RunConfig cfg = eval_run.empty() ? resolve_config(g) : hitl::load_config(fs::path(eval_run) / "config.json");
      if (g.seed) cfg.seed = *g.seed;
      fs::path checkpoint = eval_checkpoint;
      if (checkpoint.empty()) {
        if (eval_run.empty()) throw hitl::ConfigError("eval: --checkpoint or --run is required");
        checkpoint = fs::path(eval_run) / "checkpoint.bin";
      }
      if (eval_tracks.empty()) eval_tracks = cfg.eval.tracks;
      const std::size_t episodes = eval_episodes.value_or(cfg.eval.episodes);
      const fs::path out_dir = !g.out.empty() ? fs::path(g.out) : !eval_run.empty() ? fs::path(eval_run) : fs::path(cfg.out);
      for (const auto& t : eval_tracks) {
        const auto rep = hitl::cmd_eval(checkpoint, t, eval_track_seed.value_or(cfg.effective_track_seed()), cfg.env,
                                        episodes, cfg.seed);
        const fs::path stem = fs::path(t).stem();
        write_json(out_dir / ("eval_" + stem.string() + ".json"), rep.to_json());
        std::cout << rep.track << ": " << rep.mean << " +/- " << rep.stddev << " (" << rep.successes << " successes, "
                  << rep.crashes << " crashes)\n";
      }
    } else if (*compare) {
      if (compare_runs.size() < 2) throw hitl::ConfigError("compare: at least two run directories are required");
      std::vector<fs::path> dirs(compare_runs.begin(), compare_runs.end());
      const auto table = hitl::compare_runs(dirs, compare_grid);
      const fs::path out = g.out.empty() ? fs::path("compare.tsv") : fs::path(g.out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      hitl::write_series_table(out, table);
      std::cout << "wrote " << out.string() << " (" << table.labels.size() << " series, " << table.steps.size()
                << " grid points)\n";
    } else if (*serve) {
      hitl::RunConfig cfg = resolve_config(g);
      if (cfg.kind != hitl::AgentKind::Iddqn) throw hitl::ConfigError("kind: serve requires \"iddqn\"");
      cfg.intervention.source = hitl::SourceKind::Live;
      auto mailbox = std::make_shared<hitl::LiveMailbox>();
      hitl::SessionServer server(mailbox, hitl::track_to_json(hitl::run_track(cfg)), serve_opts);
      server.start();
      std::clog << "serving on ws://" << serve_opts.bind << ":" << server.port() << "\n";
      hitl::TrainHooks hooks;
      hooks.mailbox = mailbox;
      hooks.on_step = [&server](const hitl::StepEvent& ev) {
        server.publish(ev);
        server.wait_if_paused();
      };
      const auto res = hitl::run_experiment(cfg, hooks);
      server.stop();
      std::cout << res.summary.dump(2) << '\n';
    } else if (*epm_train) {
      const hitl::RunConfig cfg = resolve_config(g);
      std::vector<fs::path> stores(epm_stores.begin(), epm_stores.end());
      const fs::path out = g.out.empty() ? fs::path(cfg.out) / "epm_models" : fs::path(g.out);
      const auto r = hitl::cmd_epm_train(stores, cfg.epm, out);
      std::cout << "predictive: state MAE " << r.predictive.state_mae << ", reward MAE " << r.predictive.reward_mae
                << "\nclassifier: accuracy " << r.classifier.accuracy << ", F1 " << r.classifier.f1 << '\n';
    } else if (*epm_eval) {
      hitl::RunConfig cfg = resolve_config(g);
      cfg.epm.oracle_mode = cfg.epm.oracle_mode || epm_oracle;
      cfg.epm.literal_global = cfg.epm.literal_global || epm_global;
      hitl::EpmEvalInputs in;
      in.store = epm_store;
      in.models_dir = epm_models;
      in.checkpoint = epm_checkpoint;
      in.track = epm_track;
      in.track_seed = epm_track_seed.value_or(cfg.effective_track_seed());
      in.env = cfg.env;
      if (!cfg.epm.oracle_mode && in.models_dir.empty()) throw hitl::ConfigError("epm eval: --models is required");
      const fs::path out = !g.out.empty() ? fs::path(g.out)
                           : fs::is_directory(in.store) ? in.store / "epm"
                                                        : fs::path(cfg.out) / "epm";
      const auto rep = hitl::cmd_epm_eval(in, cfg.epm, out);
      std::cout << "windows: " << rep.summary.n_windows << ", agreement: ";
      if (rep.summary.agreement_rate) {
        std::cout << *rep.summary.agreement_rate << '\n';
      } else {
        std::cout << "not applicable\n";
      }
    } else if (*sweep) {
      nlohmann::json base = g.config.empty() ? nlohmann::json::object() : read_json_file(g.config, "config file");
      if (g.seed) base["seed"] = *g.seed;
      const nlohmann::ordered_json grid = read_json_file(sweep_grid, "sweep grid");
      const fs::path out = g.out.empty() ? fs::path("runs/sweep") : fs::path(g.out);
      const auto dirs = hitl::cmd_sweep(base, grid, out);
      std::cout << "ran " << dirs.size() << " cells under " << out.string() << '\n';
    } else if (*plot) {
      std::vector<fs::path> dirs(plot_runs.begin(), plot_runs.end());
      const fs::path out = g.out.empty() ? fs::path("plots") : fs::path(g.out);
      hitl::cmd_plot(dirs, out, plot_grid);
      std::cout << "wrote series under " << out.string() << '\n';
    } else if (*demo) {
      hitl::RunConfig cfg = resolve_config(g);
      const std::size_t n = demo_n.value_or(cfg.demos.n);
      const fs::path out = g.out.empty() ? fs::path("demos.jsonl") : fs::path(g.out);
      const auto d = hitl::cmd_demo_collect(cfg, n, out);
      std::cout << "collected " << d.size() << " transitions into " << out.string() << '\n';
    }
  } catch (const hitl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const hitl::ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const hitl::InvalidInput& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "runtime fault: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
