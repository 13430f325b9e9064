#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/config.hpp"

namespace hitl {

struct EvalReport {
  std::string track;
  std::vector<double> rewards;
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t successes = 0;
  std::size_t crashes = 0;

  nlohmann::ordered_json to_json() const;
};

/// Mean and population standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);

/// Greedy (epsilon = 0) rollouts with per-episode seeds derived from `seed`.
EvalReport evaluate_greedy(const nn::DuelingNet& q1, const TrackSpec& track, const EnvConfig& env,
                           std::size_t episodes, std::uint64_t seed);

/// Mean episodic reward of episodes that ended within the last `window` steps.
double final_window_mean(const std::vector<EpisodeMetrics>& episodes, std::uint64_t total_steps,
                         std::uint64_t window = 1000);

struct TrainHooks {
  std::function<void(const StepEvent&)> on_step;
  std::shared_ptr<LiveMailbox> mailbox;  // required for the live source
};

struct ExperimentResult {
  nlohmann::ordered_json summary;
  RunReport report;  // empty for pure imitation learners
  std::filesystem::path checkpoint;
};

/// Runs one configured experiment and writes its artifacts to cfg.out:
/// config.json, metrics.jsonl, summary.json, checkpoint.bin and, for the
/// online learners, evaluative.jsonl and trace.jsonl.
ExperimentResult run_experiment(const RunConfig& cfg, const TrainHooks& hooks = {});

/// Loads a checkpoint, checks its architecture and evaluates Q1 greedily.
EvalReport cmd_eval(const std::filesystem::path& checkpoint, const std::string& track, std::uint64_t track_seed,
                    const EnvConfig& env, std::size_t episodes, std::uint64_t seed);

/// Per-label series resampled on a common step grid.
struct SeriesTable {
  std::vector<std::uint64_t> steps;
  std::vector<std::string> labels;
  std::vector<std::vector<double>> mean;  // [label][step]
  std::vector<std::vector<double>> stddev;
  std::vector<std::vector<std::size_t>> count;
};

/// Linear interpolation of (step, reward) episode-end points at `grid`; steps
/// before the first point take the first value, steps past the last point are NaN.
std::vector<double> resample(const std::vector<std::pair<std::uint64_t, double>>& points,
                             const std::vector<std::uint64_t>& grid);

SeriesTable compare_runs(const std::vector<std::filesystem::path>& run_dirs, std::uint64_t grid_step = 1000);
void write_series_table(const std::filesystem::path& path, const SeriesTable& table);

/// One series file per label plus a merged table.
void cmd_plot(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir,
              std::uint64_t grid_step = 1000);

/// Cartesian product over dotted config paths; cell i runs with seed base+i.
std::vector<std::filesystem::path> cmd_sweep(const nlohmann::json& base_config, const nlohmann::ordered_json& grid,
                                             const std::filesystem::path& out_dir);

struct EpmTrainResult {
  PredictiveMetrics predictive;
  ClassifierMetrics classifier;
};

std::vector<EvaluativeRecord> load_store_records(const std::filesystem::path& run_dir_or_file);

EpmTrainResult cmd_epm_train(const std::vector<std::filesystem::path>& stores, const EpmConfig& cfg,
                             const std::filesystem::path& out_dir);

struct EpmEvalInputs {
  std::filesystem::path store;
  std::filesystem::path models_dir;  // unused in oracle mode
  std::filesystem::path checkpoint;  // Q1 for rollouts; defaults to the run's checkpoint
  std::string track;                 // oracle mode; defaults to the run's track
  std::uint64_t track_seed = 0;
  EnvConfig env;
};

EpmReport cmd_epm_eval(const EpmEvalInputs& in, const EpmConfig& cfg, const std::filesystem::path& out_dir);

DemoDataset cmd_demo_collect(const RunConfig& cfg, std::size_t n, const std::filesystem::path& out_file);

/// Resolves the configured track for this run.
TrackSpec run_track(const RunConfig& cfg);

}  // namespace hitl
