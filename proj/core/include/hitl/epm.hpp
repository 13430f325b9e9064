#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/env.hpp"
#include "hitl/nn.hpp"
#include "hitl/replay.hpp"

namespace hitl {

struct EpmConfig {
  std::size_t horizon = 4;
  double lr_predictive = 0.0002;
  double lr_classifier = 0.0005;
  std::size_t batch = 64;
  double dropout = 0.4;
  double input_noise = 0.01;
  std::size_t epochs_predictive = 40;
  std::size_t epochs_classifier = 20;
  std::vector<int> hidden = {128, 128};
  double threshold = 0.5;
  double holdout_fraction = 0.2;
  double min_crash_share = 0.2;  // crash share of each classifier batch
  bool oracle_mode = false;
  bool literal_global = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One sample for the offline models.
struct ModelSample {
  Observation s{};
  int action = 0;
  double reward = 0.0;
  Observation s_next{};
  bool crashed = false;
};

std::vector<ModelSample> samples_from_records(std::span<const EvaluativeRecord> records);

struct Prediction {
  Observation next{};
  double reward = 0.0;
};

/// (observation, one-hot action) -> (next observation, reward).
class PredictiveModel {
 public:
  static constexpr int kInputDim = static_cast<int>(kObsDim) + kNumActions;

  PredictiveModel() = default;
  PredictiveModel(const EpmConfig& cfg, std::uint64_t seed);

  /// Output observation clamped to the valid ranges, reward to [-1, 1].
  Prediction predict(const Observation& s, int action) const;
  nn::Mlp& net() { return net_; }
  const nn::Mlp& net() const { return net_; }
  bool loaded() const { return net_.num_params() > 0; }

 private:
  nn::Mlp net_;
};

/// (observation, next observation) -> crash probability.
class CrashClassifier {
 public:
  static constexpr int kInputDim = 2 * static_cast<int>(kObsDim);

  CrashClassifier() = default;
  CrashClassifier(const EpmConfig& cfg, std::uint64_t seed);

  double probability(const Observation& s, const Observation& s_next) const;
  bool crashed(const Observation& s, const Observation& s_next) const {
    return probability(s, s_next) >= threshold;
  }
  nn::Mlp& net() { return net_; }
  const nn::Mlp& net() const { return net_; }
  bool loaded() const { return net_.num_params() > 0; }

  double threshold = 0.5;

 private:
  nn::Mlp net_;
};

struct PredictiveMetrics {
  double state_mae = 0.0;
  double reward_mae = 0.0;
  double train_loss = 0.0;
  std::size_t n_train = 0;
  std::size_t n_holdout = 0;
};

struct ClassifierMetrics {
  double accuracy = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t n_train = 0;
  std::size_t n_holdout = 0;
  std::size_t holdout_crashes = 0;
};

/// Deterministic train/holdout split of sample indices.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double fraction,
                                                                             std::uint64_t seed);

PredictiveModel train_predictive(std::span<const ModelSample> data, const EpmConfig& cfg,
                                 PredictiveMetrics* metrics = nullptr);
CrashClassifier train_classifier(std::span<const ModelSample> data, const EpmConfig& cfg,
                                 ClassifierMetrics* metrics = nullptr);

PredictiveMetrics evaluate_predictive(const PredictiveModel& model, std::span<const ModelSample> data);
ClassifierMetrics evaluate_classifier(const CrashClassifier& model, std::span<const ModelSample> data);

void save_model(const std::filesystem::path& path, const nn::Mlp& net, const nlohmann::json& extra = {});
nn::Mlp load_model(const std::filesystem::path& path, nlohmann::json* extra = nullptr);
void save_predictive(const std::filesystem::path& path, const PredictiveModel& m);
PredictiveModel load_predictive(const std::filesystem::path& path);
void save_classifier(const std::filesystem::path& path, const CrashClassifier& m);
CrashClassifier load_classifier(const std::filesystem::path& path);

/// Action chooser used after the first (logged) counterfactual step. The
/// vehicle state is only available in oracle mode.
using RolloutPolicy = std::function<int(const Observation&, const VehicleState*)>;

RolloutPolicy greedy_policy(const nn::DuelingNet& q1);

/// Learned models or, in oracle mode, the true simulator.
struct EpmModels {
  const PredictiveModel* predictive = nullptr;
  const CrashClassifier* classifier = nullptr;
  const TrackSpec* track = nullptr;  // oracle mode
  EnvConfig env;                     // oracle mode
};

struct RolloutResult {
  double sum_reward = 0.0;
  bool crashed = false;
  std::size_t steps = 0;
  std::vector<double> rewards;
};

/// Simulates `horizon` steps from the onset record, taking `first_action`
/// first and `policy` afterwards. A predicted or true crash sets the sum to -1
/// and stops the rollout.
RolloutResult counterfactual_rollout(const EvaluativeRecord& onset, int first_action, const RolloutPolicy& policy,
                                     const EpmModels& models, std::size_t horizon, bool oracle_mode);

struct EpmVerdict {
  std::uint64_t window = 0;
  std::uint64_t episode = 0;
  std::uint64_t onset_step = 0;
  std::size_t length = 0;   // intervened steps in the window
  std::size_t horizon = 0;  // steps compared
  double sum_r_human = 0.0;
  double sum_r_agent = 0.0;
  bool agent_crashed = false;
  bool agrees = false;

  nlohmann::ordered_json to_json() const;
};

struct EpmSummary {
  std::size_t n_windows = 0;
  std::optional<double> agreement_rate;  // undefined without interventions
  double mean_sum_r_human = 0.0;
  double mean_sum_r_agent = 0.0;
  bool literal_global = false;

  nlohmann::ordered_json to_json() const;
};

struct EpmReport {
  std::vector<EpmVerdict> verdicts;
  EpmSummary summary;
};

/// Maximal runs of consecutive intervened records within one episode, as
/// [begin, end) record indices.
std::vector<std::pair<std::size_t, std::size_t>> intervention_windows(std::span<const EvaluativeRecord> records);

EpmReport evaluate_interventions(std::span<const EvaluativeRecord> records, const EpmModels& models,
                                 const RolloutPolicy& policy, const EpmConfig& cfg);

void write_verdicts(const std::filesystem::path& verdicts, const std::filesystem::path& summary,
                    const EpmReport& report);

}  // namespace hitl
