#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/checkpoint.hpp"
#include "hitl/env.hpp"
#include "hitl/intervention.hpp"
#include "hitl/nn.hpp"
#include "hitl/replay.hpp"

namespace hitl {

/// Human weight lambda_h as a function of the global step.
class HumanWeightSchedule {
 public:
  enum class Mode { Constant, LinearDecay };

  static HumanWeightSchedule constant(double value);
  static HumanWeightSchedule linear_decay(double start, double end, std::uint64_t over_steps);

  double value(std::uint64_t step) const;
  Mode mode() const { return mode_; }
  double start() const { return start_; }
  double end() const { return end_; }
  std::uint64_t over_steps() const { return over_; }

  void validate() const;
  nlohmann::json to_json() const;
  static HumanWeightSchedule from_json(const nlohmann::json& j);

 private:
  Mode mode_ = Mode::Constant;
  double start_ = 0.0;
  double end_ = 0.0;
  std::uint64_t over_ = 0;
};

struct AgentConfig {
  double gamma = 0.99;
  std::size_t batch = 32;
  std::uint64_t train_every = 4;
  double tau = 0.0075;
  double lr = 0.00025;
  double epsilon_init = 1.0;
  double epsilon_decay = 1e-4;  // per environment step, linear
  double epsilon_floor = 0.05;
  std::uint64_t learn_start = 1000;
  HumanWeightSchedule schedule = HumanWeightSchedule::linear_decay(1.0, 0.0, 40000);
  bool strict_paper_blend = true;
  std::uint64_t seed = 0;

  void validate() const;
  double epsilon(std::uint64_t step) const;
};

/// epsilon-greedy over Q1; ties break to the lowest index.
int select_action(const Observation& obs, double epsilon, const nn::DuelingNet& q1, std::mt19937_64& rng);

/// Executed action: exact selection between agent and human actions.
/// Throws InvalidInput when intervened but a_human is -1.
int blend_action(int a_agent, int a_human, bool intervened);

/// lambda * min(q1_h, q2_h) + (1 - lambda) * min(q1_a, q2_a). Off-intervention
/// the human term is zero (strict) or the agent term is used alone (relaxed).
double q_combined(double q1_h, double q2_h, double q1_a, double q2_a, double lambda_h, bool intervened,
                  bool strict_paper_blend);

/// r + gamma * min(t1, t2) * (1 - done) for target-net values at a*.
double clipped_target(double reward, double target1_at_best, double target2_at_best, bool done, double gamma);

/// Full target for one transition: a* = argmax_a Q1(s', a), evaluated by both target nets.
double q_target(double reward, const Observation& s_next, bool done, const nn::DuelingNetPair& nets, double gamma);

double td_error(double q_target_value, double q_combined_value);

/// Batched clipped double-Q targets.
std::vector<double> clipped_targets(const nn::DuelingNetPair& nets, const SampledBatch& batch, double gamma);

/// Adam on both online nets, soft update of both targets.
void apply_gradients(nn::DuelingNetPair& nets, std::span<const double> grad1, std::span<const double> grad2,
                     double tau);

struct TrainStats {
  double loss1 = 0.0;
  double loss2 = 0.0;
  double mean_abs_td = 0.0;
  double mean_lambda = 0.0;
  double aux_loss = 0.0;  // e.g. large-margin imitation term
};

/// One iDDQN update on a prioritized batch.
TrainStats train_step(nn::DuelingNetPair& nets, PriorityBuffer& buffer, const AgentConfig& cfg, std::mt19937_64& rng);

/// One vanilla clipped double DQN update: each net regresses Q_i(s, a_executed)
/// onto the shared clipped target.
TrainStats train_step_clipped_ddqn(nn::DuelingNetPair& nets, PriorityBuffer& buffer, const AgentConfig& cfg,
                                   std::mt19937_64& rng);

using UpdateFn = std::function<TrainStats(nn::DuelingNetPair&, PriorityBuffer&, std::mt19937_64&)>;

enum class UpdateRule { Interactive, ClippedDouble };

struct EpisodeMetrics {
  std::uint64_t episode = 0;
  std::uint64_t steps = 0;
  std::uint64_t global_step = 0;  // steps completed when the episode ended
  double cumulative_reward = 0.0;
  bool crashed = false;
  bool success = false;
  double lambda_h = 0.0;
  double epsilon = 0.0;
  std::uint64_t interventions_used = 0;  // windows opened so far
  std::uint64_t intervened_steps = 0;    // within this episode

  nlohmann::ordered_json to_json() const;
  static EpisodeMetrics from_json(const nlohmann::json& j);
};

/// Published after every environment step.
struct StepEvent {
  std::uint64_t global_step = 0;
  const VehicleState* state = nullptr;
  const Observation* observation = nullptr;
  double reward = 0.0;
  double cum_reward = 0.0;
  double lambda_h = 0.0;
  GateState gate = GateState::Closed;
  bool intervened = false;
  int executed_action = 0;
  bool episode_end = false;
};

struct RunSinks {
  std::ostream* metrics = nullptr;  // one JSON line per episode
  EvaluativeStore* store = nullptr;
  std::function<void(const StepEvent&)> on_step;
  std::function<void(const EpisodeMetrics&)> on_episode;
  std::optional<std::filesystem::path> checkpoint_path;
  std::uint64_t checkpoint_every = 0;
};

struct RunReport {
  std::vector<EpisodeMetrics> episodes;
  TrainingCounters counters;
  std::uint64_t intervened_transitions = 0;
  std::vector<GateState> gate_trace;  // one entry per step
  TrainStats last_stats;
};

/// Algorithm-level driver: epsilon-greedy acting, gated intervention polling,
/// action blending, storage into both buffers and periodic updates.
class Trainer {
 public:
  Trainer(TrackEnv env, AgentConfig cfg, PerConfig per, InterventionSchedule schedule,
          InterventionSource* source = nullptr, UpdateRule rule = UpdateRule::Interactive);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// Replaces the update rule (e.g. DQfD's margin-augmented update).
  void set_update(UpdateFn fn) { update_ = std::move(fn); }

  RunReport run(std::uint64_t total_steps, RunSinks& sinks);

  nn::DuelingNetPair& nets() { return nets_; }
  const nn::DuelingNetPair& nets() const { return nets_; }
  PriorityBuffer& buffer() { return buffer_; }
  const AgentConfig& config() const { return cfg_; }
  TrackEnv& env() { return env_; }
  const TrainingCounters& counters() const { return counters_; }
  std::mt19937_64& sample_rng() { return sample_rng_; }

 private:
  TrackEnv env_;
  AgentConfig cfg_;
  InterventionSchedule schedule_;
  InterventionSource* source_;
  nn::DuelingNetPair nets_;
  PriorityBuffer buffer_;
  UpdateFn update_;
  std::mt19937_64 explore_rng_;
  std::mt19937_64 sample_rng_;
  TrainingCounters counters_;
};

std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t episode);

}  // namespace hitl
