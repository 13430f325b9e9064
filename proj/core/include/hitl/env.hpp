#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

#include "hitl/track.hpp"

namespace hitl {

inline constexpr int kNumActions = 33;
inline constexpr int kCenterAction = 16;
inline constexpr double kMaxSteering = 0.8;
inline constexpr double kSteeringStep = 0.05;
inline constexpr int kNumRays = 9;
inline constexpr std::size_t kObsDim = 13;
inline constexpr double kWheelbase = 2.5;
inline constexpr double kDt = 0.1;
inline constexpr double kMinSpeed = 8.89;   // 32 km/h
inline constexpr double kMaxSpeed = 11.11;  // 40 km/h
inline constexpr double kRayRange = 25.0;

/// Observation layout: rays[0..8], cross_track, heading_error, prev_action, speed_norm.
using Observation = std::array<double, kObsDim>;

namespace obs_index {
inline constexpr std::size_t kRays = 0;
inline constexpr std::size_t kCrossTrack = 9;
inline constexpr std::size_t kHeadingError = 10;
inline constexpr std::size_t kPrevAction = 11;
inline constexpr std::size_t kSpeed = 12;
}  // namespace obs_index

/// Lower/upper bounds of each observation component.
double observation_lower(std::size_t component);
double observation_upper(std::size_t component);
bool observation_in_range(const Observation& obs);

/// Ring of the last four executed steering values (simulator units).
class ActionHistory {
 public:
  static constexpr std::size_t kCapacity = 4;

  void push(double steering);
  void clear() { size_ = 0; head_ = 0; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  /// Oldest first.
  std::array<double, kCapacity> values() const;
  double at(std::size_t i) const;  // 0 = oldest

  friend bool operator==(const ActionHistory&, const ActionHistory&);

 private:
  std::array<double, kCapacity> buf_{};
  std::size_t size_ = 0;
  std::size_t head_ = 0;
};

struct VehicleState {
  Vec2 position;
  double heading = 0.0;
  double speed = 10.0;
  double steering = 0.0;
  std::uint64_t step_index = 0;
  ActionHistory history;

  friend bool operator==(const VehicleState&, const VehicleState&) = default;
};

struct RewardConfig {
  double delta = 0.2;
  double beta = 0.2;
  double xi = 0.5;
  std::size_t history_len = 4;

  void validate() const;
};

struct RewardBreakdown {
  double r_pos = 0.0;
  double r_sm = 0.0;
  double r_cr = 0.0;
  double r_total = 0.0;
};

enum class EpisodeStatus { Continue, Success, Failure };

/// index 0 -> -0.8 (hard left), 16 -> 0, 32 -> +0.8. Throws InvalidInput.
double action_to_steering(int action_index);
/// Nearest grid index for a steering value, clamped, ties toward the centre.
int steering_to_action(double steering);

double reward_position(double distance, const RewardConfig& cfg);
double reward_smoothness(const ActionHistory& history, const RewardConfig& cfg);
double total_reward(bool crashed, double r_pos, double r_sm);
EpisodeStatus episode_status(double cumulative_reward, bool crashed, double success_threshold = 1000.0);

/// Population standard deviation.
double population_stddev(std::span<const double> values);

struct StepResult {
  VehicleState state;
  Observation observation;
  RewardBreakdown reward;
  bool crashed = false;
};

Observation observe(const VehicleState& state, const TrackSpec& track);

/// Pure kinematic-bicycle transition. Throws InvalidInput for bad indices and
/// SimulatorFault for non-finite states.
StepResult step(const VehicleState& state, int action_index, const TrackSpec& track,
                const RewardConfig& cfg, double dt = kDt);

VehicleState initial_state(const TrackSpec& track, double speed);

struct EnvConfig {
  RewardConfig reward;
  double success_threshold = 300.0;
  std::uint64_t max_episode_steps = 5000;
};

/// Episodic wrapper: owns the vehicle state and cumulative reward, draws the
/// per-episode speed from the episode seed.
class TrackEnv {
 public:
  TrackEnv(TrackSpec track, EnvConfig cfg);

  const Observation& reset(std::uint64_t episode_seed);

  struct Outcome {
    Observation observation;
    RewardBreakdown reward;
    EpisodeStatus status = EpisodeStatus::Continue;
    bool crashed = false;
    bool done = false;       // terminal for bootstrapping
    bool truncated = false;  // hit max_episode_steps
  };

  Outcome step(int action_index);

  const TrackSpec& track() const { return track_; }
  const EnvConfig& config() const { return cfg_; }
  const VehicleState& state() const { return state_; }
  const Observation& observation() const { return obs_; }
  double cumulative_reward() const { return cumulative_; }
  std::uint64_t episode_steps() const { return state_.step_index; }

  /// Restores an arbitrary mid-episode state (used by oracle rollouts).
  void restore(const VehicleState& state, double cumulative_reward);

 private:
  TrackSpec track_;
  EnvConfig cfg_;
  VehicleState state_;
  Observation obs_{};
  double cumulative_ = 0.0;
};

double draw_episode_speed(std::uint64_t episode_seed);

/// Deterministic 64-bit mixing of a base seed and a stream id.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace hitl
