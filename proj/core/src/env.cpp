#include "hitl/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "hitl/error.hpp"

namespace hitl {

namespace {

constexpr std::array<double, kNumRays> kRayBearings{-0.5 * std::numbers::pi, -0.375 * std::numbers::pi,
                                                    -0.25 * std::numbers::pi, -0.125 * std::numbers::pi,
                                                    0.0,
                                                    0.125 * std::numbers::pi, 0.25 * std::numbers::pi,
                                                    0.375 * std::numbers::pi, 0.5 * std::numbers::pi};

bool finite_state(const VehicleState& s) {
  return std::isfinite(s.position.x) && std::isfinite(s.position.y) && std::isfinite(s.heading) &&
         std::isfinite(s.speed) && std::isfinite(s.steering);
}

}  // namespace

double observation_lower(std::size_t component) {
  if (component < obs_index::kCrossTrack || component == obs_index::kSpeed) return 0.0;
  return -1.0;
}

double observation_upper(std::size_t /*component*/) { return 1.0; }

bool observation_in_range(const Observation& obs) {
  for (std::size_t i = 0; i < kObsDim; ++i) {
    if (!std::isfinite(obs[i]) || obs[i] < observation_lower(i) || obs[i] > observation_upper(i)) return false;
  }
  return true;
}

void ActionHistory::push(double steering) {
  buf_[head_] = steering;
  head_ = (head_ + 1) % kCapacity;
  size_ = std::min(size_ + 1, kCapacity);
}

double ActionHistory::at(std::size_t i) const {
  const std::size_t oldest = (head_ + kCapacity - size_) % kCapacity;
  return buf_[(oldest + i) % kCapacity];
}

std::array<double, ActionHistory::kCapacity> ActionHistory::values() const {
  std::array<double, kCapacity> out{};
  for (std::size_t i = 0; i < size_; ++i) out[i] = at(i);
  return out;
}

bool operator==(const ActionHistory& a, const ActionHistory& b) {
  if (a.size_ != b.size_) return false;
  for (std::size_t i = 0; i < a.size_; ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

void RewardConfig::validate() const {
  if (!(delta > 0.0)) throw ConfigError("reward.delta must be > 0");
  if (!(xi >= 0.0)) throw ConfigError("reward.xi must be >= 0");
  if (history_len != ActionHistory::kCapacity) throw ConfigError("reward.history_len is fixed at 4");
}

double action_to_steering(int action_index) {
  if (action_index < 0 || action_index >= kNumActions) {
    throw InvalidInput("action index " + std::to_string(action_index) + " outside 0..32");
  }
  if (action_index == kCenterAction) return 0.0;
  return -kMaxSteering + action_index * kSteeringStep;
}

int steering_to_action(double steering) {
  const double k = steering / kSteeringStep;
  // Round half toward zero so ties land closer to the centre index.
  const double m = std::copysign(std::ceil(std::abs(k) - 0.5), k);
  const int idx = kCenterAction + static_cast<int>(m);
  return std::clamp(idx, 0, kNumActions - 1);
}

double reward_position(double distance, const RewardConfig& cfg) {
  return std::min(std::exp(-cfg.delta * (distance * distance - cfg.beta)), 1.0);
}

double population_stddev(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double acc = 0.0;
  for (double v : values) acc += (v - mean) * (v - mean);
  return std::sqrt(acc / static_cast<double>(values.size()));
}

double reward_smoothness(const ActionHistory& history, const RewardConfig& cfg) {
  if (history.empty()) return 0.0;
  const auto vals = history.values();
  return -cfg.xi * population_stddev(std::span<const double>(vals.data(), history.size()));
}

double total_reward(bool crashed, double r_pos, double r_sm) { return crashed ? -1.0 : r_pos + r_sm; }

EpisodeStatus episode_status(double cumulative_reward, bool crashed, double success_threshold) {
  if (crashed) return EpisodeStatus::Failure;
  if (cumulative_reward >= success_threshold) return EpisodeStatus::Success;
  return EpisodeStatus::Continue;
}

Observation observe(const VehicleState& state, const TrackSpec& track) {
  Observation obs{};
  for (int k = 0; k < kNumRays; ++k) {
    obs[obs_index::kRays + k] = cast_ray(state.position, state.heading + kRayBearings[k], track, kRayRange) / kRayRange;
  }
  const auto nearest = nearest_waypoint(state.position, track);
  const Vec2 tangent = track_tangent(track, nearest.index);
  const Vec2 offset = state.position - track.waypoints[nearest.index];
  const double side = cross(tangent, offset) >= 0.0 ? 1.0 : -1.0;
  obs[obs_index::kCrossTrack] = std::clamp(side * nearest.distance / track.half_width, -1.0, 1.0);
  const double track_heading = std::atan2(tangent.y, tangent.x);
  obs[obs_index::kHeadingError] = wrap_angle(state.heading - track_heading) / std::numbers::pi;
  obs[obs_index::kPrevAction] = state.steering / kMaxSteering;
  obs[obs_index::kSpeed] = std::clamp((state.speed - kMinSpeed) / (kMaxSpeed - kMinSpeed), 0.0, 1.0);
  return obs;
}

StepResult step(const VehicleState& state, int action_index, const TrackSpec& track, const RewardConfig& cfg,
                double dt) {
  if (!finite_state(state)) throw SimulatorFault("step: non-finite vehicle state");
  const double steering = action_to_steering(action_index);

  StepResult out;
  VehicleState& next = out.state;
  next = state;
  next.steering = steering;
  next.heading = wrap_angle(state.heading + (state.speed / kWheelbase) * std::tan(steering) * dt);
  next.position = state.position + (state.speed * dt) * Vec2{std::cos(next.heading), std::sin(next.heading)};
  next.step_index = state.step_index + 1;
  next.history.push(steering);
  if (!finite_state(next)) throw SimulatorFault("step: integration produced a non-finite state");

  const double dist = nearest_waypoint_distance(next.position, track);
  out.crashed = dist > track.half_width || inside_obstacle(next.position, track);
  out.reward.r_pos = reward_position(dist, cfg);
  out.reward.r_sm = reward_smoothness(next.history, cfg);
  out.reward.r_cr = out.crashed ? -1.0 : 0.0;
  out.reward.r_total = total_reward(out.crashed, out.reward.r_pos, out.reward.r_sm);
  out.observation = observe(next, track);
  return out;
}

VehicleState initial_state(const TrackSpec& track, double speed) {
  VehicleState s;
  s.position = track.start_position();
  s.heading = track.start_heading();
  s.speed = speed;
  return s;
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 over the combined words
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double draw_episode_speed(std::uint64_t episode_seed) {
  std::mt19937_64 rng(episode_seed);
  std::uniform_real_distribution<double> speed(kMinSpeed, kMaxSpeed);
  return speed(rng);
}

TrackEnv::TrackEnv(TrackSpec track, EnvConfig cfg) : track_(std::move(track)), cfg_(cfg) {
  track_.validate();
  cfg_.reward.validate();
  state_ = initial_state(track_, 0.5 * (kMinSpeed + kMaxSpeed));
  obs_ = observe(state_, track_);
}

const Observation& TrackEnv::reset(std::uint64_t episode_seed) {
  state_ = initial_state(track_, draw_episode_speed(episode_seed));
  cumulative_ = 0.0;
  obs_ = observe(state_, track_);
  return obs_;
}

TrackEnv::Outcome TrackEnv::step(int action_index) {
  auto r = hitl::step(state_, action_index, track_, cfg_.reward);
  state_ = r.state;
  obs_ = r.observation;
  cumulative_ += r.reward.r_total;
  Outcome o;
  o.observation = obs_;
  o.reward = r.reward;
  o.crashed = r.crashed;
  o.status = episode_status(cumulative_, r.crashed, cfg_.success_threshold);
  o.done = o.status != EpisodeStatus::Continue;
  o.truncated = !o.done && cfg_.max_episode_steps > 0 && state_.step_index >= cfg_.max_episode_steps;
  return o;
}

void TrackEnv::restore(const VehicleState& state, double cumulative_reward) {
  state_ = state;
  cumulative_ = cumulative_reward;
  obs_ = observe(state_, track_);
}

}  // namespace hitl
