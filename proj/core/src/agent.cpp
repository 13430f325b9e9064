#include "hitl/agent.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "hitl/error.hpp"

namespace hitl {

HumanWeightSchedule HumanWeightSchedule::constant(double value) {
  HumanWeightSchedule s;
  s.mode_ = Mode::Constant;
  s.start_ = value;
  s.end_ = value;
  s.validate();
  return s;
}

HumanWeightSchedule HumanWeightSchedule::linear_decay(double start, double end, std::uint64_t over_steps) {
  HumanWeightSchedule s;
  s.mode_ = Mode::LinearDecay;
  s.start_ = start;
  s.end_ = end;
  s.over_ = over_steps;
  s.validate();
  return s;
}

void HumanWeightSchedule::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(start_) || !in_unit(end_)) throw ConfigError("lambda_h schedule values must lie in [0, 1]");
  if (mode_ == Mode::LinearDecay && over_ == 0) throw ConfigError("lambda_h decay needs over_steps > 0");
}

double HumanWeightSchedule::value(std::uint64_t step) const {
  if (mode_ == Mode::Constant) return start_;
  if (step >= over_) return end_;
  const double frac = static_cast<double>(step) / static_cast<double>(over_);
  return start_ + (end_ - start_) * frac;
}

nlohmann::json HumanWeightSchedule::to_json() const {
  nlohmann::json j;
  if (mode_ == Mode::Constant) {
    j["kind"] = "constant";
    j["value"] = start_;
  } else {
    j["kind"] = "linear_decay";
    j["start"] = start_;
    j["end"] = end_;
    j["over_steps"] = over_;
  }
  return j;
}

HumanWeightSchedule HumanWeightSchedule::from_json(const nlohmann::json& j) {
  const auto kind = j.value("kind", std::string("linear_decay"));
  if (kind == "constant") return constant(j.at("value").get<double>());
  if (kind == "linear_decay") {
    return linear_decay(j.value("start", 1.0), j.value("end", 0.0), j.value("over_steps", std::uint64_t{40000}));
  }
  throw ConfigError("lambda_h schedule kind must be \"constant\" or \"linear_decay\", got \"" + kind + "\"");
}

void AgentConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("agent.gamma must lie in [0, 1]");
  if (batch == 0) throw ConfigError("agent.batch must be > 0");
  if (train_every == 0) throw ConfigError("agent.train_every must be > 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("agent.tau must lie in [0, 1]");
  if (!(lr > 0.0)) throw ConfigError("agent.lr must be > 0");
  if (!(epsilon_floor >= 0.0 && epsilon_floor <= epsilon_init && epsilon_init <= 1.0)) {
    throw ConfigError("agent epsilon must satisfy 0 <= floor <= init <= 1");
  }
  if (epsilon_decay < 0.0) throw ConfigError("agent.epsilon_decay must be >= 0");
  schedule.validate();
}

double AgentConfig::epsilon(std::uint64_t step) const {
  return std::max(epsilon_floor, epsilon_init - epsilon_decay * static_cast<double>(step));
}

int select_action(const Observation& obs, double epsilon, const nn::DuelingNet& q1, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < epsilon) {
    std::uniform_int_distribution<int> pick(0, q1.num_actions() - 1);
    return pick(rng);
  }
  return nn::argmax(q1.q_values(obs));
}

int blend_action(int a_agent, int a_human, bool intervened) {
  if (!intervened) return a_agent;
  if (a_human == kNoHuman) throw InvalidInput("intervened step carries no human action");
  return a_human;
}

double q_combined(double q1_h, double q2_h, double q1_a, double q2_a, double lambda_h, bool intervened,
                  bool strict_paper_blend) {
  const double agent = std::min(q1_a, q2_a);
  if (!intervened) return strict_paper_blend ? (1.0 - lambda_h) * agent : agent;
  return lambda_h * std::min(q1_h, q2_h) + (1.0 - lambda_h) * agent;
}

double clipped_target(double reward, double target1_at_best, double target2_at_best, bool done, double gamma) {
  return reward + gamma * std::min(target1_at_best, target2_at_best) * (done ? 0.0 : 1.0);
}

double q_target(double reward, const Observation& s_next, bool done, const nn::DuelingNetPair& nets, double gamma) {
  const int best = nn::argmax(nets.q1.q_values(s_next));
  const double t1 = nets.target1.q_values(s_next)(best);
  const double t2 = nets.target2.q_values(s_next)(best);
  return clipped_target(reward, t1, t2, done, gamma);
}

double td_error(double q_target_value, double q_combined_value) { return q_target_value - q_combined_value; }

namespace {

std::vector<Observation> column(const SampledBatch& batch, bool next) {
  std::vector<Observation> out;
  out.reserve(batch.transitions.size());
  for (const auto& t : batch.transitions) out.push_back(next ? t.s_next : t.s);
  return out;
}

void check_targets(const std::vector<double>& targets, const SampledBatch& batch) {
  for (std::size_t b = 0; b < targets.size(); ++b) {
    if (!std::isfinite(targets[b])) {
      throw TrainingFault("non-finite TD target at buffer slot " + std::to_string(batch.indices[b]) +
                          " (reward " + std::to_string(batch.transitions[b].reward) + ")");
    }
  }
}

}  // namespace

std::vector<double> clipped_targets(const nn::DuelingNetPair& nets, const SampledBatch& batch, double gamma) {
  const auto next = column(batch, true);
  const nn::Matrix s_next = nn::to_matrix(next);
  const nn::Matrix q_online = nets.q1.forward(s_next);
  const nn::Matrix t1 = nets.target1.forward(s_next);
  const nn::Matrix t2 = nets.target2.forward(s_next);
  std::vector<double> out(batch.transitions.size());
  for (std::size_t b = 0; b < out.size(); ++b) {
    const auto col = static_cast<Eigen::Index>(b);
    const int best = nn::argmax(q_online.col(col));
    const auto& t = batch.transitions[b];
    out[b] = clipped_target(t.reward, t1(best, col), t2(best, col), t.done, gamma);
  }
  return out;
}

void apply_gradients(nn::DuelingNetPair& nets, std::span<const double> grad1, std::span<const double> grad2,
                     double tau) {
  nn::adam_step(nets.q1.params(), grad1, nets.adam1);
  nn::adam_step(nets.q2.params(), grad2, nets.adam2);
  nn::soft_update(nets.target1.params(), nets.q1.params(), tau);
  nn::soft_update(nets.target2.params(), nets.q2.params(), tau);
}

TrainStats train_step(nn::DuelingNetPair& nets, PriorityBuffer& buffer, const AgentConfig& cfg,
                      std::mt19937_64& rng) {
  const SampledBatch batch = buffer.sample(cfg.batch, rng);
  const std::vector<double> targets = clipped_targets(nets, batch, cfg.gamma);
  check_targets(targets, batch);

  const auto states = column(batch, false);
  const nn::Matrix s = nn::to_matrix(states);
  nn::Mlp::Tape tape1;
  nn::Mlp::Tape tape2;
  const nn::Matrix q1 = nets.q1.forward(s, tape1);
  const nn::Matrix q2 = nets.q2.forward(s, tape2);
  nn::Matrix d1 = nn::Matrix::Zero(q1.rows(), q1.cols());
  nn::Matrix d2 = nn::Matrix::Zero(q2.rows(), q2.cols());

  TrainStats stats;
  std::vector<double> td(targets.size());
  const double inv_b = 1.0 / static_cast<double>(targets.size());
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const auto col = static_cast<Eigen::Index>(b);
    const Transition& t = batch.transitions[b];
    const double w = batch.is_weights[b];
    const double lam = t.lambda_h;
    const int aa = t.a_agent;
    const int ah = t.intervened ? t.a_human : aa;
    const double q1h = t.intervened ? q1(ah, col) : 0.0;
    const double q2h = t.intervened ? q2(ah, col) : 0.0;

    td[b] = td_error(targets[b],
                     q_combined(q1h, q2h, q1(aa, col), q2(aa, col), lam, t.intervened, cfg.strict_paper_blend));

    const double human_coef = t.intervened ? lam : 0.0;
    const double agent_coef = (t.intervened || cfg.strict_paper_blend) ? 1.0 - lam : 1.0;
    const double est1 = human_coef * q1h + agent_coef * q1(aa, col);
    const double est2 = human_coef * q2h + agent_coef * q2(aa, col);
    const double err1 = targets[b] - est1;
    const double err2 = targets[b] - est2;
    stats.loss1 += w * err1 * err1 * inv_b;
    stats.loss2 += w * err2 * err2 * inv_b;
    d1(aa, col) += -2.0 * w * err1 * agent_coef * inv_b;
    d2(aa, col) += -2.0 * w * err2 * agent_coef * inv_b;
    if (t.intervened) {
      d1(ah, col) += -2.0 * w * err1 * human_coef * inv_b;
      d2(ah, col) += -2.0 * w * err2 * human_coef * inv_b;
    }
    stats.mean_abs_td += std::abs(td[b]) * inv_b;
    stats.mean_lambda += lam * inv_b;
  }

  std::vector<double> g1(nets.q1.num_params(), 0.0);
  std::vector<double> g2(nets.q2.num_params(), 0.0);
  nets.q1.backward(tape1, d1, g1);
  nets.q2.backward(tape2, d2, g2);
  apply_gradients(nets, g1, g2, cfg.tau);
  buffer.update_priorities(batch.indices, td);
  return stats;
}

TrainStats train_step_clipped_ddqn(nn::DuelingNetPair& nets, PriorityBuffer& buffer, const AgentConfig& cfg,
                                   std::mt19937_64& rng) {
  const SampledBatch batch = buffer.sample(cfg.batch, rng);
  const std::vector<double> targets = clipped_targets(nets, batch, cfg.gamma);
  check_targets(targets, batch);

  const auto states = column(batch, false);
  const nn::Matrix s = nn::to_matrix(states);
  nn::Mlp::Tape tape1;
  nn::Mlp::Tape tape2;
  const nn::Matrix q1 = nets.q1.forward(s, tape1);
  const nn::Matrix q2 = nets.q2.forward(s, tape2);
  nn::Matrix d1 = nn::Matrix::Zero(q1.rows(), q1.cols());
  nn::Matrix d2 = nn::Matrix::Zero(q2.rows(), q2.cols());

  TrainStats stats;
  std::vector<double> td(targets.size());
  const double inv_b = 1.0 / static_cast<double>(targets.size());
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const auto col = static_cast<Eigen::Index>(b);
    const Transition& t = batch.transitions[b];
    const double w = batch.is_weights[b];
    const int a = t.executed_action();
    td[b] = td_error(targets[b], std::min(q1(a, col), q2(a, col)));
    const double err1 = targets[b] - q1(a, col);
    const double err2 = targets[b] - q2(a, col);
    stats.loss1 += w * err1 * err1 * inv_b;
    stats.loss2 += w * err2 * err2 * inv_b;
    d1(a, col) += -2.0 * w * err1 * inv_b;
    d2(a, col) += -2.0 * w * err2 * inv_b;
    stats.mean_abs_td += std::abs(td[b]) * inv_b;
  }

  std::vector<double> g1(nets.q1.num_params(), 0.0);
  std::vector<double> g2(nets.q2.num_params(), 0.0);
  nets.q1.backward(tape1, d1, g1);
  nets.q2.backward(tape2, d2, g2);
  apply_gradients(nets, g1, g2, cfg.tau);
  buffer.update_priorities(batch.indices, td);
  return stats;
}

nlohmann::ordered_json EpisodeMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["episode"] = episode;
  j["steps"] = steps;
  j["global_step"] = global_step;
  j["cumulative_reward"] = cumulative_reward;
  j["crash"] = crashed;
  j["success"] = success;
  j["lambda_h"] = lambda_h;
  j["epsilon"] = epsilon;
  j["interventions_used"] = interventions_used;
  j["intervened_steps"] = intervened_steps;
  return j;
}

EpisodeMetrics EpisodeMetrics::from_json(const nlohmann::json& j) {
  EpisodeMetrics m;
  m.episode = j.at("episode").get<std::uint64_t>();
  m.steps = j.at("steps").get<std::uint64_t>();
  m.global_step = j.value("global_step", std::uint64_t{0});
  m.cumulative_reward = j.at("cumulative_reward").get<double>();
  m.crashed = j.value("crash", false);
  m.success = j.value("success", false);
  m.lambda_h = j.value("lambda_h", 0.0);
  m.epsilon = j.value("epsilon", 0.0);
  m.interventions_used = j.value("interventions_used", std::uint64_t{0});
  m.intervened_steps = j.value("intervened_steps", std::uint64_t{0});
  return m;
}

std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t episode) {
  return mix_seed(mix_seed(run_seed, 7), episode);
}

Trainer::Trainer(TrackEnv env, AgentConfig cfg, PerConfig per, InterventionSchedule schedule,
                 InterventionSource* source, UpdateRule rule)
    : env_(std::move(env)),
      cfg_(std::move(cfg)),
      schedule_(schedule),
      source_(source),
      nets_(mix_seed(cfg_.seed, 3), nn::AdamConfig{.lr = cfg_.lr}),
      buffer_(per),
      explore_rng_(mix_seed(cfg_.seed, 1)),
      sample_rng_(mix_seed(cfg_.seed, 2)) {
  cfg_.validate();
  schedule_.validate();
  const AgentConfig& c = cfg_;
  if (rule == UpdateRule::Interactive) {
    update_ = [&c](nn::DuelingNetPair& n, PriorityBuffer& b, std::mt19937_64& r) { return train_step(n, b, c, r); };
  } else {
    update_ = [&c](nn::DuelingNetPair& n, PriorityBuffer& b, std::mt19937_64& r) {
      return train_step_clipped_ddqn(n, b, c, r);
    };
  }
}

RunReport Trainer::run(std::uint64_t total_steps, RunSinks& sinks) {
  RunReport report;
  report.gate_trace.reserve(total_steps);
  const double beta0 = buffer_.config().beta;
  const std::uint64_t anneal = buffer_.config().beta_anneal_steps;
  const std::uint64_t ready = std::max<std::uint64_t>(cfg_.learn_start, cfg_.batch);

  Observation obs = env_.reset(episode_seed(cfg_.seed, counters_.episodes));
  std::uint64_t episode_intervened = 0;
  const std::uint64_t end = counters_.global_step + total_steps;

  for (std::uint64_t step = counters_.global_step; step < end; ++step) {
    const double eps = cfg_.epsilon(step);
    const double lam = cfg_.schedule.value(step);
    const int a_agent = select_action(obs, eps, nets_.q1, explore_rng_);

    const GateState g = gate(schedule_, step);
    report.gate_trace.push_back(g);
    int a_human = kNoHuman;
    if (g == GateState::Open && source_ != nullptr) {
      const PollContext ctx{step, &obs, &env_.state()};
      if (auto h = source_->poll(ctx)) a_human = *h;
    }
    const bool intervened = a_human != kNoHuman;
    const int executed = blend_action(a_agent, a_human, intervened);

    const VehicleState pre = env_.state();
    const double cum_before = env_.cumulative_reward();
    const auto out = env_.step(executed);

    Transition t{obs, a_agent, a_human, out.reward.r_total, out.observation, out.done, intervened, lam};
    buffer_.push(t);
    if (sinks.store != nullptr) {
      sinks.store->append(EvaluativeRecord{counters_.episodes, step, t, out.crashed, pre, cum_before});
    }
    if (intervened) {
      ++report.intervened_transitions;
      ++episode_intervened;
    }
    counters_.global_step = step + 1;

    if (step % cfg_.train_every == 0 && buffer_.size() >= ready) {
      report.last_stats = update_(nets_, buffer_, sample_rng_);
      ++counters_.train_steps;
      if (anneal > 0) {
        const double frac = std::min(1.0, static_cast<double>(counters_.train_steps) / static_cast<double>(anneal));
        buffer_.set_beta(beta0 + (1.0 - beta0) * frac);
      }
    }

    const bool episode_end = out.done || out.truncated;
    if (sinks.on_step) {
      StepEvent ev;
      ev.global_step = step;
      ev.state = &env_.state();
      ev.observation = &out.observation;
      ev.reward = out.reward.r_total;
      ev.cum_reward = env_.cumulative_reward();
      ev.lambda_h = lam;
      ev.gate = g;
      ev.intervened = intervened;
      ev.executed_action = executed;
      ev.episode_end = episode_end;
      sinks.on_step(ev);
    }

    if (episode_end) {
      EpisodeMetrics m;
      m.episode = counters_.episodes;
      m.steps = env_.episode_steps();
      m.global_step = counters_.global_step;
      m.cumulative_reward = env_.cumulative_reward();
      m.crashed = out.crashed;
      m.success = out.status == EpisodeStatus::Success;
      m.lambda_h = lam;
      m.epsilon = eps;
      m.interventions_used = windows_used(schedule_, step);
      m.intervened_steps = episode_intervened;
      if (sinks.metrics != nullptr) *sinks.metrics << m.to_json().dump() << '\n';
      if (sinks.on_episode) sinks.on_episode(m);
      report.episodes.push_back(m);
      ++counters_.episodes;
      episode_intervened = 0;
      obs = env_.reset(episode_seed(cfg_.seed, counters_.episodes));
    } else {
      obs = out.observation;
    }

    if (sinks.checkpoint_path && sinks.checkpoint_every > 0 && counters_.global_step % sinks.checkpoint_every == 0) {
      save_checkpoint(*sinks.checkpoint_path, nets_, counters_);
    }
  }
  report.counters = counters_;
  return report;
}

}  // namespace hitl
