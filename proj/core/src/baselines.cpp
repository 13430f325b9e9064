#include "hitl/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

#include "hitl/error.hpp"

namespace hitl {

namespace {

Transition expert_transition(const Observation& s, int a, double r, const Observation& s_next, bool done) {
  return Transition{s, a, a, r, s_next, done, true, 1.0};
}

}  // namespace

DemoDataset make_demo_dataset(std::vector<Transition> transitions, std::string expert) {
  DemoDataset d;
  d.expert = std::move(expert);
  d.records.reserve(transitions.size());
  std::uint64_t i = 0;
  for (auto& t : transitions) {
    validate_transition(t);
    if (!t.intervened) throw InvalidInput("demonstration transitions must carry the expert label");
    EvaluativeRecord r;
    r.step = i++;
    r.transition = std::move(t);
    d.records.push_back(std::move(r));
  }
  return d;
}

DemoDataset collect_demonstrations(InterventionSource& expert, TrackEnv& env, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InvalidInput("collect_demonstrations needs n >= 1");
  DemoDataset d;
  d.expert = expert.tag();
  d.track = env.track().name;
  d.seed = seed;
  d.records.reserve(n);
  std::uint64_t episodes = 0;
  std::uint64_t crashed = 0;
  std::uint64_t global = 0;
  while (d.records.size() < n) {
    Observation obs = env.reset(episode_seed(seed, episodes));
    for (;;) {
      const VehicleState pre = env.state();
      const double cum = env.cumulative_reward();
      const auto a = expert.poll(PollContext{global, &obs, &pre});
      if (!a) throw InvalidInput("expert '" + expert.tag() + "' yielded no action at step " + std::to_string(global));
      const auto out = env.step(*a);
      d.records.push_back(EvaluativeRecord{episodes, global, expert_transition(obs, *a, out.reward.r_total,
                                                                               out.observation, out.done),
                                           out.crashed, pre, cum});
      ++global;
      if (out.crashed) ++crashed;
      obs = out.observation;
      if (out.done || out.truncated || d.records.size() >= n) break;
    }
    ++episodes;
  }
  if (2 * crashed > episodes) {
    throw DatasetQualityError("expert '" + expert.tag() + "' crashed in " + std::to_string(crashed) + " of " +
                              std::to_string(episodes) + " episodes; check the expert configuration");
  }
  return d;
}

void save_demos(const std::filesystem::path& path, const DemoDataset& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot write " + path.string());
  nlohmann::ordered_json header;
  header["schema"] = "hitl.demos";
  header["v"] = 1;
  header["fields"] = evaluative_fields();
  header["expert"] = data.expert;
  header["track"] = data.track;
  header["seed"] = data.seed;
  out << header.dump() << '\n';
  for (const auto& r : data.records) {
    auto j = record_to_json(r);
    j["expert"] = data.expert;
    out << j.dump() << '\n';
  }
  if (!out) throw StorageError("write failed: " + path.string());
}

DemoDataset load_demos(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("demonstration file not found: " + path.string());
  DemoDataset d;
  const auto header = read_records(path, d.records);
  if (header.value("schema", std::string()) != "hitl.demos") {
    throw StorageError(path.string() + ": not a demonstration file");
  }
  d.expert = header.value("expert", std::string());
  d.track = header.value("track", std::string());
  d.seed = header.value("seed", std::uint64_t{0});
  for (const auto& r : d.records) {
    if (!r.transition.intervened) throw StorageError(path.string() + ": record without expert label");
  }
  return d;
}

double label_accuracy(const DemoDataset& data, const nn::DuelingNet& net) {
  if (data.empty()) return 0.0;
  std::vector<Observation> states;
  states.reserve(data.size());
  for (const auto& r : data.records) states.push_back(r.transition.s);
  const nn::Matrix q = net.forward(nn::to_matrix(states));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (nn::argmax(q.col(static_cast<Eigen::Index>(i))) == data.action(i)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

BcResult bc_train(const DemoDataset& data, nn::DuelingNet& net, const BcConfig& cfg) {
  if (data.empty()) throw InvalidInput("bc_train needs a non-empty dataset");
  if (cfg.batch == 0 || cfg.epochs == 0) throw ConfigError("bc epochs and batch must be > 0");
  nn::AdamState adam(net.num_params(), nn::AdamConfig{.lr = cfg.lr});
  std::mt19937_64 rng(mix_seed(cfg.seed, 17));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grad(net.num_params());
  BcResult result;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::vector<Observation> states;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        states.push_back(data.state(order[k]));
        labels.push_back(data.action(order[k]));
      }
      nn::Mlp::Tape tape;
      const nn::Matrix q = net.forward(nn::to_matrix(states), tape);
      nn::Matrix d_q(q.rows(), q.cols());
      const double inv_b = 1.0 / static_cast<double>(labels.size());
      for (Eigen::Index c = 0; c < q.cols(); ++c) {
        const double mx = q.col(c).maxCoeff();
        Eigen::VectorXd p = (q.col(c).array() - mx).exp();
        const double z = p.sum();
        p /= z;
        const int y = labels[static_cast<std::size_t>(c)];
        const double nll = -(q(y, c) - mx - std::log(z));
        if (!std::isfinite(nll)) {
          throw TrainingFault("behavior cloning diverged at epoch " + std::to_string(epoch) + " (label " +
                              std::to_string(y) + ", loss " + std::to_string(nll) + ")");
        }
        epoch_loss += nll;
        p(y) -= 1.0;
        d_q.col(c) = p * inv_b;
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      net.backward(tape, d_q, grad);
      nn::adam_step(net.params(), grad, adam);
    }
    result.final_loss = epoch_loss / static_cast<double>(data.size());
  }
  result.train_accuracy = label_accuracy(data, net);
  return result;
}

double large_margin_loss(const Eigen::Ref<const Eigen::VectorXd>& q, int expert_action, double margin) {
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index a = 0; a < q.size(); ++a) {
    best = std::max(best, q(a) + (a == expert_action ? 0.0 : margin));
  }
  return best - q(expert_action);
}

void DqfdConfig::validate() const {
  if (!(margin > 0.0)) throw ConfigError("dqfd.margin must be > 0");
  if (lambda_e < 0.0) throw ConfigError("dqfd.lambda_e must be >= 0");
  agent.validate();
}

namespace {

/// Adds lambda_e / B * d(margin loss)/dQ for one column.
double add_margin_gradient(const nn::Matrix& q, Eigen::Index col, int expert, double margin, double scale,
                           nn::Matrix& d) {
  int best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (Eigen::Index a = 0; a < q.rows(); ++a) {
    const double v = q(a, col) + (a == expert ? 0.0 : margin);
    if (v > best_v) {
      best_v = v;
      best = static_cast<int>(a);
    }
  }
  d(best, col) += scale;
  d(expert, col) -= scale;
  return best_v - q(expert, col);
}

}  // namespace

TrainStats dqfd_train_step(nn::DuelingNetPair& nets, PriorityBuffer& buffer, const DqfdConfig& cfg,
                           std::mt19937_64& rng) {
  const AgentConfig& ac = cfg.agent;
  const SampledBatch batch = buffer.sample(ac.batch, rng);
  const std::vector<double> targets = clipped_targets(nets, batch, ac.gamma);

  std::vector<Observation> states;
  states.reserve(batch.transitions.size());
  for (const auto& t : batch.transitions) states.push_back(t.s);
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
    if (!std::isfinite(targets[b])) {
      throw TrainingFault("non-finite TD target at buffer slot " + std::to_string(batch.indices[b]));
    }
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
    if (cfg.lambda_e > 0.0 && batch.indices[b] < buffer.pinned()) {
      const double scale = cfg.lambda_e * inv_b;
      stats.aux_loss += scale * add_margin_gradient(q1, col, t.a_human, cfg.margin, scale, d1);
      add_margin_gradient(q2, col, t.a_human, cfg.margin, scale, d2);
    }
  }

  std::vector<double> g1(nets.q1.num_params(), 0.0);
  std::vector<double> g2(nets.q2.num_params(), 0.0);
  nets.q1.backward(tape1, d1, g1);
  nets.q2.backward(tape2, d2, g2);
  apply_gradients(nets, g1, g2, ac.tau);
  buffer.update_priorities(batch.indices, td);
  return stats;
}

DqfdResult dqfd_run(const DemoDataset& data, const DqfdConfig& cfg, Trainer& trainer, std::uint64_t total_steps,
                    RunSinks& sinks) {
  cfg.validate();
  if (data.empty() && cfg.pretrain_steps > 0) throw InvalidInput("dqfd_run: pretraining needs demonstrations");
  if (trainer.buffer().size() != 0) throw InvalidInput("dqfd_run expects an empty replay buffer");
  for (const auto& r : data.records) trainer.buffer().push_pinned(r.transition);
  trainer.set_update([cfg](nn::DuelingNetPair& n, PriorityBuffer& b, std::mt19937_64& r) {
    return dqfd_train_step(n, b, cfg, r);
  });
  for (std::uint64_t i = 0; i < cfg.pretrain_steps; ++i) {
    dqfd_train_step(trainer.nets(), trainer.buffer(), cfg, trainer.sample_rng());
  }
  DqfdResult out;
  out.pretrain_match = data.empty() ? std::numeric_limits<double>::quiet_NaN() : label_accuracy(data, trainer.nets().q1);
  out.report = trainer.run(total_steps, sinks);
  return out;
}

void HgDaggerConfig::validate() const {
  if (iterations == 0) throw ConfigError("hgdagger.iterations must be >= 1");
  if (!(takeover_fraction > 0.0 && takeover_fraction <= 1.0)) {
    throw ConfigError("hgdagger.takeover_fraction must lie in (0, 1]");
  }
}

HgDaggerResult hg_dagger_run(const DemoDataset& initial, InterventionSource& expert, TrackEnv& env,
                             const HgDaggerConfig& cfg, nn::DuelingNet& net) {
  cfg.validate();
  if (initial.empty()) throw InvalidInput("hg_dagger_run needs a non-empty initial dataset");
  const nn::DuelingNet fresh = net;
  HgDaggerResult res;
  res.aggregated = initial;
  res.last = bc_train(res.aggregated, net, cfg.bc);
  const double threshold = cfg.takeover_fraction * env.track().half_width;

  for (std::size_t it = 1; it < cfg.iterations; ++it) {
    std::size_t added = 0;
    std::uint64_t steps = 0;
    std::uint64_t episode = 0;
    while (added < cfg.add_per_iter && steps < cfg.max_rollout_steps) {
      Observation obs = env.reset(mix_seed(mix_seed(cfg.bc.seed, 0xDA66E5ULL + it), episode));
      for (;;) {
        const VehicleState pre = env.state();
        const double cum = env.cumulative_reward();
        const bool takeover = nearest_waypoint_distance(pre.position, env.track()) > threshold;
        int a = 0;
        if (takeover) {
          const auto h = expert.poll(PollContext{steps, &obs, &pre});
          if (!h) throw InvalidInput("expert '" + expert.tag() + "' yielded no action during takeover");
          a = *h;
        } else {
          a = nn::argmax(net.q_values(obs));
        }
        const auto out = env.step(a);
        if (takeover) {
          res.aggregated.records.push_back(EvaluativeRecord{
              episode, steps, expert_transition(obs, a, out.reward.r_total, out.observation, out.done), out.crashed,
              pre, cum});
          ++added;
        }
        ++steps;
        obs = out.observation;
        if (out.done || out.truncated || added >= cfg.add_per_iter || steps >= cfg.max_rollout_steps) break;
      }
      ++episode;
    }
    if (added == 0) std::clog << "[hgdagger] iteration " << it << ": expert never took over\n";
    res.added_per_iteration.push_back(added);
    net = fresh;
    res.last = bc_train(res.aggregated, net, cfg.bc);
  }
  return res;
}

}  // namespace hitl
