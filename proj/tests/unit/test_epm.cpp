#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include <doctest.h>

#include "hitl/epm.hpp"
#include "hitl/error.hpp"
#include "hitl/intervention.hpp"

using namespace hitl;

namespace {

Observation random_obs(std::mt19937_64& rng) {
  Observation o{};
  for (std::size_t i = 0; i < kObsDim; ++i) {
    std::uniform_real_distribution<double> u(observation_lower(i), observation_upper(i));
    o[i] = u(rng);
  }
  return o;
}

PredictiveModel constant_model(double reward) {
  EpmConfig cfg;
  PredictiveModel m(cfg, 1);
  auto p = m.net().params();
  std::fill(p.begin(), p.end(), 0.0);
  m.net().bias(m.net().num_layers() - 1)[static_cast<Eigen::Index>(kObsDim)] = reward;
  return m;
}

CrashClassifier never_crash() {
  EpmConfig cfg;
  CrashClassifier c(cfg, 1);
  auto p = c.net().params();
  std::fill(p.begin(), p.end(), 0.0);
  c.net().bias(c.net().num_layers() - 1)[0] = 1.0;
  c.net().bias(c.net().num_layers() - 1)[1] = -1.0;
  return c;
}

EvaluativeRecord record(std::uint64_t episode, std::uint64_t step, bool intervened, double reward) {
  EvaluativeRecord r;
  r.episode = episode;
  r.step = step;
  r.transition.a_agent = 16;
  r.transition.intervened = intervened;
  r.transition.a_human = intervened ? 12 : kNoHuman;
  r.transition.reward = reward;
  return r;
}

RolloutPolicy constant_policy(int a) {
  return [a](const Observation&, const VehicleState*) { return a; };
}

}  // namespace

TEST_CASE("predictive model learns fixed-point dynamics") {
  std::mt19937_64 rng(1);
  std::vector<ModelSample> data;
  for (int i = 0; i < 1500; ++i) {
    ModelSample m;
    m.s = random_obs(rng);
    m.action = static_cast<int>(rng() % 33);
    m.s_next = m.s;
    m.reward = 0.5;
    data.push_back(m);
  }
  EpmConfig cfg;
  cfg.seed = 3;
  cfg.epochs_predictive = 200;
  PredictiveMetrics pm;
  const PredictiveModel model = train_predictive(data, cfg, &pm);
  MESSAGE("fixed point: state MAE " << pm.state_mae << " reward MAE " << pm.reward_mae);
  CHECK(pm.state_mae < 0.01);
  CHECK(pm.reward_mae < 0.01);

  PredictiveMetrics again;
  train_predictive(data, cfg, &again);
  CHECK(again.state_mae == pm.state_mae);
  CHECK(again.reward_mae == pm.reward_mae);

  data.resize(999);
  CHECK_THROWS_AS(train_predictive(data, cfg), InvalidInput);
}

TEST_CASE("crash classifier on a separable rule") {
  std::mt19937_64 rng(2);
  std::vector<ModelSample> data;
  for (int i = 0; i < 3000; ++i) {
    ModelSample m;
    m.s.fill(0.1);
    m.s_next = m.s;
    m.s_next[obs_index::kCrossTrack] = random_obs(rng)[obs_index::kCrossTrack];
    m.crashed = m.s_next[obs_index::kCrossTrack] > 0.6;
    data.push_back(m);
  }
  EpmConfig cfg;
  cfg.seed = 4;
  cfg.epochs_classifier = 100;
  ClassifierMetrics cm;
  const CrashClassifier clf = train_classifier(data, cfg, &cm);
  MESSAGE("separable: accuracy " << cm.accuracy << " f1 " << cm.f1);
  CHECK(cm.accuracy > 0.99);

  const ClassifierMetrics full = evaluate_classifier(clf, data);
  auto swapped = data;
  for (auto& m : swapped) m.crashed = !m.crashed;
  const ClassifierMetrics inv = evaluate_classifier(clf, swapped);
  CHECK(std::abs(inv.accuracy - (1.0 - full.accuracy)) < 1e-12);

  std::vector<ModelSample> one_class(1200, data.front());
  for (auto& m : one_class) m.crashed = false;
  CHECK_THROWS_AS(train_classifier(one_class, cfg), InvalidInput);
}

TEST_CASE("model files round trip") {
  EpmConfig cfg;
  const PredictiveModel pm(cfg, 5);
  CrashClassifier cc(cfg, 6);
  cc.threshold = 0.37;
  const auto dir = std::filesystem::temp_directory_path();
  save_predictive(dir / "hitl_pm.json", pm);
  save_classifier(dir / "hitl_cc.json", cc);
  const auto pm2 = load_predictive(dir / "hitl_pm.json");
  const auto cc2 = load_classifier(dir / "hitl_cc.json");
  CHECK(std::equal(pm.net().params().begin(), pm.net().params().end(), pm2.net().params().begin()));
  CHECK(std::equal(cc.net().params().begin(), cc.net().params().end(), cc2.net().params().begin()));
  CHECK(cc2.threshold == 0.37);
  CHECK_THROWS_AS(load_predictive(dir / "hitl_cc.json"), ShapeError);
  CHECK_THROWS_AS(load_predictive(dir / "hitl_missing.json"), ConfigError);
}

TEST_CASE("learned-model rollouts") {
  EvaluativeRecord onset = record(0, 0, true, 0.0);
  onset.transition.s.fill(0.3);
  const PredictiveModel pm = constant_model(0.51);
  CrashClassifier always(EpmConfig{}, 2);
  always.threshold = 0.0;
  EpmModels models{&pm, &always, nullptr, {}};
  const auto crashed = counterfactual_rollout(onset, 16, constant_policy(16), models, 4, false);
  CHECK(crashed.crashed);
  CHECK(crashed.sum_reward == -1.0);
  CHECK(crashed.steps == 1);

  const CrashClassifier safe = never_crash();
  models.classifier = &safe;
  const PredictiveModel random_pm(EpmConfig{}, 9);
  models.predictive = &random_pm;
  const auto one = counterfactual_rollout(onset, 7, constant_policy(16), models, 1, false);
  CHECK_FALSE(one.crashed);
  CHECK(one.sum_reward == random_pm.predict(onset.transition.s, 7).reward);

  models.predictive = &pm;
  const auto four = counterfactual_rollout(onset, 16, constant_policy(16), models, 4, false);
  CHECK(std::abs(four.sum_reward - 2.04) < 1e-12);
}

TEST_CASE("oracle rollout reproduces the simulator") {
  const TrackSpec track = make_loop_track(0);
  ScriptedExpert expert(track);
  TrackEnv env(track, EnvConfig{});
  env.reset(11);
  std::vector<EvaluativeRecord> log;
  Observation obs = env.observation();
  for (std::uint64_t k = 0; k < 60; ++k) {
    EvaluativeRecord r;
    r.step = k;
    r.state = env.state();
    r.cum_reward = env.cumulative_reward();
    r.transition.s = obs;
    r.transition.a_agent = expert.action(env.state());
    const auto out = env.step(r.transition.a_agent);
    r.transition.reward = out.reward.r_total;
    r.transition.s_next = out.observation;
    obs = out.observation;
    log.push_back(r);
  }
  EpmModels models;
  models.track = &track;
  const RolloutPolicy follow = [&](const Observation&, const VehicleState* s) { return expert.action(*s); };
  for (std::size_t k = 0; k + 4 <= log.size(); k += 5) {
    const auto roll = counterfactual_rollout(log[k], log[k].transition.a_agent, follow, models, 4, true);
    double truth = 0.0;
    for (std::size_t i = k; i < k + 4; ++i) truth += log[i].transition.reward;
    CHECK(roll.sum_reward == truth);
    CHECK(roll.rewards.size() == 4);
  }
}

TEST_CASE("intervention windows and verdicts") {
  std::vector<EvaluativeRecord> recs;
  std::uint64_t step = 0;
  for (int i = 0; i < 3; ++i) recs.push_back(record(0, step++, false, 0.5));
  for (int i = 0; i < 5; ++i) recs.push_back(record(0, step++, true, 0.555));
  recs.push_back(record(0, step++, false, 0.5));
  for (int i = 0; i < 2; ++i) recs.push_back(record(0, step++, true, 0.555));
  for (int i = 0; i < 2; ++i) recs.push_back(record(1, step++, true, 0.555));
  const auto w = intervention_windows(recs);
  REQUIRE(w.size() == 3);
  CHECK(w[0] == std::pair<std::size_t, std::size_t>{3, 8});
  CHECK(w[1] == std::pair<std::size_t, std::size_t>{9, 11});
  CHECK(w[2] == std::pair<std::size_t, std::size_t>{11, 13});

  const PredictiveModel pm = constant_model(0.51);
  const CrashClassifier safe = never_crash();
  const EpmModels models{&pm, &safe, nullptr, {}};
  EpmConfig cfg;
  const auto rep = evaluate_interventions(recs, models, constant_policy(16), cfg);
  REQUIRE(rep.verdicts.size() == 3);
  CHECK(std::abs(rep.verdicts[0].sum_r_human - 2.22) < 1e-12);
  CHECK(std::abs(rep.verdicts[0].sum_r_agent - 2.04) < 1e-12);
  CHECK(rep.verdicts[0].agrees);
  CHECK(rep.verdicts[1].horizon == 2);
  CHECK(rep.summary.agreement_rate == 1.0);

  const PredictiveModel better = constant_model(0.6);
  const EpmModels m2{&better, &safe, nullptr, {}};
  const auto rep2 = evaluate_interventions(recs, m2, constant_policy(16), cfg);
  CHECK_FALSE(rep2.verdicts[0].agrees);
  CHECK(rep2.summary.agreement_rate == 0.0);

  std::vector<EvaluativeRecord> none{record(0, 0, false, 1.0), record(0, 1, false, 1.0)};
  const auto empty = evaluate_interventions(none, models, constant_policy(16), cfg);
  CHECK(empty.verdicts.empty());
  CHECK_FALSE(empty.summary.agreement_rate.has_value());
  CHECK(empty.summary.to_json().at("agreement_rate") == "not applicable");

  cfg.literal_global = true;
  const auto global = evaluate_interventions(recs, models, constant_policy(16), cfg);
  CHECK(global.verdicts.size() == 1);
}
