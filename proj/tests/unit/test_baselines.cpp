#include <algorithm>
#include <cmath>
#include <filesystem>

#include <doctest.h>

#include "hitl/baselines.hpp"
#include "hitl/error.hpp"

using namespace hitl;

namespace {

DemoDataset loop_demos(std::size_t n, std::uint64_t seed) {
  const TrackSpec track = make_loop_track(0);
  TrackEnv env(track, EnvConfig{});
  ScriptedExpert expert(track);
  return collect_demonstrations(expert, env, n, seed);
}

bool same_params(const nn::DuelingNet& a, const nn::DuelingNet& b) {
  return std::equal(a.params().begin(), a.params().end(), b.params().begin(), b.params().end());
}

}  // namespace

TEST_CASE("demonstration collection") {
  const DemoDataset d = loop_demos(100, 1);
  CHECK(d.size() == 100);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(d.action(i) >= 0);
    CHECK(d.action(i) < kNumActions);
    CHECK(d.records[i].transition.intervened);
    CHECK(d.records[i].transition.a_agent == d.action(i));
  }
  const DemoDataset again = loop_demos(100, 1);
  bool same = true;
  for (std::size_t i = 0; i < d.size(); ++i) same = same && d.records[i] == again.records[i];
  CHECK(same);

  const DemoDataset big = loop_demos(5000, 2);
  CHECK(std::none_of(big.records.begin(), big.records.end(), [](const EvaluativeRecord& r) { return r.crashed; }));

  const auto path = std::filesystem::temp_directory_path() / "hitl_demos_test.jsonl";
  save_demos(path, d);
  const DemoDataset back = load_demos(path);
  CHECK(back.expert == "scripted");
  CHECK(back.size() == d.size());
  CHECK(back.records.back() == d.records.back());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_demos("/nonexistent/demos.jsonl"), ConfigError);
}

TEST_CASE("a crashing expert is rejected") {
  struct HardLeft final : InterventionSource {
    std::optional<int> poll(const PollContext&) override { return 0; }
    std::string tag() const override { return "hard-left"; }
  } bad;
  TrackEnv env(make_loop_track(0), EnvConfig{});
  CHECK_THROWS_AS(collect_demonstrations(bad, env, 500, 1), DatasetQualityError);
}

TEST_CASE("behaviour cloning memorises a single pair") {
  Transition t;
  t.s.fill(0.2);
  t.s_next = t.s;
  t.a_agent = 23;
  t.a_human = 23;
  t.intervened = true;
  const DemoDataset d = make_demo_dataset(std::vector<Transition>(64, t), "synthetic");
  nn::DuelingNet net(5);
  BcConfig cfg;
  cfg.epochs = 20;
  bc_train(d, net, cfg);
  CHECK(nn::argmax(net.q_values(t.s)) == 23);
  CHECK(label_accuracy(d, net) == 1.0);
}

TEST_CASE("behaviour cloning fits the expert and is insensitive to shuffling") {
  const DemoDataset d = loop_demos(3000, 3);
  nn::DuelingNet a(7);
  nn::DuelingNet b(7);
  BcConfig shuffled;
  BcConfig ordered;
  ordered.shuffle = false;
  const BcResult ra = bc_train(d, a, shuffled);
  const BcResult rb = bc_train(d, b, ordered);
  MESSAGE("bc accuracy shuffled=" << ra.train_accuracy << " ordered=" << rb.train_accuracy);
  CHECK(ra.train_accuracy >= 0.8);
  CHECK(std::abs(ra.train_accuracy - rb.train_accuracy) < 0.05);
  CHECK(ra.train_accuracy == label_accuracy(d, a));
}

TEST_CASE("large margin loss") {
  Eigen::VectorXd q = Eigen::VectorXd::Constant(33, 0.5);
  q[4] = 1.0;
  CHECK(std::abs(large_margin_loss(q, 4, 0.8) - 0.3) < 1e-12);
  q[4] = 1.5;
  CHECK(large_margin_loss(q, 4, 0.8) == 0.0);
  q[4] = 2.0;
  CHECK(large_margin_loss(q, 4, 0.8) == 0.0);
}

TEST_CASE("DQfD with no demonstration pull reduces to the vanilla trainer") {
  const TrackSpec track = make_loop_track(0);
  AgentConfig agent;
  agent.seed = 3;
  agent.learn_start = 200;
  agent.schedule = HumanWeightSchedule::constant(0.0);
  InterventionSchedule closed;
  closed.h_limit = 0;
  DqfdConfig cfg;
  cfg.pretrain_steps = 0;
  cfg.lambda_e = 0.0;
  cfg.agent = agent;

  Trainer vanilla(TrackEnv(track, EnvConfig{}), agent, PerConfig{}, closed, nullptr, UpdateRule::ClippedDouble);
  Trainer dqfd(TrackEnv(track, EnvConfig{}), agent, PerConfig{}, closed, nullptr, UpdateRule::ClippedDouble);
  RunSinks s1, s2;
  vanilla.run(800, s1);
  dqfd_run(DemoDataset{}, cfg, dqfd, 800, s2);
  CHECK(same_params(vanilla.nets().q1, dqfd.nets().q1));
  CHECK(same_params(vanilla.nets().q2, dqfd.nets().q2));
}

TEST_CASE("DQfD pretraining imitates the expert") {
  const TrackSpec track = make_loop_track(0);
  const DemoDataset d = loop_demos(2000, 4);
  DqfdConfig cfg;
  cfg.agent.seed = 4;
  Trainer tr(TrackEnv(track, EnvConfig{}), cfg.agent, PerConfig{}, InterventionSchedule{.h_limit = 0}, nullptr,
             UpdateRule::ClippedDouble);
  RunSinks sinks;
  const DqfdResult r = dqfd_run(d, cfg, tr, 0, sinks);
  MESSAGE("dqfd pretrain match " << r.pretrain_match);
  CHECK(r.pretrain_match >= 0.8);
  CHECK(tr.buffer().pinned() == d.size());
}

TEST_CASE("HG-DAgger bookkeeping and reduction") {
  const TrackSpec track = make_loop_track(0);
  const DemoDataset init = loop_demos(1000, 5);
  ScriptedExpert expert(track);
  TrackEnv env(track, EnvConfig{});

  HgDaggerConfig one;
  one.iterations = 1;
  nn::DuelingNet a(9);
  const HgDaggerResult r1 = hg_dagger_run(init, expert, env, one, a);
  nn::DuelingNet b(9);
  bc_train(init, b, one.bc);
  CHECK(same_params(a, b));
  CHECK(r1.aggregated.size() == init.size());

  HgDaggerConfig cfg;
  cfg.iterations = 3;
  cfg.add_per_iter = 200;
  nn::DuelingNet c(9);
  const HgDaggerResult r = hg_dagger_run(init, expert, env, cfg, c);
  std::size_t added = 0;
  for (auto k : r.added_per_iteration) {
    CHECK(k <= cfg.add_per_iter);
    added += k;
  }
  CHECK(r.aggregated.size() == init.size() + added);
  for (const auto& rec : r.aggregated.records) CHECK(rec.transition.intervened);
}
