#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include <doctest.h>

#include "hitl/error.hpp"
#include "hitl/replay.hpp"

using namespace hitl;

namespace {

Transition tagged(int a) {
  Transition t;
  t.a_agent = a;
  t.reward = a * 0.01;
  return t;
}

double leaf_sum(const SumTree& tree, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += tree.leaf(i);
  return s;
}

}  // namespace

TEST_CASE("transition validation") {
  Transition t;
  CHECK_NOTHROW(validate_transition(t));
  t.intervened = true;
  CHECK_THROWS_AS(validate_transition(t), RejectedTransition);
  t.a_human = 4;
  CHECK_NOTHROW(validate_transition(t));
  t.a_agent = 33;
  CHECK_THROWS_AS(validate_transition(t), RejectedTransition);
  Transition h;
  h.a_human = 3;
  CHECK_THROWS_AS(validate_transition(h), RejectedTransition);
  CHECK(t.executed_action() == 4);
}

TEST_CASE("sum tree root equals brute-force sum") {
  SumTree tree(37);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int k = 0; k < 2000; ++k) {
    tree.set(static_cast<std::size_t>(rng() % 37), u(rng));
    const double brute = leaf_sum(tree, 37);
    CHECK(std::abs(tree.total() - brute) <= 1e-6 * std::max(1.0, brute));
  }
  SumTree small(4);
  small.set(0, 1.0);
  small.set(1, 2.0);
  small.set(2, 3.0);
  small.set(3, 4.0);
  CHECK(small.find(0.5) == 0);
  CHECK(small.find(1.0) == 1);
  CHECK(small.find(2.99) == 1);
  CHECK(small.find(3.0) == 2);
  CHECK(small.find(9.99) == 3);
}

TEST_CASE("buffer push and eviction") {
  PerConfig cfg;
  cfg.capacity = 5;
  PriorityBuffer buf(cfg);
  buf.push(tagged(0), 2.0);
  CHECK(buf.size() == 1);
  CHECK(buf.tree().total() == doctest::Approx(std::pow(2.0, cfg.alpha)).epsilon(1e-12));
  for (int i = 1; i <= 5; ++i) buf.push(tagged(i));
  CHECK(buf.size() == 5);
  std::vector<int> held;
  for (std::size_t s = 0; s < 5; ++s) held.push_back(buf.at(s).a_agent);
  std::sort(held.begin(), held.end());
  CHECK(held == std::vector<int>{1, 2, 3, 4, 5});
  for (std::size_t s = 0; s < 5; ++s) CHECK(buf.priority(s) > 0.0);
}

TEST_CASE("pinned slots are never evicted") {
  PerConfig cfg;
  cfg.capacity = 6;
  PriorityBuffer buf(cfg);
  buf.push_pinned(tagged(30));
  buf.push_pinned(tagged(31));
  for (int i = 0; i < 20; ++i) buf.push(tagged(i % 20));
  CHECK(buf.pinned() == 2);
  CHECK(buf.at(0).a_agent == 30);
  CHECK(buf.at(1).a_agent == 31);
  CHECK_THROWS_AS(buf.push_pinned(tagged(1)), ConfigError);
}

TEST_CASE("priority update formula") {
  PerConfig cfg;
  cfg.capacity = 8;
  PriorityBuffer buf(cfg);
  for (int i = 0; i < 4; ++i) buf.push(tagged(i));
  const std::vector<std::size_t> idx{0, 1};
  const std::vector<double> td{0.0, -2.0};
  buf.update_priorities(idx, td);
  CHECK(buf.priority(0) == cfg.epsilon);
  CHECK(std::abs(buf.priority(1) - (2.0 + cfg.epsilon)) < 1e-12);
  CHECK(std::abs(buf.tree().leaf(1) - std::pow(2.0 + cfg.epsilon, cfg.alpha)) < 1e-12);
  const std::vector<std::size_t> bad{7};
  const std::vector<double> one{1.0};
  CHECK_THROWS_AS(buf.update_priorities(bad, one), InternalFault);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int k = 0; k < 500; ++k) {
    const std::vector<std::size_t> i1{static_cast<std::size_t>(rng() % 4)};
    const std::vector<double> t1{u(rng)};
    buf.update_priorities(i1, t1);
  }
  double brute = 0.0;
  for (std::size_t s = 0; s < 4; ++s) brute += std::pow(buf.priority(s), cfg.alpha);
  CHECK(std::abs(buf.tree().total() - brute) <= 1e-6 * brute);
}

TEST_CASE("importance weights") {
  PerConfig cfg;
  cfg.capacity = 16;
  PriorityBuffer buf(cfg);
  for (int i = 0; i < 10; ++i) buf.push(tagged(i));
  std::mt19937_64 rng(2);
  const auto b = buf.sample(8, rng);
  for (double w : b.is_weights) CHECK(w == doctest::Approx(1.0).epsilon(1e-12));

  PriorityBuffer one(cfg);
  one.push(tagged(3));
  const auto s = one.sample(1, rng);
  CHECK(s.indices[0] == 0);
  CHECK(s.is_weights[0] == 1.0);
  CHECK(s.probabilities[0] == 1.0);
  CHECK_THROWS_AS(one.sample(2, rng), NotReady);

  // w_i = (N P_i)^-beta / max_j w_j
  PriorityBuffer two(cfg);
  two.push(tagged(0));
  two.push(tagged(1));
  const std::vector<std::size_t> idx{0, 1};
  const std::vector<double> td{4.0 - cfg.epsilon, 1.0 - cfg.epsilon};
  two.update_priorities(idx, td);
  const auto p = two.sample(2, rng);
  const double p0 = std::pow(4.0, cfg.alpha) / (std::pow(4.0, cfg.alpha) + 1.0);
  const double p1 = 1.0 - p0;
  for (std::size_t k = 0; k < 2; ++k) {
    const double pk = p.indices[k] == 0 ? p0 : p1;
    CHECK(std::abs(p.probabilities[k] - pk) < 1e-12);
  }
  const double w0 = std::pow(2.0 * p0, -cfg.beta);
  const double w1 = std::pow(2.0 * p1, -cfg.beta);
  const double wmax = p.indices[0] != p.indices[1] ? std::max(w0, w1) : (p.indices[0] == 0 ? w0 : w1);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(std::abs(p.is_weights[k] - (p.indices[k] == 0 ? w0 : w1) / wmax) < 1e-12);
  }
}

TEST_CASE("sampling frequencies follow p^alpha") {
  PerConfig cfg;
  cfg.capacity = 4;
  PriorityBuffer buf(cfg);
  buf.push(tagged(0));
  buf.push(tagged(1));
  const std::vector<std::size_t> idx{0, 1};
  const std::vector<double> td{std::pow(3.0, 1.0 / cfg.alpha) - cfg.epsilon, 1.0 - cfg.epsilon};
  buf.update_priorities(idx, td);
  std::mt19937_64 rng(21);
  std::size_t hits0 = 0;
  const std::size_t draws = 100000;
  for (std::size_t i = 0; i < draws; ++i) hits0 += buf.sample(1, rng).indices[0] == 0;
  CHECK(std::abs(static_cast<double>(hits0) / draws - 0.75) < 0.02);

  PerConfig flat;
  flat.capacity = 10;
  PriorityBuffer eq(flat);
  for (int i = 0; i < 10; ++i) eq.push(tagged(i));
  std::vector<double> counts(10, 0.0);
  for (std::size_t i = 0; i < draws; ++i) counts[eq.sample(1, rng).indices[0]] += 1.0;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - draws / 10.0) * (c - draws / 10.0) / (draws / 10.0);
  CHECK(chi2 < 27.877);  // chi-square, 9 dof, p = 0.001
}

TEST_CASE("evaluative store order and round trip") {
  EvaluativeStore store;
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::uint64_t k = 0; k < 10000; ++k) {
    EvaluativeRecord r;
    r.episode = k / 137;
    r.step = k;
    for (auto& v : r.transition.s) v = u(rng);
    for (auto& v : r.transition.s_next) v = u(rng);
    r.transition.a_agent = static_cast<int>(rng() % 33);
    r.transition.intervened = (k % 11) == 0;
    r.transition.a_human = r.transition.intervened ? static_cast<int>(rng() % 33) : kNoHuman;
    r.transition.reward = u(rng);
    r.transition.lambda_h = std::abs(u(rng));
    r.transition.done = (k % 137) == 136;
    r.crashed = r.transition.done && (k % 2 == 0);
    r.state.position = {u(rng) * 30.0, u(rng) * 30.0};
    r.state.heading = u(rng) * 3.0;
    r.state.speed = 10.0 + u(rng);
    r.state.steering = u(rng) * 0.8;
    r.state.step_index = k % 137;
    r.state.history.push(u(rng) * 0.8);
    r.state.history.push(u(rng) * 0.8);
    r.cum_reward = u(rng) * 100.0;
    store.append(r);
  }
  const auto path = std::filesystem::temp_directory_path() / "hitl_store_roundtrip.jsonl";
  store.save(path);
  const auto back = EvaluativeStore::load(path).snapshot();
  const auto orig = store.snapshot();
  REQUIRE(back.size() == orig.size());
  bool same = true;
  for (std::size_t i = 0; i < orig.size(); ++i) same = same && back[i] == orig[i];
  CHECK(same);
  for (std::size_t i = 0; i < orig.size(); ++i) {
    if (orig[i].step != i) same = false;
  }
  CHECK(same);
  const auto ranges = store.episode_ranges();
  CHECK(ranges.size() == (10000 + 136) / 137);
  CHECK(ranges.front() == std::pair<std::size_t, std::size_t>{0, 137});
  std::filesystem::remove(path);
}
