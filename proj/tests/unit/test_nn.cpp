#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>

#include <doctest.h>

#include "hitl/error.hpp"
#include "hitl/nn.hpp"

using namespace hitl;
using namespace hitl::nn;

namespace {

Observation random_obs(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Observation o{};
  for (auto& v : o) v = u(rng);
  return o;
}

// Straight-line re-implementation with explicit loops.
std::vector<double> oracle_q(const DuelingNet& net, const Observation& obs) {
  const Mlp& body = net.body();
  std::vector<double> x(obs.begin(), obs.end());
  for (std::size_t l = 0; l < body.num_layers(); ++l) {
    const auto& ly = body.layer(l);
    const auto p = body.params();
    std::vector<double> y(static_cast<std::size_t>(ly.out), 0.0);
    for (int o = 0; o < ly.out; ++o) {
      double acc = p[ly.offset + static_cast<std::size_t>(ly.in) * ly.out + o];
      for (int i = 0; i < ly.in; ++i) acc += p[ly.offset + static_cast<std::size_t>(i) * ly.out + o] * x[i];
      y[static_cast<std::size_t>(o)] = (l + 1 < body.num_layers()) ? std::max(acc, 0.0) : acc;
    }
    x = std::move(y);
  }
  double mean_a = 0.0;
  for (std::size_t a = 1; a < x.size(); ++a) mean_a += x[a];
  mean_a /= static_cast<double>(x.size() - 1);
  std::vector<double> q;
  for (std::size_t a = 1; a < x.size(); ++a) q.push_back(x[0] + x[a] - mean_a);
  return q;
}

}  // namespace

TEST_CASE("dueling net shape") {
  const DuelingNet net(1);
  CHECK(net.num_actions() == 33);
  CHECK(net.layer_sizes() == std::vector<int>{13, 128, 128, 34});
  Observation o{};
  CHECK(net.q_values(o).size() == 33);
  CHECK_THROWS_AS(net.forward(Matrix::Zero(12, 1)), ShapeError);
}

TEST_CASE("dueling forward matches a loop oracle") {
  const DuelingNet net(77);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const Observation o = random_obs(rng);
    const auto q = net.q_values(o);
    const auto ref = oracle_q(net, o);
    for (int a = 0; a < 33; ++a) CHECK(std::abs(q[a] - ref[static_cast<std::size_t>(a)]) < 1e-9);
  }
}

TEST_CASE("dueling identity and advantage-shift invariance") {
  DuelingNet net(5);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 200; ++i) {
    const Matrix x = to_matrix(random_obs(rng));
    const auto h = net.heads(x);
    const Matrix q = net.forward(x);
    CHECK(std::abs((q.col(0).array() - h.value(0)).mean()) < 1e-7);
  }
  const Matrix x = to_matrix(random_obs(rng));
  const Matrix before = net.forward(x);
  auto& body = net.body();
  const std::size_t last = body.num_layers() - 1;
  for (int r = 1; r < 34; ++r) body.bias(last)[r] += 3.25;
  const Matrix after = net.forward(x);
  CHECK((before - after).cwiseAbs().maxCoeff() < 1e-9);

  for (int r = 1; r < 34; ++r) body.bias(last)[r] = 0.0;
  for (Eigen::Index c = 0; c < body.weight(last).cols(); ++c) {
    for (int r = 1; r < 34; ++r) body.weight(last)(r, c) = 0.0;
  }
  const Matrix flat = net.forward(x);
  const auto heads = net.heads(x);
  for (int a = 0; a < 33; ++a) CHECK(flat(a, 0) == doctest::Approx(heads.value(0)).epsilon(1e-12));
}

TEST_CASE("argmax ties break low") {
  Eigen::VectorXd v = Eigen::VectorXd::Constant(33, 0.5);
  CHECK(argmax(v) == 0);
  v[7] = 0.6;
  v[9] = 0.6;
  CHECK(argmax(v) == 7);
}

TEST_CASE("loss is zero at a perfect fit or with zero weights") {
  const DuelingNet net(2);
  auto fb = random_fd_batch(net, 8, 4);
  const Matrix q = net.forward(fb.obs);
  for (std::size_t b = 0; b < fb.actions.size(); ++b) fb.targets[b] = q(fb.actions[b], static_cast<Eigen::Index>(b));
  auto r = loss_and_gradients(net, fb.obs, fb.actions, fb.targets, fb.weights);
  CHECK(r.loss == 0.0);
  CHECK(std::all_of(r.gradients.begin(), r.gradients.end(), [](double g) { return g == 0.0; }));

  fb = random_fd_batch(net, 8, 4);
  std::fill(fb.weights.begin(), fb.weights.end(), 0.0);
  r = loss_and_gradients(net, fb.obs, fb.actions, fb.targets, fb.weights);
  CHECK(r.loss == 0.0);
  CHECK(std::all_of(r.gradients.begin(), r.gradients.end(), [](double g) { return g == 0.0; }));
}

TEST_CASE("finite-difference gradient check") {
  const DuelingNet net(11);
  CHECK(finite_diff_check(net, 100, 11) < 1e-4);

  FdCheckOptions opts;
  opts.n_probes = 100;
  opts.corrupt_gradient = [](std::span<double> g) {
    for (auto& v : g) v = -v;
  };
  CHECK(finite_diff_check(net, random_fd_batch(net, 16, 3), opts) > 1e-2);

  DuelingNet zero(11);
  std::fill(zero.params().begin(), zero.params().end(), 0.0);
  auto fb = random_fd_batch(zero, 4, 3);
  fb.obs.setZero();
  std::fill(fb.targets.begin(), fb.targets.end(), 0.0);
  FdCheckOptions plain;
  CHECK(finite_diff_check(zero, fb, plain) == 0.0);
}

TEST_CASE("adam update") {
  std::vector<double> p{0.0};
  std::vector<double> g{1.0};
  AdamState st(1, AdamConfig{.lr = 0.1});
  adam_step(p, g, st);
  CHECK(std::abs(p[0] - -0.1) < 1e-6);

  std::vector<double> q{1.0, 2.0};
  std::vector<double> zero{0.0, 0.0};
  AdamState st2(2, AdamConfig{});
  adam_step(q, zero, st2);
  CHECK(q == std::vector<double>{1.0, 2.0});

  std::vector<double> a{0.3, -0.2}, b{0.3, -0.2};
  std::vector<double> grad{0.5, -1.5};
  AdamState sa(2, AdamConfig{}), sb(2, AdamConfig{});
  adam_step(a, grad, sa);
  adam_step(b, grad, sb);
  CHECK(a == b);
}

TEST_CASE("soft update") {
  std::vector<double> t{0.0};
  const std::vector<double> o{1.0};
  soft_update(t, o, 0.0075);
  CHECK(std::abs(t[0] - 0.0075) < 1e-12);
  std::vector<double> t1{0.4, -3.0};
  const std::vector<double> o1{2.0, 5.0};
  soft_update(t1, o1, 1.0);
  CHECK(t1 == o1);
  std::vector<double> t0{0.4, -3.0};
  soft_update(t0, o1, 0.0);
  CHECK(t0 == std::vector<double>{0.4, -3.0});
  CHECK_THROWS_AS(soft_update(t0, o1, 1.5), InvalidInput);
}

TEST_CASE("net pair starts with targets equal to online nets") {
  const DuelingNetPair pair(9, AdamConfig{});
  CHECK(std::equal(pair.q1.params().begin(), pair.q1.params().end(), pair.target1.params().begin()));
  CHECK(std::equal(pair.q2.params().begin(), pair.q2.params().end(), pair.target2.params().begin()));
  CHECK_FALSE(std::equal(pair.q1.params().begin(), pair.q1.params().end(), pair.q2.params().begin()));
}

TEST_CASE("frozen initialisation values") {
  const DuelingNet net(1);
  Observation o{};
  o.fill(0.25);
  const auto q = net.q_values(o);
  MESSAGE(std::setprecision(17) << "q0=" << q[0] << " q16=" << q[16] << " q32=" << q[32] << " sum=" << q.sum());
  CHECK(q[0] == doctest::Approx(0.44373861400345888).epsilon(1e-12));
  CHECK(q[16] == doctest::Approx(0.52150185063704679).epsilon(1e-12));
}
