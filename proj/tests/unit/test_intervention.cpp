#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <doctest.h>

#include "hitl/error.hpp"
#include "hitl/intervention.hpp"

using namespace hitl;

namespace {

GateState brute_gate(std::uint64_t freq, std::uint64_t len, std::uint64_t limit, std::uint64_t step) {
  for (std::uint64_t k = 1; k <= limit; ++k) {
    if (step >= k * freq && step < k * freq + len) return GateState::Open;
  }
  return GateState::Closed;
}

TrackSpec mirrored(const TrackSpec& t) {
  TrackSpec m = t;
  for (auto& w : m.waypoints) w.y = -w.y;
  for (auto& o : m.obstacles) o.center.y = -o.center.y;
  return m;
}

}  // namespace

TEST_CASE("gate matches the brute-force oracle") {
  InterventionSchedule s;
  s.h_freq = 100;
  s.h_steps = 10;
  s.h_limit = 5;
  for (std::uint64_t step = 0; step < 1000; ++step) {
    CHECK(gate(s, step) == brute_gate(100, 10, 5, step));
  }
  CHECK(gate(s, 100) == GateState::Open);
  CHECK(gate(s, 109) == GateState::Open);
  CHECK(gate(s, 110) == GateState::Closed);
  CHECK(gate(s, 500) == GateState::Open);
  CHECK(gate(s, 600) == GateState::Closed);
  CHECK(window_id(s, 205) == 2);
  CHECK(window_id(s, 215) == 0);
  CHECK(windows_used(s, 99) == 0);
  CHECK(windows_used(s, 250) == 2);
  CHECK(windows_used(s, 100000) == 5);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    InterventionSchedule r;
    r.h_freq = 1 + rng() % 400;
    r.h_steps = 1 + rng() % r.h_freq;
    r.h_limit = rng() % 8;
    for (std::uint64_t step = 0; step < 4000; ++step) {
      if (gate(r, step) != brute_gate(r.h_freq, r.h_steps, r.h_limit, step)) {
        FAIL("gate mismatch at step " << step);
      }
    }
  }
  InterventionSchedule none;
  none.h_limit = 0;
  for (std::uint64_t step = 0; step < 10000; step += 7) CHECK(gate(none, step) == GateState::Closed);
}

TEST_CASE("scripted expert geometry") {
  const TrackSpec straight = make_straight_track(0);
  ScriptedExpert expert(straight);
  VehicleState s;
  s.position = straight.start_position();
  s.heading = straight.start_heading();
  CHECK(expert.action(s) == kCenterAction);

  TrackSpec side;
  side.name = "side";
  for (int k = 0; k < 12; ++k) side.waypoints.push_back({0.0, -3.0 - 1.5 * k});
  VehicleState o;
  o.position = {0.0, 0.0};
  o.heading = 0.0;
  for (double look : {1.0, 6.0, 20.0}) CHECK(scripted_expert_action(o, side, look) == 0);
}

TEST_CASE("scripted expert is mirror-symmetric") {
  const TrackSpec loop = make_loop_track(0);
  const TrackSpec mirror = mirrored(loop);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> off(-1.5, 1.5);
  std::uniform_real_distribution<double> dh(-0.6, 0.6);
  for (int i = 0; i < 300; ++i) {
    const std::size_t idx = rng() % loop.waypoints.size();
    const auto& wp = loop.waypoints[idx];
    const Vec2 tan = track_tangent(loop, idx);
    VehicleState s;
    s.position = {wp.x + off(rng), wp.y + off(rng)};
    s.heading = std::atan2(tan.y, tan.x) + dh(rng);
    VehicleState m = s;
    m.position.y = -s.position.y;
    m.heading = -s.heading;
    CHECK(scripted_expert_action(m, mirror) == 32 - scripted_expert_action(s, loop));
  }
}

TEST_CASE("live mailbox") {
  auto now = std::chrono::steady_clock::time_point{} + std::chrono::seconds(10);
  LiveMailbox box([&] { return now; });
  CHECK_FALSE(box.take());
  box.set_connected(true);
  box.set_engaged(true);
  CHECK_FALSE(box.take());
  box.post_steer(3);
  box.post_steer(15);
  CHECK(box.take() == 15);
  CHECK_FALSE(box.take());

  box.set_engaged(false);
  box.post_steer(7);
  CHECK_FALSE(box.take());

  box.set_engaged(true);
  box.post_steer(9);
  now += std::chrono::seconds(1);
  CHECK_FALSE(box.take());

  box.post_steer(11);
  box.set_connected(false);
  CHECK_FALSE(box.take());
  CHECK(box.disconnect_noticed());
}

TEST_CASE("trace record and replay") {
  const TrackSpec loop = make_loop_track(0);
  ScriptedExpert expert(loop);
  RecordingSource rec(expert);
  VehicleState s = initial_state(loop, 10.0);
  std::vector<int> live;
  for (std::uint64_t step = 0; step < 30; ++step) {
    if (step % 3 == 0) {
      const PollContext ctx{step, nullptr, &s};
      live.push_back(*rec.poll(ctx));
    }
    s = hitl::step(s, 16, loop, RewardConfig{}).state;
  }
  const auto path = std::filesystem::temp_directory_path() / "hitl_trace_test.jsonl";
  rec.trace().save(path);
  const Trace back = Trace::load(path);
  CHECK(back.complete);
  CHECK(back.entries == rec.trace().entries);

  TraceSource replay(back);
  std::vector<int> replayed;
  for (std::uint64_t step = 0; step < 30; ++step) {
    const PollContext ctx{step, nullptr, nullptr};
    const auto a = replay.poll(ctx);
    if (step % 3 == 0) {
      REQUIRE(a.has_value());
      replayed.push_back(*a);
    } else {
      CHECK_FALSE(a.has_value());
    }
  }
  CHECK(replayed == live);
  CHECK(replay.exhausted());

  TraceSource empty(Trace{});
  CHECK_FALSE(empty.poll(PollContext{5, nullptr, nullptr}).has_value());

  {
    std::ifstream in(path);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    const auto cut = all.find('\n', all.find('\n', all.find('\n') + 1) + 1);
    std::ofstream out(path, std::ios::trunc);
    out << all.substr(0, cut + 1);
  }
  const Trace torn = Trace::load(path);
  CHECK_FALSE(torn.complete);
  CHECK(torn.entries.size() == 2);
  TraceSource div(torn);
  CHECK(div.poll(PollContext{0, nullptr, nullptr}) == live[0]);
  CHECK(div.poll(PollContext{3, nullptr, nullptr}) == live[1]);
  CHECK_THROWS_AS(div.poll(PollContext{6, nullptr, nullptr}), ReplayDivergence);

  TraceSource skipped(back);
  CHECK_THROWS_AS(skipped.poll(PollContext{4, nullptr, nullptr}), ReplayDivergence);
  std::filesystem::remove(path);
}
