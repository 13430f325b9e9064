#include "hitl/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "hitl/error.hpp"

namespace hitl {

void InterventionSchedule::validate() const {
  if (h_freq == 0) throw ConfigError("intervention.h_freq must be > 0");
  if (h_steps > h_freq) throw ConfigError("intervention.h_steps must not exceed h_freq");
}

GateState gate(const InterventionSchedule& schedule, std::uint64_t global_step) {
  return window_id(schedule, global_step) != 0 ? GateState::Open : GateState::Closed;
}

std::uint64_t windows_used(const InterventionSchedule& schedule, std::uint64_t global_step) {
  if (schedule.h_freq == 0) return 0;
  return std::min(schedule.h_limit, global_step / schedule.h_freq);
}

std::uint64_t window_id(const InterventionSchedule& schedule, std::uint64_t global_step) {
  if (schedule.h_freq == 0 || schedule.h_limit == 0 || schedule.h_steps == 0) return 0;
  const std::uint64_t k = global_step / schedule.h_freq;
  if (k == 0 || k > schedule.h_limit) return 0;
  return global_step - k * schedule.h_freq < schedule.h_steps ? k : 0;
}

ScriptedExpert::ScriptedExpert(const TrackSpec& track, double lookahead) : track_(&track), lookahead_(lookahead) {
  if (!(lookahead > 0.0)) throw ConfigError("expert lookahead must be > 0");
}

double ScriptedExpert::steering(const VehicleState& state) const {
  const Vec2 ahead = state.position + lookahead_ * Vec2{std::cos(state.heading), std::sin(state.heading)};
  const Vec2 target = track_->waypoints[nearest_waypoint(ahead, *track_).index];
  const Vec2 rel = target - state.position;
  const double alpha = wrap_angle(std::atan2(rel.y, rel.x) - state.heading);
  // Pure pursuit only makes sense for targets ahead; beside or behind means full lock.
  if (std::abs(alpha) >= 0.5 * std::numbers::pi) return std::copysign(kMaxSteering, alpha);
  const double raw = std::atan2(2.0 * kWheelbase * std::sin(alpha), lookahead_);
  return std::clamp(raw, -kMaxSteering, kMaxSteering);
}

int ScriptedExpert::action(const VehicleState& state) const { return steering_to_action(steering(state)); }

std::optional<int> ScriptedExpert::poll(const PollContext& ctx) {
  if (ctx.state == nullptr) return std::nullopt;
  return action(*ctx.state);
}

int scripted_expert_action(const VehicleState& state, const TrackSpec& track, double lookahead) {
  return ScriptedExpert(track, lookahead).action(state);
}

void Trace::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot write trace: " + path.string());
  nlohmann::ordered_json header;
  header["schema"] = "hitl.trace";
  header["v"] = 1;
  out << header.dump() << '\n';
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["action_index"] = e.action_index;
    j["source_tag"] = e.source_tag;
    out << j.dump() << '\n';
  }
  nlohmann::ordered_json end;
  end["end"] = true;
  end["records"] = entries.size();
  out << end.dump() << '\n';
  if (!out) throw StorageError("write failed: " + path.string());
}

Trace Trace::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open trace: " + path.string());
  Trace trace;
  trace.complete = false;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) break;  // torn final line
    if (!header_seen) {
      if (j.value("schema", std::string()) != "hitl.trace") throw StorageError(path.string() + ": not a trace file");
      header_seen = true;
      continue;
    }
    if (j.contains("end")) {
      trace.complete = j.value("records", std::uint64_t{0}) == trace.entries.size();
      break;
    }
    TraceEntry e;
    e.step = j.at("step").get<std::uint64_t>();
    e.action_index = j.at("action_index").get<int>();
    e.source_tag = j.value("source_tag", std::string());
    if (e.action_index < 0 || e.action_index >= kNumActions) {
      throw StorageError(path.string() + ": trace action outside 0..32");
    }
    trace.entries.push_back(std::move(e));
  }
  if (!header_seen) throw StorageError(path.string() + ": empty trace file");
  return trace;
}

std::optional<int> RecordingSource::poll(const PollContext& ctx) {
  auto a = inner_.poll(ctx);
  if (a) trace_.entries.push_back({ctx.step, *a, inner_.tag()});
  return a;
}

TraceSource::TraceSource(Trace trace) : trace_(std::move(trace)) {}

std::optional<int> TraceSource::poll(const PollContext& ctx) {
  const auto& es = trace_.entries;
  if (cursor_ < es.size() && es[cursor_].step < ctx.step) {
    throw ReplayDivergence("trace holds an action at step " + std::to_string(es[cursor_].step) +
                           " that the replay never requested (now at step " + std::to_string(ctx.step) + ")");
  }
  if (cursor_ < es.size() && es[cursor_].step == ctx.step) return es[cursor_++].action_index;
  if (cursor_ >= es.size() && !trace_.complete) {
    throw ReplayDivergence("trace is truncated: no record for step " + std::to_string(ctx.step));
  }
  return std::nullopt;
}

LiveMailbox::LiveMailbox(std::function<Clock::time_point()> now) : now_(std::move(now)) {}

void LiveMailbox::post_steer(int action_index) {
  if (action_index < 0 || action_index >= kNumActions) return;
  std::lock_guard lock(mu_);
  pending_ = action_index;
  posted_at_ = now_();
}

void LiveMailbox::set_engaged(bool engaged) {
  std::lock_guard lock(mu_);
  engaged_ = engaged;
  if (!engaged) pending_.reset();
}

void LiveMailbox::set_connected(bool connected) {
  std::lock_guard lock(mu_);
  connected_ = connected;
  if (connected) {
    disconnect_logged_ = false;
  } else {
    pending_.reset();
    engaged_ = false;
  }
}

bool LiveMailbox::engaged() const {
  std::lock_guard lock(mu_);
  return engaged_;
}

bool LiveMailbox::connected() const {
  std::lock_guard lock(mu_);
  return connected_;
}

bool LiveMailbox::disconnect_noticed() const {
  std::lock_guard lock(mu_);
  return disconnect_logged_;
}

std::optional<int> LiveMailbox::take() {
  std::lock_guard lock(mu_);
  if (!connected_) {
    if (!disconnect_logged_) {
      std::clog << "[live] no operator connected; gate yields no human actions\n";
      disconnect_logged_ = true;
    }
    return std::nullopt;
  }
  if (!engaged_ || !pending_) return std::nullopt;
  std::optional<int> out;
  if (now_() - posted_at_ <= kStaleAfter) out = pending_;
  pending_.reset();
  return out;
}

std::optional<int> poll_live(LiveMailbox& mailbox) { return mailbox.take(); }

std::optional<int> LiveSource::poll(const PollContext& /*ctx*/) { return mailbox_->take(); }

}  // namespace hitl
