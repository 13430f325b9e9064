#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "hitl/env.hpp"

namespace hitl {

/// When human input is solicited: window k (k = 1..h_limit) opens at step
/// k * h_freq and stays open for h_steps steps.
struct InterventionSchedule {
  std::uint64_t h_freq = 2000;
  std::uint64_t h_steps = 200;
  std::uint64_t h_limit = 5;

  void validate() const;
};

enum class GateState { Closed, Open };

/// Pure function of the schedule constants and the global step.
GateState gate(const InterventionSchedule& schedule, std::uint64_t global_step);
/// Windows opened at or before `global_step` (never exceeds h_limit).
std::uint64_t windows_used(const InterventionSchedule& schedule, std::uint64_t global_step);
/// 1-based id of the window containing `global_step`, 0 when closed.
std::uint64_t window_id(const InterventionSchedule& schedule, std::uint64_t global_step);

struct PollContext {
  std::uint64_t step = 0;
  const Observation* observation = nullptr;
  const VehicleState* state = nullptr;
};

/// Anything that can supply a corrective action. poll() must not block.
class InterventionSource {
 public:
  virtual ~InterventionSource() = default;
  virtual std::optional<int> poll(const PollContext& ctx) = 0;
  virtual std::string tag() const = 0;
};

/// Pure-pursuit expert: aims at the waypoint nearest to the point `lookahead`
/// metres ahead along the current heading.
class ScriptedExpert final : public InterventionSource {
 public:
  explicit ScriptedExpert(const TrackSpec& track, double lookahead = 6.0);

  int action(const VehicleState& state) const;
  double steering(const VehicleState& state) const;

  std::optional<int> poll(const PollContext& ctx) override;
  std::string tag() const override { return "scripted"; }

 private:
  const TrackSpec* track_;
  double lookahead_;
};

/// Free-function form of the expert's steering law.
int scripted_expert_action(const VehicleState& state, const TrackSpec& track, double lookahead = 6.0);

struct TraceEntry {
  std::uint64_t step = 0;
  int action_index = 0;
  std::string source_tag;

  friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

/// Line-delimited {step, action_index, source_tag} records between a header
/// line and an end marker carrying the record count.
struct Trace {
  std::vector<TraceEntry> entries;
  bool complete = true;  // false when the end marker was missing

  void save(const std::filesystem::path& path) const;
  static Trace load(const std::filesystem::path& path);
};

/// Wraps a source and logs every action it emits.
class RecordingSource final : public InterventionSource {
 public:
  explicit RecordingSource(InterventionSource& inner) : inner_(inner) {}
  std::optional<int> poll(const PollContext& ctx) override;
  std::string tag() const override { return inner_.tag(); }
  const Trace& trace() const { return trace_; }

 private:
  InterventionSource& inner_;
  Trace trace_;
};

/// Replays a recorded trace at exactly the recorded steps.
class TraceSource final : public InterventionSource {
 public:
  explicit TraceSource(Trace trace);
  /// Throws ReplayDivergence when polled past a recorded step it never served,
  /// or past the end of a truncated trace.
  std::optional<int> poll(const PollContext& ctx) override;
  std::string tag() const override { return "trace"; }
  bool exhausted() const { return cursor_ >= trace_.entries.size(); }

 private:
  Trace trace_;
  std::size_t cursor_ = 0;
};

/// Single-producer / single-consumer slot between the network handler and the
/// training loop. Writes overwrite, reads clear.
class LiveMailbox {
 public:
  using Clock = std::chrono::steady_clock;
  static constexpr std::chrono::milliseconds kStaleAfter{500};

  explicit LiveMailbox(std::function<Clock::time_point()> now = [] { return Clock::now(); });

  void post_steer(int action_index);
  void set_engaged(bool engaged);
  void set_connected(bool connected);
  bool engaged() const;
  bool connected() const;

  /// Latest fresh steer message if engaged and connected; clears the slot.
  std::optional<int> take();
  /// Times take() observed a disconnected client (logged once by callers).
  bool disconnect_noticed() const;

 private:
  mutable std::mutex mu_;
  std::function<Clock::time_point()> now_;
  std::optional<int> pending_;
  Clock::time_point posted_at_{};
  bool engaged_ = false;
  bool connected_ = false;
  bool disconnect_logged_ = false;
};

class LiveSource final : public InterventionSource {
 public:
  explicit LiveSource(std::shared_ptr<LiveMailbox> mailbox) : mailbox_(std::move(mailbox)) {}
  std::optional<int> poll(const PollContext& ctx) override;
  std::string tag() const override { return "live"; }

 private:
  std::shared_ptr<LiveMailbox> mailbox_;
};

std::optional<int> poll_live(LiveMailbox& mailbox);

}  // namespace hitl
