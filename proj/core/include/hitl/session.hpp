#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "hitl/agent.hpp"
#include "hitl/intervention.hpp"

namespace hitl {

struct SessionOptions {
  std::uint16_t port = 8765;  // 0 picks an ephemeral port
  std::string bind = "127.0.0.1";
  double frame_hz = 20.0;
  double step_hz = 0.0;  // 0: unthrottled
};

/// Frame payload for one step event.
nlohmann::ordered_json make_frame(const StepEvent& ev);

/// Single-client websocket session. Frames flow out at frame_hz with the
/// newest step winning; steer/engage/pause/resume flow into the mailbox.
class SessionServer {
 public:
  SessionServer(std::shared_ptr<LiveMailbox> mailbox, nlohmann::json track, SessionOptions options = {});
  ~SessionServer();
  SessionServer(const SessionServer&) = delete;
  SessionServer& operator=(const SessionServer&) = delete;

  /// Binds and starts the network thread. Throws ConfigError when the port is taken.
  void start();
  void stop();
  std::uint16_t port() const;

  /// Called by the training loop on every step.
  void publish(const StepEvent& ev);
  /// Blocks while a client holds the session paused; applies the step_hz throttle.
  void wait_if_paused();

  bool paused() const;
  bool client_connected() const;
  std::uint64_t frames_sent() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace hitl
