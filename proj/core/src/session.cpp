#include "hitl/session.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <iostream>
#include <mutex>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include "hitl/error.hpp"

namespace hitl {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

nlohmann::ordered_json make_frame(const StepEvent& ev) {
  nlohmann::ordered_json f;
  f["type"] = "frame";
  f["v"] = 1;
  f["step"] = ev.global_step;
  if (ev.state != nullptr) {
    f["pose"] = {ev.state->position.x, ev.state->position.y, ev.state->heading};
  } else {
    f["pose"] = {0.0, 0.0, 0.0};
  }
  auto rays = nlohmann::ordered_json::array();
  if (ev.observation != nullptr) {
    for (std::size_t i = 0; i < 9; ++i) rays.push_back((*ev.observation)[obs_index::kRays + i] * kRayRange);
  }
  f["rays"] = rays;
  f["reward"] = ev.reward;
  f["cum_reward"] = ev.cum_reward;
  f["lambda_h"] = ev.lambda_h;
  f["gate"] = ev.gate == GateState::Open ? "open" : "closed";
  f["intervened"] = ev.intervened;
  f["action"] = ev.executed_action;
  f["episode_end"] = ev.episode_end;
  return f;
}

namespace {

std::string warning(const std::string& message) {
  nlohmann::ordered_json w;
  w["type"] = "warning";
  w["v"] = 1;
  w["message"] = message;
  return w.dump();
}

}  // namespace

struct SessionServer::Impl {
  class Client;

  std::shared_ptr<LiveMailbox> mailbox;
  nlohmann::json track;
  SessionOptions opts;

  asio::io_context ioc;
  std::optional<tcp::acceptor> acceptor;
  std::thread thread;
  std::uint16_t bound_port = 0;
  bool running = false;

  mutable std::mutex mu;
  std::condition_variable cv;
  bool paused = false;
  bool stopping = false;
  std::string latest;
  std::uint64_t latest_seq = 0;
  std::weak_ptr<Client> active;
  std::atomic<std::uint64_t> frames{0};
  std::atomic<bool> connected{false};
  std::chrono::steady_clock::time_point next_step{};

  Impl(std::shared_ptr<LiveMailbox> m, nlohmann::json t, SessionOptions o)
      : mailbox(std::move(m)), track(std::move(t)), opts(std::move(o)) {}

  void set_paused(bool p) {
    {
      std::lock_guard lk(mu);
      paused = p;
    }
    cv.notify_all();
  }

  void on_disconnect() {
    active.reset();
    connected = false;
    mailbox->set_engaged(false);
    mailbox->set_connected(false);
    set_paused(false);
  }

  std::string hello() const {
    nlohmann::ordered_json h;
    h["type"] = "hello";
    h["v"] = 1;
    h["track"] = track;
    h["actions"] = kNumActions;
    h["frame_hz"] = opts.frame_hz;
    return h.dump();
  }

  void do_accept();
};

class SessionServer::Impl::Client : public std::enable_shared_from_this<Client> {
 public:
  Client(tcp::socket socket, Impl& server, bool reject)
      : ws_(std::move(socket)), timer_(ws_.get_executor()), server_(server), reject_(reject) {}

  void run() {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) { self->on_accept(ec); });
  }

  void close() {
    timer_.cancel();
    if (!queue_.empty()) {
      beast::get_lowest_layer(ws_).close();
      return;
    }
    ws_.async_close(websocket::close_code::going_away, [self = shared_from_this()](beast::error_code) {});
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) {
      if (!reject_) server_.on_disconnect();
      return;
    }
    if (reject_) {
      ws_.async_close(websocket::close_reason(websocket::close_code::try_again_later,
                                              "session busy: another client is already connected"),
                      [self = shared_from_this()](beast::error_code) {});
      return;
    }
    enqueue(server_.hello());
    do_read();
    schedule_tick();
  }

  void do_read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->closed_ = true;
        self->timer_.cancel();
        self->server_.on_disconnect();
        return;
      }
      const std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->handle(text);
      self->do_read();
    });
  }

  void handle(const std::string& text) {
    nlohmann::json msg;
    try {
      msg = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      enqueue(warning("malformed message: not JSON"));
      return;
    }
    if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) {
      enqueue(warning("malformed message: missing string field \"type\""));
      return;
    }
    const std::string type = msg["type"];
    if (type == "steer") {
      const auto it = msg.find("index");
      if (it == msg.end() || !it->is_number_integer() || it->get<int>() < 0 || it->get<int>() >= kNumActions) {
        enqueue(warning("steer: \"index\" must be an integer in [0, 32]"));
        return;
      }
      server_.mailbox->post_steer(it->get<int>());
    } else if (type == "engage") {
      const auto it = msg.find("on");
      if (it == msg.end() || !it->is_boolean()) {
        enqueue(warning("engage: \"on\" must be a boolean"));
        return;
      }
      server_.mailbox->set_engaged(it->get<bool>());
    } else if (type == "pause") {
      server_.set_paused(true);
    } else if (type == "resume") {
      server_.set_paused(false);
    } else {
      enqueue(warning("unknown message type: " + type));
    }
  }

  void schedule_tick() {
    const auto period = std::chrono::duration<double>(1.0 / server_.opts.frame_hz);
    timer_.expires_after(std::chrono::duration_cast<std::chrono::steady_clock::duration>(period));
    timer_.async_wait([self = shared_from_this()](beast::error_code ec) {
      if (ec || self->closed_) return;
      std::string frame;
      {
        std::lock_guard lk(self->server_.mu);
        if (self->server_.latest_seq != self->sent_seq_) {
          frame = self->server_.latest;
          self->sent_seq_ = self->server_.latest_seq;
        }
      }
      if (!frame.empty() && self->queue_.empty()) {
        self->enqueue(std::move(frame));
        ++self->server_.frames;
      }
      self->schedule_tick();
    });
  }

  void enqueue(std::string text) {
    queue_.push_back(std::move(text));
    if (queue_.size() == 1) do_write();
  }

  void do_write() {
    ws_.text(true);
    ws_.async_write(asio::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->queue_.clear();
        return;
      }
      self->queue_.pop_front();
      if (!self->queue_.empty()) self->do_write();
    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  asio::steady_timer timer_;
  beast::flat_buffer buffer_;
  std::deque<std::string> queue_;
  Impl& server_;
  bool reject_;
  bool closed_ = false;
  std::uint64_t sent_seq_ = 0;
};

void SessionServer::Impl::do_accept() {
  acceptor->async_accept([this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;
    const bool busy = !active.expired();
    auto client = std::make_shared<Client>(std::move(socket), *this, busy);
    if (busy) {
      std::clog << "session: rejected a second client\n";
    } else {
      active = client;
      connected = true;
      mailbox->set_connected(true);
    }
    client->run();
    do_accept();
  });
}

SessionServer::SessionServer(std::shared_ptr<LiveMailbox> mailbox, nlohmann::json track, SessionOptions options) {
  if (!mailbox) throw InvalidInput("session: mailbox is required");
  if (!(options.frame_hz > 0.0)) throw ConfigError("serve.frame_hz: must be > 0");
  if (options.step_hz < 0.0) throw ConfigError("serve.step_hz: must be >= 0");
  impl_ = std::make_unique<Impl>(std::move(mailbox), std::move(track), std::move(options));
}

SessionServer::~SessionServer() { stop(); }

void SessionServer::start() {
  if (impl_->running) return;
  try {
    const tcp::endpoint ep(asio::ip::make_address(impl_->opts.bind), impl_->opts.port);
    impl_->acceptor.emplace(impl_->ioc);
    impl_->acceptor->open(ep.protocol());
    impl_->acceptor->bind(ep);
    impl_->acceptor->listen();
    impl_->bound_port = impl_->acceptor->local_endpoint().port();
  } catch (const boost::system::system_error& e) {
    impl_->acceptor.reset();
    throw ConfigError("serve.port: cannot listen on " + impl_->opts.bind + ":" + std::to_string(impl_->opts.port) +
                      ": " + e.code().message());
  }
  impl_->running = true;
  impl_->do_accept();
  impl_->thread = std::thread([this] { impl_->ioc.run(); });
}

void SessionServer::stop() {
  if (!impl_ || !impl_->running) return;
  {
    std::lock_guard lk(impl_->mu);
    impl_->stopping = true;
    impl_->paused = false;
  }
  impl_->cv.notify_all();
  asio::post(impl_->ioc, [this] {
    beast::error_code ec;
    impl_->acceptor->close(ec);
    if (auto c = impl_->active.lock()) c->close();
  });
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
  while (impl_->connected && std::chrono::steady_clock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  impl_->ioc.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
  impl_->running = false;
}

std::uint16_t SessionServer::port() const { return impl_->bound_port; }

void SessionServer::publish(const StepEvent& ev) {
  std::string text = make_frame(ev).dump();
  std::lock_guard lk(impl_->mu);
  impl_->latest = std::move(text);
  ++impl_->latest_seq;
}

void SessionServer::wait_if_paused() {
  {
    std::unique_lock lk(impl_->mu);
    impl_->cv.wait(lk, [&] { return !impl_->paused || impl_->stopping; });
  }
  if (impl_->opts.step_hz > 0.0) {
    const auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
        std::chrono::duration<double>(1.0 / impl_->opts.step_hz));
    const auto now = std::chrono::steady_clock::now();
    if (impl_->next_step > now) std::this_thread::sleep_until(impl_->next_step);
    impl_->next_step = std::max(now, impl_->next_step) + period;
  }
}

bool SessionServer::paused() const {
  std::lock_guard lk(impl_->mu);
  return impl_->paused;
}

bool SessionServer::client_connected() const { return impl_->connected; }

std::uint64_t SessionServer::frames_sent() const { return impl_->frames; }

}  // namespace hitl
