#include "sandboxd/abi.hpp"
#include "sandboxd/ipc.hpp"

namespace sandboxd {

void SocketEndpoint::on_last_close() { table_->closed(*this); }

void SocketEndpoint::shutdown_write() {
  if (state_ != State::Connected || write_shut_) return;
  write_shut_ = true;
  tx_->drop_writer();
}

int SocketTable::bind(SocketEndpoint& ep, uint16_t port) {
  if (ep.state_ != SocketEndpoint::State::Fresh) return err::INVAL;
  if (port == 0) {
    uint32_t p = net::kEphemeralBase;
    while (p <= 65535 && bound_.count(static_cast<uint16_t>(p))) ++p;
    if (p > 65535) return err::ADDRINUSE;
    port = static_cast<uint16_t>(p);
  } else if (bound_.count(port)) {
    return err::ADDRINUSE;
  }
  bound_[port] = &ep;
  ep.port_ = port;
  ep.state_ = SocketEndpoint::State::Bound;
  return 0;
}

int SocketTable::listen(SocketEndpoint& ep, int64_t backlog) {
  size_t cap = backlog > 0 ? static_cast<size_t>(backlog) : static_cast<size_t>(net::kDefaultBacklog);
  if (ep.state_ == SocketEndpoint::State::Listening) {
    ep.backlog_cap_ = cap;
    return 0;
  }
  if (ep.state_ != SocketEndpoint::State::Bound) return err::INVAL;
  ep.backlog_cap_ = cap;
  ep.state_ = SocketEndpoint::State::Listening;
  listeners_[ep.port_] = &ep;
  auto [lo, hi] = notifications_.equal_range(ep.port_);
  std::vector<std::function<void()>> fire;
  for (auto it = lo; it != hi; ++it) fire.push_back(std::move(it->second));
  notifications_.erase(lo, hi);
  for (auto& cb : fire) cb();
  return 0;
}

void SocketTable::pair(const SocketPtr& client, const SocketPtr& server) {
  auto a2b = std::make_shared<Pipe>(pipe_capacity_);
  auto b2a = std::make_shared<Pipe>(pipe_capacity_);
  client->tx_ = a2b;
  client->rx_ = b2a;
  server->tx_ = b2a;
  server->rx_ = a2b;
  a2b->add_writer();
  a2b->add_reader();
  b2a->add_writer();
  b2a->add_reader();
  client->state_ = SocketEndpoint::State::Connected;
  server->state_ = SocketEndpoint::State::Connected;
}

void SocketTable::promote_overflow(SocketEndpoint& listener) {
  while (!listener.overflow_.empty() && listener.backlog_.size() < listener.backlog_cap_) {
    listener.backlog_.push_back(std::move(listener.overflow_.front()));
    listener.overflow_.pop_front();
  }
}

uint64_t SocketTable::connect(const SocketPtr& client, uint16_t port, std::function<void(int)> done) {
  using S = SocketEndpoint::State;
  if (client->state_ == S::Connected || client->state_ == S::Connecting) {
    done(err::ISCONN);
    return 0;
  }
  if (client->state_ != S::Fresh && client->state_ != S::Bound) {
    done(err::INVAL);
    return 0;
  }
  auto it = listeners_.find(port);
  if (it == listeners_.end()) {
    done(err::CONNREFUSED);
    return 0;
  }
  SocketEndpoint& listener = *it->second;
  if (!listener.accept_waiters_.empty()) {
    auto w = std::move(listener.accept_waiters_.front());
    listener.accept_waiters_.pop_front();
    auto server = create();
    server->port_ = listener.port_;
    pair(client, server);
    w.done(server, 0);
    done(0);
    return 0;
  }
  client->state_ = S::Connecting;
  uint64_t id = next_waiter_++;
  auto& queue = listener.backlog_.size() < listener.backlog_cap_ ? listener.backlog_ : listener.overflow_;
  queue.push_back({id, client, std::move(done)});
  return id;
}

uint64_t SocketTable::accept(SocketEndpoint& listener, std::function<void(SocketPtr, int)> done) {
  if (listener.state_ != SocketEndpoint::State::Listening) {
    done(nullptr, err::INVAL);
    return 0;
  }
  if (!listener.backlog_.empty()) {
    auto pc = std::move(listener.backlog_.front());
    listener.backlog_.pop_front();
    promote_overflow(listener);
    auto server = create();
    server->port_ = listener.port_;
    pair(pc.client, server);
    done(server, 0);
    pc.done(0);
    return 0;
  }
  uint64_t id = next_waiter_++;
  listener.accept_waiters_.push_back({id, std::move(done)});
  return id;
}

bool SocketTable::cancel(uint64_t waiter) {
  for (auto& [_, l] : listeners_) {
    for (auto* q : {&l->backlog_, &l->overflow_}) {
      for (auto it = q->begin(); it != q->end(); ++it) {
        if (it->id == waiter) {
          it->client->state_ = it->client->port_ ? SocketEndpoint::State::Bound : SocketEndpoint::State::Fresh;
          q->erase(it);
          promote_overflow(*l);
          return true;
        }
      }
    }
    auto& aw = l->accept_waiters_;
    for (auto it = aw.begin(); it != aw.end(); ++it) {
      if (it->id == waiter) {
        aw.erase(it);
        return true;
      }
    }
  }
  return false;
}

void SocketTable::notify_on_listen(uint16_t port, std::function<void()> cb) {
  if (listening(port)) {
    cb();
    return;
  }
  notifications_.emplace(port, std::move(cb));
}

void SocketTable::closed(SocketEndpoint& ep) {
  using S = SocketEndpoint::State;
  if (ep.state_ == S::Connected) {
    if (!ep.write_shut_) ep.tx_->drop_writer();
    ep.rx_->drop_reader();
  } else if (ep.state_ == S::Listening) {
    listeners_.erase(ep.port_);
    std::vector<SocketEndpoint::PendingConnect> refused;
    for (auto* q : {&ep.backlog_, &ep.overflow_}) {
      for (auto& pc : *q) refused.push_back(std::move(pc));
      q->clear();
    }
    auto waiters = std::move(ep.accept_waiters_);
    ep.accept_waiters_.clear();
    for (auto& pc : refused) {
      pc.client->state_ = pc.client->port_ ? S::Bound : S::Fresh;
      pc.done(err::CONNREFUSED);
    }
    for (auto& w : waiters) w.done(nullptr, err::BADF);
  }
  auto b = bound_.find(ep.port_);
  if (b != bound_.end() && b->second == &ep) bound_.erase(b);
  ep.state_ = S::Closed;
}

}  // namespace sandboxd
