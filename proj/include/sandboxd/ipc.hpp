// ipc.hpp - pipes and loopback stream sockets.
//
// Everything here is driven from the kernel loop. Blocking operations never
// block a thread: they park a continuation on a wait queue and the
// continuation runs once the operation can complete.
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "sandboxd/fd.hpp"

namespace sandboxd {

inline constexpr size_t kDefaultPipeCapacity = 65536;

// Completion for a read or write: a byte count, or a negated errno.
using IoDone = std::function<void(int64_t)>;

// Bounded byte ring with FIFO read and write wait queues.
//
// A read returns as soon as any data is available. A write completes only
// once its entire payload has entered the buffer; until then the writer stays
// parked and the buffer stays full.
class Pipe {
 public:
  explicit Pipe(size_t capacity = kDefaultPipeCapacity);

  // `dest` / `src` must stay valid until `done` runs or the waiter is
  // cancelled. Returns a waiter id when the call parks, 0 otherwise.
  uint64_t read(std::span<uint8_t> dest, IoDone done);
  uint64_t write(std::span<const uint8_t> src, IoDone done);

  // Removes a parked waiter without running it. Returns the number of bytes
  // it had already transferred, or nullopt if no such waiter is parked.
  std::optional<size_t> cancel(uint64_t waiter);

  void add_reader() { ++readers_; }
  void add_writer() { ++writers_; }
  // Last reader gone: parked writers fail with EPIPE.
  void drop_reader();
  // Last writer gone: parked readers complete with 0 (EOF).
  void drop_writer();

  size_t capacity() const { return buf_.size(); }
  size_t used() const { return used_; }
  uint32_t readers() const { return readers_; }
  uint32_t writers() const { return writers_; }
  size_t read_waiters() const { return read_waiters_.size(); }
  size_t write_waiters() const { return write_waiters_.size(); }

 private:
  struct ReadWaiter {
    uint64_t id;
    std::span<uint8_t> dest;
    IoDone done;
  };
  struct WriteWaiter {
    uint64_t id;
    std::span<const uint8_t> src;
    size_t written;
    IoDone done;
  };
  using Completions = std::vector<std::pair<IoDone, int64_t>>;

  size_t take(std::span<uint8_t> dest);
  size_t put(std::span<const uint8_t> src);
  void pump(Completions& out);
  static void run(Completions& c);

  std::vector<uint8_t> buf_;
  size_t head_ = 0;
  size_t used_ = 0;
  uint32_t readers_ = 0;
  uint32_t writers_ = 0;
  uint64_t next_waiter_ = 1;
  std::deque<ReadWaiter> read_waiters_;
  std::deque<WriteWaiter> write_waiters_;
};

using PipePtr = std::shared_ptr<Pipe>;

class PipeReadEnd : public FdObject {
 public:
  explicit PipeReadEnd(PipePtr p) : pipe_(std::move(p)) { pipe_->add_reader(); }
  FdKind kind() const override { return FdKind::PipeRead; }
  void on_last_close() override { pipe_->drop_reader(); }
  Pipe& pipe() { return *pipe_; }
  const PipePtr& ptr() const { return pipe_; }

 private:
  PipePtr pipe_;
};

class PipeWriteEnd : public FdObject {
 public:
  explicit PipeWriteEnd(PipePtr p) : pipe_(std::move(p)) { pipe_->add_writer(); }
  FdKind kind() const override { return FdKind::PipeWrite; }
  void on_last_close() override { pipe_->drop_writer(); }
  Pipe& pipe() { return *pipe_; }
  const PipePtr& ptr() const { return pipe_; }

 private:
  PipePtr pipe_;
};

std::pair<std::shared_ptr<PipeReadEnd>, std::shared_ptr<PipeWriteEnd>> make_pipe(size_t capacity);

class SocketTable;

// A loopback SOCK_STREAM endpoint. A connected endpoint owns the write side
// of one pipe and the read side of the other.
class SocketEndpoint : public FdObject {
 public:
  enum class State { Fresh, Bound, Listening, Connecting, Connected, Closed };

  explicit SocketEndpoint(SocketTable* table) : table_(table) {}
  FdKind kind() const override { return FdKind::Socket; }
  void on_last_close() override;

  State state() const { return state_; }
  uint16_t port() const { return port_; }
  Pipe* tx() { return tx_.get(); }
  Pipe* rx() { return rx_.get(); }
  size_t backlog_size() const { return backlog_.size(); }
  // Ends this side's outgoing stream; the peer reads EOF. Idempotent.
  void shutdown_write();

 private:
  friend class SocketTable;
  struct PendingConnect {
    uint64_t id;
    std::shared_ptr<SocketEndpoint> client;
    std::function<void(int)> done;
  };
  struct AcceptWaiter {
    uint64_t id;
    std::function<void(std::shared_ptr<SocketEndpoint>, int)> done;
  };

  SocketTable* table_;
  State state_ = State::Fresh;
  uint16_t port_ = 0;
  PipePtr tx_;
  PipePtr rx_;
  bool write_shut_ = false;
  size_t backlog_cap_ = 0;
  std::deque<PendingConnect> backlog_;
  std::deque<PendingConnect> overflow_;
  std::deque<AcceptWaiter> accept_waiters_;
};

using SocketPtr = std::shared_ptr<SocketEndpoint>;

// Port registry plus the connect/accept rendezvous.
class SocketTable {
 public:
  explicit SocketTable(size_t pipe_capacity = kDefaultPipeCapacity) : pipe_capacity_(pipe_capacity) {}

  SocketPtr create() { return std::make_shared<SocketEndpoint>(this); }

  // Port 0 picks the lowest free port >= 49152. Returns an errno.
  int bind(SocketEndpoint& ep, uint16_t port);
  int listen(SocketEndpoint& ep, int64_t backlog);

  // Parks until a listener accepts; done(0) or done(errno). Returns a
  // waiter id (0 if completed immediately).
  uint64_t connect(const SocketPtr& client, uint16_t port, std::function<void(int)> done);
  // done(endpoint, 0) or done(nullptr, errno).
  uint64_t accept(SocketEndpoint& listener, std::function<void(SocketPtr, int)> done);
  bool cancel(uint64_t waiter);

  // Fires exactly once: immediately if `port` is already listening.
  void notify_on_listen(uint16_t port, std::function<void()> cb);
  bool listening(uint16_t port) const { return listeners_.count(port) != 0; }
  size_t pending_notifications() const { return notifications_.size(); }

 private:
  friend class SocketEndpoint;
  void closed(SocketEndpoint& ep);
  void pair(const SocketPtr& client, const SocketPtr& server);
  void promote_overflow(SocketEndpoint& listener);

  size_t pipe_capacity_;
  uint64_t next_waiter_ = 1;
  std::map<uint16_t, SocketEndpoint*> bound_;
  std::map<uint16_t, SocketEndpoint*> listeners_;
  std::multimap<uint16_t, std::function<void()>> notifications_;
};

}  // namespace sandboxd
