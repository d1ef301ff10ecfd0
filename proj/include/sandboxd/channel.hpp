#pragma once

#include <chrono>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>

namespace sandboxd {

// Unbounded FIFO used for every kernel<->guest message path. Multi-producer,
// single-consumer. Closing discards whatever is still queued.
template <class T>
class Channel {
 public:
  // Returns false when the channel is closed.
  bool push(T value) {
    {
      std::lock_guard lk(mu_);
      if (closed_) return false;
      q_.push_back(std::move(value));
    }
    cv_.notify_one();
    return true;
  }

  // Blocks until a value arrives; nullopt once closed.
  std::optional<T> pop() {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return closed_ || !q_.empty(); });
    return take(lk);
  }

  std::optional<T> try_pop() {
    std::unique_lock lk(mu_);
    return take(lk);
  }

  template <class Rep, class Period>
  std::optional<T> pop_for(std::chrono::duration<Rep, Period> d) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, d, [&] { return closed_ || !q_.empty(); });
    return take(lk);
  }

  // Sleeps up to `d`; returns true if the channel was closed meanwhile.
  template <class Rep, class Period>
  bool wait_closed_for(std::chrono::duration<Rep, Period> d) {
    std::unique_lock lk(mu_);
    return cv_.wait_for(lk, d, [&] { return closed_; });
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
      q_.clear();
    }
    cv_.notify_all();
  }

  bool closed() const {
    std::lock_guard lk(mu_);
    return closed_;
  }

 private:
  std::optional<T> take(std::unique_lock<std::mutex>&) {
    if (closed_ || q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> q_;
  bool closed_ = false;
};

}  // namespace sandboxd
