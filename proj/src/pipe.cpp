#include <algorithm>
#include <cstring>

#include "sandboxd/abi.hpp"
#include "sandboxd/ipc.hpp"

namespace sandboxd {

Pipe::Pipe(size_t capacity) : buf_(std::max<size_t>(capacity, 1)) {}

size_t Pipe::take(std::span<uint8_t> dest) {
  size_t n = std::min(dest.size(), used_);
  size_t first = std::min(n, buf_.size() - head_);
  std::memcpy(dest.data(), buf_.data() + head_, first);
  std::memcpy(dest.data() + first, buf_.data(), n - first);
  head_ = (head_ + n) % buf_.size();
  used_ -= n;
  if (used_ == 0) head_ = 0;
  return n;
}

size_t Pipe::put(std::span<const uint8_t> src) {
  size_t n = std::min(src.size(), buf_.size() - used_);
  size_t tail = (head_ + used_) % buf_.size();
  size_t first = std::min(n, buf_.size() - tail);
  std::memcpy(buf_.data() + tail, src.data(), first);
  std::memcpy(buf_.data(), src.data() + first, n - first);
  used_ += n;
  return n;
}

void Pipe::pump(Completions& out) {
  for (;;) {
    bool progress = false;
    while (!read_waiters_.empty() && used_ > 0) {
      auto w = std::move(read_waiters_.front());
      read_waiters_.pop_front();
      out.emplace_back(std::move(w.done), static_cast<int64_t>(take(w.dest)));
      progress = true;
    }
    while (!write_waiters_.empty() && used_ < buf_.size()) {
      auto& w = write_waiters_.front();
      size_t n = put(w.src.subspan(w.written));
      w.written += n;
      progress = progress || n > 0;
      if (w.written < w.src.size()) break;
      out.emplace_back(std::move(w.done), static_cast<int64_t>(w.src.size()));
      write_waiters_.pop_front();
    }
    if (!progress) return;
  }
}

void Pipe::run(Completions& c) {
  for (auto& [done, result] : c) done(result);
}

uint64_t Pipe::read(std::span<uint8_t> dest, IoDone done) {
  Completions c;
  uint64_t parked = 0;
  if (dest.empty()) {
    c.emplace_back(std::move(done), 0);
  } else if (used_ > 0 && read_waiters_.empty()) {
    c.emplace_back(std::move(done), static_cast<int64_t>(take(dest)));
    pump(c);
  } else if (used_ == 0 && writers_ == 0) {
    c.emplace_back(std::move(done), 0);
  } else {
    parked = next_waiter_++;
    read_waiters_.push_back({parked, dest, std::move(done)});
  }
  run(c);
  return parked;
}

uint64_t Pipe::write(std::span<const uint8_t> src, IoDone done) {
  Completions c;
  uint64_t parked = 0;
  if (readers_ == 0) {
    c.emplace_back(std::move(done), -err::PIPE);
  } else if (src.empty()) {
    c.emplace_back(std::move(done), 0);
  } else {
    size_t n = write_waiters_.empty() ? put(src) : 0;
    if (n == src.size()) {
      c.emplace_back(std::move(done), static_cast<int64_t>(n));
    } else {
      parked = next_waiter_++;
      write_waiters_.push_back({parked, src, n, std::move(done)});
    }
    pump(c);
    if (parked != 0 && std::none_of(write_waiters_.begin(), write_waiters_.end(),
                                    [&](const WriteWaiter& w) { return w.id == parked; }))
      parked = 0;
  }
  run(c);
  return parked;
}

std::optional<size_t> Pipe::cancel(uint64_t waiter) {
  for (auto it = read_waiters_.begin(); it != read_waiters_.end(); ++it) {
    if (it->id == waiter) {
      read_waiters_.erase(it);
      return 0;
    }
  }
  for (auto it = write_waiters_.begin(); it != write_waiters_.end(); ++it) {
    if (it->id == waiter) {
      size_t written = it->written;
      write_waiters_.erase(it);
      return written;
    }
  }
  return std::nullopt;
}

void Pipe::drop_reader() {
  if (readers_ == 0 || --readers_ > 0) return;
  Completions c;
  for (auto& w : write_waiters_) c.emplace_back(std::move(w.done), -err::PIPE);
  write_waiters_.clear();
  run(c);
}

void Pipe::drop_writer() {
  if (writers_ == 0 || --writers_ > 0) return;
  Completions c;
  for (auto& w : read_waiters_) c.emplace_back(std::move(w.done), 0);
  read_waiters_.clear();
  run(c);
}

std::pair<std::shared_ptr<PipeReadEnd>, std::shared_ptr<PipeWriteEnd>> make_pipe(size_t capacity) {
  auto p = std::make_shared<Pipe>(capacity);
  return {std::make_shared<PipeReadEnd>(p), std::make_shared<PipeWriteEnd>(p)};
}

}  // namespace sandboxd
