#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <utility>

#include "sandboxd/error.hpp"

namespace sandboxd {

enum class FdKind { File, Dir, PipeRead, PipeWrite, Socket };

// An open object shared by every descriptor that refers to it. `refs` counts
// (task, fd) references plus host-held references; on_last_close runs when it
// drops to zero.
class FdObject {
 public:
  virtual ~FdObject() = default;
  virtual FdKind kind() const = 0;
  virtual void on_last_close() {}

  uint32_t refs() const { return refs_; }
  void retain() { ++refs_; }
  void release() {
    if (refs_ > 0 && --refs_ == 0) on_last_close();
  }

 private:
  uint32_t refs_ = 0;
};

using FdObjectPtr = std::shared_ptr<FdObject>;

class FdTable {
 public:
  static constexpr int kMaxFds = 1024;
  static constexpr int kFirstAlloc = 3;

  FdTable() = default;
  FdTable(const FdTable&) = delete;
  FdTable& operator=(const FdTable&) = delete;
  FdTable(FdTable&& o) noexcept : fds_(std::exchange(o.fds_, {})) {}
  FdTable& operator=(FdTable&& o) noexcept {
    if (this != &o) {
      close_all();
      fds_ = std::exchange(o.fds_, {});
    }
    return *this;
  }
  ~FdTable() { close_all(); }

  // Lowest free descriptor >= kFirstAlloc. EMFILE when the table is full.
  Result<int> install(FdObjectPtr obj);
  // Replaces whatever is at `fd`.
  void install_at(int fd, FdObjectPtr obj);
  FdObjectPtr get(int fd) const;
  int close(int fd);
  void close_all();
  // Copy sharing every object (refcounts incremented).
  FdTable clone() const;

  const std::map<int, FdObjectPtr>& entries() const { return fds_; }
  bool empty() const { return fds_.empty(); }

 private:
  std::map<int, FdObjectPtr> fds_;
};

}  // namespace sandboxd
