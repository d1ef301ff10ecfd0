#include "sandboxd/fd.hpp"

#include "sandboxd/abi.hpp"

namespace sandboxd {

Result<int> FdTable::install(FdObjectPtr obj) {
  int fd = kFirstAlloc;
  for (auto it = fds_.lower_bound(fd); it != fds_.end() && it->first == fd; ++it) ++fd;
  if (fd >= kMaxFds) return Result<int>::fail(err::MFILE);
  install_at(fd, std::move(obj));
  return fd;
}

void FdTable::install_at(int fd, FdObjectPtr obj) {
  obj->retain();
  auto it = fds_.find(fd);
  if (it != fds_.end()) {
    auto old = std::move(it->second);
    it->second = std::move(obj);
    old->release();
    return;
  }
  fds_.emplace(fd, std::move(obj));
}

FdObjectPtr FdTable::get(int fd) const {
  auto it = fds_.find(fd);
  return it == fds_.end() ? nullptr : it->second;
}

int FdTable::close(int fd) {
  auto it = fds_.find(fd);
  if (it == fds_.end()) return err::BADF;
  auto obj = std::move(it->second);
  fds_.erase(it);
  obj->release();
  return 0;
}

void FdTable::close_all() {
  auto fds = std::move(fds_);
  fds_.clear();
  for (auto& [_, obj] : fds) obj->release();
}

FdTable FdTable::clone() const {
  FdTable t;
  for (const auto& [fd, obj] : fds_) t.install_at(fd, obj);
  return t;
}

}  // namespace sandboxd
