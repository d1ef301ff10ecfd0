#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <variant>

namespace sandboxd {

// Failure categories surfaced through the host-facing C++ API. Guest-visible
// failures travel as errno values instead.
enum class ErrorKind {
  UnknownExecutable,
  LaunchFailure,
  WorkerGone,
  AlreadyAttached,
  BadOffset,
  CapTooSmall,
  NotSnapshotable,
  FsInitError,
  MalformedResponse,
  ConnectionRefused,
  Protocol,
};

const char* to_string(ErrorKind k);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Either a value or an errno. Used on the kernel side where every failure
// ends up as a syscall reply.
template <class T>
class Result {
 public:
  Result(T value) : v_(std::move(value)) {}  // NOLINT(google-explicit-constructor)
  static Result fail(int e) { return Result(Errno{e}); }

  bool ok() const { return v_.index() == 0; }
  explicit operator bool() const { return ok(); }
  int error() const { return ok() ? 0 : std::get<1>(v_).e; }
  T& value() { return std::get<0>(v_); }
  const T& value() const { return std::get<0>(v_); }
  T* operator->() { return &value(); }
  T& operator*() { return value(); }

 private:
  struct Errno {
    int e;
  };
  explicit Result(Errno e) : v_(e) {}
  std::variant<T, Errno> v_;
};

}  // namespace sandboxd
