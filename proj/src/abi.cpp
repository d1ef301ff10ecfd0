#include "sandboxd/abi.hpp"
#include "sandboxd/error.hpp"

namespace sandboxd {

namespace {
struct ErrnoName {
  int32_t value;
  const char* name;
  const char* message;
};

constexpr ErrnoName kErrnos[] = {
    {err::kOk, "OK", "Success"},
    {err::PERM, "EPERM", "Operation not permitted"},
    {err::NOENT, "ENOENT", "No such file or directory"},
    {err::SRCH, "ESRCH", "No such process"},
    {err::INTR, "EINTR", "Interrupted system call"},
    {err::IO, "EIO", "Input/output error"},
    {err::NOEXEC, "ENOEXEC", "Exec format error"},
    {err::BADF, "EBADF", "Bad file descriptor"},
    {err::CHILD, "ECHILD", "No child processes"},
    {err::NOMEM, "ENOMEM", "Cannot allocate memory"},
    {err::ACCES, "EACCES", "Permission denied"},
    {err::FAULT, "EFAULT", "Bad address"},
    {err::BUSY, "EBUSY", "Device or resource busy"},
    {err::EXIST, "EEXIST", "File exists"},
    {err::NOTDIR, "ENOTDIR", "Not a directory"},
    {err::ISDIR, "EISDIR", "Is a directory"},
    {err::INVAL, "EINVAL", "Invalid argument"},
    {err::MFILE, "EMFILE", "Too many open files"},
    {err::SPIPE, "ESPIPE", "Illegal seek"},
    {err::PIPE, "EPIPE", "Broken pipe"},
    {err::RANGE, "ERANGE", "Numerical result out of range"},
    {err::NAMETOOLONG, "ENAMETOOLONG", "File name too long"},
    {err::NOSYS, "ENOSYS", "Function not implemented"},
    {err::NOTEMPTY, "ENOTEMPTY", "Directory not empty"},
    {err::NOTSOCK, "ENOTSOCK", "Socket operation on non-socket"},
    {err::OPNOTSUPP, "EOPNOTSUPP", "Operation not supported"},
    {err::AFNOSUPPORT, "EAFNOSUPPORT", "Address family not supported by protocol"},
    {err::ADDRINUSE, "EADDRINUSE", "Address already in use"},
    {err::ISCONN, "EISCONN", "Transport endpoint is already connected"},
    {err::NOTCONN, "ENOTCONN", "Transport endpoint is not connected"},
    {err::CONNREFUSED, "ECONNREFUSED", "Connection refused"},
};
}  // namespace

const char* err::name(int32_t e) {
  for (const auto& n : kErrnos)
    if (n.value == e) return n.name;
  return "E?";
}

const char* err::message(int32_t e) {
  for (const auto& n : kErrnos)
    if (n.value == e) return n.message;
  return "Unknown error";
}

bool sig::supported(int32_t s) {
  switch (s) {
    case sig::INT:
    case sig::KILL:
    case sig::USR1:
    case sig::USR2:
    case sig::PIPE:
    case sig::TERM:
    case sig::CHLD:
      return true;
    default:
      return false;
  }
}

const char* sig::name(int32_t s) {
  switch (s) {
    case sig::INT: return "SIGINT";
    case sig::KILL: return "SIGKILL";
    case sig::USR1: return "SIGUSR1";
    case sig::USR2: return "SIGUSR2";
    case sig::PIPE: return "SIGPIPE";
    case sig::TERM: return "SIGTERM";
    case sig::CHLD: return "SIGCHLD";
    default: return "SIG?";
  }
}

const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::UnknownExecutable: return "UnknownExecutable";
    case ErrorKind::LaunchFailure: return "LaunchFailure";
    case ErrorKind::WorkerGone: return "WorkerGone";
    case ErrorKind::AlreadyAttached: return "AlreadyAttached";
    case ErrorKind::BadOffset: return "BadOffset";
    case ErrorKind::CapTooSmall: return "CapTooSmall";
    case ErrorKind::NotSnapshotable: return "NotSnapshotable";
    case ErrorKind::FsInitError: return "FsInitError";
    case ErrorKind::MalformedResponse: return "MalformedResponse";
    case ErrorKind::ConnectionRefused: return "ConnectionRefused";
    case ErrorKind::Protocol: return "Protocol";
  }
  return "Error";
}

}  // namespace sandboxd
