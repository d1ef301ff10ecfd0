// abi.hpp - numeric constants shared by the kernel and guest programs.
//
// Values follow the Linux numbering so that guest code reads naturally, but
// nothing here is taken from host headers: the ABI is fixed regardless of the
// platform the emulator is built on. Names drop the E/SIG prefixes so they
// cannot collide with the libc macros of the same name.
#pragma once

#include <cstdint>

namespace sandboxd {

namespace err {
inline constexpr int32_t kOk = 0;
inline constexpr int32_t PERM = 1;
inline constexpr int32_t NOENT = 2;
inline constexpr int32_t SRCH = 3;
inline constexpr int32_t INTR = 4;
inline constexpr int32_t IO = 5;
inline constexpr int32_t NOEXEC = 8;
inline constexpr int32_t BADF = 9;
inline constexpr int32_t CHILD = 10;
inline constexpr int32_t NOMEM = 12;
inline constexpr int32_t ACCES = 13;
inline constexpr int32_t FAULT = 14;
inline constexpr int32_t BUSY = 16;
inline constexpr int32_t EXIST = 17;
inline constexpr int32_t NOTDIR = 20;
inline constexpr int32_t ISDIR = 21;
inline constexpr int32_t INVAL = 22;
inline constexpr int32_t MFILE = 24;
inline constexpr int32_t SPIPE = 29;
inline constexpr int32_t PIPE = 32;
inline constexpr int32_t RANGE = 34;
inline constexpr int32_t NAMETOOLONG = 36;
inline constexpr int32_t NOSYS = 38;
inline constexpr int32_t NOTEMPTY = 39;
inline constexpr int32_t NOTSOCK = 88;
inline constexpr int32_t OPNOTSUPP = 95;
inline constexpr int32_t AFNOSUPPORT = 97;
inline constexpr int32_t ADDRINUSE = 98;
inline constexpr int32_t ISCONN = 106;
inline constexpr int32_t NOTCONN = 107;
inline constexpr int32_t CONNREFUSED = 111;

// Short symbolic name, e.g. "ENOENT". Unknown values yield "E?".
const char* name(int32_t e);
// Human readable message in the style of strerror.
const char* message(int32_t e);
}  // namespace err

namespace oflag {
inline constexpr int64_t RDONLY = 0;
inline constexpr int64_t WRONLY = 1;
inline constexpr int64_t RDWR = 2;
inline constexpr int64_t ACCMODE = 3;
inline constexpr int64_t CREAT = 0x40;
inline constexpr int64_t EXCL = 0x80;
inline constexpr int64_t TRUNC = 0x200;
inline constexpr int64_t APPEND = 0x400;
inline constexpr int64_t DIRECTORY = 0x10000;
}  // namespace oflag

namespace seek {
inline constexpr int64_t SET = 0;
inline constexpr int64_t CUR = 1;
inline constexpr int64_t END = 2;
}  // namespace seek

namespace amode {
inline constexpr int64_t EXIST = 0;
inline constexpr int64_t EXEC = 1;
inline constexpr int64_t WRITE = 2;
inline constexpr int64_t READ = 4;
}  // namespace amode

namespace fmode {
inline constexpr uint32_t IFMT = 0170000;
inline constexpr uint32_t IFDIR = 0040000;
inline constexpr uint32_t IFREG = 0100000;
inline constexpr uint32_t IFIFO = 0010000;
inline constexpr uint32_t IFSOCK = 0140000;
}  // namespace fmode

namespace sig {
inline constexpr int32_t INT = 2;
inline constexpr int32_t KILL = 9;
inline constexpr int32_t USR1 = 10;
inline constexpr int32_t USR2 = 12;
inline constexpr int32_t PIPE = 13;
inline constexpr int32_t TERM = 15;
inline constexpr int32_t CHLD = 17;

bool supported(int32_t s);
const char* name(int32_t s);
}  // namespace sig

// Dispositions passed to the sigaction trap.
enum class Disposition : int64_t { Default = 0, Ignore = 1, Handler = 2 };

namespace wait {
inline constexpr int64_t NOHANG = 1;

constexpr int32_t exited_status(int32_t code) { return (code & 0xff) << 8; }
constexpr int32_t signaled_status(int32_t s) { return s & 0x7f; }
constexpr bool if_exited(int32_t st) { return (st & 0x7f) == 0; }
constexpr int32_t exit_status(int32_t st) { return (st >> 8) & 0xff; }
constexpr bool if_signaled(int32_t st) { return (st & 0x7f) != 0; }
constexpr int32_t term_sig(int32_t st) { return st & 0x7f; }
// The value a shell reports as $? for a wait status.
constexpr int32_t shell_code(int32_t st) {
  return if_signaled(st) ? 128 + term_sig(st) : exit_status(st);
}
}  // namespace wait

namespace net {
inline constexpr int64_t INET = 2;
inline constexpr int64_t STREAM = 1;
inline constexpr uint16_t kEphemeralBase = 49152;
inline constexpr int64_t kDefaultBacklog = 16;
}  // namespace net

enum class Convention : uint8_t { Async, Sync };

}  // namespace sandboxd
