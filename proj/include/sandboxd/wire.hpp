// wire.hpp - message formats for both syscall conventions.
//
// Async calls travel as encoded SyscallEnvelope / SyscallReply byte frames.
// Every scalar is little-endian. A Value is a tag byte followed by its payload:
//
//   0x01 i64       8 bytes
//   0x02 string    u32 length, utf-8 bytes
//   0x03 bytes     u32 length, raw bytes
//   0x04 i64 list  u32 count, count * 8 bytes
//
// Envelope: u32 id, u32 trap, u16 argc, argc Values.
// Reply:    u32 id, i64 ret, i64 aux, i32 errno, u8 has_payload,
//           [u32 length, bytes] when has_payload = 1.
//
// Sync calls use the same envelope with exactly six i64 Values; pointers are
// byte offsets into the caller's SharedRegion.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace sandboxd {

using Bytes = std::vector<uint8_t>;

inline Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }
inline std::string to_string(std::span<const uint8_t> b) { return std::string(b.begin(), b.end()); }

using Value = std::variant<int64_t, std::string, Bytes, std::vector<int64_t>>;

enum class ValueTag : uint8_t { I64 = 0x01, Str = 0x02, Buf = 0x03, I64List = 0x04 };

struct SyscallEnvelope {
  uint32_t id = 0;
  uint32_t trap = 0;
  std::vector<Value> args;

  bool operator==(const SyscallEnvelope&) const = default;
};

struct SyscallReply {
  uint32_t id = 0;
  int64_t ret = 0;
  int64_t aux = 0;
  int32_t errno_ = 0;
  std::optional<Bytes> payload;

  bool operator==(const SyscallReply&) const = default;
};

Bytes encode(const SyscallEnvelope& env);
Bytes encode(const SyscallReply& reply);
// Both throw Error(Protocol) on truncated or malformed input.
SyscallEnvelope decode_envelope(std::span<const uint8_t> frame);
SyscallReply decode_reply(std::span<const uint8_t> frame);

// Fixed-layout fast path for sync frames. The bytes match encode() of an
// envelope carrying six i64 Values.
inline constexpr size_t kSyncSlots = 6;
inline constexpr size_t kSyncFrameSize = 10 + kSyncSlots * 9;
struct SyncFrame {
  uint32_t id = 0;
  uint32_t trap = 0;
  std::array<int64_t, kSyncSlots> slots{};
};
Bytes encode_sync(const SyncFrame& f);
// nullopt unless the frame is exactly six i64 Values.
std::optional<SyncFrame> decode_sync(std::span<const uint8_t> frame);

// Trap table. Numbers are stable ABI.
enum class Trap : uint32_t {
  Exit = 1,
  Fork = 2,
  Spawn = 3,
  Pipe2 = 4,
  Wait4 = 5,
  Getpid = 6,
  Getppid = 7,
  Getcwd = 8,
  Chdir = 9,
  Socket = 10,
  Bind = 11,
  Getsockname = 12,
  Listen = 13,
  Accept = 14,
  Connect = 15,
  Readdir = 16,
  Getdents = 17,
  Rmdir = 18,
  Mkdir = 19,
  Open = 20,
  Close = 21,
  Unlink = 22,
  Llseek = 23,
  Pread = 24,
  Pwrite = 25,
  Access = 26,
  Fstat = 27,
  Lstat = 28,
  Stat = 29,
  Readlink = 30,
  Utimes = 31,
  Kill = 32,
  Sigaction = 33,
  AttachHeap = 34,
};

// How one argument travels. Under the sync convention Int takes one slot and
// every other kind takes two: (offset, length) into the shared region, where
// the length of an IntList is its element count (little-endian i64s).
// For Out the async form is an i64 capacity and the result comes back as the
// reply payload; the sync form is (offset, capacity) and the kernel writes
// straight into the region.
enum class ArgKind : uint8_t { Int, Str, In, IntList, Out };

struct TrapInfo {
  Trap trap;
  std::string_view name;
  std::vector<ArgKind> schema;
  // A handled signal makes a parked call of this trap fail with EINTR.
  bool interruptible;
  // Size of the Out payload when it does not equal the return value.
  uint32_t out_fixed;
  bool async_only;
};

const std::vector<TrapInfo>& trap_table();
const TrapInfo* trap_info(uint32_t number);
const TrapInfo* trap_info(std::string_view name);
inline const TrapInfo& trap_info(Trap t) { return *trap_info(static_cast<uint32_t>(t)); }
// Position of argument `arg` within the six sync slots.
size_t sync_slot_of(const TrapInfo& info, size_t arg);
size_t sync_slot_count(const TrapInfo& info);

// Per-process correlation ids. Ids start at 1, are never 0, and skip any id
// that is still outstanding when the counter wraps.
class CallIdAllocator {
 public:
  explicit CallIdAllocator(uint32_t start = 1) : next_(start == 0 ? 1 : start) {}

  uint32_t next();
  void release(uint32_t id) { outstanding_.erase(id); }
  bool outstanding(uint32_t id) const { return outstanding_.count(id) != 0; }
  size_t outstanding_count() const { return outstanding_.size(); }

 private:
  uint32_t next_;
  std::set<uint32_t> outstanding_;
};

// getdents record:
//   u64 ino, u64 next_off, u16 reclen, u8 dtype, name, NUL, zero pad to 8.
struct DirentRecord {
  std::string name;
  uint64_t ino = 0;
  uint8_t dtype = 0;
  uint64_t next_off = 0;

  bool operator==(const DirentRecord&) const = default;
};

inline constexpr uint8_t DT_UNKNOWN = 0;
inline constexpr uint8_t DT_DIR = 4;
inline constexpr uint8_t DT_REG = 8;
inline constexpr size_t kDirentHeader = 19;

constexpr size_t dirent_reclen(size_t name_len) { return (kDirentHeader + name_len + 1 + 7) & ~size_t{7}; }

struct DirentBatch {
  Bytes buf;
  size_t consumed = 0;
};

// Encodes the longest prefix of `entries` that fits in `cap` bytes. next_off
// of each record is `base_index + position + 1`. Throws Error(CapTooSmall)
// when entries is non-empty and its first record does not fit.
DirentBatch encode_dirents(std::span<const DirentRecord> entries, size_t cap, uint64_t base_index = 0);
std::vector<DirentRecord> decode_dirents(std::span<const uint8_t> buf);

// Fixed 48-byte stat layout:
//   u64 ino, i64 size, u32 mode, u32 nlink, i64 atime_ns, i64 mtime_ns, i64 ctime_ns.
struct StatRecord {
  uint64_t ino = 0;
  int64_t size = 0;
  uint32_t mode = 0;
  uint32_t nlink = 1;
  int64_t atime_ns = 0;
  int64_t mtime_ns = 0;
  int64_t ctime_ns = 0;

  bool is_dir() const;
  bool is_reg() const;
  bool operator==(const StatRecord&) const = default;
};

inline constexpr size_t kStatSize = 48;
void encode_stat(const StatRecord& st, std::span<uint8_t> out);
StatRecord decode_stat(std::span<const uint8_t> in);

// argv and environment for spawn, packed into one buffer:
//   u32 argc, argc * (u32 len, bytes), u32 envc, envc * (u32 len, "K=V").
using Environ = std::map<std::string, std::string>;
Bytes pack_exec_args(const std::vector<std::string>& argv, const Environ& env);
// Returns nullopt on a malformed buffer.
std::optional<std::pair<std::vector<std::string>, Environ>> unpack_exec_args(std::span<const uint8_t> buf);

// Sync-convention slot layout at retval_off: u32 seq, i32 errno, i64 ret.
namespace slot {
inline constexpr size_t kSeq = 0;
inline constexpr size_t kErrno = 4;
inline constexpr size_t kRet = 8;
inline constexpr size_t kSize = 16;
}  // namespace slot

// Wake word states. Written by the kernel, reset to Parked by the guest.
enum class Wake : uint32_t { Parked = 0, Complete = 1, Signal = 2, Killed = 3 };

// Little-endian helpers used by several encoders.
void put_u16(Bytes& out, uint16_t v);
void put_u32(Bytes& out, uint32_t v);
void put_u64(Bytes& out, uint64_t v);
uint16_t get_u16(std::span<const uint8_t> in, size_t off);
uint32_t get_u32(std::span<const uint8_t> in, size_t off);
uint64_t get_u64(std::span<const uint8_t> in, size_t off);

}  // namespace sandboxd
