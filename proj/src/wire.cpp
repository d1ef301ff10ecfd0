#include "sandboxd/wire.hpp"

#include <algorithm>
#include <cstring>

#include "sandboxd/abi.hpp"
#include "sandboxd/error.hpp"

namespace sandboxd {

void put_u16(Bytes& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(Bytes& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(Bytes& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint16_t get_u16(std::span<const uint8_t> in, size_t off) {
  return static_cast<uint16_t>(in[off] | (in[off + 1] << 8));
}

uint32_t get_u32(std::span<const uint8_t> in, size_t off) {
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | in[off + i];
  return v;
}

uint64_t get_u64(std::span<const uint8_t> in, size_t off) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | in[off + i];
  return v;
}

namespace {

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> in) : in_(in) {}

  void need(size_t n) const {
    if (in_.size() - pos_ < n) throw Error(ErrorKind::Protocol, "truncated frame");
  }
  uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  uint16_t u16() {
    need(2);
    auto v = get_u16(in_, pos_);
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    auto v = get_u32(in_, pos_);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    auto v = get_u64(in_, pos_);
    pos_ += 8;
    return v;
  }
  std::span<const uint8_t> take(size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }
  size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const uint8_t> in_;
  size_t pos_ = 0;
};

void put_value(Bytes& out, const Value& v) {
  std::visit(
      [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, int64_t>) {
          out.push_back(static_cast<uint8_t>(ValueTag::I64));
          put_u64(out, static_cast<uint64_t>(x));
        } else if constexpr (std::is_same_v<T, std::string>) {
          out.push_back(static_cast<uint8_t>(ValueTag::Str));
          put_u32(out, static_cast<uint32_t>(x.size()));
          out.insert(out.end(), x.begin(), x.end());
        } else if constexpr (std::is_same_v<T, Bytes>) {
          out.push_back(static_cast<uint8_t>(ValueTag::Buf));
          put_u32(out, static_cast<uint32_t>(x.size()));
          out.insert(out.end(), x.begin(), x.end());
        } else {
          out.push_back(static_cast<uint8_t>(ValueTag::I64List));
          put_u32(out, static_cast<uint32_t>(x.size()));
          for (int64_t i : x) put_u64(out, static_cast<uint64_t>(i));
        }
      },
      v);
}

Value get_value(Reader& r) {
  switch (static_cast<ValueTag>(r.u8())) {
    case ValueTag::I64:
      return static_cast<int64_t>(r.u64());
    case ValueTag::Str: {
      auto s = r.take(r.u32());
      return std::string(s.begin(), s.end());
    }
    case ValueTag::Buf: {
      auto s = r.take(r.u32());
      return Bytes(s.begin(), s.end());
    }
    case ValueTag::I64List: {
      uint32_t n = r.u32();
      r.need(size_t{n} * 8);
      std::vector<int64_t> v(n);
      for (auto& x : v) x = static_cast<int64_t>(r.u64());
      return v;
    }
  }
  throw Error(ErrorKind::Protocol, "unknown value tag");
}

}  // namespace

Bytes encode(const SyscallEnvelope& env) {
  Bytes out;
  out.reserve(16);
  put_u32(out, env.id);
  put_u32(out, env.trap);
  put_u16(out, static_cast<uint16_t>(env.args.size()));
  for (const auto& v : env.args) put_value(out, v);
  return out;
}

Bytes encode(const SyscallReply& reply) {
  Bytes out;
  out.reserve(25 + (reply.payload ? reply.payload->size() + 4 : 0));
  put_u32(out, reply.id);
  put_u64(out, static_cast<uint64_t>(reply.ret));
  put_u64(out, static_cast<uint64_t>(reply.aux));
  put_u32(out, static_cast<uint32_t>(reply.errno_));
  out.push_back(reply.payload ? 1 : 0);
  if (reply.payload) {
    put_u32(out, static_cast<uint32_t>(reply.payload->size()));
    out.insert(out.end(), reply.payload->begin(), reply.payload->end());
  }
  return out;
}

SyscallEnvelope decode_envelope(std::span<const uint8_t> frame) {
  Reader r(frame);
  SyscallEnvelope env;
  env.id = r.u32();
  env.trap = r.u32();
  uint16_t argc = r.u16();
  env.args.reserve(argc);
  for (uint16_t i = 0; i < argc; ++i) env.args.push_back(get_value(r));
  if (!r.done()) throw Error(ErrorKind::Protocol, "trailing bytes after envelope");
  return env;
}

Bytes encode_sync(const SyncFrame& f) {
  Bytes out(kSyncFrameSize);
  uint8_t* p = out.data();
  auto le = [&](uint64_t v, int n) {
    for (int i = 0; i < n; ++i) *p++ = static_cast<uint8_t>(v >> (8 * i));
  };
  le(f.id, 4);
  le(f.trap, 4);
  le(kSyncSlots, 2);
  for (int64_t v : f.slots) {
    *p++ = static_cast<uint8_t>(ValueTag::I64);
    le(static_cast<uint64_t>(v), 8);
  }
  return out;
}

std::optional<SyncFrame> decode_sync(std::span<const uint8_t> frame) {
  if (frame.size() != kSyncFrameSize || get_u16(frame, 8) != kSyncSlots) return std::nullopt;
  SyncFrame f;
  f.id = get_u32(frame, 0);
  f.trap = get_u32(frame, 4);
  for (size_t k = 0; k < kSyncSlots; ++k) {
    size_t off = 10 + k * 9;
    if (frame[off] != static_cast<uint8_t>(ValueTag::I64)) return std::nullopt;
    f.slots[k] = static_cast<int64_t>(get_u64(frame, off + 1));
  }
  return f;
}

SyscallReply decode_reply(std::span<const uint8_t> frame) {
  Reader r(frame);
  SyscallReply rep;
  rep.id = r.u32();
  rep.ret = static_cast<int64_t>(r.u64());
  rep.aux = static_cast<int64_t>(r.u64());
  rep.errno_ = static_cast<int32_t>(r.u32());
  uint8_t has = r.u8();
  if (has > 1) throw Error(ErrorKind::Protocol, "bad payload flag");
  if (has) {
    auto s = r.take(r.u32());
    rep.payload = Bytes(s.begin(), s.end());
  }
  if (!r.done()) throw Error(ErrorKind::Protocol, "trailing bytes after reply");
  return rep;
}

const std::vector<TrapInfo>& trap_table() {
  using A = ArgKind;
  static const std::vector<TrapInfo> table = {
      {Trap::Exit, "exit", {A::Int}, false, 0, false},
      {Trap::Fork, "fork", {A::In, A::Int}, false, 0, true},
      {Trap::Spawn, "spawn", {A::Str, A::In, A::IntList}, false, 0, false},
      {Trap::Pipe2, "pipe2", {A::Out, A::Int}, false, 8, false},
      {Trap::Wait4, "wait4", {A::Int, A::Int, A::Out}, true, 4, false},
      {Trap::Getpid, "getpid", {}, false, 0, false},
      {Trap::Getppid, "getppid", {}, false, 0, false},
      {Trap::Getcwd, "getcwd", {A::Out}, false, 0, false},
      {Trap::Chdir, "chdir", {A::Str}, false, 0, false},
      {Trap::Socket, "socket", {A::Int, A::Int, A::Int}, false, 0, false},
      {Trap::Bind, "bind", {A::Int, A::Int}, false, 0, false},
      {Trap::Getsockname, "getsockname", {A::Int}, false, 0, false},
      {Trap::Listen, "listen", {A::Int, A::Int}, false, 0, false},
      {Trap::Accept, "accept", {A::Int}, true, 0, false},
      {Trap::Connect, "connect", {A::Int, A::Int}, true, 0, false},
      {Trap::Readdir, "readdir", {A::Int, A::Out}, false, 0, false},
      {Trap::Getdents, "getdents", {A::Int, A::Out}, false, 0, false},
      {Trap::Rmdir, "rmdir", {A::Str}, false, 0, false},
      {Trap::Mkdir, "mkdir", {A::Str, A::Int}, false, 0, false},
      {Trap::Open, "open", {A::Str, A::Int, A::Int}, false, 0, false},
      {Trap::Close, "close", {A::Int}, false, 0, false},
      {Trap::Unlink, "unlink", {A::Str}, false, 0, false},
      {Trap::Llseek, "llseek", {A::Int, A::Int, A::Int}, false, 0, false},
      {Trap::Pread, "pread", {A::Int, A::Out, A::Int}, true, 0, false},
      {Trap::Pwrite, "pwrite", {A::Int, A::In, A::Int}, true, 0, false},
      {Trap::Access, "access", {A::Str, A::Int}, false, 0, false},
      {Trap::Fstat, "fstat", {A::Int, A::Out}, false, kStatSize, false},
      {Trap::Lstat, "lstat", {A::Str, A::Out}, false, kStatSize, false},
      {Trap::Stat, "stat", {A::Str, A::Out}, false, kStatSize, false},
      {Trap::Readlink, "readlink", {A::Str, A::Out}, false, 0, false},
      {Trap::Utimes, "utimes", {A::Str, A::Int, A::Int}, false, 0, false},
      {Trap::Kill, "kill", {A::Int, A::Int}, false, 0, false},
      {Trap::Sigaction, "sigaction", {A::Int, A::Int}, false, 0, false},
      {Trap::AttachHeap, "attach_heap", {A::Int, A::Int, A::Int}, false, 0, true},
  };
  return table;
}

const TrapInfo* trap_info(uint32_t number) {
  const auto& t = trap_table();
  if (number == 0 || number > t.size()) return nullptr;
  return &t[number - 1];
}

const TrapInfo* trap_info(std::string_view name) {
  for (const auto& i : trap_table())
    if (i.name == name) return &i;
  return nullptr;
}

size_t sync_slot_of(const TrapInfo& info, size_t arg) {
  size_t slot = 0;
  for (size_t i = 0; i < arg; ++i) slot += info.schema[i] == ArgKind::Int ? 1 : 2;
  return slot;
}

size_t sync_slot_count(const TrapInfo& info) { return sync_slot_of(info, info.schema.size()); }

uint32_t CallIdAllocator::next() {
  // Bounded by the precondition of fewer than 2^32 outstanding ids.
  while (next_ == 0 || outstanding_.count(next_) != 0) ++next_;
  uint32_t id = next_++;
  outstanding_.insert(id);
  return id;
}

DirentBatch encode_dirents(std::span<const DirentRecord> entries, size_t cap, uint64_t base_index) {
  DirentBatch batch;
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    size_t reclen = dirent_reclen(e.name.size());
    if (batch.buf.size() + reclen > cap) {
      if (i == 0) throw Error(ErrorKind::CapTooSmall, "first dirent record needs " + std::to_string(reclen) + " bytes");
      break;
    }
    size_t start = batch.buf.size();
    put_u64(batch.buf, e.ino);
    put_u64(batch.buf, base_index + i + 1);
    put_u16(batch.buf, static_cast<uint16_t>(reclen));
    batch.buf.push_back(e.dtype);
    batch.buf.insert(batch.buf.end(), e.name.begin(), e.name.end());
    batch.buf.resize(start + reclen, 0);
    ++batch.consumed;
  }
  return batch;
}

std::vector<DirentRecord> decode_dirents(std::span<const uint8_t> buf) {
  std::vector<DirentRecord> out;
  size_t off = 0;
  while (off < buf.size()) {
    if (buf.size() - off < kDirentHeader + 1) throw Error(ErrorKind::Protocol, "truncated dirent");
    DirentRecord r;
    r.ino = get_u64(buf, off);
    r.next_off = get_u64(buf, off + 8);
    uint16_t reclen = get_u16(buf, off + 16);
    r.dtype = buf[off + 18];
    if (reclen < kDirentHeader + 1 || reclen % 8 != 0 || off + reclen > buf.size())
      throw Error(ErrorKind::Protocol, "bad dirent reclen");
    auto name = buf.subspan(off + kDirentHeader, reclen - kDirentHeader);
    auto nul = std::find(name.begin(), name.end(), uint8_t{0});
    if (nul == name.end()) throw Error(ErrorKind::Protocol, "dirent name not terminated");
    r.name.assign(name.begin(), nul);
    out.push_back(std::move(r));
    off += reclen;
  }
  return out;
}

bool StatRecord::is_dir() const { return (mode & fmode::IFMT) == fmode::IFDIR; }
bool StatRecord::is_reg() const { return (mode & fmode::IFMT) == fmode::IFREG; }

void encode_stat(const StatRecord& st, std::span<uint8_t> out) {
  Bytes b;
  b.reserve(kStatSize);
  put_u64(b, st.ino);
  put_u64(b, static_cast<uint64_t>(st.size));
  put_u32(b, st.mode);
  put_u32(b, st.nlink);
  put_u64(b, static_cast<uint64_t>(st.atime_ns));
  put_u64(b, static_cast<uint64_t>(st.mtime_ns));
  put_u64(b, static_cast<uint64_t>(st.ctime_ns));
  std::memcpy(out.data(), b.data(), std::min(out.size(), b.size()));
}

StatRecord decode_stat(std::span<const uint8_t> in) {
  if (in.size() < kStatSize) throw Error(ErrorKind::Protocol, "short stat record");
  StatRecord st;
  st.ino = get_u64(in, 0);
  st.size = static_cast<int64_t>(get_u64(in, 8));
  st.mode = get_u32(in, 16);
  st.nlink = get_u32(in, 20);
  st.atime_ns = static_cast<int64_t>(get_u64(in, 24));
  st.mtime_ns = static_cast<int64_t>(get_u64(in, 32));
  st.ctime_ns = static_cast<int64_t>(get_u64(in, 40));
  return st;
}

Bytes pack_exec_args(const std::vector<std::string>& argv, const Environ& env) {
  Bytes out;
  put_u32(out, static_cast<uint32_t>(argv.size()));
  for (const auto& a : argv) {
    put_u32(out, static_cast<uint32_t>(a.size()));
    out.insert(out.end(), a.begin(), a.end());
  }
  put_u32(out, static_cast<uint32_t>(env.size()));
  for (const auto& [k, v] : env) {
    std::string kv = k + "=" + v;
    put_u32(out, static_cast<uint32_t>(kv.size()));
    out.insert(out.end(), kv.begin(), kv.end());
  }
  return out;
}

std::optional<std::pair<std::vector<std::string>, Environ>> unpack_exec_args(std::span<const uint8_t> buf) {
  try {
    Reader r(buf);
    uint32_t argc = r.u32();
    if (argc > r.remaining() / 4) return std::nullopt;
    std::vector<std::string> argv(argc);
    for (auto& a : argv) {
      auto s = r.take(r.u32());
      a.assign(s.begin(), s.end());
    }
    Environ env;
    uint32_t envc = r.u32();
    for (uint32_t i = 0; i < envc; ++i) {
      auto s = r.take(r.u32());
      std::string kv(s.begin(), s.end());
      auto eq = kv.find('=');
      if (eq == std::string::npos) return std::nullopt;
      env[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    if (!r.done()) return std::nullopt;
    return std::make_pair(std::move(argv), std::move(env));
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace sandboxd
