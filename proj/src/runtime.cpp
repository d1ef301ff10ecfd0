#include "sandboxd/runtime.hpp"

#include <algorithm>
#include <cstring>
#include <iostream>

#include "sandboxd/error.hpp"

namespace sandboxd {

namespace {
constexpr size_t kOutFlush = 64 * 1024;
constexpr size_t kWriteChunk = 256 * 1024;
}  // namespace

Program make_program(std::string name, std::function<int(GuestContext&)> main) {
  Program p;
  p.name = std::move(name);
  p.main = std::move(main);
  return p;
}

GuestContext::GuestContext(std::shared_ptr<Worker> worker, InitMessage init)
    : worker_(std::move(worker)),
      argv_(std::move(init.argv)),
      env_(std::move(init.environ)),
      snapshot_(std::move(init.fork_snapshot)) {}

GuestContext::~GuestContext() = default;

std::string GuestContext::getenv(const std::string& key, const std::string& fallback) const {
  auto it = env_.find(key);
  return it == env_.end() ? fallback : it->second;
}

void GuestContext::check_killed() const {
  if (worker_->killed()) throw GuestKilled{};
}

// ---------------------------------------------------------------------------
// Async convention

uint32_t GuestContext::syscall_async(Trap trap, std::vector<Value> args, Continuation cont) {
  check_killed();
  uint32_t id = ids_.next();
  conts_[id] = std::move(cont);
  worker_->post(Convention::Async, encode(SyscallEnvelope{id, static_cast<uint32_t>(trap), std::move(args)}));
  return id;
}

uint32_t GuestContext::syscall_async(std::string_view name, std::vector<Value> args, Continuation cont) {
  if (const auto* info = trap_info(name)) return syscall_async(info->trap, std::move(args), std::move(cont));
  // Still goes through the kernel so the reply path is the same.
  check_killed();
  uint32_t id = ids_.next();
  conts_[id] = std::move(cont);
  worker_->post(Convention::Async, encode(SyscallEnvelope{id, 0, std::move(args)}));
  return id;
}

void GuestContext::handle(KernelMessage& msg) {
  if (auto* r = std::get_if<EncodedReply>(&msg)) {
    SyscallReply reply = decode_reply(r->frame);
    auto it = conts_.find(reply.id);
    if (it == conts_.end()) return;
    auto cont = std::move(it->second);
    conts_.erase(it);
    ids_.release(reply.id);
    CallResult res{reply.ret, reply.aux, reply.errno_, reply.payload ? std::move(*reply.payload) : Bytes{}};
    cont(res);
  } else if (auto* s = std::get_if<SignalMessage>(&msg)) {
    run_handler(s->sig);
  } else if (auto* g = std::get_if<RegionGrant>(&msg)) {
    region_ = g->region;
  }
}

void GuestContext::pump() {
  auto msg = worker_->inbox().pop();
  if (!msg) throw GuestKilled{};
  handle(*msg);
}

void GuestContext::pump_until(const std::function<bool()>& done) {
  while (!done()) pump();
}

void GuestContext::run_handler(int32_t sig) {
  auto it = handlers_.find(sig);
  if (it == handlers_.end()) return;
  auto fn = it->second;
  ++handler_depth_;
  try {
    fn(sig);
  } catch (...) {
    --handler_depth_;
    throw;
  }
  --handler_depth_;
}

void GuestContext::poll_signals() {
  while (auto msg = worker_->inbox().try_pop()) handle(*msg);
  check_killed();
}

// ---------------------------------------------------------------------------
// Sync convention

int GuestContext::attach_heap(size_t size, size_t retval_off, size_t wake_off) {
  auto r = invoke(Trap::AttachHeap, {static_cast<int64_t>(size), static_cast<int64_t>(retval_off),
                                     static_cast<int64_t>(wake_off)});
  if (r.err) return r.err;
  // The grant is queued ahead of the reply, so it has been handled already.
  if (!region_) return err::FAULT;
  conv_ = Convention::Sync;
  return 0;
}

std::pair<int64_t, int32_t> GuestContext::syscall_sync(Trap trap, const std::array<int64_t, kSyncSlots>& slots) {
  check_killed();
  if (!region_) return {-1, err::NOSYS};
  if (++seq_ == 0) seq_ = 1;
  uint32_t seq = seq_;
  worker_->post(Convention::Sync, encode_sync(SyncFrame{seq, static_cast<uint32_t>(trap), slots}));
  const TrapInfo* info = trap_info(static_cast<uint32_t>(trap));
  std::pair<int64_t, int32_t> result;
  for (;;) {
    Wake w = region_->wait();
    if (w == Wake::Killed) throw GuestKilled{};
    if (w == Wake::Complete) {
      if (region_->seq() != seq) continue;
      result = {region_->ret(), region_->errno_value()};
      break;
    }
    // The kernel has already dropped an interrupted call.
    if (w == Wake::Signal && info && info->interruptible) return {-1, err::INTR};
  }
  return result;
}

CallResult GuestContext::invoke(Trap trap, std::vector<Value> args) {
  const TrapInfo& info = trap_info(trap);
  if (conv_ == Convention::Async || !region_) {
    CallResult res;
    bool got = false;
    syscall_async(trap, std::move(args), [&](const CallResult& r) {
      res = r;
      got = true;
    });
    pump_until([&] { return got; });
    return res;
  }

  std::array<int64_t, kSyncSlots> slots{};
  if (info.async_only) {
    auto [ret, e] = syscall_sync(trap, slots);
    poll_signals();
    return {ret, 0, e, {}};
  }
  auto mem = region_->bytes();
  size_t cursor = kScratchOff;
  auto reserve = [&](size_t n) -> std::optional<size_t> {
    size_t off = (cursor + 7) & ~size_t{7};
    if (off > mem.size() || n > mem.size() - off) return std::nullopt;
    cursor = off + n;
    return off;
  };
  std::optional<size_t> out_off;
  size_t slot = 0;
  for (size_t a = 0; a < info.schema.size() && a < args.size(); ++a) {
    const Value& v = args[a];
    switch (info.schema[a]) {
      case ArgKind::Int:
        slots[slot++] = std::get<int64_t>(v);
        break;
      case ArgKind::Str:
      case ArgKind::In: {
        std::span<const uint8_t> b;
        if (const auto* s = std::get_if<std::string>(&v))
          b = std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s->data()), s->size());
        else
          b = std::get<Bytes>(v);
        auto off = reserve(b.size());
        if (!off) return {-1, 0, err::FAULT, {}};
        std::memcpy(mem.data() + *off, b.data(), b.size());
        slots[slot++] = static_cast<int64_t>(*off);
        slots[slot++] = static_cast<int64_t>(b.size());
        break;
      }
      case ArgKind::IntList: {
        const auto& list = std::get<std::vector<int64_t>>(v);
        auto off = reserve(list.size() * 8);
        if (!off) return {-1, 0, err::FAULT, {}};
        Bytes enc;
        for (auto x : list) put_u64(enc, static_cast<uint64_t>(x));
        std::memcpy(mem.data() + *off, enc.data(), enc.size());
        slots[slot++] = static_cast<int64_t>(*off);
        slots[slot++] = static_cast<int64_t>(list.size());
        break;
      }
      case ArgKind::Out: {
        size_t cap = static_cast<size_t>(std::max<int64_t>(std::get<int64_t>(v), 0));
        size_t start = (cursor + 7) & ~size_t{7};
        if (start < mem.size()) cap = std::min(cap, mem.size() - start);
        auto off = reserve(cap);
        if (!off) return {-1, 0, err::FAULT, {}};
        out_off = *off;
        slots[slot++] = static_cast<int64_t>(*off);
        slots[slot++] = static_cast<int64_t>(cap);
        break;
      }
    }
  }
  auto [ret, e] = syscall_sync(trap, slots);
  CallResult res{ret, 0, e, {}};
  if (out_off && e == 0 && ret >= 0) {
    size_t n = info.out_fixed ? info.out_fixed : static_cast<size_t>(ret);
    auto b = mem.subspan(*out_off, std::min(n, mem.size() - *out_off));
    res.payload.assign(b.begin(), b.end());
    if (trap == Trap::Pipe2 && res.payload.size() >= 8) res.aux = get_u32(res.payload, 4);
  }
  // Handlers may issue calls of their own, so they run only once the scratch
  // area has been copied out.
  poll_signals();
  return res;
}

// ---------------------------------------------------------------------------
// Signals, exit, stdio

int GuestContext::on_signal(int32_t sig, std::function<void(int32_t)> fn) {
  if (sig == sig::KILL || !sig::supported(sig)) return err::INVAL;
  handlers_[sig] = std::move(fn);
  auto r = simple(Trap::Sigaction, {int64_t{sig}, static_cast<int64_t>(Disposition::Handler)});
  if (!r) handlers_.erase(sig);
  return r.e;
}

int GuestContext::set_disposition(int32_t sig, Disposition d) {
  if (sig == sig::KILL || !sig::supported(sig)) return err::INVAL;
  auto r = simple(Trap::Sigaction, {int64_t{sig}, static_cast<int64_t>(d)});
  if (r && d != Disposition::Handler) handlers_.erase(sig);
  return r.e;
}

void GuestContext::exit(int code) {
  try {
    flush();
  } catch (const GuestKilled&) {
    throw;
  }
  check_killed();
  // No reply comes back for exit; the kernel tears the worker down.
  if (conv_ == Convention::Sync) {
    if (++seq_ == 0) seq_ = 1;
    std::vector<Value> args(kSyncSlots, Value{int64_t{0}});
    args[0] = int64_t{code};
    worker_->post(Convention::Sync, encode(SyscallEnvelope{seq_, static_cast<uint32_t>(Trap::Exit), std::move(args)}));
  } else {
    worker_->post(Convention::Async,
                  encode(SyscallEnvelope{ids_.next(), static_cast<uint32_t>(Trap::Exit), {int64_t{code}}}));
  }
  throw GuestExit{code};
}

void GuestContext::out(std::string_view s) {
  out_buf_.append(s);
  if (out_buf_.size() >= kOutFlush) flush();
}

void GuestContext::err(std::string_view s) {
  flush();
  write_all(2, s);
}

void GuestContext::flush() {
  if (out_buf_.empty()) return;
  std::string data = std::move(out_buf_);
  out_buf_.clear();
  write_all(1, data);
}

void GuestContext::sleep_for(std::chrono::milliseconds d) {
  auto deadline = std::chrono::steady_clock::now() + d;
  for (;;) {
    check_killed();
    auto now = std::chrono::steady_clock::now();
    if (now >= deadline) return;
    auto msg = worker_->inbox().pop_for(deadline - now);
    if (msg) {
      handle(*msg);
    } else if (worker_->inbox().closed()) {
      throw GuestKilled{};
    }
  }
}

// ---------------------------------------------------------------------------
// Typed calls

Ret GuestContext::simple(Trap trap, std::vector<Value> args) {
  auto r = invoke(trap, std::move(args));
  return {r.ret, r.err};
}

Ret GuestContext::open(const std::string& path, int64_t flags, int64_t mode) {
  return simple(Trap::Open, {path, flags, mode});
}

Ret GuestContext::close(int fd) { return simple(Trap::Close, {int64_t{fd}}); }

Ret GuestContext::pread(int fd, Bytes& out, size_t cap, int64_t off) {
  auto r = invoke(Trap::Pread, {int64_t{fd}, static_cast<int64_t>(cap), off});
  out = std::move(r.payload);
  if (r.err) out.clear();
  return {r.ret, r.err};
}

Ret GuestContext::pwrite(int fd, std::span<const uint8_t> data, int64_t off) {
  return simple(Trap::Pwrite, {int64_t{fd}, Bytes(data.begin(), data.end()), off});
}

Ret GuestContext::write_all(int fd, std::string_view data) {
  auto bytes = std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(data.data()), data.size());
  size_t done = 0;
  while (done < bytes.size()) {
    auto chunk = bytes.subspan(done, std::min(kWriteChunk, bytes.size() - done));
    auto r = pwrite(fd, chunk, -1);
    if (r.e == err::INTR) continue;
    if (!r) return r;
    done += static_cast<size_t>(r.v);
  }
  return {static_cast<int64_t>(done), 0};
}

Ret GuestContext::llseek(int fd, int64_t off, int whence) {
  return simple(Trap::Llseek, {int64_t{fd}, off, int64_t{whence}});
}

namespace {
Ret stat_into(CallResult r, StatRecord& st) {
  if (r.err == 0) st = decode_stat(r.payload);
  return {r.ret, r.err};
}
}  // namespace

Ret GuestContext::stat(const std::string& path, StatRecord& st) {
  return stat_into(invoke(Trap::Stat, {path, static_cast<int64_t>(kStatSize)}), st);
}

Ret GuestContext::lstat(const std::string& path, StatRecord& st) {
  return stat_into(invoke(Trap::Lstat, {path, static_cast<int64_t>(kStatSize)}), st);
}

Ret GuestContext::fstat(int fd, StatRecord& st) {
  return stat_into(invoke(Trap::Fstat, {int64_t{fd}, static_cast<int64_t>(kStatSize)}), st);
}

Ret GuestContext::access(const std::string& path, int64_t mode) { return simple(Trap::Access, {path, mode}); }
Ret GuestContext::mkdir(const std::string& path, int64_t mode) { return simple(Trap::Mkdir, {path, mode}); }
Ret GuestContext::rmdir(const std::string& path) { return simple(Trap::Rmdir, {path}); }
Ret GuestContext::unlink(const std::string& path) { return simple(Trap::Unlink, {path}); }

Ret GuestContext::utimes(const std::string& path, int64_t atime_ns, int64_t mtime_ns) {
  return simple(Trap::Utimes, {path, atime_ns, mtime_ns});
}

Ret GuestContext::readlink(const std::string& path, std::string& target) {
  auto r = invoke(Trap::Readlink, {path, int64_t{4096}});
  if (r.err == 0) target = to_string(r.payload);
  return {r.ret, r.err};
}

Ret GuestContext::chdir(const std::string& path) { return simple(Trap::Chdir, {path}); }

Ret GuestContext::getcwd(std::string& cwd) {
  auto r = invoke(Trap::Getcwd, {int64_t{4096}});
  if (r.err == 0) cwd = to_string(r.payload);
  return {r.ret, r.err};
}

Ret GuestContext::getpid() { return simple(Trap::Getpid, {}); }
Ret GuestContext::getppid() { return simple(Trap::Getppid, {}); }

Ret GuestContext::getdents(int fd, std::vector<DirentRecord>& out, size_t cap) {
  auto r = invoke(Trap::Getdents, {int64_t{fd}, static_cast<int64_t>(cap)});
  out.clear();
  if (r.err == 0) out = decode_dirents(r.payload);
  return {r.ret, r.err};
}

Ret GuestContext::readdir(int fd, std::vector<DirentRecord>& out) {
  auto r = invoke(Trap::Readdir, {int64_t{fd}, int64_t{512}});
  out.clear();
  if (r.err == 0) out = decode_dirents(r.payload);
  return {r.ret, r.err};
}

Ret GuestContext::pipe(std::array<int, 2>& fds) {
  auto r = invoke(Trap::Pipe2, {int64_t{8}, int64_t{0}});
  if (r.err == 0 && r.payload.size() >= 8) {
    fds[0] = static_cast<int>(get_u32(r.payload, 0));
    fds[1] = static_cast<int>(get_u32(r.payload, 4));
  }
  return {r.ret, r.err};
}

Ret GuestContext::spawn(const std::string& path, const std::vector<std::string>& argv, const Environ& env,
                        const std::vector<std::pair<int, int>>& grants) {
  std::vector<int64_t> g;
  for (auto [child, parent] : grants) {
    g.push_back(child);
    g.push_back(parent);
  }
  return simple(Trap::Spawn, {path, pack_exec_args(argv, env), std::move(g)});
}

Ret GuestContext::wait4(int64_t pid, int& status, int64_t options) {
  auto r = invoke(Trap::Wait4, {pid, options, int64_t{4}});
  if (r.err == 0 && r.payload.size() >= 4) status = static_cast<int>(get_u32(r.payload, 0));
  return {r.ret, r.err};
}

Ret GuestContext::kill(int64_t pid, int32_t sig) { return simple(Trap::Kill, {pid, int64_t{sig}}); }
Ret GuestContext::socket() { return simple(Trap::Socket, {net::INET, net::STREAM, int64_t{0}}); }
Ret GuestContext::bind(int fd, int64_t port) { return simple(Trap::Bind, {int64_t{fd}, port}); }
Ret GuestContext::listen(int fd, int64_t backlog) { return simple(Trap::Listen, {int64_t{fd}, backlog}); }
Ret GuestContext::accept(int fd) { return simple(Trap::Accept, {int64_t{fd}}); }
Ret GuestContext::connect(int fd, int64_t port) { return simple(Trap::Connect, {int64_t{fd}, port}); }
Ret GuestContext::getsockname(int fd) { return simple(Trap::Getsockname, {int64_t{fd}}); }

Ret GuestContext::fork(const Bytes& heap, uint64_t resume_pc) {
  return simple(Trap::Fork, {heap, static_cast<int64_t>(resume_pc)});
}

Ret GuestContext::read_file(const std::string& path, std::string& content) {
  auto fd = open(path, oflag::RDONLY);
  if (!fd) return fd;
  content.clear();
  Bytes buf;
  for (;;) {
    auto r = read(static_cast<int>(fd.v), buf, 64 * 1024);
    if (r.e == err::INTR) continue;
    if (!r) {
      close(static_cast<int>(fd.v));
      return r;
    }
    if (r.v == 0) break;
    content.append(buf.begin(), buf.end());
  }
  close(static_cast<int>(fd.v));
  return {static_cast<int64_t>(content.size()), 0};
}

Ret GuestContext::list_dir(const std::string& path, std::vector<DirentRecord>& entries) {
  auto fd = open(path, oflag::RDONLY | oflag::DIRECTORY);
  if (!fd) return fd;
  entries.clear();
  std::vector<DirentRecord> batch;
  for (;;) {
    auto r = getdents(static_cast<int>(fd.v), batch);
    if (!r) {
      close(static_cast<int>(fd.v));
      return r;
    }
    if (batch.empty()) break;
    entries.insert(entries.end(), batch.begin(), batch.end());
  }
  close(static_cast<int>(fd.v));
  return {static_cast<int64_t>(entries.size()), 0};
}

// ---------------------------------------------------------------------------
// Guest thread body

void run_guest(const std::shared_ptr<Worker>& w, Program program) {
  try {
    std::optional<KernelMessage> first;
    // Main is deferred until the init message arrives.
    while ((first = w->inbox().pop()) && !std::holds_alternative<InitMessage>(*first)) {
    }
    if (first) {
      GuestContext ctx(w, std::move(std::get<InitMessage>(*first)));
      try {
        try {
          if (ctx.getenv("SANDBOXD_MODE") == "sync" && !ctx.fork_snapshot()) {
            if (int e = ctx.attach_heap()) {
              ctx.err(std::string(program.name) + ": attach_heap: " + err::message(e) + "\n");
              ctx.exit(70);
            }
          }
          int code;
          if (ctx.fork_snapshot()) {
            if (!program.snapshotable()) throw Error(ErrorKind::NotSnapshotable, program.name);
            code = program.resume(ctx, *ctx.fork_snapshot());
          } else {
            code = program.main(ctx);
          }
          ctx.exit(code);
        } catch (const std::exception& e) {
          ctx.err(program.name + ": " + e.what() + "\n");
          ctx.exit(70);
        }
      } catch (const GuestExit&) {
      }
    }
  } catch (const GuestKilled&) {
  } catch (const GuestExit&) {
  } catch (const std::exception& e) {
    std::cerr << "sandboxd: guest " << program.name << ": " << e.what() << "\n";
  }
  w->finished_.store(true, std::memory_order_release);
}

}  // namespace sandboxd
