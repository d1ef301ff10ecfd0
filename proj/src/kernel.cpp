#include "sandboxd/kernel.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <iostream>

namespace sandboxd {

namespace {

constexpr size_t kMaxAsyncOut = size_t{64} << 20;
constexpr size_t kMaxHeap = size_t{256} << 20;
constexpr std::string_view kNativeMagic = "\x7fSBX ";

std::string native_stub(const std::string& program) { return std::string(kNativeMagic) + program + "\n"; }

std::optional<std::string> native_name(std::span<const uint8_t> content) {
  std::string_view s(reinterpret_cast<const char*>(content.data()), content.size());
  if (s.substr(0, kNativeMagic.size()) != kNativeMagic) return std::nullopt;
  s.remove_prefix(kNativeMagic.size());
  auto nl = s.find('\n');
  if (nl == std::string_view::npos || nl == 0) return std::nullopt;
  return std::string(s.substr(0, nl));
}

std::string trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return std::string(s);
}

}  // namespace

KernelConfig KernelConfig::from_env() {
  KernelConfig c;
  if (const char* cap = std::getenv("SANDBOXD_PIPE_CAP")) {
    char* end = nullptr;
    unsigned long long v = std::strtoull(cap, &end, 10);
    if (end != cap && *end == '\0' && v > 0) c.pipe_capacity = static_cast<size_t>(v);
  }
  if (const char* mode = std::getenv("SANDBOXD_MODE"); mode && std::string_view(mode) == "sync")
    c.mode = Convention::Sync;
  return c;
}

// ---------------------------------------------------------------------------
// Task and call records

struct Kernel::Task {
  uint32_t pid = 0;
  uint32_t ppid = 0;
  uint32_t session = 0;
  bool zombie = false;
  int32_t status = 0;
  WorkerHandle worker;
  std::string cwd = "/";
  FdTable fds;
  std::array<Disposition, 32> handlers{};
  Convention conv = Convention::Async;
  std::shared_ptr<SharedRegion> region;
  std::string program;
  bool snapshotable = false;
  std::vector<std::string> argv;
  Environ env;
  std::set<uint32_t> children;
  std::map<Call*, std::pair<CallPtr, std::function<size_t()>>> parked;
  struct WaitWaiter {
    CallPtr call;
    int64_t pid;
  };
  std::deque<WaitWaiter> waiters;
  std::function<void(uint32_t, int)> on_exit;
};

// One syscall in flight. Argument accessors hide the convention: async
// arguments are owned copies, sync arguments are views into the caller's
// SharedRegion.
struct Kernel::Call {
  uint32_t pid = 0;
  uint32_t id = 0;
  const TrapInfo* info = nullptr;
  Convention conv = Convention::Async;
  WorkerHandle worker;
  std::shared_ptr<SharedRegion> region;
  std::vector<Value> args;
  std::array<int64_t, kSyncSlots> slots{};
  Bytes out;
  bool done = false;

  int64_t slot(size_t arg, size_t k = 0) const { return slots[sync_slot_of(*info, arg) + k]; }

  // Checks arity, value kinds and region bounds. Returns an errno.
  int validate() {
    const auto& schema = info->schema;
    if (conv == Convention::Async) {
      if (args.size() != schema.size()) return err::INVAL;
      for (size_t a = 0; a < schema.size(); ++a) {
        const auto& v = args[a];
        switch (schema[a]) {
          case ArgKind::Int:
            if (!std::holds_alternative<int64_t>(v)) return err::INVAL;
            break;
          case ArgKind::Str:
            if (!std::holds_alternative<std::string>(v)) return err::INVAL;
            break;
          case ArgKind::In:
            if (!std::holds_alternative<Bytes>(v)) return err::INVAL;
            break;
          case ArgKind::IntList:
            if (!std::holds_alternative<std::vector<int64_t>>(v)) return err::INVAL;
            break;
          case ArgKind::Out: {
            const auto* cap = std::get_if<int64_t>(&v);
            if (cap == nullptr || *cap < 0) return err::INVAL;
            out.assign(std::min<size_t>(static_cast<size_t>(*cap), kMaxAsyncOut), 0);
            break;
          }
        }
      }
      return 0;
    }
    for (size_t a = 0; a < schema.size(); ++a) {
      if (schema[a] == ArgKind::Int) continue;
      int64_t off = slot(a, 0), len = slot(a, 1);
      if (off < 0 || len < 0) return err::FAULT;
      uint64_t bytes = static_cast<uint64_t>(len) * (schema[a] == ArgKind::IntList ? 8 : 1);
      if (!region->range_ok(static_cast<uint64_t>(off), bytes)) return err::FAULT;
    }
    return 0;
  }

  int64_t i(size_t a) const {
    return conv == Convention::Async ? std::get<int64_t>(args[a]) : slot(a);
  }
  std::string str(size_t a) const {
    if (conv == Convention::Async) return std::get<std::string>(args[a]);
    auto b = region->bytes().subspan(slot(a, 0), slot(a, 1));
    return std::string(b.begin(), b.end());
  }
  std::span<const uint8_t> in(size_t a) const {
    if (conv == Convention::Async) return std::get<Bytes>(args[a]);
    return region->bytes().subspan(slot(a, 0), slot(a, 1));
  }
  std::vector<int64_t> ints(size_t a) const {
    if (conv == Convention::Async) return std::get<std::vector<int64_t>>(args[a]);
    auto b = region->bytes().subspan(slot(a, 0), slot(a, 1) * 8);
    std::vector<int64_t> v(slot(a, 1));
    for (size_t k = 0; k < v.size(); ++k) v[k] = static_cast<int64_t>(get_u64(b, k * 8));
    return v;
  }
  std::span<uint8_t> outbuf(size_t a) {
    if (conv == Convention::Async) return out;
    return region->bytes().subspan(slot(a, 0), slot(a, 1));
  }
  bool has_out() const {
    if (info == nullptr) return false;
    return std::find(info->schema.begin(), info->schema.end(), ArgKind::Out) != info->schema.end();
  }
};

// ---------------------------------------------------------------------------
// Lifecycle

Kernel::Kernel(const ProgramRegistry& registry, KernelConfig config)
    : registry_(registry), config_(std::move(config)), sockets_(config_.pipe_capacity) {}

Kernel::~Kernel() { shutdown(); }

bool Kernel::post(std::function<void()> fn) { return events_.push(std::move(fn)); }

void Kernel::loop() {
  loop_id_.store(std::this_thread::get_id());
  while (auto fn = events_.pop()) {
    try {
      (*fn)();
    } catch (const std::exception& e) {
      std::cerr << "sandboxd: kernel event failed: " << e.what() << "\n";
    }
  }
}

void Kernel::boot(std::function<void(std::optional<Error>)> ready) {
  if (booted_.exchange(true)) throw std::logic_error("kernel already booted");
  loop_thread_ = std::thread([this] { loop(); });
  post([this, ready = std::move(ready)] {
    try {
      init_fs();
    } catch (const Error& e) {
      if (ready) ready(e);
      return;
    } catch (const std::exception& e) {
      if (ready) ready(Error(ErrorKind::FsInitError, e.what()));
      return;
    }
    if (ready) ready(std::nullopt);
  });
}

void Kernel::boot_sync() {
  std::promise<std::optional<Error>> p;
  auto f = p.get_future();
  boot([&p](std::optional<Error> e) { p.set_value(std::move(e)); });
  if (auto e = f.get()) throw *e;
}

void Kernel::shutdown() {
  if (!loop_thread_.joinable()) return;
  call([this] {
    std::vector<uint32_t> pids;
    for (auto& [pid, t] : tasks_)
      if (!t->zombie) pids.push_back(pid);
    for (auto pid : pids)
      if (Task* t = find(pid); t && !t->zombie) finish_task(*t, wait::signaled_status(sig::KILL));
    auto refs = std::move(host_refs_);
    host_refs_.clear();
    for (auto& [obj, ref] : refs)
      for (uint32_t k = 0; k < ref.second; ++k) obj->release();
  });
  events_.close();
  loop_thread_.join();
  for (auto& [_, t] : tasks_)
    if (t->worker) graveyard_.push_back(t->worker);
  tasks_.clear();
  for (auto& w : graveyard_) w->join();
  graveyard_.clear();
}

void Kernel::init_fs() {
  for (const char* d : {"/bin", "/usr/bin", "/tmp", "/home", "/etc"}) vfs_.mkdir_p(d);
  vfs_.make_sink("/dev/null");
  if (!config_.fs.underlay.empty()) vfs_.mount_underlay(make_provider(config_.fs.underlay));
  install_natives();
  for (const auto& [host, guest] : config_.fs.mounts) vfs_.copy_in(host, guest);
}

void Kernel::install_natives() {
  for (const auto& name : registry_.names()) vfs_.write_file("/usr/bin/" + name, to_bytes(native_stub(name)), 0755);
  for (const auto& [path, program] : registry_.interpreters()) vfs_.write_file(path, to_bytes(native_stub(program)), 0755);
}

void Kernel::post_from_guest(uint64_t worker_id, Convention conv, Bytes frame) {
  events_.push([this, worker_id, conv, f = std::move(frame)] { on_frame(worker_id, conv, f); });
}

Kernel::Task* Kernel::find(uint32_t pid) {
  auto it = tasks_.find(pid);
  return it == tasks_.end() ? nullptr : it->second.get();
}

Kernel::Task* Kernel::find_worker(uint64_t worker_id) {
  auto it = worker_pid_.find(worker_id);
  return it == worker_pid_.end() ? nullptr : find(it->second);
}

uint32_t Kernel::alloc_pid() {
  for (;;) {
    uint32_t p = next_pid_++;
    if (next_pid_ > 0x7fffffff) next_pid_ = 1;
    if (!tasks_.count(p)) return p;
  }
}

// ---------------------------------------------------------------------------
// Calls

void Kernel::on_frame(uint64_t worker_id, Convention conv, const Bytes& frame) {
  Task* t = find_worker(worker_id);
  if (t == nullptr || t->zombie) return;
  if (conv == Convention::Sync && t->conv == Convention::Sync && t->region) {
    if (auto f = decode_sync(frame)) return on_sync_frame(*t, *f);
  }
  SyscallEnvelope env;
  try {
    env = decode_envelope(frame);
  } catch (const Error& e) {
    std::cerr << "sandboxd: pid " << t->pid << ": " << e.what() << "\n";
    return;
  }
  ++counters_.envelopes;
  auto c = std::make_shared<Call>();
  c->pid = t->pid;
  c->id = env.id;
  c->conv = conv;
  c->worker = t->worker;
  c->info = trap_info(env.trap);
  if (conv == Convention::Sync) {
    if (t->conv != Convention::Sync || !t->region) {
      // A sync frame with nowhere to put the answer: the guest would wait
      // forever, so treat it as fatal.
      c->done = true;
      ++counters_.discarded;
      finish_task(*t, wait::signaled_status(sig::KILL));
      return;
    }
    c->region = t->region;
    if (env.args.size() != kSyncSlots) return fail(c, err::INVAL);
    for (size_t k = 0; k < kSyncSlots; ++k) {
      const auto* v = std::get_if<int64_t>(&env.args[k]);
      if (v == nullptr) return fail(c, err::INVAL);
      c->slots[k] = *v;
    }
  } else {
    c->args = std::move(env.args);
  }
  if (c->info == nullptr) return fail(c, err::NOSYS);
  if (conv == Convention::Sync && c->info->async_only) return fail(c, err::NOSYS);
  if (int e = c->validate()) return fail(c, e);
  dispatch(*t, c);
}

// Same checks as on_frame without materialising the argument Values.
void Kernel::on_sync_frame(Task& t, const SyncFrame& f) {
  ++counters_.envelopes;
  auto c = std::make_shared<Call>();
  c->pid = t.pid;
  c->id = f.id;
  c->conv = Convention::Sync;
  c->worker = t.worker;
  c->info = trap_info(f.trap);
  c->region = t.region;
  c->slots = f.slots;
  if (c->info == nullptr || c->info->async_only) return fail(c, err::NOSYS);
  if (int e = c->validate()) return fail(c, e);
  dispatch(t, c);
}

void Kernel::reply(const CallPtr& c, int64_t ret, int64_t aux, int32_t e) {
  if (c->done) return;
  c->done = true;
  Task* t = find(c->pid);
  if (t && t->parked.erase(c.get())) --counters_.parked;
  if (t == nullptr || t->zombie || t->worker != c->worker) {
    ++counters_.discarded;
    return;
  }
  ++counters_.replies;
  if (c->conv == Convention::Sync) {
    c->region->complete(c->id, ret, e);
    return;
  }
  SyscallReply r{c->id, ret, aux, e, std::nullopt};
  if (c->has_out() && e == 0 && ret >= 0) {
    size_t n = c->info->out_fixed ? c->info->out_fixed : static_cast<size_t>(ret);
    n = std::min(n, c->out.size());
    c->out.resize(n);
    r.payload = std::move(c->out);
  }
  try {
    send_to_guest(*c->worker, EncodedReply{encode(r)});
  } catch (const Error&) {
  }
}

void Kernel::park(Task& t, const CallPtr& c, std::function<size_t()> cancel) {
  if (c->done) return;
  t.parked[c.get()] = {c, std::move(cancel)};
  ++counters_.parked;
}

void Kernel::unpark(Task& t, const CallPtr& c) {
  if (t.parked.erase(c.get())) --counters_.parked;
}

void Kernel::dispatch(Task& t, const CallPtr& c) {
  auto fd_obj = [&](int64_t fd) -> FdObjectPtr {
    if (fd < 0 || fd >= FdTable::kMaxFds) return nullptr;
    return t.fds.get(static_cast<int>(fd));
  };
  auto socket_at = [&](int64_t fd, int& e) -> SocketPtr {
    auto obj = fd_obj(fd);
    if (!obj) {
      e = err::BADF;
      return nullptr;
    }
    if (obj->kind() != FdKind::Socket) {
      e = err::NOTSOCK;
      return nullptr;
    }
    return std::static_pointer_cast<SocketEndpoint>(obj);
  };

  switch (c->info->trap) {
    case Trap::Exit:
      c->done = true;
      ++counters_.discarded;
      finish_task(t, wait::exited_status(static_cast<int32_t>(c->i(0))));
      return;
    case Trap::Fork:
      return sys_fork(t, c);
    case Trap::Spawn:
      return sys_spawn(t, c);
    case Trap::Pipe2: {
      auto out = c->outbuf(0);
      if (out.size() < 8) return fail(c, err::INVAL);
      auto [r, w] = make_pipe(config_.pipe_capacity);
      auto rfd = t.fds.install(r);
      if (!rfd) return fail(c, rfd.error());
      auto wfd = t.fds.install(w);
      if (!wfd) {
        t.fds.close(*rfd);
        return fail(c, wfd.error());
      }
      Bytes b;
      put_u32(b, static_cast<uint32_t>(*rfd));
      put_u32(b, static_cast<uint32_t>(*wfd));
      std::copy(b.begin(), b.end(), out.begin());
      return reply(c, *rfd, *wfd);
    }
    case Trap::Wait4:
      return sys_wait4(t, c);
    case Trap::Getpid:
      return reply(c, t.pid);
    case Trap::Getppid:
      return reply(c, t.ppid);
    case Trap::Getcwd: {
      auto out = c->outbuf(0);
      if (out.size() < t.cwd.size()) return fail(c, err::RANGE);
      std::copy(t.cwd.begin(), t.cwd.end(), out.begin());
      return reply(c, static_cast<int64_t>(t.cwd.size()));
    }
    case Trap::Chdir: {
      auto p = resolve_path(t.cwd, c->str(0));
      if (!p) return fail(c, p.error());
      auto st = vfs_.stat(*p);
      if (!st) return fail(c, st.error());
      if (!st->is_dir()) return fail(c, err::NOTDIR);
      t.cwd = *p;
      return reply(c, 0);
    }
    case Trap::Socket: {
      if (c->i(0) != net::INET) return fail(c, err::AFNOSUPPORT);
      if (c->i(1) != net::STREAM) return fail(c, err::OPNOTSUPP);
      auto fd = t.fds.install(sockets_.create());
      if (!fd) return fail(c, fd.error());
      return reply(c, *fd);
    }
    case Trap::Bind: {
      int e = 0;
      auto ep = socket_at(c->i(0), e);
      if (!ep) return fail(c, e);
      int64_t port = c->i(1);
      if (port < 0 || port > 65535) return fail(c, err::INVAL);
      e = sockets_.bind(*ep, static_cast<uint16_t>(port));
      return e ? fail(c, e) : reply(c, 0);
    }
    case Trap::Getsockname: {
      int e = 0;
      auto ep = socket_at(c->i(0), e);
      if (!ep) return fail(c, e);
      if (ep->state() == SocketEndpoint::State::Fresh || ep->port() == 0) return fail(c, err::INVAL);
      return reply(c, ep->port());
    }
    case Trap::Listen: {
      int e = 0;
      auto ep = socket_at(c->i(0), e);
      if (!ep) return fail(c, e);
      e = sockets_.listen(*ep, c->i(1));
      return e ? fail(c, e) : reply(c, 0);
    }
    case Trap::Accept:
      return sys_accept(t, c);
    case Trap::Connect:
      return sys_connect(t, c);
    case Trap::Readdir:
      return sys_dirents(t, c, 1);
    case Trap::Getdents:
      return sys_dirents(t, c, SIZE_MAX);
    case Trap::Open: {
      auto p = resolve_path(t.cwd, c->str(0));
      if (!p) return fail(c, p.error());
      auto obj = vfs_.open(*p, c->i(1), static_cast<uint32_t>(c->i(2)) & 07777);
      if (!obj) return fail(c, obj.error());
      auto fd = t.fds.install(*obj);
      if (!fd) return fail(c, fd.error());
      return reply(c, *fd);
    }
    case Trap::Close: {
      int64_t fd = c->i(0);
      if (fd < 0 || fd >= FdTable::kMaxFds) return fail(c, err::BADF);
      int e = t.fds.close(static_cast<int>(fd));
      return e ? fail(c, e) : reply(c, 0);
    }
    case Trap::Llseek: {
      auto obj = fd_obj(c->i(0));
      if (!obj) return fail(c, err::BADF);
      Result<int64_t> r = Result<int64_t>::fail(err::SPIPE);
      if (obj->kind() == FdKind::File)
        r = static_cast<FileHandle&>(*obj).llseek(c->i(1), static_cast<int>(c->i(2)));
      else if (obj->kind() == FdKind::Dir)
        r = static_cast<DirHandle&>(*obj).llseek(c->i(1), static_cast<int>(c->i(2)));
      return r ? reply(c, *r) : fail(c, r.error());
    }
    case Trap::Pread:
      return sys_pread(t, c);
    case Trap::Pwrite:
      return sys_pwrite(t, c);
    case Trap::Fstat: {
      auto out = c->outbuf(1);
      if (out.size() < kStatSize) return fail(c, err::INVAL);
      auto obj = fd_obj(c->i(0));
      if (!obj) return fail(c, err::BADF);
      StatRecord st;
      switch (obj->kind()) {
        case FdKind::File:
          st = static_cast<FileHandle&>(*obj).stat();
          break;
        case FdKind::Dir:
          st = static_cast<DirHandle&>(*obj).stat();
          break;
        case FdKind::PipeRead:
        case FdKind::PipeWrite:
          st.mode = fmode::IFIFO | 0600;
          break;
        case FdKind::Socket:
          st.mode = fmode::IFSOCK | 0600;
          break;
      }
      encode_stat(st, out);
      return reply(c, 0);
    }
    case Trap::Kill: {
      int64_t pid = c->i(0), s = c->i(1);
      if (pid <= 0 || pid > 0x7fffffff) return fail(c, err::INVAL);
      if (s < 0 || (s != 0 && !sig::supported(static_cast<int32_t>(s)))) return fail(c, err::INVAL);
      Task* target = find(static_cast<uint32_t>(pid));
      if (target == nullptr) return fail(c, err::SRCH);
      if (s == 0 || target->zombie) return reply(c, 0);
      // May end the caller itself; reply() copes with that.
      deliver_signal(*target, static_cast<int32_t>(s));
      return reply(c, 0);
    }
    case Trap::Sigaction: {
      int64_t s = c->i(0), d = c->i(1);
      if (s == sig::KILL || !sig::supported(static_cast<int32_t>(s))) return fail(c, err::INVAL);
      if (d < 0 || d > static_cast<int64_t>(Disposition::Handler)) return fail(c, err::INVAL);
      auto prev = t.handlers[s];
      t.handlers[s] = static_cast<Disposition>(d);
      return reply(c, static_cast<int64_t>(prev));
    }
    case Trap::AttachHeap:
      return sys_attach_heap(t, c);
    case Trap::Rmdir:
    case Trap::Mkdir:
    case Trap::Unlink:
    case Trap::Access:
    case Trap::Lstat:
    case Trap::Stat:
    case Trap::Readlink:
    case Trap::Utimes:
      return sys_path(t, c);
  }
  fail(c, err::NOSYS);
}

void Kernel::sys_path(Task& t, const CallPtr& c) {
  auto p = resolve_path(t.cwd, c->str(0));
  if (!p) return fail(c, p.error());
  const std::string& path = *p;
  int e = 0;
  switch (c->info->trap) {
    case Trap::Rmdir:
      e = vfs_.rmdir(path);
      break;
    case Trap::Mkdir:
      e = vfs_.mkdir(path, static_cast<uint32_t>(c->i(1)) & 07777);
      break;
    case Trap::Unlink:
      e = vfs_.unlink(path);
      break;
    case Trap::Access:
      e = vfs_.access(path, c->i(1));
      break;
    case Trap::Utimes:
      e = vfs_.utimes(path, c->i(1), c->i(2));
      break;
    case Trap::Stat:
    case Trap::Lstat: {
      auto out = c->outbuf(1);
      if (out.size() < kStatSize) return fail(c, err::INVAL);
      auto st = vfs_.stat(path);
      if (!st) return fail(c, st.error());
      encode_stat(*st, out);
      break;
    }
    case Trap::Readlink: {
      auto r = vfs_.readlink(path);
      if (!r) return fail(c, r.error());
      auto out = c->outbuf(1);
      size_t n = std::min(out.size(), r->size());
      std::copy_n(r->begin(), n, out.begin());
      return reply(c, static_cast<int64_t>(n));
    }
    default:
      e = err::NOSYS;
  }
  e ? fail(c, e) : reply(c, 0);
}

void Kernel::sys_dirents(Task& t, const CallPtr& c, size_t max_entries) {
  int64_t fd = c->i(0);
  auto obj = fd >= 0 && fd < FdTable::kMaxFds ? t.fds.get(static_cast<int>(fd)) : nullptr;
  if (!obj) return fail(c, err::BADF);
  if (obj->kind() != FdKind::Dir) return fail(c, err::NOTDIR);
  auto out = c->outbuf(1);
  auto r = static_cast<DirHandle&>(*obj).getdents(out.size(), max_entries);
  if (!r) return fail(c, r.error());
  std::copy(r->begin(), r->end(), out.begin());
  reply(c, static_cast<int64_t>(r->size()));
}

void Kernel::sys_pread(Task& t, const CallPtr& c) {
  int64_t fd = c->i(0), off = c->i(2);
  auto obj = fd >= 0 && fd < FdTable::kMaxFds ? t.fds.get(static_cast<int>(fd)) : nullptr;
  if (!obj) return fail(c, err::BADF);
  if (off < -1) return fail(c, err::INVAL);
  auto out = c->outbuf(1);
  Pipe* pipe = nullptr;
  PipePtr keep;
  switch (obj->kind()) {
    case FdKind::File: {
      auto r = static_cast<FileHandle&>(*obj).pread(out, off);
      return r ? reply(c, static_cast<int64_t>(*r)) : fail(c, r.error());
    }
    case FdKind::Dir:
      return fail(c, err::ISDIR);
    case FdKind::PipeWrite:
      return fail(c, err::BADF);
    case FdKind::PipeRead:
      keep = static_cast<PipeReadEnd&>(*obj).ptr();
      break;
    case FdKind::Socket: {
      auto& ep = static_cast<SocketEndpoint&>(*obj);
      if (ep.state() != SocketEndpoint::State::Connected) return fail(c, err::NOTCONN);
      // Keep the pipe alive through the socket object while parked.
      keep = PipePtr(std::static_pointer_cast<SocketEndpoint>(obj), ep.rx());
      break;
    }
  }
  pipe = keep.get();
  uint64_t w = pipe->read(out, [this, c](int64_t r) { r < 0 ? fail(c, static_cast<int32_t>(-r)) : reply(c, r); });
  if (w != 0) park(t, c, [keep, w] { return keep->cancel(w).value_or(0); });
}

void Kernel::sys_pwrite(Task& t, const CallPtr& c) {
  int64_t fd = c->i(0), off = c->i(2);
  auto obj = fd >= 0 && fd < FdTable::kMaxFds ? t.fds.get(static_cast<int>(fd)) : nullptr;
  if (!obj) return fail(c, err::BADF);
  if (off < -1) return fail(c, err::INVAL);
  auto in = c->in(1);
  PipePtr keep;
  switch (obj->kind()) {
    case FdKind::File: {
      auto r = static_cast<FileHandle&>(*obj).pwrite(in, off);
      return r ? reply(c, static_cast<int64_t>(*r)) : fail(c, r.error());
    }
    case FdKind::Dir:
      return fail(c, err::ISDIR);
    case FdKind::PipeRead:
      return fail(c, err::BADF);
    case FdKind::PipeWrite:
      keep = static_cast<PipeWriteEnd&>(*obj).ptr();
      break;
    case FdKind::Socket: {
      auto& ep = static_cast<SocketEndpoint&>(*obj);
      if (ep.state() != SocketEndpoint::State::Connected) return fail(c, err::NOTCONN);
      keep = PipePtr(std::static_pointer_cast<SocketEndpoint>(obj), ep.tx());
      break;
    }
  }
  uint64_t w = keep->write(in, [this, c](int64_t r) {
    if (r >= 0) return reply(c, r);
    fail(c, static_cast<int32_t>(-r));
    // Writing to a pipe nobody reads also raises SIGPIPE.
    if (r == -err::PIPE)
      if (Task* owner = find(c->pid); owner && !owner->zombie && owner->worker == c->worker)
        deliver_signal(*owner, sig::PIPE);
  });
  if (w != 0) park(t, c, [keep, w] { return keep->cancel(w).value_or(0); });
}

void Kernel::sys_accept(Task& t, const CallPtr& c) {
  int64_t fd = c->i(0);
  auto obj = fd >= 0 && fd < FdTable::kMaxFds ? t.fds.get(static_cast<int>(fd)) : nullptr;
  if (!obj) return fail(c, err::BADF);
  if (obj->kind() != FdKind::Socket) return fail(c, err::NOTSOCK);
  auto& ep = static_cast<SocketEndpoint&>(*obj);
  uint64_t w = sockets_.accept(ep, [this, c](SocketPtr s, int e) {
    if (e) return fail(c, e);
    Task* owner = find(c->pid);
    if (owner == nullptr || owner->zombie || c->done) {
      // Nobody to hand the connection to: close it so the peer sees EOF.
      s->retain();
      s->release();
      return;
    }
    auto nfd = owner->fds.install(s);
    if (!nfd) {
      s->retain();
      s->release();
      return fail(c, nfd.error());
    }
    reply(c, *nfd);
  });
  if (w != 0) park(t, c, [this, w] { sockets_.cancel(w); return size_t{0}; });
}

void Kernel::sys_connect(Task& t, const CallPtr& c) {
  int64_t fd = c->i(0), port = c->i(1);
  auto obj = fd >= 0 && fd < FdTable::kMaxFds ? t.fds.get(static_cast<int>(fd)) : nullptr;
  if (!obj) return fail(c, err::BADF);
  if (obj->kind() != FdKind::Socket) return fail(c, err::NOTSOCK);
  if (port <= 0 || port > 65535) return fail(c, err::INVAL);
  auto ep = std::static_pointer_cast<SocketEndpoint>(obj);
  uint64_t w = sockets_.connect(ep, static_cast<uint16_t>(port), [this, c](int e) { e ? fail(c, e) : reply(c, 0); });
  if (w != 0) park(t, c, [this, w] { sockets_.cancel(w); return size_t{0}; });
}

void Kernel::sys_attach_heap(Task& t, const CallPtr& c) {
  int64_t size = c->i(0), retval = c->i(1), wake = c->i(2);
  if (size <= 0 || retval < 0 || wake < 0) return fail(c, err::INVAL);
  if (static_cast<size_t>(size) > kMaxHeap) return fail(c, err::NOMEM);
  try {
    t.region = attach_shared_region(*t.worker, static_cast<size_t>(size), static_cast<size_t>(retval),
                                    static_cast<size_t>(wake));
  } catch (const Error& e) {
    return fail(c, e.kind() == ErrorKind::AlreadyAttached ? err::BUSY : err::INVAL);
  }
  t.conv = Convention::Sync;
  try {
    send_to_guest(*t.worker, RegionGrant{t.region});
  } catch (const Error&) {
  }
  reply(c, 0);
}

// ---------------------------------------------------------------------------
// Processes

Result<Kernel::Exec> Kernel::resolve_exec(const std::string& cwd, const std::string& path,
                                          std::vector<std::string> argv, Environ env) {
  using R = Result<Exec>;
  auto abs = resolve_path(cwd, path);
  if (!abs) return R::fail(abs.error());
  auto st = vfs_.stat(*abs);
  if (!st) return R::fail(st.error());
  if (st->is_dir() || (st->mode & 0111) == 0) return R::fail(err::ACCES);
  auto content = vfs_.read_file(*abs);
  if (!content) return R::fail(err::IO);
  if (argv.empty()) argv.push_back(path);

  Exec ex;
  ex.image.bytes = *content;
  ex.image.environ = std::move(env);
  if (auto name = native_name(*content)) {
    if (registry_.find(*name) == nullptr) return R::fail(err::NOEXEC);
    ex.program = *name;
    ex.image.entry = RegisteredEntry{*name};
    ex.image.argv = std::move(argv);
    return ex;
  }
  if (content->size() < 2 || (*content)[0] != '#' || (*content)[1] != '!') return R::fail(err::NOEXEC);

  std::string_view text(reinterpret_cast<const char*>(content->data()), content->size());
  auto nl = text.find('\n');
  auto line = trim(text.substr(2, nl == std::string_view::npos ? nl : nl - 2));
  auto ws = line.find_first_of(" \t");
  std::string interp = line.substr(0, ws);
  std::string optarg = ws == std::string::npos ? "" : trim(std::string_view(line).substr(ws));
  if (interp.empty()) return R::fail(err::NOEXEC);

  std::vector<std::string> nargv{interp};
  if (!optarg.empty()) nargv.push_back(optarg);
  nargv.push_back(path);
  nargv.insert(nargv.end(), argv.begin() + 1, argv.end());
  ex.image.argv = std::move(nargv);

  if (auto prog = registry_.interpreter(interp)) {
    if (registry_.find(*prog) == nullptr) return R::fail(err::NOEXEC);
    ex.program = *prog;
    ex.image.entry = InterpreterEntry{interp, *abs};
    return ex;
  }
  // Not in the interpreter table: accept a native executable at that path.
  auto ipath = resolve_path("/", interp);
  std::optional<Bytes> icontent = ipath ? vfs_.read_file(*ipath) : std::nullopt;
  auto iname = icontent ? native_name(*icontent) : std::nullopt;
  if (!iname || registry_.find(*iname) == nullptr) return R::fail(err::NOEXEC);
  ex.program = *iname;
  ex.image.entry = RegisteredEntry{*iname};
  return ex;
}

Result<uint32_t> Kernel::start_task(Exec exec, uint32_t ppid, uint32_t session, const std::string& cwd, FdTable fds) {
  const Program* prog = registry_.find(exec.program);
  if (prog == nullptr) return Result<uint32_t>::fail(err::NOEXEC);
  WorkerHandle w;
  try {
    w = launch_worker(exec.image, registry_, this);
  } catch (const Error& e) {
    return Result<uint32_t>::fail(e.kind() == ErrorKind::UnknownExecutable ? err::NOEXEC : err::NOMEM);
  }
  auto t = std::make_unique<Task>();
  t->pid = alloc_pid();
  t->ppid = ppid;
  t->session = session ? session : t->pid;
  t->worker = w;
  t->cwd = cwd;
  t->fds = std::move(fds);
  t->program = exec.program;
  t->snapshotable = prog->snapshotable();
  t->argv = exec.image.argv;
  t->env = exec.image.environ;
  uint32_t pid = t->pid;
  worker_pid_[w->id()] = pid;
  tasks_[pid] = std::move(t);
  {
    std::lock_guard lk(idle_mu_);
    ++live_;
  }
  if (Task* parent = find(ppid)) parent->children.insert(pid);
  send_to_guest(*w, InitMessage{exec.image.argv, exec.image.environ, exec.image.fork_snapshot});
  return pid;
}

void Kernel::sys_spawn(Task& t, const CallPtr& c) {
  auto packed = unpack_exec_args(c->in(1));
  if (!packed) return fail(c, err::INVAL);
  auto grants = c->ints(2);
  if (grants.size() % 2 != 0) return fail(c, err::INVAL);

  FdTable fds;
  if (grants.empty()) {
    for (int fd = 0; fd < 3; ++fd)
      if (auto obj = t.fds.get(fd)) fds.install_at(fd, obj);
  } else {
    for (size_t k = 0; k < grants.size(); k += 2) {
      int64_t child = grants[k], parent = grants[k + 1];
      if (child < 0 || child >= FdTable::kMaxFds || parent < 0 || parent >= FdTable::kMaxFds)
        return fail(c, err::BADF);
      auto obj = t.fds.get(static_cast<int>(parent));
      if (!obj) return fail(c, err::BADF);
      fds.install_at(static_cast<int>(child), obj);
    }
  }
  auto ex = resolve_exec(t.cwd, c->str(0), std::move(packed->first), std::move(packed->second));
  if (!ex) return fail(c, ex.error());
  auto pid = start_task(std::move(*ex), t.pid, t.session, t.cwd, std::move(fds));
  if (!pid) return fail(c, pid.error());
  reply(c, *pid);
}

void Kernel::sys_fork(Task& t, const CallPtr& c) {
  if (t.conv == Convention::Sync || !t.snapshotable) return fail(c, err::NOSYS);
  Exec ex;
  ex.program = t.program;
  ex.image.entry = RegisteredEntry{t.program};
  ex.image.argv = t.argv;
  ex.image.environ = t.env;
  auto heap = c->in(0);
  ex.image.fork_snapshot = ForkSnapshot{Bytes(heap.begin(), heap.end()), static_cast<uint64_t>(c->i(1))};
  auto pid = start_task(std::move(ex), t.pid, t.session, t.cwd, t.fds.clone());
  if (!pid) return fail(c, pid.error());
  reply(c, *pid);
}

void Kernel::sys_wait4(Task& t, const CallPtr& c) {
  int64_t pid = c->i(0), options = c->i(1);
  auto out = c->outbuf(2);
  if (out.size() != 0 && out.size() < 4) return fail(c, err::INVAL);
  auto matches = [pid](uint32_t child) { return pid <= 0 || static_cast<uint32_t>(pid) == child; };
  bool any = std::any_of(t.children.begin(), t.children.end(), matches);
  if (!any) return fail(c, err::CHILD);
  t.waiters.push_back({c, pid});
  if (try_reap_for(t)) return;
  // try_reap_for consumed nothing, so the waiter is still the last entry.
  if (options & wait::NOHANG) {
    t.waiters.pop_back();
    if (!out.empty()) std::fill_n(out.begin(), 4, 0);
    return reply(c, 0);
  }
  uint32_t owner = t.pid;
  park(t, c, [this, owner, raw = c.get()] {
    if (Task* p = find(owner)) {
      auto& ws = p->waiters;
      ws.erase(std::remove_if(ws.begin(), ws.end(), [raw](const Task::WaitWaiter& w) { return w.call.get() == raw; }),
               ws.end());
    }
    return size_t{0};
  });
}

// Completes parked wait4 calls of `parent` against its zombie children.
// Returns true if the most recently queued waiter was satisfied.
bool Kernel::try_reap_for(Task& parent) {
  bool last_done = false;
  for (size_t k = 0; k < parent.waiters.size();) {
    auto w = parent.waiters[k];
    Task* found = nullptr;
    for (uint32_t ch : parent.children) {
      Task* ct = find(ch);
      if (ct && ct->zombie && (w.pid <= 0 || static_cast<uint32_t>(w.pid) == ch)) {
        found = ct;
        break;
      }
    }
    if (found == nullptr) {
      ++k;
      continue;
    }
    if (k == parent.waiters.size() - 1) last_done = true;
    parent.waiters.erase(parent.waiters.begin() + static_cast<long>(k));
    auto out = w.call->outbuf(2);
    if (out.size() >= 4) {
      Bytes b;
      put_u32(b, static_cast<uint32_t>(found->status));
      std::copy(b.begin(), b.end(), out.begin());
    }
    uint32_t cpid = found->pid;
    reap(*found);
    reply(w.call, cpid);
  }
  return last_done;
}

void Kernel::reap(Task& child) {
  uint32_t pid = child.pid;
  if (Task* p = find(child.ppid)) p->children.erase(pid);
  ++counters_.reaped;
  tasks_.erase(pid);
}

void Kernel::finish_task(Task& t, int32_t wait_status) {
  if (t.zombie) return;
  t.zombie = true;
  t.status = wait_status;
  uint32_t pid = t.pid;

  auto parked = std::move(t.parked);
  t.parked.clear();
  for (auto& [_, entry] : parked) {
    entry.second();
    entry.first->done = true;
    --counters_.parked;
    ++counters_.discarded;
  }
  t.waiters.clear();

  terminate_worker(*t.worker);
  worker_pid_.erase(t.worker->id());
  graveyard_.push_back(t.worker);
  t.fds.close_all();
  ++counters_.exits;
  {
    std::lock_guard lk(idle_mu_);
    --live_;
  }
  idle_cv_.notify_all();

  Task* self = find(pid);
  if (self == nullptr) return;
  auto children = std::move(self->children);
  self->children.clear();
  for (uint32_t ch : children) {
    Task* ct = find(ch);
    if (ct == nullptr) continue;
    ct->ppid = 0;
    if (ct->zombie) reap(*ct);
  }

  self = find(pid);
  if (self == nullptr) return;
  Task* parent = self->ppid ? find(self->ppid) : nullptr;
  if (parent && !parent->zombie) {
    uint32_t ppid = parent->pid;
    try_reap_for(*parent);
    if (Task* p = find(ppid); p && !p->zombie) deliver_signal(*p, sig::CHLD);
  } else {
    auto cb = std::move(self->on_exit);
    int code = wait::shell_code(wait_status);
    reap(*self);
    if (cb) cb(pid, code);
  }
  sweep_graveyard();
}

int Kernel::deliver_signal(Task& t, int32_t s) {
  if (t.zombie) return 0;
  if (s == sig::KILL) {
    finish_task(t, wait::signaled_status(s));
    return 0;
  }
  switch (t.handlers[s]) {
    case Disposition::Ignore:
      return 0;
    case Disposition::Default:
      if (s == sig::TERM || s == sig::INT || s == sig::PIPE) finish_task(t, wait::signaled_status(s));
      return 0;
    case Disposition::Handler:
      break;
  }
  try {
    send_to_guest(*t.worker, SignalMessage{s});
  } catch (const Error&) {
    return 0;
  }
  std::vector<std::pair<CallPtr, std::function<size_t()>>> hit;
  for (auto& [_, entry] : t.parked)
    if (entry.first->info->interruptible) hit.push_back(entry);
  bool woke = false;
  for (auto& [call, cancel] : hit) {
    size_t progress = cancel();
    unpark(t, call);
    if (progress > 0) {
      reply(call, static_cast<int64_t>(progress));
    } else if (call->conv == Convention::Async) {
      fail(call, err::INTR);
    } else {
      // The guest turns the Signal wake into EINTR itself.
      call->done = true;
      ++counters_.replies;
      t.region->signal();
      woke = true;
    }
  }
  if (!woke && t.conv == Convention::Sync && !t.parked.empty()) t.region->signal();
  return 0;
}

void Kernel::sweep_graveyard() {
  auto it = std::partition(graveyard_.begin(), graveyard_.end(), [](const WorkerHandle& w) { return !w->finished(); });
  for (auto d = it; d != graveyard_.end(); ++d) (*d)->join();
  graveyard_.erase(it, graveyard_.end());
}

int Kernel::kill(uint32_t pid, int32_t s) {
  return call([&]() -> int {
    if (s != 0 && !sig::supported(s)) return err::INVAL;
    Task* t = find(pid);
    if (t == nullptr) return err::SRCH;
    if (s != 0) deliver_signal(*t, s);
    return 0;
  });
}

int Kernel::kill_session(uint32_t session, int32_t s) {
  return call([&]() -> int {
    if (!sig::supported(s)) return err::INVAL;
    std::vector<uint32_t> pids;
    for (auto& [pid, t] : tasks_)
      if (t->session == session && !t->zombie) pids.push_back(pid);
    if (pids.empty()) return err::SRCH;
    // Children first so a parent never observes a half-killed tree.
    std::sort(pids.rbegin(), pids.rend());
    for (auto pid : pids)
      if (Task* t = find(pid)) deliver_signal(*t, s);
    return 0;
  });
}

// ---------------------------------------------------------------------------
// Host API

void Kernel::host_ref(const FdObjectPtr& obj) {
  obj->retain();
  auto& e = host_refs_[obj.get()];
  e.first = obj;
  ++e.second;
}

void Kernel::host_unref(const FdObjectPtr& obj) {
  auto it = host_refs_.find(obj.get());
  if (it == host_refs_.end()) return;
  auto keep = it->second.first;
  if (--it->second.second == 0) host_refs_.erase(it);
  keep->release();
}

namespace {
// Reads a pipe end until EOF, feeding every chunk to a sink.
struct Drainer : std::enable_shared_from_this<Drainer> {
  std::shared_ptr<PipeReadEnd> end;
  ByteSink sink;
  std::function<void()> on_eof;
  Bytes buf = Bytes(65536);

  void arm() {
    auto self = shared_from_this();
    end->pipe().read(buf, [self](int64_t n) {
      if (n <= 0) {
        if (self->on_eof) self->on_eof();
        return;
      }
      if (self->sink) self->sink(std::span<const uint8_t>(self->buf.data(), static_cast<size_t>(n)));
      self->arm();
    });
  }
};
}  // namespace

void Kernel::drain(const std::shared_ptr<PipeReadEnd>& end, ByteSink sink) {
  auto d = std::make_shared<Drainer>();
  d->end = end;
  d->sink = std::move(sink);
  d->on_eof = [this, end] { host_unref(end); };
  d->arm();
}

std::shared_ptr<HostSession> Kernel::launch(LaunchOptions opts) {
  auto s = std::make_shared<HostSession>();
  s->kernel_ = this;
  std::promise<void> started;
  auto f = started.get_future();
  auto body = [this, s, o = std::move(opts), &started]() mutable {
    launch_on_loop(s, std::move(o));
    started.set_value();
  };
  if (on_loop()) {
    body();
  } else {
    post(std::move(body));
    f.wait();
  }
  return s;
}

void Kernel::launch_on_loop(const std::shared_ptr<HostSession>& s, LaunchOptions opts) {
  auto [in_r, in_w] = make_pipe(config_.pipe_capacity);
  auto [out_r, out_w] = make_pipe(config_.pipe_capacity);
  auto [err_r, err_w] = make_pipe(config_.pipe_capacity);
  FdTable fds;
  fds.install_at(0, in_r);
  fds.install_at(1, out_w);
  fds.install_at(2, err_w);
  host_ref(in_w);
  host_ref(out_r);
  host_ref(err_r);
  s->stdin_ = in_w;
  s->stdout_ = out_r;
  s->stderr_ = err_r;

  Environ env = config_.base_env;
  env["SANDBOXD_MODE"] = config_.mode == Convention::Sync ? "sync" : "async";
  for (auto& [k, v] : opts.env) env[k] = v;

  auto finish = [s, cb = opts.on_exit](uint32_t pid, int code) {
    {
      std::lock_guard lk(s->mu_);
      s->code_ = code;
    }
    s->cv_.notify_all();
    if (cb) cb(pid, code);
  };

  auto cwd = resolve_path("/", opts.cwd);
  auto ex = resolve_exec(cwd ? *cwd : "/", opts.path, opts.argv, env);
  Result<uint32_t> pid = ex ? start_task(std::move(*ex), 0, 0, cwd ? *cwd : "/", std::move(fds))
                            : Result<uint32_t>::fail(ex.error());
  if (!pid) {
    std::string msg = "sandboxd: " + opts.path + ": " + err::message(pid.error()) + "\n";
    if (opts.on_stderr) opts.on_stderr(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(msg.data()), msg.size()));
    host_unref(in_w);
    host_unref(out_r);
    host_unref(err_r);
    s->stdin_.reset();
    s->stdin_open_ = false;
    finish(0, pid.error() == err::NOENT ? 127 : 126);
    return;
  }
  s->pid_ = *pid;
  find(*pid)->on_exit = std::move(finish);
  drain(out_r, std::move(opts.on_stdout));
  drain(err_r, std::move(opts.on_stderr));
  if (!opts.interactive_stdin) {
    s->stdin_open_ = false;
    pump_stdin(s);
  }
}

void Kernel::pump_stdin(const std::shared_ptr<HostSession>& s) {
  if (!s->stdin_ || s->stdin_busy_) return;
  if (s->stdin_queue_.empty()) {
    if (!s->stdin_open_) {
      host_unref(s->stdin_);
      s->stdin_.reset();
    }
    return;
  }
  auto buf = std::make_shared<Bytes>(std::move(s->stdin_queue_.front()));
  s->stdin_queue_.pop_front();
  s->stdin_busy_ = true;
  s->stdin_->pipe().write(*buf, [this, s, buf](int64_t r) {
    s->stdin_busy_ = false;
    if (r < 0) s->stdin_queue_.clear();
    pump_stdin(s);
  });
}

void HostSession::write_stdin(std::string_view data) {
  auto self = shared_from_this();
  kernel_->post([self, b = to_bytes(data)]() mutable {
    if (!self->stdin_open_) return;
    self->stdin_queue_.push_back(std::move(b));
    self->kernel_->pump_stdin(self);
  });
}

void HostSession::close_stdin() {
  auto self = shared_from_this();
  kernel_->post([self] {
    self->stdin_open_ = false;
    self->kernel_->pump_stdin(self);
  });
}

void HostSession::interrupt() {
  if (pid_ != 0) kernel_->kill(pid_, sig::INT);
}

void HostSession::kill() {
  if (pid_ != 0) kernel_->kill_session(pid_, sig::KILL);
}

int HostSession::wait() {
  std::unique_lock lk(mu_);
  cv_.wait(lk, [&] { return code_.has_value(); });
  return *code_;
}

std::optional<int> HostSession::exit_code() const {
  std::lock_guard lk(mu_);
  return code_;
}

std::shared_ptr<HostSession> Kernel::system(const std::string& cmdline, std::function<void(uint32_t, int)> on_exit,
                                            ByteSink on_stdout, ByteSink on_stderr) {
  LaunchOptions o;
  o.path = config_.shell;
  o.argv = {"sh", "-c", cmdline};
  o.on_exit = std::move(on_exit);
  o.on_stdout = std::move(on_stdout);
  o.on_stderr = std::move(on_stderr);
  return launch(std::move(o));
}

Kernel::RunResult Kernel::run(const std::string& cmdline, const std::string& stdin_data) {
  struct Sink {
    std::mutex mu;
    std::string out, err;
  };
  auto sink = std::make_shared<Sink>();
  LaunchOptions o;
  o.path = config_.shell;
  o.argv = {"sh", "-c", cmdline};
  o.interactive_stdin = !stdin_data.empty();
  o.on_stdout = [sink](std::span<const uint8_t> b) {
    std::lock_guard lk(sink->mu);
    sink->out.append(b.begin(), b.end());
  };
  o.on_stderr = [sink](std::span<const uint8_t> b) {
    std::lock_guard lk(sink->mu);
    sink->err.append(b.begin(), b.end());
  };
  auto s = launch(std::move(o));
  if (!stdin_data.empty()) {
    s->write_stdin(stdin_data);
    s->close_stdin();
  }
  RunResult r;
  r.code = s->wait();
  // Let output already queued on the loop land in the sinks.
  call([] { return 0; });
  std::lock_guard lk(sink->mu);
  r.out = sink->out;
  r.err = sink->err;
  return r;
}

void Kernel::notify_on_listen(uint16_t port, std::function<void()> cb) {
  post([this, port, cb = std::move(cb)]() mutable { sockets_.notify_on_listen(port, std::move(cb)); });
}

void Kernel::host_exchange(uint16_t port, Bytes request, std::function<void(int, Bytes)> done) {
  post([this, port, req = std::make_shared<Bytes>(std::move(request)), done = std::move(done)]() mutable {
    auto ep = sockets_.create();
    host_ref(ep);
    sockets_.connect(ep, port, [this, ep, req, done](int e) {
      if (e) {
        host_unref(ep);
        done(e, {});
        return;
      }
      // The request is sent as one message followed by end of stream.
      ep->tx()->write(*req, [req, ep](int64_t) { ep->shutdown_write(); });
      struct Reader : std::enable_shared_from_this<Reader> {
        SocketPtr ep;
        Bytes buf = Bytes(65536);
        Bytes got;
        std::function<void()> on_eof;
        void arm() {
          auto self = shared_from_this();
          ep->rx()->read(buf, [self](int64_t n) {
            if (n <= 0) return self->on_eof();
            self->got.insert(self->got.end(), self->buf.begin(), self->buf.begin() + n);
            self->arm();
          });
        }
      };
      auto r = std::make_shared<Reader>();
      r->ep = ep;
      r->on_eof = [this, r_weak = std::weak_ptr<Reader>(r), ep, done] {
        auto rr = r_weak.lock();
        Bytes got = rr ? std::move(rr->got) : Bytes{};
        host_unref(ep);
        done(0, std::move(got));
      };
      r->arm();
    });
  });
}

void Kernel::stage_file(const std::string& path, std::string_view data, uint32_t mode) {
  call([&] {
    vfs_.write_file(path, to_bytes(data), mode);
    return 0;
  });
}

std::optional<std::string> Kernel::read_file(const std::string& path) {
  return call([&]() -> std::optional<std::string> {
    auto b = vfs_.read_file(path);
    if (!b) return std::nullopt;
    return to_string(*b);
  });
}

KernelAudit Kernel::audit() {
  return call([this] {
    KernelAudit a = counters_;
    a.parked = 0;
    a.zombies = 0;
    a.live_tasks = 0;
    std::map<FdObject*, uint32_t> refs;
    std::map<FdObject*, FdObjectPtr> objs;
    for (auto& [_, t] : tasks_) {
      a.parked += t->parked.size();
      if (t->zombie) {
        ++a.zombies;
        if (!t->fds.empty()) a.refcounts_ok = false;
        continue;
      }
      ++a.live_tasks;
      for (auto& [fd, obj] : t->fds.entries()) {
        ++refs[obj.get()];
        objs[obj.get()] = obj;
      }
    }
    for (auto& [obj, e] : host_refs_) {
      refs[obj] += e.second;
      objs[obj] = e.first;
    }
    for (auto& [obj, n] : refs)
      if (obj->refs() != n) a.refcounts_ok = false;
    return a;
  });
}

std::vector<TaskInfo> Kernel::tasks() {
  return call([this] {
    std::vector<TaskInfo> out;
    for (auto& [pid, t] : tasks_) {
      TaskInfo i{pid, t->ppid, t->zombie, t->cwd, t->argv, t->session, t->conv, {}};
      for (auto& [fd, _] : t->fds.entries()) i.fds.push_back(fd);
      out.push_back(std::move(i));
    }
    return out;
  });
}

std::optional<TaskInfo> Kernel::task(uint32_t pid) {
  for (auto& t : tasks())
    if (t.pid == pid) return t;
  return std::nullopt;
}

bool Kernel::wait_idle(std::chrono::milliseconds timeout) {
  std::unique_lock lk(idle_mu_);
  return idle_cv_.wait_for(lk, timeout, [&] { return live_ == 0; });
}

}  // namespace sandboxd
