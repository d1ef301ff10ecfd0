// End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
// exit status is the number of failures.
#include <dirent.h>
#include <fcntl.h>
#include <sys/stat.h>

#include <boost/asio/buffer.hpp>
#include <boost/beast/core/error.hpp>
#include <boost/beast/http.hpp>
#include <deque>
#include <iostream>
#include <map>
#include <set>

#include "sandboxd/bench.hpp"
#include "sandboxd/http_bridge.hpp"
#include "sandboxd/ipc.hpp"
#include "sandboxd/vfs.hpp"
#include "support.hpp"

#ifdef SANDBOXD_HAVE_TERM
#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include "sandboxd/term.hpp"
#endif

using namespace sandboxd;
using testkit::Booted;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string str(const Bytes& b) { return std::string(b.begin(), b.end()); }
Bytes bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }

uint64_t fnv(std::span<const uint8_t> b) {
  uint64_t h = 1469598103934665603ull;
  for (uint8_t c : b) h = (h ^ c) * 1099511628211ull;
  return h;
}

// ---------------------------------------------------------------------------
// Syscall path: the same random call script under both conventions.

template <class T>
T choose(std::mt19937_64& rng, std::initializer_list<T> xs) {
  return *(xs.begin() + rng() % xs.size());
}

int trapdiff_main(GuestContext& ctx) {
  std::mt19937_64 rng(std::stoull(ctx.argv().at(1)));
  int rounds = std::stoi(ctx.argv().at(2));
  ctx.set_disposition(sig::PIPE, Disposition::Ignore);

  // Scripted starting state: fd 3 file, 4 dir, 5 socket, 6 drained pipe
  // read end (writer closed), 8 pipe write end (reader closed).
  ctx.mkdir("/data");
  ctx.mkdir("/data/d");
  auto f = ctx.open("/data/f", oflag::RDWR | oflag::CREAT, 0644);
  ctx.write_all(static_cast<int>(f.v), "file contents for the differential run\n");
  ctx.open("/data/d/x", oflag::WRONLY | oflag::CREAT, 0600);
  ctx.close(static_cast<int>(ctx.open("/data/d/x", oflag::RDONLY).v));
  ctx.close(4);
  ctx.open("/data/d", oflag::RDONLY);
  ctx.socket();
  std::array<int, 2> a{}, b{};
  ctx.pipe(a);
  ctx.write_all(a[1], "pipe data");
  ctx.close(a[1]);
  ctx.pipe(b);
  ctx.close(b[0]);
  std::ostringstream log;
  log << "state " << f.v << ' ' << a[0] << ' ' << a[1] << ' ' << b[0] << ' ' << b[1] << '\n';

  const std::initializer_list<int64_t> fds = {-1, 0, 3, 4, 5, 6, 8, 99};
  const std::initializer_list<int64_t> quiet_fds = {-1, 0, 3, 4, 6, 8, 99};
  const std::initializer_list<std::string> paths = {"/data/f", "/data/d", "/data/d/x", "/data/new", "/nope/x",
                                                    "",        "rel",     "/data/d/../f", "/"};
  const std::initializer_list<int64_t> caps = {0, 1, 24, 48, 100, 4096};

  std::vector<const TrapInfo*> traps;
  for (const auto& t : trap_table())
    if (!t.async_only && t.trap != Trap::Exit) traps.push_back(&t);

  for (int i = 0; i < rounds; ++i) {
    const TrapInfo& t = *traps[rng() % traps.size()];
    std::vector<Value> args;
    auto path = [&] { return choose(rng, paths); };
    switch (t.trap) {
      case Trap::Spawn: {
        Environ env;
        Bytes packed = choose(rng, {0, 1}) ? pack_exec_args({"true"}, env) : Bytes{1, 2, 3};
        args = {choose(rng, {std::string("/usr/bin/true"), std::string("/data/f"), std::string("/nope")}), packed,
                choose(rng, {std::vector<int64_t>{}, std::vector<int64_t>{0, 3}, std::vector<int64_t>{1}})};
        break;
      }
      case Trap::Pipe2:
        args = {int64_t{8}, int64_t{0}};
        break;
      case Trap::Wait4:
        args = {choose(rng, {int64_t{-1}, int64_t{0}, int64_t{99999}}), int64_t{0}, int64_t{4}};
        break;
      case Trap::Getcwd:
        args = {choose(rng, {int64_t{0}, int64_t{2}, int64_t{256}})};
        break;
      case Trap::Chdir:
      case Trap::Rmdir:
      case Trap::Unlink:
        args = {path()};
        break;
      case Trap::Socket:
        args = {choose(rng, {int64_t{0}, int64_t{1}, int64_t{2}}), choose(rng, {int64_t{0}, int64_t{1}, int64_t{2}}),
                int64_t{0}};
        break;
      case Trap::Bind:
        args = {choose(rng, fds), choose(rng, {int64_t{0}, int64_t{80}, int64_t{99999}, int64_t{-1}})};
        break;
      case Trap::Listen:
        args = {choose(rng, fds), choose(rng, {int64_t{0}, int64_t{5}})};
        break;
      case Trap::Getsockname:
        args = {choose(rng, fds)};
        break;
      case Trap::Accept:
        // fd 5 may be listening; accepting there would block forever.
        args = {choose(rng, quiet_fds)};
        break;
      case Trap::Connect:
        args = {choose(rng, fds), choose(rng, {int64_t{0}, int64_t{80}, int64_t{65535}})};
        break;
      case Trap::Readdir:
      case Trap::Getdents:
        args = {choose(rng, fds), choose(rng, caps)};
        break;
      case Trap::Mkdir:
        args = {path(), choose(rng, {int64_t{0755}, int64_t{0}})};
        break;
      case Trap::Open:
        args = {path(),
                choose(rng, {oflag::RDONLY, oflag::WRONLY, oflag::RDWR, oflag::WRONLY | oflag::CREAT,
                             oflag::WRONLY | oflag::CREAT | oflag::EXCL, oflag::WRONLY | oflag::TRUNC,
                             oflag::WRONLY | oflag::APPEND, oflag::DIRECTORY}),
                choose(rng, {int64_t{0644}, int64_t{0}})};
        break;
      case Trap::Close:
        args = {choose(rng, {int64_t{-1}, int64_t{99}, int64_t{1000000}, int64_t{8}})};
        break;
      case Trap::Llseek:
        args = {choose(rng, fds), choose(rng, {int64_t{-5}, int64_t{0}, int64_t{7}}),
                choose(rng, {int64_t{0}, int64_t{1}, int64_t{2}, int64_t{9}})};
        break;
      case Trap::Pread:
        args = {choose(rng, quiet_fds), choose(rng, caps), choose(rng, {int64_t{-1}, int64_t{0}, int64_t{3}})};
        break;
      case Trap::Pwrite:
        args = {choose(rng, quiet_fds), bytes(testkit::random_bytes(rng, rng() % 33)),
                choose(rng, {int64_t{-1}, int64_t{0}, int64_t{5}, int64_t{70000}})};
        break;
      case Trap::Access:
        args = {path(), choose(rng, {int64_t{0}, int64_t{1}, int64_t{2}, int64_t{4}, int64_t{7}})};
        break;
      case Trap::Fstat:
        args = {choose(rng, fds), int64_t{kStatSize}};
        break;
      case Trap::Lstat:
      case Trap::Stat:
        args = {path(), int64_t{kStatSize}};
        break;
      case Trap::Readlink:
        args = {path(), choose(rng, caps)};
        break;
      case Trap::Utimes:
        args = {path(), int64_t{1000}, int64_t{2000}};
        break;
      case Trap::Kill:
        args = {choose(rng, {ctx.getpid().v, int64_t{99999}, int64_t{-7}}), choose(rng, {int64_t{0}, int64_t{999}})};
        break;
      case Trap::Sigaction:
        args = {choose(rng, {int64_t{sig::USR1}, int64_t{sig::KILL}, int64_t{999}, int64_t{0}}),
                choose(rng, {int64_t{0}, int64_t{1}, int64_t{2}, int64_t{7}})};
        break;
      default:
        break;
    }
    CallResult r = ctx.invoke(t.trap, args);
    Bytes payload = r.payload;
    if ((t.trap == Trap::Stat || t.trap == Trap::Lstat || t.trap == Trap::Fstat) && payload.size() == kStatSize) {
      StatRecord st = decode_stat(payload);
      st.atime_ns = st.mtime_ns = st.ctime_ns = 0;
      encode_stat(st, payload);
    }
    log << t.name << ' ' << r.ret << ' ' << r.err << ' ' << payload.size() << ' ' << fnv(payload) << '\n';
    // Undo anything that would make later calls block or leak.
    if (r.err == 0 && (t.trap == Trap::Open || t.trap == Trap::Socket)) ctx.close(static_cast<int>(r.ret));
    if (r.err == 0 && t.trap == Trap::Pipe2) {
      ctx.close(static_cast<int>(r.ret));
      ctx.close(static_cast<int>(r.aux));
    }
    if (r.err == 0 && t.trap == Trap::Spawn) {
      int status = 0;
      ctx.wait4(r.ret, status);
      log << "reaped " << status << '\n';
    }
  }
  ctx.out(log.str());
  return 0;
}

ProgramRegistry acceptance_registry() {
  ProgramRegistry reg = make_registry();
  reg.add(make_program("trapdiff", trapdiff_main));
  return reg;
}

Outcome check_syscall_paths() {
  auto t0 = Clock::now();
  size_t calls = 0;
  std::set<std::string> seen;
  for (int seed = 1; seed <= 6; ++seed) {
    std::string cmd = "trapdiff " + std::to_string(seed) + " 1500";
    Booted a(acceptance_registry(), testkit::config_for(Convention::Async));
    Booted s(acceptance_registry(), testkit::config_for(Convention::Sync));
    auto ra = a->run(cmd);
    auto rs = s->run(cmd);
    if (ra.code != 0 || rs.code != 0)
      return {false, "seed " + std::to_string(seed) + " exited " + std::to_string(ra.code) + "/" +
                         std::to_string(rs.code)};
    if (ra.out != rs.out) {
      std::istringstream ia(ra.out), is(rs.out);
      std::string la, ls;
      int line = 0;
      while (std::getline(ia, la) && std::getline(is, ls) && la == ls) ++line;
      return {false, "seed " + std::to_string(seed) + " line " + std::to_string(line) + ": async '" + la +
                         "' vs sync '" + ls + "'"};
    }
    std::istringstream in(ra.out);
    std::string line;
    while (std::getline(in, line)) {
      ++calls;
      seen.insert(line.substr(0, line.find(' ')));
    }
  }
  double secs = seconds_since(t0);
  size_t traps = 0;
  for (const auto& t : trap_table())
    if (!t.async_only && t.trap != Trap::Exit) ++traps;
  size_t covered = 0;
  for (const auto& t : trap_table())
    if (seen.count(std::string(t.name))) ++covered;
  std::ostringstream d;
  d << calls << " calls, " << covered << "/" << traps
    << " traps identical (exit and attach_heap run in every sync guest, fork is checked separately), " << std::fixed
    << std::setprecision(1)
    << secs << " s (limit 30 s)";
  return {covered == traps && secs < 30.0, d.str()};
}

// ---------------------------------------------------------------------------

Outcome check_fork() {
  Booted a(testkit::config_for(Convention::Async));
  auto r = a->run("forktest");
  bool parent_line = r.out.find("parent ") != std::string::npos;
  bool child_line = r.out.find("child 0\n") != std::string::npos;
  Booted s(testkit::config_for(Convention::Sync));
  auto rs = s->run("forktest");
  bool nosys = rs.code == 2 && rs.err.find(err::message(err::NOSYS)) != std::string::npos;
  bool pass = r.code == 0 && parent_line && child_line && nosys;
  return {pass, "async forktest exit " + std::to_string(r.code) +
                    (child_line && parent_line ? " (child 0, parent pid, heap copy, one reap, then ECHILD)" : "") +
                    ", sync exit " + std::to_string(rs.code) + (nosys ? " with ENOSYS" : "")};
}

// ---------------------------------------------------------------------------
// Pipes: a reference model of the pipe state machine, explored breadth-first
// over distinct model states up to depth 10, replaying each path against the
// real Pipe.

struct PipeModel {
  size_t cap;
  std::deque<uint8_t> buf;
  struct W {
    int op;
    std::deque<uint8_t> rest;
    size_t total;
  };
  struct R {
    int op;
    size_t n;
  };
  std::deque<W> writers_q;
  std::deque<R> readers_q;
  bool w_open = true, r_open = true;
  // Every byte that ever entered the buffer, in order.
  std::string stream;
  // (op, result, data)
  std::vector<std::tuple<int, int64_t, std::string>> done;

  void settle() {
    for (bool changed = true; changed;) {
      changed = false;
      while (!readers_q.empty() && !buf.empty()) {
        auto rd = readers_q.front();
        readers_q.pop_front();
        size_t n = std::min(rd.n, buf.size());
        std::string got(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n));
        buf.erase(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n));
        done.emplace_back(rd.op, static_cast<int64_t>(n), got);
        changed = true;
      }
      while (!writers_q.empty() && buf.size() < cap) {
        auto& w = writers_q.front();
        while (!w.rest.empty() && buf.size() < cap) {
          buf.push_back(w.rest.front());
          stream += static_cast<char>(w.rest.front());
          w.rest.pop_front();
        }
        changed = true;
        if (!w.rest.empty()) break;
        done.emplace_back(w.op, static_cast<int64_t>(w.total), "");
        writers_q.pop_front();
      }
    }
  }
  void write(int op, const std::string& data) {
    if (!r_open) {
      done.emplace_back(op, -err::PIPE, "");
      return;
    }
    writers_q.push_back({op, std::deque<uint8_t>(data.begin(), data.end()), data.size()});
    settle();
  }
  void read(int op, size_t n) {
    if (buf.empty() && !w_open) {
      done.emplace_back(op, 0, "");
      return;
    }
    readers_q.push_back({op, n});
    settle();
  }
  void close_w() {
    w_open = false;
    for (auto& r : readers_q) done.emplace_back(r.op, 0, "");
    readers_q.clear();
  }
  void close_r() {
    r_open = false;
    for (auto& w : writers_q) done.emplace_back(w.op, -err::PIPE, "");
    writers_q.clear();
  }
  // Cancels the oldest parked call; returns bytes it moved.
  std::optional<std::pair<int, size_t>> cancel_oldest() {
    int best = INT32_MAX;
    for (auto& w : writers_q) best = std::min(best, w.op);
    for (auto& r : readers_q) best = std::min(best, r.op);
    if (best == INT32_MAX) return std::nullopt;
    for (auto it = writers_q.begin(); it != writers_q.end(); ++it)
      if (it->op == best) {
        size_t moved = it->total - it->rest.size();
        writers_q.erase(it);
        settle();
        return std::make_pair(best, moved);
      }
    for (auto it = readers_q.begin(); it != readers_q.end(); ++it)
      if (it->op == best) {
        readers_q.erase(it);
        return std::make_pair(best, size_t{0});
      }
    return std::nullopt;
  }
  std::string key() const {
    std::ostringstream k;
    k << cap << '|' << buf.size() << '|' << w_open << r_open << '|';
    for (auto& w : writers_q) k << w.rest.size() << '/' << w.total << ',';
    k << '|';
    for (auto& r : readers_q) k << r.n << ',';
    return k.str();
  }
};

enum PipeOp { W1, W3, WBig, R1, R4, CloseW, CloseR, Cancel, kPipeOps };

struct PipeRun {
  std::string error;
  std::string key;
  bool terminal = false;
};

// Replays `ops` on a fresh model and a fresh Pipe and compares every step.
PipeRun replay(size_t cap, const std::vector<int>& ops) {
  PipeModel m{cap};
  Pipe p(cap);
  p.add_reader();
  p.add_writer();
  std::vector<std::tuple<int, int64_t, std::string>> real;
  std::map<int, uint64_t> ids;  // op index -> pipe waiter id
  std::vector<std::shared_ptr<Bytes>> bufs;
  std::string read_back;
  uint8_t next_byte = 0;
  PipeRun out;
  for (size_t i = 0; i < ops.size(); ++i) {
    int op = static_cast<int>(i);
    auto cb_for = [&](std::shared_ptr<Bytes> b, bool is_read) {
      return [&real, op, b, is_read](int64_t r) {
        std::string data;
        if (is_read && r > 0) data.assign(b->begin(), b->begin() + r);
        real.emplace_back(op, r, data);
      };
    };
    switch (ops[i]) {
      case W1:
      case W3:
      case WBig: {
        if (!m.w_open) return out.terminal = true, out;
        size_t n = ops[i] == W1 ? 1 : ops[i] == W3 ? 3 : cap + 3;
        std::string data;
        for (size_t k = 0; k < n; ++k) data += static_cast<char>(next_byte++);
        auto b = std::make_shared<Bytes>(data.begin(), data.end());
        bufs.push_back(b);
        ids[op] = p.write(*b, cb_for(b, false));
        m.write(op, data);
        break;
      }
      case R1:
      case R4: {
        if (!m.r_open) return out.terminal = true, out;
        auto b = std::make_shared<Bytes>(ops[i] == R1 ? 1 : 4);
        bufs.push_back(b);
        ids[op] = p.read(*b, cb_for(b, true));
        m.read(op, b->size());
        break;
      }
      case CloseW:
        if (!m.w_open) return out.terminal = true, out;
        p.drop_writer();
        m.close_w();
        break;
      case CloseR:
        if (!m.r_open) return out.terminal = true, out;
        p.drop_reader();
        m.close_r();
        break;
      case Cancel: {
        auto c = m.cancel_oldest();
        if (!c) return out.terminal = true, out;
        auto moved = p.cancel(ids[c->first]);
        if (!moved || *moved != c->second) {
          out.error = "cancel moved " + (moved ? std::to_string(*moved) : "nothing") + " want " +
                      std::to_string(c->second);
          return out;
        }
        break;
      }
    }
    auto sorted = [](auto v) {
      std::sort(v.begin(), v.end());
      return v;
    };
    if (sorted(real) != sorted(m.done)) {
      out.error = "completions differ after op " + std::to_string(i);
      return out;
    }
    for (auto& [o, r, d] : real) read_back += d;
    real.clear();
    m.done.clear();
    // Invariants.
    if (p.used() > p.capacity()) out.error = "buffer over capacity";
    if (p.used() != m.buf.size()) out.error = "buffered byte count differs";
    if (p.write_waiters() > 0 && p.used() != p.capacity()) out.error = "parked writer with free space";
    if (p.read_waiters() > 0 && p.used() != 0) out.error = "parked reader with data available";
    if (p.write_waiters() != m.writers_q.size() || p.read_waiters() != m.readers_q.size())
      out.error = "waiter queues differ";
    if (m.stream.compare(0, read_back.size(), read_back) != 0) out.error = "reads are not a prefix of writes";
    if (!out.error.empty()) {
      out.error += " after op " + std::to_string(i);
      return out;
    }
  }
  out.key = m.key();
  return out;
}

Outcome check_pipes() {
  size_t states = 0, replays = 0;
  for (size_t cap = 1; cap <= 8; ++cap) {
    std::set<std::string> visited;
    std::deque<std::vector<int>> frontier = {{}};
    visited.insert(replay(cap, {}).key);
    while (!frontier.empty()) {
      auto path = frontier.front();
      frontier.pop_front();
      if (path.size() >= 10) continue;
      for (int op = 0; op < kPipeOps; ++op) {
        auto next = path;
        next.push_back(op);
        auto r = replay(cap, next);
        ++replays;
        if (!r.error.empty()) return {false, "cap " + std::to_string(cap) + ": " + r.error};
        if (r.terminal) continue;
        if (visited.insert(r.key).second) frontier.push_back(next);
      }
    }
    states += visited.size();
  }

  // 1 MiB through a 64 KiB pipe between two guest processes.
  Booted k;
  std::mt19937_64 rng(17);
  std::string payload = testkit::random_bytes(rng, 1 << 20);
  k->stage_file("/src.bin", payload);
  auto r = k->run("cat /src.bin | cat > /dst.bin");
  auto dst = k->read_file("/dst.bin");
  bool stream_ok = r.code == 0 && dst && fnv(bytes(*dst)) == fnv(bytes(payload)) && dst->size() == payload.size();
  std::ostringstream d;
  d << states << " model states over capacities 1-8, " << replays << " replays to depth 10; 1 MiB checksum "
    << (stream_ok ? "matches" : "differs") << " through a " << kDefaultPipeCapacity / 1024 << " KiB pipe";
  return {stream_ok && kDefaultPipeCapacity == 65536, d.str()};
}

// ---------------------------------------------------------------------------

Outcome check_sockets() {
  Booted k;
  int notified = 0;
  k->notify_on_listen(7, [&] { ++notified; });
  auto srv = k->system("echosrv -p 7", nullptr, nullptr, nullptr);
  if (!testkit::eventually([&] { return k->call([&] { return notified; }) == 1; }))
    return {false, "echo server never listened"};
  std::mt19937_64 rng(23);
  int same = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string data = testkit::random_bytes(rng, rng() % 2048);
    std::promise<std::pair<int, Bytes>> p;
    k->host_exchange(7, bytes(data), [&](int e, Bytes b) { p.set_value({e, std::move(b)}); });
    auto [e, b] = p.get_future().get();
    if (e == 0 && str(b) == data) ++same;
  }
  auto dup = k->run("echosrv -p 7");
  bool inuse = dup.code != 0 && dup.err.find(err::message(err::ADDRINUSE)) != std::string::npos;
  std::promise<int> refused;
  k->host_exchange(8, bytes("x"), [&](int e, Bytes) { refused.set_value(e); });
  bool conn_refused = refused.get_future().get() == err::CONNREFUSED;
  // Later listens on the same port do not fire the old registration again.
  srv->kill();
  srv->wait();
  auto again = k->system("echosrv -p 7", nullptr, nullptr, nullptr);
  int late = 0;
  k->notify_on_listen(7, [&] { ++late; });
  testkit::eventually([&] { return k->call([&] { return late; }) == 1; });
  again->kill();
  again->wait();
  int n1 = k->call([&] { return notified; }), n2 = k->call([&] { return late; });
  std::ostringstream d;
  d << same << "/1000 payloads identical, EADDRINUSE " << (inuse ? "yes" : "no") << ", ECONNREFUSED "
    << (conn_refused ? "yes" : "no") << ", notifications " << n1 << " and " << n2;
  return {same == 1000 && inuse && conn_refused && n1 == 1 && n2 == 1, d.str()};
}

// ---------------------------------------------------------------------------
// Overlay filesystem against a host directory.

class CountingProvider : public UnderlayProvider {
 public:
  explicit CountingProvider(std::shared_ptr<UnderlayProvider> inner) : inner_(std::move(inner)) {}
  std::vector<ManifestEntry> manifest() override { return inner_->manifest(); }
  Bytes fetch(const std::string& path) override {
    ++calls[path];
    return inner_->fetch(path);
  }
  std::map<std::string, int> calls;

 private:
  std::shared_ptr<UnderlayProvider> inner_;
};

std::string host_result(int rc) { return rc < 0 ? "E" + std::to_string(errno) : "ok"; }

// One operation applied to both trees; returns the two printed outcomes.
struct FsOp {
  std::string name;
  std::string path;
  std::string data;
  int64_t off = 0;
};

std::string apply_ours(Vfs& v, const FsOp& op) {
  auto fail = [](int e) { return "E" + std::to_string(e); };
  auto open_write = [&](int64_t flags) -> std::string {
    auto fd = v.open(op.path, flags, 0644);
    if (!fd) return fail(fd.error());
    if ((*fd)->kind() != FdKind::File) return fail(err::ISDIR);
    auto& fh = static_cast<FileHandle&>(**fd);
    auto n = fh.pwrite(bytes(op.data), (flags & oflag::APPEND) ? -1 : op.off);
    return n ? "ok " + std::to_string(*n) : fail(n.error());
  };
  if (op.name == "read") {
    auto fd = v.open(op.path, oflag::RDONLY, 0);
    if (!fd) return fail(fd.error());
    if ((*fd)->kind() == FdKind::Dir) return fail(err::ISDIR);
    auto& fh = static_cast<FileHandle&>(**fd);
    std::string out;
    Bytes b(4096);
    for (;;) {
      auto n = fh.pread(b, -1);
      if (!n) return fail(n.error());
      if (*n == 0) break;
      out.append(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(*n));
    }
    return "ok " + std::to_string(fnv(bytes(out)));
  }
  if (op.name == "write") return open_write(oflag::WRONLY | oflag::CREAT);
  if (op.name == "append") return open_write(oflag::WRONLY | oflag::APPEND);
  if (op.name == "trunc") return open_write(oflag::WRONLY | oflag::TRUNC);
  if (op.name == "excl") return open_write(oflag::WRONLY | oflag::CREAT | oflag::EXCL);
  if (op.name == "unlink") {
    int e = v.unlink(op.path);
    return e ? fail(e) : "ok";
  }
  if (op.name == "mkdir") {
    int e = v.mkdir(op.path, 0755);
    return e ? fail(e) : "ok";
  }
  if (op.name == "rmdir") {
    int e = v.rmdir(op.path);
    return e ? fail(e) : "ok";
  }
  if (op.name == "stat") {
    auto st = v.stat(op.path);
    if (!st) return fail(st.error());
    return st->is_dir() ? "dir" : "file " + std::to_string(st->size);
  }
  if (op.name == "list") {
    auto l = v.list(op.path);
    if (!l) return fail(l.error());
    std::string out = "ok";
    for (const auto& e : *l) out += " " + e.name;
    return out;
  }
  return "?";
}

std::string apply_host(const std::string& root, const FsOp& op) {
  std::string p = root + op.path;
  auto open_write = [&](int flags) -> std::string {
    int fd = ::open(p.c_str(), flags, 0644);
    if (fd < 0) return host_result(-1);
    ssize_t n = (flags & O_APPEND) ? ::write(fd, op.data.data(), op.data.size())
                                   : ::pwrite(fd, op.data.data(), op.data.size(), op.off);
    std::string r = n < 0 ? host_result(-1) : "ok " + std::to_string(n);
    ::close(fd);
    return r;
  };
  if (op.name == "read") {
    int fd = ::open(p.c_str(), O_RDONLY);
    if (fd < 0) return host_result(-1);
    std::string out;
    char b[4096];
    for (;;) {
      ssize_t n = ::read(fd, b, sizeof b);
      if (n < 0) {
        std::string r = host_result(-1);
        ::close(fd);
        return r;
      }
      if (n == 0) break;
      out.append(b, static_cast<size_t>(n));
    }
    ::close(fd);
    return "ok " + std::to_string(fnv(bytes(out)));
  }
  if (op.name == "write") return open_write(O_WRONLY | O_CREAT);
  if (op.name == "append") return open_write(O_WRONLY | O_APPEND);
  if (op.name == "trunc") return open_write(O_WRONLY | O_TRUNC);
  if (op.name == "excl") return open_write(O_WRONLY | O_CREAT | O_EXCL);
  if (op.name == "unlink") return host_result(::unlink(p.c_str()));
  if (op.name == "mkdir") return host_result(::mkdir(p.c_str(), 0755));
  if (op.name == "rmdir") return host_result(::rmdir(p.c_str()));
  if (op.name == "stat") {
    struct stat st;
    if (::stat(p.c_str(), &st) < 0) return host_result(-1);
    return S_ISDIR(st.st_mode) ? "dir" : "file " + std::to_string(st.st_size);
  }
  if (op.name == "list") {
    DIR* d = ::opendir(p.c_str());
    if (!d) return host_result(-1);
    std::vector<std::string> names;
    while (auto* e = ::readdir(d))
      if (std::string(e->d_name) != "." && std::string(e->d_name) != "..") names.push_back(e->d_name);
    ::closedir(d);
    std::sort(names.begin(), names.end());
    std::string out = "ok";
    for (const auto& n : names) out += " " + n;
    return out;
  }
  return "?";
}

struct OverlayTrace {
  int mismatches = 0;
  std::string first;
  size_t calls = 0;
  size_t touched = 0;
  bool fetch_once = false;
};

// One seeded 500-op trace against a fresh overlay and a host copy of its
// lower layer, then a walk of the whole tree.
OverlayTrace overlay_trace(uint64_t seed) {
  std::mt19937_64 rng(seed);
  testkit::TempDir lower, oracle;
  const std::vector<std::string> dirs = {"/a", "/a/b", "/c", "/c/e"};
  const std::vector<std::string> lower_files = {"/f1",   "/f2",   "/f3",    "/a/g1", "/a/g2",  "/a/g3",
                                                "/a/b/h", "/a/b/i", "/c/k", "/c/k2", "/c/e/m", "/c/e/n"};
  for (const auto& f : lower_files) {
    std::string content = testkit::random_bytes(rng, 1 + rng() % 5000);
    testkit::write_host(lower.path().string() + f, content);
    testkit::write_host(oracle.path().string() + f, content);
  }
  Vfs v;
  auto counting = std::make_shared<CountingProvider>(std::make_shared<DirProvider>(lower.path()));
  v.mount_underlay(counting);

  std::vector<std::string> pool = lower_files;
  for (const auto& d : dirs) pool.push_back(d);
  for (const char* extra : {"/n1", "/a/n2", "/a/b/n3", "/c/d", "/c/d/n4", "/x/y"}) pool.push_back(extra);
  const std::vector<std::string> names = {"read", "write", "append", "trunc", "excl", "unlink",
                                          "mkdir", "rmdir", "stat", "list"};
  // Lower files still visible, and lower files whose content an op used.
  std::set<std::string> lower_live(lower_files.begin(), lower_files.end());
  std::set<std::string> touched;
  OverlayTrace t;
  auto compare = [&](const FsOp& op) {
    std::string ours = apply_ours(v, op), host = apply_host(oracle.path().string(), op);
    if (ours != host && t.mismatches++ == 0) t.first = op.name + " " + op.path + ": " + ours + " vs " + host;
    return host;
  };
  for (int i = 0; i < 500; ++i) {
    FsOp op{names[rng() % names.size()], pool[rng() % pool.size()], testkit::random_bytes(rng, rng() % 64),
            static_cast<int64_t>(rng() % 6000)};
    bool live = lower_live.count(op.path) > 0;
    bool ok = compare(op).rfind("ok", 0) == 0;
    if (live && ok && (op.name == "read" || op.name == "write" || op.name == "append" || op.name == "trunc"))
      touched.insert(op.path);
    if (ok && op.name == "unlink") lower_live.erase(op.path);
  }
  std::map<std::string, int> before_walk = counting->calls;
  bool lazy = before_walk.size() == touched.size() &&
              std::all_of(before_walk.begin(), before_walk.end(), [&](auto& kv) { return touched.count(kv.first); });

  std::function<void(const std::string&)> walk = [&](const std::string& dir) {
    compare({"list", dir, "", 0});
    compare({"stat", dir, "", 0});
    auto l = v.list(dir);
    if (!l) return;
    for (const auto& e : *l) {
      std::string child = dir == "/" ? "/" + e.name : dir + "/" + e.name;
      compare({"read", child, "", 0});
      if (e.dtype == sandboxd::DT_DIR) walk(child);
    }
  };
  walk("/");
  touched.insert(lower_live.begin(), lower_live.end());
  for (const auto& [p, n] : counting->calls) t.calls += static_cast<size_t>(n);
  t.touched = touched.size();
  t.fetch_once = lazy && t.calls == t.touched && counting->calls.size() == touched.size() &&
                 std::all_of(touched.begin(), touched.end(), [&](auto& p) { return counting->calls.count(p); });
  return t;
}

Outcome check_overlay() {
  int mismatches = 0;
  std::string first;
  size_t calls = 0, touched = 0;
  bool once = true;
  for (uint64_t seed : {31, 32, 33, 34}) {
    auto t = overlay_trace(seed);
    if (mismatches == 0 && t.mismatches) first = "seed " + std::to_string(seed) + " " + t.first;
    mismatches += t.mismatches;
    calls += t.calls;
    touched += t.touched;
    once = once && t.fetch_once;
  }

  // Whiteouts hide a lower file through unrelated churn in the same
  // directory and through a later create and unlink of the same name.
  testkit::TempDir lower;
  testkit::write_host(lower / "a/g1", "lower");
  testkit::write_host(lower / "a/g2", "lower");
  Vfs w;
  auto wp = std::make_shared<CountingProvider>(std::make_shared<DirProvider>(lower.path()));
  w.mount_underlay(wp);
  w.unlink("/a/g1");
  for (int i = 0; i < 20; ++i) {
    w.write_file("/a/tmp" + std::to_string(i), bytes("t"));
    w.unlink("/a/tmp" + std::to_string(i));
  }
  auto l = w.list("/a");
  bool hidden = !w.stat("/a/g1") && l && l->size() == 1 && l->at(0).name == "g2";
  w.write_file("/a/g1", bytes("new"));
  hidden = hidden && w.read_file("/a/g1") == bytes("new");
  w.unlink("/a/g1");
  hidden = hidden && !w.stat("/a/g1") && w.rmdir("/a") == err::NOTEMPTY && wp->calls.empty();

  std::ostringstream d;
  d << "4 traces of 500 ops + tree walk, " << mismatches << " mismatches"
    << (first.empty() ? "" : " (first: " + first + ")") << "; " << calls << " provider calls for " << touched
    << " distinct paths touched; whiteout persists: " << (hidden ? "yes" : "no");
  return {mismatches == 0 && once && hidden, d.str()};
}

// ---------------------------------------------------------------------------

Outcome check_utilities() {
  testkit::TempDir dir;
  std::mt19937_64 rng(41);
  std::vector<std::string> files;
  for (int i = 0; i < 50; ++i) {
    std::string name = "c" + std::to_string(i) + ".txt";
    std::string text = testkit::random_text(rng, 1 + rng() % 200);
    if (i % 9 == 4) text.pop_back();
    testkit::write_host(dir / name, text);
    files.push_back(name);
  }
  KernelConfig cfg;
  cfg.fs.mounts.push_back({dir.path(), "/corpus"});
  Booted k(cfg);
  std::string all;
  for (const auto& f : files) all += " " + f;
  std::vector<std::string> scripts = {"sha1sum" + all, "wc" + all, "wc -l" + all, "grep -c apple" + all};
  std::string sorts, greps;
  for (const auto& f : files) {
    sorts += "sort " + f + "; sort -r " + f + "; sort -n " + f + "; ";
    greps += "grep apple " + f + "; grep -v -i apple " + f + "; ";
  }
  scripts.push_back(sorts);
  scripts.push_back(greps);
  int same = 0;
  for (const auto& s : scripts) {
    auto host = testkit::host_run("cd " + testkit::shell_quote(dir.path().string()) + " && LC_ALL=C dash -c " +
                                  testkit::shell_quote(s));
    auto ours = k->run("cd /corpus; " + s);
    if (host.out == ours.out && host.code == ours.code) ++same;
  }

  // End to end through the command-line tool with a 10 MB file.
  std::string cli = SANDBOXD_CLI;
  if (cli.empty()) return {false, "command-line tool not built"};
  testkit::TempDir big;
  testkit::write_host(big / "big.bin", testkit::random_bytes(rng, 10 * 1000 * 1000));
  auto want = testkit::host_run("sha1sum " + testkit::shell_quote((big / "big.bin").string()));
  auto t0 = Clock::now();
  auto got = testkit::host_run(cli + " --mount " + testkit::shell_quote(big.path().string()) +
                               ":/mnt run /usr/bin/sha1sum /mnt/big.bin");
  double secs = seconds_since(t0);
  bool hash_ok = got.code == 0 && got.out.substr(0, 40) == want.out.substr(0, 40);
  std::ostringstream d;
  d << same << "/" << scripts.size() << " utility scripts identical over 50 files; 10 MB sha1sum via CLI "
    << (hash_ok ? "matches" : "differs") << " in " << std::fixed << std::setprecision(2) << secs << " s (limit 1 s)";
  return {same == static_cast<int>(scripts.size()) && hash_ok && secs < 1.0, d.str()};
}

// ---------------------------------------------------------------------------

Outcome check_shell() {
  if (!testkit::host_has("dash")) return {false, "dash not installed"};
  std::string fixture = testkit::read_host(std::string(SANDBOXD_GOLDEN_DIR) + "/file.txt");
  testkit::TempDir dir;
  testkit::write_host(dir / "file.txt", fixture);
  const std::string pipeline = "cat file.txt | grep apple > apples.txt; echo status $?";
  auto host = testkit::host_run("cd " + testkit::shell_quote(dir.path().string()) + " && dash -c " +
                                testkit::shell_quote(pipeline));
  std::string host_apples = testkit::read_host(dir / "apples.txt");

  Booted k;
  k->stage_file("/work/file.txt", fixture);
  auto ours = k->run("cd /work; " + pipeline);
  auto apples = k->read_file("/work/apples.txt");
  bool pipe_ok = ours.out == host.out && apples && *apples == host_apples && !host_apples.empty();

  bool status_ok = k->run("false; echo $?; true; echo $?").out == "1\n0\n" &&
                   k->run("grep zzz /work/file.txt; echo $?").out == "1\n";
  auto bg = k->run("sleep 0 & echo started; wait; echo reaped $?");
  k->wait_idle(std::chrono::seconds(5));
  auto a = k->audit();
  bool reaped = bg.out == "started\nreaped 0\n" && a.zombies == 0 && a.live_tasks == 0;
  bool codes = k->run("no-such-command").code == 127 && k->run("echo 'unterminated").code == 2;

  // Without any wait builtin, a live interactive shell reaps finished
  // background jobs from its SIGCHLD handler.
  LaunchOptions o;
  o.path = "/bin/sh";
  o.argv = {"sh", "-i"};
  o.interactive_stdin = true;
  auto sh = k->launch(o);
  sh->write_stdin("sleep 0 & sleep 0 & sleep 0 &\n");
  auto children = [&] {
    size_t n = 0;
    for (const auto& t : k->tasks())
      if (t.ppid == sh->pid()) ++n;
    return n;
  };
  testkit::eventually([&] { return children() > 0; }, 1000);
  bool sigchld = testkit::eventually([&] { return children() == 0; }) && k->task(sh->pid()).has_value();
  sh->write_stdin("exit 0\n");
  sigchld = sh->wait() == 0 && sigchld;

  std::ostringstream d;
  d << "pipeline " << (pipe_ok ? "matches dash" : "differs from dash") << ", $? " << (status_ok ? "ok" : "wrong")
    << ", background job reaped by wait " << (reaped ? "ok" : "wrong") << " and by SIGCHLD "
    << (sigchld ? "ok" : "wrong") << ", 127/2 " << (codes ? "ok" : "wrong");
  return {pipe_ok && status_ok && reaped && sigchld && codes, d.str()};
}

// ---------------------------------------------------------------------------

Outcome check_bench() {
  auto rs = bench_getpid({BenchMode::Baseline, BenchMode::Async, BenchMode::Sync}, 10000);
  double base = rs.at(0).stats.median_ns, async = rs.at(1).stats.median_ns, sync = rs.at(2).stats.median_ns;
  std::cout << bench_table(rs);
  std::ostringstream d;
  d << std::fixed << std::setprecision(0) << "medians baseline " << base << " ns, async " << async << " ns (x"
    << std::setprecision(2) << rs[1].ratio << "), sync " << std::setprecision(0) << sync << " ns (x"
    << std::setprecision(2) << rs[2].ratio << ")";
  return {base <= async && sync < async, d.str()};
}

// ---------------------------------------------------------------------------

std::string chunk_encode(std::mt19937_64& rng, const std::string& body) {
  std::string out = "HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n";
  for (size_t off = 0; off < body.size();) {
    size_t n = std::min<size_t>(body.size() - off, 1 + rng() % 700);
    char size[32];
    std::snprintf(size, sizeof size, rng() % 2 ? "%zx" : "%zX", n);
    out += size;
    if (rng() % 5 == 0) out += ";name=value";
    out += "\r\n" + body.substr(off, n) + "\r\n";
    off += n;
  }
  out += "0\r\n";
  if (rng() % 3 == 0) out += "X-Trailer: yes\r\n";
  return out + "\r\n";
}

std::optional<std::string> reference_decode(const std::string& raw) {
  namespace http = boost::beast::http;
  http::response_parser<http::string_body> p;
  p.eager(true);
  p.body_limit(boost::none);
  boost::beast::error_code ec;
  size_t used = 0;
  while (!p.is_done() && !ec && used < raw.size())
    used += p.put(boost::asio::buffer(raw.data() + used, raw.size() - used), ec);
  if (ec || !p.is_done()) return std::nullopt;
  return p.get().body();
}

Outcome check_http() {
  Booted k;
  std::mt19937_64 rng(53);
  std::string page = testkit::random_bytes(rng, 1 << 20);
  k->stage_file("/www/data.bin", page);
  std::atomic<bool> up{false};
  k->notify_on_listen(8080, [&] { up = true; });
  auto srv = k->system("httpd -p 8080 -r /www", nullptr, nullptr, nullptr);
  if (!testkit::eventually([&] { return up.load(); })) return {false, "httpd never listened"};
  HttpRequest req;
  req.path = "/data.bin";
  auto r = http_request_sync(*k, req);
  auto vfs_copy = k->read_file("/www/data.bin");
  bool get_ok = r.status == 200 && vfs_copy && str(r.body) == *vfs_copy;
  srv->kill();
  srv->wait();

  int agree = 0;
  for (int i = 0; i < 100; ++i) {
    std::string body = testkit::random_bytes(rng, rng() % 5000);
    std::string raw = chunk_encode(rng, body);
    auto ref = reference_decode(raw);
    try {
      auto ours = parse_response(bytes(raw));
      if (ref && *ref == body && str(ours.body) == *ref) ++agree;
    } catch (const Error&) {
    }
  }
  std::ostringstream d;
  d << "GET " << page.size() << " bytes " << (get_ok ? "identical to the VFS file" : "differs") << "; " << agree
    << "/100 chunked responses agree with the reference decoder";
  return {get_ok && agree == 100, d.str()};
}

// ---------------------------------------------------------------------------

#ifdef SANDBOXD_HAVE_TERM
Outcome check_terminal() {
  namespace beast = boost::beast;
  namespace asio = boost::asio;
  Booted k;
  TermService svc(*k);
  asio::io_context ioc;
  beast::websocket::stream<asio::ip::tcp::socket> ws(ioc);
  asio::ip::tcp::resolver res(ioc);
  asio::connect(ws.next_layer(), res.resolve("127.0.0.1", std::to_string(svc.port())));
  ws.handshake("127.0.0.1", "/");
  ws.text(true);
  ws.write(asio::buffer(handshake_json({})));
  beast::flat_buffer ack;
  ws.read(ack);
  auto pid = parse_ack(beast::buffers_to_string(ack.data()));
  if (!pid) return {false, "no handshake ack"};
  ws.binary(true);
  FrameDecoder dec;
  std::string out;
  auto send = [&](std::string_view s) { ws.write(asio::buffer(encode_frame({FrameKind::Stdin, bytes(s)}))); };
  auto until = [&](const std::string& needle) {
    while (out.find(needle) == std::string::npos) {
      beast::flat_buffer b;
      ws.read(b);
      auto d = b.data();
      dec.feed(std::span<const uint8_t>(static_cast<const uint8_t*>(d.data()), d.size()));
      while (auto f = dec.next())
        if (f->kind != FrameKind::Exit) out += str(f->payload);
    }
  };
  send("echo hi\n");
  until("hi\n");
  send("sleep 30\n");
  testkit::eventually([&] {
    for (const auto& t : k->tasks())
      if (!t.zombie && !t.argv.empty() && t.argv[0] == "sleep") return true;
    return false;
  });
  send("\x03");
  send("echo status $?\n");
  until("status 130\n");
  beast::get_lowest_layer(ws).close();
  bool killed = testkit::eventually([&] {
    auto t = k->task(*pid);
    return !t || t->zombie;
  });
  svc.stop();
  return {killed, std::string("echo hi rendered, Ctrl-C status 130, disconnect ") +
                      (killed ? "killed the shell" : "left the shell running")};
}
#endif

}  // namespace

int main() {
  struct Check {
    const char* name;
    Outcome (*fn)();
  };
  std::vector<Check> checks = {
      {"syscall conventions agree", check_syscall_paths},
      {"fork semantics", check_fork},
      {"pipe state machine and streaming", check_pipes},
      {"loopback sockets", check_sockets},
      {"overlay filesystem", check_overlay},
      {"utilities match host tools", check_utilities},
      {"shell pipeline and status", check_shell},
      {"getpid latency ordering", check_bench},
      {"http bridge", check_http},
#ifdef SANDBOXD_HAVE_TERM
      {"web terminal", check_terminal},
#endif
  };
  int failures = 0;
  for (const auto& c : checks) {
    Outcome o;
    auto t0 = Clock::now();
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " [" << std::fixed
              << std::setprecision(1) << seconds_since(t0) << " s]" << std::endl;
    if (!o.pass) ++failures;
  }
  return failures;
}
