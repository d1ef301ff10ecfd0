#include <doctest.h>

#include <random>
#include <sstream>

#include "sandboxd/kernel.hpp"
#include "sandboxd/runtime.hpp"
#include "sandboxd/userland.hpp"
#include "support.hpp"

using namespace sandboxd;
using testkit::Booted;

namespace {

// Exercises every non-process trap and prints one line per result, so the
// transcripts from the two conventions can be compared byte for byte.
int sweep_main(GuestContext& ctx) {
  std::ostringstream log;
  auto note = [&](const char* what, const Ret& r) { log << what << ' ' << r.v << ' ' << r.e << '\n'; };
  std::mt19937_64 rng(std::stoull(ctx.argv().at(1)));

  note("mkdir", ctx.mkdir("/w"));
  note("mkdir-again", ctx.mkdir("/w"));
  note("chdir", ctx.chdir("/w"));
  std::string cwd;
  note("getcwd", ctx.getcwd(cwd));
  log << cwd << '\n';

  auto fd = ctx.open("f", oflag::RDWR | oflag::CREAT, 0640);
  note("open", fd);
  std::string payload = testkit::random_bytes(rng, 5000);
  note("write", ctx.write_all(static_cast<int>(fd.v), payload));
  note("seek", ctx.llseek(static_cast<int>(fd.v), 100, seek::SET));
  Bytes buf;
  note("read", ctx.read(static_cast<int>(fd.v), buf, 64));
  log << (std::string(buf.begin(), buf.end()) == payload.substr(100, 64)) << '\n';
  note("pread", ctx.pread(static_cast<int>(fd.v), buf, 10, 4995));
  note("pwrite", ctx.pwrite(static_cast<int>(fd.v), Bytes{'x'}, 6000));
  StatRecord st;
  note("fstat", ctx.fstat(static_cast<int>(fd.v), st));
  log << st.size << ' ' << std::oct << (st.mode & 07777) << std::dec << '\n';
  note("close", ctx.close(static_cast<int>(fd.v)));
  note("close-again", ctx.close(static_cast<int>(fd.v)));
  note("stat", ctx.stat("/w/f", st));
  note("lstat-missing", ctx.lstat("/w/none", st));
  note("access", ctx.access("f", amode::READ));
  note("utimes", ctx.utimes("f", 5, 6));
  ctx.stat("f", st);
  log << st.atime_ns << ' ' << st.mtime_ns << '\n';
  std::string target;
  note("readlink", ctx.readlink("f", target));

  for (int i = 0; i < 40; ++i) ctx.open("n" + std::to_string(i), oflag::WRONLY | oflag::CREAT);
  std::vector<DirentRecord> ents;
  note("list", ctx.list_dir("/w", ents));
  for (const auto& e : ents) log << e.name << ':' << int(e.dtype) << ' ';
  log << '\n';
  note("unlink", ctx.unlink("n0"));
  note("rmdir-notempty", ctx.rmdir("/w"));
  note("open-dir-write", ctx.open("/w", oflag::WRONLY));

  std::array<int, 2> p{};
  note("pipe", ctx.pipe(p));
  note("pipe-write", ctx.write_all(p[1], "through the pipe"));
  note("pipe-close", ctx.close(p[1]));
  std::string got;
  for (;;) {
    auto r = ctx.read(p[0], buf, 5);
    if (!r || r.v == 0) break;
    got.append(buf.begin(), buf.end());
  }
  log << got << '\n';

  auto s = ctx.socket();
  note("socket", s);
  note("bind", ctx.bind(static_cast<int>(s.v), 0));
  note("getsockname", ctx.getsockname(static_cast<int>(s.v)));
  note("listen", ctx.listen(static_cast<int>(s.v)));
  auto c = ctx.socket();
  note("connect-refused", ctx.connect(static_cast<int>(c.v), 9));
  note("getppid", ctx.getppid());
  note("kill-missing", ctx.kill(999999, sig::TERM));
  int status = 0;
  note("wait-none", ctx.wait4(-1, status));
  note("spawn", ctx.spawn("/usr/bin/true", {"true"}, ctx.environ()));
  note("wait", Ret{ctx.wait4(-1, status).v > 0, 0});
  log << status << '\n';

  ctx.out(log.str());
  return 0;
}

ProgramRegistry registry() {
  ProgramRegistry reg = make_registry();
  reg.add(make_program("sweep", sweep_main));
  reg.add(make_program("asyncprobe", [](GuestContext& ctx) {
    if (ctx.convention() != Convention::Async) return 3;
    std::vector<uint32_t> order;
    int32_t nosys = 0;
    ctx.syscall_async("nosuchcall", {}, [&](const CallResult& r) { nosys = r.err; });
    for (uint32_t i = 0; i < 5; ++i)
      ctx.syscall_async(Trap::Getpid, {}, [&order, i](const CallResult&) { order.push_back(i); });
    ctx.pump_until([&] { return ctx.outstanding() == 0; });
    ctx.out("nosys " + std::to_string(nosys) + " order");
    for (auto i : order) ctx.out(" " + std::to_string(i));
    ctx.out("\n");
    return 0;
  }));
  return reg;
}

}  // namespace

TEST_CASE("sync and async conventions produce identical transcripts") {
  for (int seed : {1, 2, 3}) {
    CAPTURE(seed);
    Booted a(registry(), testkit::config_for(Convention::Async));
    Booted s(registry(), testkit::config_for(Convention::Sync));
    auto ra = a->run("sweep " + std::to_string(seed));
    auto rs = s->run("sweep " + std::to_string(seed));
    CHECK(ra.code == 0);
    CHECK(rs.code == 0);
    CHECK(ra.out.size() > 200);
    CHECK(ra.out == rs.out);
    for (Kernel* k : {&*a, &*s}) {
      REQUIRE(k->wait_idle(std::chrono::seconds(5)));
      CHECK(k->audit().correlation_ok());
      CHECK(k->audit().refcounts_ok);
    }
  }
}

TEST_CASE("async continuations run once each and unknown names give ENOSYS") {
  Booted k(registry(), testkit::config_for(Convention::Async));
  auto r = k->run("asyncprobe");
  CHECK(r.out == "nosys " + std::to_string(err::NOSYS) + " order 0 1 2 3 4\n");
}

TEST_CASE("guests learn their convention from the environment") {
  for (auto conv : {Convention::Async, Convention::Sync}) {
    Booted k(testkit::config_for(conv));
    auto r = k->run("echo $SANDBOXD_MODE");
    CHECK(r.out == (conv == Convention::Sync ? "sync\n" : "async\n"));
  }
}
