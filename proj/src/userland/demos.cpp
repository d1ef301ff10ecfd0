// forktest, and the two socket servers used by the bridge and socket tests.
#include <algorithm>

#include "util.hpp"

namespace sandboxd::userland {

namespace {

// forktest --------------------------------------------------------------------

// The "heap" handed across fork: magic, parent pid and a marker word.
constexpr uint32_t kForkMagic = 0x464f524b;  // "FORK"
constexpr uint64_t kMarker = 0xa5a5a5a5a5a5a5a5ull;
constexpr uint64_t kResumeAfterFork = 1;

struct ForkHeap {
  uint32_t parent = 0;
  uint64_t marker = 0;
};

Bytes save(const ForkHeap& h) {
  Bytes b;
  put_u32(b, kForkMagic);
  put_u32(b, h.parent);
  put_u64(b, h.marker);
  return b;
}

std::optional<ForkHeap> load(const Bytes& b) {
  if (b.size() != 16 || get_u32(b, 0) != kForkMagic) return std::nullopt;
  return ForkHeap{get_u32(b, 4), get_u64(b, 8)};
}

int forktest_main(GuestContext& ctx) {
  ForkHeap heap{static_cast<uint32_t>(ctx.getpid().v), kMarker};
  auto r = ctx.fork(save(heap), kResumeAfterFork);
  if (r.e == err::NOSYS) {
    report(ctx, "forktest", "fork", r.e);
    return 2;
  }
  if (!r) {
    report(ctx, "forktest", "fork", r.e);
    return 1;
  }
  int64_t child = r.v;
  // Mutate our copy; the child must keep seeing the original marker.
  heap.marker = ~kMarker;
  ctx.out("parent " + std::to_string(child) + "\n");
  ctx.flush();
  bool ok = child > 0 && child != heap.parent;
  int status = 0;
  Ret w;
  do {
    w = ctx.wait4(child, status, 0);
  } while (w.e == err::INTR);
  if (!w || w.v != child) {
    report(ctx, "forktest", "wait4 did not reap the child");
    ok = false;
  } else if (!wait::if_exited(status) || wait::exit_status(status) != 0) {
    report(ctx, "forktest", "child reported status " + std::to_string(status));
    ok = false;
  }
  int again = 0;
  auto w2 = ctx.wait4(child, again, 0);
  if (w2.e != err::CHILD) {
    report(ctx, "forktest", "second wait4 did not fail with ECHILD");
    ok = false;
  }
  if (heap.marker != ~kMarker) ok = false;
  return ok ? 0 : 1;
}

// Fork returns 0 in the child, which is where resume picks up.
int forktest_resume(GuestContext& ctx, const ForkSnapshot& snap) {
  auto heap = load(snap.heap);
  bool ok = heap && snap.resume_pc == kResumeAfterFork;
  ctx.out("child 0\n");
  ctx.flush();
  if (!ok) return 1;
  if (heap->marker != kMarker) return 1;
  if (ctx.getppid().v != heap->parent) return 1;
  if (ctx.getpid().v == heap->parent) return 1;
  heap->marker = 0;  // invisible to the parent
  return 0;
}

// shared server plumbing -------------------------------------------------------

struct ServerOpts {
  int64_t port = 8080;
  int64_t count = -1;
  std::string root = "/";
  int64_t chunk = 0;
};

std::optional<ServerOpts> server_opts(GuestContext& ctx, const char* prog, int64_t default_port) {
  auto f = parse_flags(ctx, prog, ctx.argv(), "", "pnrc");
  if (!f) return std::nullopt;
  ServerOpts o;
  o.port = default_port;
  auto num = [&](char c, int64_t& dst) {
    if (auto v = f->value(c); v && !parse_int(*v, dst)) {
      report(ctx, prog, std::string("bad number for -") + c + ": " + *v);
      return false;
    }
    return true;
  };
  if (!num('p', o.port) || !num('n', o.count) || !num('c', o.chunk)) return std::nullopt;
  if (auto r = f->value('r')) o.root = *r;
  return o;
}

// Returns the listening fd or -1 after reporting.
int listen_on(GuestContext& ctx, const char* prog, int64_t port) {
  auto s = ctx.socket();
  if (!s) {
    report(ctx, prog, "socket", s.e);
    return -1;
  }
  int fd = static_cast<int>(s.v);
  if (auto b = ctx.bind(fd, port); !b) {
    report(ctx, prog, "bind", b.e);
    return -1;
  }
  if (auto l = ctx.listen(fd, 0); !l) {
    report(ctx, prog, "listen", l.e);
    return -1;
  }
  return fd;
}

// echosrv -----------------------------------------------------------------------

int echosrv_main(GuestContext& ctx) {
  auto o = server_opts(ctx, "echosrv", 7);
  if (!o) return 64;
  int lfd = listen_on(ctx, "echosrv", o->port);
  if (lfd < 0) return 1;
  for (int64_t served = 0; o->count < 0 || served < o->count; ++served) {
    auto a = ctx.accept(lfd);
    if (a.e == err::INTR) {
      --served;
      continue;
    }
    if (!a) {
      report(ctx, "echosrv", "accept", a.e);
      return 1;
    }
    int cfd = static_cast<int>(a.v);
    FdReader in(ctx, cfd);
    for (auto c = in.chunk(); !c.empty(); c = in.chunk())
      if (!ctx.write_all(cfd, c)) break;
    ctx.close(cfd);
  }
  ctx.close(lfd);
  return 0;
}

// httpd -------------------------------------------------------------------------

std::string content_type(const std::string& path) {
  auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "html" || ext == "htm") return "text/html";
  if (ext == "txt") return "text/plain";
  if (ext == "css") return "text/css";
  if (ext == "js") return "application/javascript";
  if (ext == "json") return "application/json";
  if (ext == "png") return "image/png";
  return "application/octet-stream";
}

std::string hex(size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%zx", n);
  return buf;
}

void respond(GuestContext& ctx, int fd, int code, const std::string& reason, const std::string& type,
             const std::string& body, int64_t chunk) {
  std::string head = "HTTP/1.1 " + std::to_string(code) + " " + reason + "\r\n";
  head += "Content-Type: " + type + "\r\n";
  head += "Connection: close\r\n";
  if (chunk <= 0) {
    head += "Content-Length: " + std::to_string(body.size()) + "\r\n\r\n";
    ctx.write_all(fd, head);
    ctx.write_all(fd, body);
    return;
  }
  head += "Transfer-Encoding: chunked\r\n\r\n";
  ctx.write_all(fd, head);
  for (size_t off = 0; off < body.size(); off += static_cast<size_t>(chunk)) {
    size_t n = std::min(body.size() - off, static_cast<size_t>(chunk));
    ctx.write_all(fd, hex(n) + "\r\n");
    ctx.write_all(fd, std::string_view(body).substr(off, n));
    ctx.write_all(fd, "\r\n");
  }
  ctx.write_all(fd, "0\r\n\r\n");
}

// Decodes %XX escapes and drops the query string.
std::string url_path(const std::string& target) {
  std::string p = target.substr(0, target.find('?'));
  std::string out;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] == '%' && i + 2 < p.size() && std::isxdigit(static_cast<unsigned char>(p[i + 1])) &&
        std::isxdigit(static_cast<unsigned char>(p[i + 2]))) {
      out += static_cast<char>(std::stoi(p.substr(i + 1, 2), nullptr, 16));
      i += 2;
    } else {
      out += p[i];
    }
  }
  return out;
}

void serve_one(GuestContext& ctx, int fd, const ServerOpts& o) {
  std::string req;
  Bytes buf;
  while (req.find("\r\n\r\n") == std::string::npos && req.size() < 64 * 1024) {
    auto r = ctx.read(fd, buf, 16 * 1024);
    if (r.e == err::INTR) continue;
    if (!r || r.v == 0) break;
    req.append(buf.begin(), buf.end());
  }
  auto line_end = req.find("\r\n");
  std::string line = req.substr(0, line_end);
  auto sp1 = line.find(' ');
  auto sp2 = sp1 == std::string::npos ? std::string::npos : line.find(' ', sp1 + 1);
  if (sp2 == std::string::npos) {
    respond(ctx, fd, 400, "Bad Request", "text/plain", "bad request\n", 0);
    return;
  }
  std::string method = line.substr(0, sp1);
  std::string path = url_path(line.substr(sp1 + 1, sp2 - sp1 - 1));
  if (method != "GET") {
    respond(ctx, fd, 405, "Method Not Allowed", "text/plain", "method not allowed\n", 0);
    return;
  }
  if (path.empty() || path[0] != '/' || path.find("/../") != std::string::npos ||
      (path.size() >= 3 && path.compare(path.size() - 3, 3, "/..") == 0)) {
    respond(ctx, fd, 400, "Bad Request", "text/plain", "bad path\n", 0);
    return;
  }
  std::string file = o.root == "/" ? path : o.root + path;
  StatRecord st;
  if (ctx.stat(file, st) && st.is_dir()) file = join_path(file, "index.html");
  std::string body;
  if (auto r = ctx.read_file(file, body); !r) {
    respond(ctx, fd, 404, "Not Found", "text/plain", "not found\n", 0);
    return;
  }
  respond(ctx, fd, 200, "OK", content_type(file), body, o.chunk);
}

int httpd_main(GuestContext& ctx) {
  auto o = server_opts(ctx, "httpd", 8080);
  if (!o) return 64;
  int lfd = listen_on(ctx, "httpd", o->port);
  if (lfd < 0) return 1;
  for (int64_t served = 0; o->count < 0 || served < o->count; ++served) {
    auto a = ctx.accept(lfd);
    if (a.e == err::INTR) {
      --served;
      continue;
    }
    if (!a) {
      report(ctx, "httpd", "accept", a.e);
      return 1;
    }
    serve_one(ctx, static_cast<int>(a.v), *o);
    ctx.close(static_cast<int>(a.v));
  }
  ctx.close(lfd);
  return 0;
}

}  // namespace

void register_demos(ProgramRegistry& reg) {
  Program fork_prog = make_program("forktest", forktest_main);
  fork_prog.resume = forktest_resume;
  reg.add(std::move(fork_prog));
  reg.add(make_program("echosrv", echosrv_main));
  reg.add(make_program("httpd", httpd_main));
}

}  // namespace sandboxd::userland
