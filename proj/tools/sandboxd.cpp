// sandboxd - command-line front end: run guest programs, an interactive
// shell, the getpid benchmark, the terminal service and the HTTP bridge.
#include <poll.h>
#include <signal.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <future>
#include <iostream>
#include <thread>

#include "sandboxd/bench.hpp"
#include "sandboxd/http_bridge.hpp"
#include "sandboxd/kernel.hpp"
#ifdef SANDBOXD_HAVE_TERM
#include "sandboxd/term.hpp"
#endif
#include "sandboxd/userland.hpp"

using namespace sandboxd;

namespace {

constexpr int kExitUsage = 64;
constexpr int kExitBoot = 71;

struct Globals {
  std::vector<std::string> mounts;
  std::string underlay;
  std::string mode;
  size_t pipe_cap = 0;
};

// Throws CLI::ValidationError on a malformed flag.
KernelConfig make_config(const Globals& g) {
  KernelConfig c = KernelConfig::from_env();
  if (!g.mode.empty()) c.mode = g.mode == "sync" ? Convention::Sync : Convention::Async;
  if (g.pipe_cap > 0) c.pipe_capacity = g.pipe_cap;
  c.fs.underlay = g.underlay;
  for (const auto& m : g.mounts) {
    auto colon = m.rfind(":/");
    if (colon == std::string::npos || colon == 0) throw CLI::ValidationError("--mount", "expected HOSTDIR:/GUESTPATH");
    c.fs.mounts.emplace_back(m.substr(0, colon), m.substr(colon + 1));
  }
  return c;
}

void write_fd(int fd, std::span<const uint8_t> b) {
  while (!b.empty()) {
    ssize_t n = ::write(fd, b.data(), b.size());
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return;
    b = b.subspan(static_cast<size_t>(n));
  }
}

// Routes SIGINT/SIGTERM to a handler thread instead of killing the process.
class SignalThread {
 public:
  explicit SignalThread(std::function<void(int)> on_signal) : fn_(std::move(on_signal)) {
    sigemptyset(&set_);
    sigaddset(&set_, SIGINT);
    sigaddset(&set_, SIGTERM);
    sigaddset(&set_, SIGUSR1);
    pthread_sigmask(SIG_BLOCK, &set_, nullptr);
    thread_ = std::thread([this] {
      for (;;) {
        int sig = 0;
        if (sigwait(&set_, &sig) != 0) continue;
        if (sig == SIGUSR1 && done_) return;
        fn_(sig);
      }
    });
  }
  ~SignalThread() {
    done_ = true;
    pthread_kill(thread_.native_handle(), SIGUSR1);
    thread_.join();
  }

 private:
  sigset_t set_;
  std::function<void(int)> fn_;
  std::atomic<bool> done_{false};
  std::thread thread_;
};

// Copies host stdin into the session until EOF or until `stop` is set.
std::thread forward_stdin(std::shared_ptr<HostSession> s, std::atomic<bool>& stop) {
  return std::thread([s, &stop] {
    std::vector<char> buf(64 * 1024);
    while (!stop) {
      pollfd p{0, POLLIN, 0};
      int r = ::poll(&p, 1, 50);
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) {
        if (r < 0) break;
        continue;
      }
      ssize_t n = ::read(0, buf.data(), buf.size());
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) break;
      s->write_stdin(std::string_view(buf.data(), static_cast<size_t>(n)));
    }
    s->close_stdin();
  });
}

int boot(Kernel& k) {
  try {
    k.boot_sync();
    return 0;
  } catch (const Error& e) {
    std::cerr << "sandboxd: " << e.what() << "\n";
    return kExitBoot;
  }
}

int run_program(const KernelConfig& cfg, std::string path, std::vector<std::string> argv) {
  std::shared_ptr<HostSession> s;
  std::mutex mu;
  // Blocks the signals before any kernel thread exists, so only this thread
  // ever sees them.
  SignalThread sigs([&](int sig) {
    std::lock_guard lk(mu);
    if (!s) return;
    if (sig == SIGINT)
      s->interrupt();
    else
      s->kill();
  });
  auto reg = make_registry();
  Kernel k(reg, cfg);
  if (int e = boot(k)) return e;
  if (path.find('/') == std::string::npos) path = "/usr/bin/" + path;
  LaunchOptions o;
  o.path = path;
  o.argv = std::move(argv);
  o.interactive_stdin = true;
  o.on_stdout = [](std::span<const uint8_t> b) { write_fd(1, b); };
  o.on_stderr = [](std::span<const uint8_t> b) { write_fd(2, b); };
  {
    std::lock_guard lk(mu);
    s = k.launch(std::move(o));
  }
  std::atomic<bool> stop{false};
  std::thread in = forward_stdin(s, stop);
  int code = s->wait();
  stop = true;
  in.join();
  k.call([] { return 0; });
  k.shutdown();
  return code;
}

int bench(const KernelConfig&, uint32_t iters, bool csv, const std::vector<std::string>& modes) {
  std::vector<BenchMode> ms;
  for (const auto& m : modes) {
    if (m == "baseline")
      ms.push_back(BenchMode::Baseline);
    else if (m == "async")
      ms.push_back(BenchMode::Async);
    else if (m == "sync")
      ms.push_back(BenchMode::Sync);
  }
  if (ms.empty()) ms = {BenchMode::Baseline, BenchMode::Async, BenchMode::Sync};
  auto results = bench_getpid(ms, iters);
  std::cout << (csv ? bench_csv(results) : bench_table(results));
  return 0;
}

#ifdef SANDBOXD_HAVE_TERM
int serve(const KernelConfig& cfg, const std::string& listen) {
  auto colon = listen.rfind(':');
  std::string host = colon == std::string::npos ? listen : listen.substr(0, colon);
  uint16_t port = 0;
  if (colon != std::string::npos) {
    try {
      port = static_cast<uint16_t>(std::stoul(listen.substr(colon + 1)));
    } catch (const std::exception&) {
      std::cerr << "sandboxd: bad --listen address " << listen << "\n";
      return kExitUsage;
    }
  }
  std::promise<void> quit;
  std::atomic<bool> once{false};
  SignalThread sigs([&](int) {
    if (!once.exchange(true)) quit.set_value();
  });
  auto reg = make_registry();
  Kernel k(reg, cfg);
  if (int e = boot(k)) return e;
  std::unique_ptr<TermService> svc;
  try {
    svc = std::make_unique<TermService>(k, host, port);
  } catch (const std::exception& e) {
    std::cerr << "sandboxd: cannot listen on " << listen << ": " << e.what() << "\n";
    k.shutdown();
    return kExitBoot;
  }
  std::cerr << "sandboxd: terminal service on ws://" << host << ":" << svc->port() << "/\n";
  quit.get_future().wait();
  svc->stop();
  k.shutdown();
  return 0;
}
#endif

struct HttpArgs {
  uint16_t port = 8080;
  std::string method = "GET";
  std::vector<std::string> headers;
  std::string data;
  std::string start;
  std::string path = "/";
  bool include = false;
  int wait_ms = 5000;
};

int http(const KernelConfig& cfg, const HttpArgs& a) {
  HttpRequest req;
  req.method = a.method;
  req.path = a.path;
  req.port = a.port;
  req.body = to_bytes(a.data);
  for (const auto& h : a.headers) {
    auto colon = h.find(':');
    if (colon == std::string::npos) {
      std::cerr << "sandboxd: bad header '" << h << "' (expected Name: value)\n";
      return kExitUsage;
    }
    std::string v = h.substr(colon + 1);
    v.erase(0, v.find_first_not_of(' '));
    req.headers.emplace_back(h.substr(0, colon), v);
  }
  auto reg = make_registry();
  Kernel k(reg, cfg);
  if (int e = boot(k)) return e;
  std::shared_ptr<HostSession> server;
  if (!a.start.empty()) {
    auto up = std::make_shared<std::promise<void>>();
    auto ready = up->get_future();
    k.notify_on_listen(a.port, [up] { up->set_value(); });
    server = k.system(a.start, nullptr, [](std::span<const uint8_t> b) { write_fd(2, b); },
                      [](std::span<const uint8_t> b) { write_fd(2, b); });
    if (ready.wait_for(std::chrono::milliseconds(a.wait_ms)) != std::future_status::ready)
      std::cerr << "sandboxd: nothing is listening on port " << a.port << " yet\n";
  }
  int code = 0;
  try {
    auto res = http_request_sync(k, req);
    if (a.include) {
      std::string head = "HTTP/1.1 " + std::to_string(res.status) + " " + res.reason + "\r\n";
      for (const auto& [n, v] : res.headers) head += n + ": " + v + "\r\n";
      head += "\r\n";
      write_fd(1, to_bytes(head));
    }
    write_fd(1, res.body);
    code = res.status >= 200 && res.status < 300 ? 0 : 1;
  } catch (const Error& e) {
    std::cerr << "sandboxd: " << e.what() << "\n";
    code = e.kind() == ErrorKind::ConnectionRefused ? 7 : 1;
  }
  if (server) server->kill();
  k.shutdown();
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  ::signal(SIGPIPE, SIG_IGN);
  CLI::App app{"sandboxd - a user-space Unix kernel with guest utilities"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--mount", g.mounts, "Copy a host directory into the filesystem (HOSTDIR:/GUESTPATH)");
  app.add_option("--underlay", g.underlay, "Read-only lazy lower layer (dir:PATH or http://...)");
  app.add_option("--mode", g.mode, "System call convention")->check(CLI::IsMember({"sync", "async"}));
  app.add_option("--pipe-cap", g.pipe_cap, "Pipe capacity in bytes")->check(CLI::PositiveNumber);

  auto* run = app.add_subcommand("run", "Run a guest program");
  std::string prog;
  run->add_option("program", prog, "Guest path or a name under /usr/bin")->required();
  // Everything after the program, dashes included, belongs to the guest.
  run->prefix_command();

  auto* sh = app.add_subcommand("sh", "Interactive shell");

  auto* bn = app.add_subcommand("bench", "getpid latency under each convention");
  uint32_t iters = 10000;
  bool csv = false;
  std::vector<std::string> modes;
  bn->add_option("--iters", iters, "Measured calls per mode")->check(CLI::Range(1000u, 100000000u));
  bn->add_flag("--csv", csv, "Print mode,median_ns,ratio lines");
  bn->add_option("--modes", modes, "Subset of baseline, async, sync")
      ->check(CLI::IsMember({"baseline", "async", "sync"}));

#ifdef SANDBOXD_HAVE_TERM
  auto* sv = app.add_subcommand("serve", "Websocket terminal service");
  std::string listen = "127.0.0.1:8022";
  sv->add_option("--listen", listen, "ADDRESS:PORT");
#endif

  auto* ht = app.add_subcommand("http", "HTTP request to a server inside the kernel");
  HttpArgs ha;
  ht->add_option("--port", ha.port, "Guest port");
  ht->add_option("--method,-X", ha.method, "Request method");
  ht->add_option("--header,-H", ha.headers, "Extra header, Name: value");
  ht->add_option("--data,-d", ha.data, "Request body");
  ht->add_option("--start", ha.start, "Shell command that starts the server first");
  ht->add_option("--wait-ms", ha.wait_ms, "How long to wait for the server to listen");
  ht->add_flag("--include,-i", ha.include, "Print the status line and headers");
  ht->add_option("path", ha.path, "Request target");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  KernelConfig cfg;
  try {
    cfg = make_config(g);
  } catch (const CLI::ParseError& e) {
    std::cerr << "sandboxd: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*run) {
      std::vector<std::string> av{prog.substr(prog.rfind('/') + 1)};
      auto args = run->remaining();
      av.insert(av.end(), args.begin(), args.end());
      return run_program(cfg, prog, av);
    }
    if (*sh) return run_program(cfg, cfg.shell, {"sh", "-i"});
    if (*bn) return bench(cfg, iters, csv, modes);
#ifdef SANDBOXD_HAVE_TERM
    if (*sv) return serve(cfg, listen);
#endif
    if (*ht) return http(cfg, ha);
  } catch (const std::exception& e) {
    std::cerr << "sandboxd: " << e.what() << "\n";
    return 70;
  }
  return kExitUsage;
}
