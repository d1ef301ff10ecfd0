// Python bindings: boot a kernel, run command lines, move files in and out,
// talk HTTP to in-kernel servers and run the getpid benchmark.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sandboxd/bench.hpp"
#include "sandboxd/http_bridge.hpp"
#include "sandboxd/kernel.hpp"
#include "sandboxd/userland.hpp"

namespace py = pybind11;
using namespace sandboxd;

namespace {

Convention parse_mode(const std::string& m) {
  if (m == "async") return Convention::Async;
  if (m == "sync") return Convention::Sync;
  throw py::value_error("mode must be 'async' or 'sync'");
}

BenchMode parse_bench_mode(const std::string& m) {
  if (m == "baseline") return BenchMode::Baseline;
  if (m == "async") return BenchMode::Async;
  if (m == "sync") return BenchMode::Sync;
  throw py::value_error("unknown bench mode: " + m);
}

class PyKernel {
 public:
  PyKernel(const std::string& mode, const std::vector<std::pair<std::string, std::string>>& mounts,
           const std::string& underlay, size_t pipe_capacity)
      : reg_(make_registry()) {
    KernelConfig cfg;
    cfg.mode = parse_mode(mode);
    cfg.fs.underlay = underlay;
    if (pipe_capacity > 0) cfg.pipe_capacity = pipe_capacity;
    for (const auto& [host, guest] : mounts) cfg.fs.mounts.emplace_back(host, guest);
    k_ = std::make_unique<Kernel>(reg_, std::move(cfg));
    py::gil_scoped_release nogil;
    k_->boot_sync();
  }
  ~PyKernel() { close(); }

  void close() {
    if (!k_) return;
    py::gil_scoped_release nogil;
    k_->shutdown();
    k_.reset();
  }

  Kernel& k() {
    if (!k_) throw std::runtime_error("kernel is closed");
    return *k_;
  }

  py::tuple run(const std::string& cmdline, const py::bytes& stdin_data) {
    Kernel& kernel = k();
    std::string in = stdin_data;
    Kernel::RunResult r;
    {
      py::gil_scoped_release nogil;
      r = kernel.run(cmdline, in);
    }
    return py::make_tuple(r.code, py::bytes(r.out), py::bytes(r.err));
  }

  void stage_file(const std::string& path, const py::bytes& data, uint32_t mode) {
    std::string d = data;
    Kernel& kernel = k();
    py::gil_scoped_release nogil;
    kernel.stage_file(path, d, mode);
  }

  py::object read_file(const std::string& path) {
    std::optional<std::string> d;
    {
      Kernel& kernel = k();
      py::gil_scoped_release nogil;
      d = kernel.read_file(path);
    }
    if (!d) return py::none();
    return py::bytes(*d);
  }

  py::list tasks() {
    std::vector<TaskInfo> ts;
    {
      Kernel& kernel = k();
      py::gil_scoped_release nogil;
      ts = kernel.tasks();
    }
    py::list out;
    for (const auto& t : ts) {
      py::dict d;
      d["pid"] = t.pid;
      d["ppid"] = t.ppid;
      d["zombie"] = t.zombie;
      d["cwd"] = t.cwd;
      d["argv"] = t.argv;
      d["mode"] = t.conv == Convention::Sync ? "sync" : "async";
      d["fds"] = t.fds;
      out.append(d);
    }
    return out;
  }

  py::dict audit() {
    KernelAudit a;
    {
      Kernel& kernel = k();
      py::gil_scoped_release nogil;
      a = kernel.audit();
    }
    py::dict d;
    d["envelopes"] = a.envelopes;
    d["replies"] = a.replies;
    d["discarded"] = a.discarded;
    d["parked"] = a.parked;
    d["exits"] = a.exits;
    d["reaped"] = a.reaped;
    d["zombies"] = a.zombies;
    d["live_tasks"] = a.live_tasks;
    d["refcounts_ok"] = a.refcounts_ok;
    d["correlation_ok"] = a.correlation_ok();
    return d;
  }

  // Starts `cmdline` in the background and waits until something listens on
  // `port`. Returns the session's root pid.
  uint32_t start_server(const std::string& cmdline, uint16_t port, int timeout_ms) {
    Kernel& kernel = k();
    py::gil_scoped_release nogil;
    auto up = std::make_shared<std::promise<void>>();
    kernel.notify_on_listen(port, [up] { up->set_value(); });
    auto s = kernel.system(cmdline, nullptr, nullptr, nullptr);
    servers_.push_back(s);
    if (up->get_future().wait_for(std::chrono::milliseconds(timeout_ms)) != std::future_status::ready) {
      s->kill();
      throw std::runtime_error("nothing listened on port " + std::to_string(port));
    }
    return s->pid();
  }

  py::tuple http(const std::string& method, const std::string& path, uint16_t port, const py::bytes& body,
                 const HttpHeaders& headers) {
    HttpRequest req;
    req.method = method;
    req.path = path;
    req.port = port;
    req.headers = headers;
    std::string b = body;
    req.body.assign(b.begin(), b.end());
    HttpResponse r;
    {
      Kernel& kernel = k();
      py::gil_scoped_release nogil;
      r = http_request_sync(kernel, req);
    }
    return py::make_tuple(r.status, r.headers, py::bytes(std::string(r.body.begin(), r.body.end())));
  }

  int kill(uint32_t pid, int32_t sig) {
    Kernel& kernel = k();
    py::gil_scoped_release nogil;
    return kernel.kill(pid, sig);
  }

  bool wait_idle(int timeout_ms) {
    Kernel& kernel = k();
    py::gil_scoped_release nogil;
    for (auto& s : servers_) s->kill();
    servers_.clear();
    return kernel.wait_idle(std::chrono::milliseconds(timeout_ms));
  }

 private:
  ProgramRegistry reg_;
  std::unique_ptr<Kernel> k_;
  std::vector<std::shared_ptr<HostSession>> servers_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "User-space Unix kernel with guest processes, pipes, sockets and an overlay filesystem";

  py::class_<PyKernel>(m, "Kernel")
      .def(py::init<const std::string&, const std::vector<std::pair<std::string, std::string>>&, const std::string&,
                    size_t>(),
           py::arg("mode") = "async", py::arg("mounts") = std::vector<std::pair<std::string, std::string>>{},
           py::arg("underlay") = "", py::arg("pipe_capacity") = 0)
      .def("close", &PyKernel::close)
      .def("run", &PyKernel::run, py::arg("cmdline"), py::arg("stdin") = py::bytes(""))
      .def("stage_file", &PyKernel::stage_file, py::arg("path"), py::arg("data"), py::arg("mode") = 0644)
      .def("read_file", &PyKernel::read_file, py::arg("path"))
      .def("tasks", &PyKernel::tasks)
      .def("audit", &PyKernel::audit)
      .def("start_server", &PyKernel::start_server, py::arg("cmdline"), py::arg("port"),
           py::arg("timeout_ms") = 5000)
      .def("http", &PyKernel::http, py::arg("method"), py::arg("path"), py::arg("port") = 8080,
           py::arg("body") = py::bytes(""), py::arg("headers") = HttpHeaders{})
      .def("kill", &PyKernel::kill, py::arg("pid"), py::arg("sig"))
      .def("wait_idle", &PyKernel::wait_idle, py::arg("timeout_ms") = 5000);

  m.def(
      "bench_getpid",
      [](const std::vector<std::string>& modes, uint32_t iters) {
        std::vector<BenchMode> ms;
        for (const auto& s : modes) ms.push_back(parse_bench_mode(s));
        std::vector<BenchResult> rs;
        {
          py::gil_scoped_release nogil;
          rs = bench_getpid(ms, iters);
        }
        py::list out;
        for (const auto& r : rs) {
          py::dict d;
          d["mode"] = to_string(r.mode);
          d["n"] = r.stats.n;
          d["min_ns"] = r.stats.min_ns;
          d["median_ns"] = r.stats.median_ns;
          d["p99_ns"] = r.stats.p99_ns;
          d["mean_ns"] = r.stats.mean_ns;
          d["ratio"] = r.ratio;
          out.append(d);
        }
        return out;
      },
      py::arg("modes") = std::vector<std::string>{"baseline", "async", "sync"}, py::arg("iters") = 10000);

  m.def("trap_names", [] {
    std::vector<std::string> names;
    for (const auto& t : trap_table()) names.emplace_back(t.name);
    return names;
  });
  m.def("programs", [] { return make_registry().names(); });
  m.def("decode_chunked", [](const py::bytes& data) -> py::object {
    std::string s = data;
    auto r = decode_chunked(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
    if (!r) return py::none();
    return py::bytes(std::string(r->begin(), r->end()));
  });
}
