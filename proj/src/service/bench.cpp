#include "sandboxd/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "sandboxd/channel.hpp"
#include "sandboxd/error.hpp"
#include "sandboxd/kernel.hpp"
#include "sandboxd/runtime.hpp"

namespace sandboxd {

namespace {

using Clock = std::chrono::steady_clock;

double ns_between(Clock::time_point a, Clock::time_point b) {
  return static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(b - a).count());
}

uint32_t warmup_for(uint32_t iters) { return iters / 5; }

constexpr uint32_t kRoundIters = 1000;

// A loop thread that echoes every frame straight back to its sender: the
// same channel hops as a syscall, with no kernel work in between.
class PingLoop : public KernelEndpoint {
 public:
  PingLoop() : thread_([this] { run(); }) {}
  ~PingLoop() override {
    events_.close();
    thread_.join();
  }

  void adopt(const WorkerHandle& w) {
    std::lock_guard lk(mu_);
    workers_[w->id()] = w;
  }

  void post_from_guest(uint64_t worker_id, Convention, Bytes frame) override {
    events_.push({worker_id, std::move(frame)});
  }

 private:
  void run() {
    while (auto ev = events_.pop()) {
      WorkerHandle w;
      {
        std::lock_guard lk(mu_);
        auto it = workers_.find(ev->first);
        if (it != workers_.end()) w = it->second;
      }
      if (!w) continue;
      try {
        send_to_guest(*w, EncodedReply{std::move(ev->second)});
      } catch (const Error&) {
      }
    }
  }

  Channel<std::pair<uint64_t, Bytes>> events_;
  std::mutex mu_;
  std::map<uint64_t, WorkerHandle> workers_;
  std::thread thread_;
};

std::vector<double> baseline_samples(uint32_t total) {
  auto samples = std::make_shared<std::vector<double>>();
  ProgramRegistry reg;
  reg.add(make_program("ping", [samples, total](GuestContext& ctx) {
    samples->reserve(total);
    Bytes frame(16, 0);
    for (uint32_t i = 0; i < total; ++i) {
      auto t0 = Clock::now();
      ctx.worker().post(Convention::Async, frame);
      auto msg = ctx.worker().inbox().pop();
      auto t1 = Clock::now();
      if (!msg) throw GuestKilled{};
      samples->push_back(ns_between(t0, t1));
    }
    return 0;
  }));
  PingLoop loop;
  GuestImage image;
  image.entry = RegisteredEntry{"ping"};
  image.argv = {"ping"};
  auto w = launch_worker(image, reg, &loop);
  loop.adopt(w);
  send_to_guest(*w, InitMessage{{"ping"}, {}, std::nullopt});
  while (!w->finished()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  w->join();
  return std::move(*samples);
}

std::vector<double> getpid_samples(Convention conv, uint32_t total) {
  auto samples = std::make_shared<std::vector<double>>();
  ProgramRegistry reg;
  reg.add(make_program("getpid-bench", [samples, total](GuestContext& ctx) {
    samples->reserve(total);
    for (uint32_t i = 0; i < total; ++i) {
      auto t0 = Clock::now();
      auto r = ctx.getpid();
      auto t1 = Clock::now();
      if (!r) return 1;
      samples->push_back(ns_between(t0, t1));
    }
    return 0;
  }));
  KernelConfig cfg;
  cfg.mode = conv;
  Kernel k(reg, cfg);
  k.boot_sync();
  LaunchOptions o;
  o.path = "/usr/bin/getpid-bench";
  o.argv = {"getpid-bench"};
  int code = k.launch(std::move(o))->wait();
  k.shutdown();
  if (code != 0 || samples->size() != total) throw std::runtime_error("getpid benchmark guest failed");
  return std::move(*samples);
}

}  // namespace

const char* to_string(BenchMode m) {
  switch (m) {
    case BenchMode::Baseline: return "baseline";
    case BenchMode::Async: return "async";
    case BenchMode::Sync: return "sync";
  }
  return "?";
}

LatencyStats summarize(std::vector<double> s) {
  if (s.empty()) throw std::invalid_argument("no samples");
  std::sort(s.begin(), s.end());
  LatencyStats st;
  st.n = s.size();
  st.min_ns = s.front();
  size_t mid = s.size() / 2;
  st.median_ns = s.size() % 2 ? s[mid] : (s[mid - 1] + s[mid]) / 2;
  size_t rank = static_cast<size_t>(std::ceil(0.99 * static_cast<double>(s.size())));
  st.p99_ns = s[std::max<size_t>(rank, 1) - 1];
  st.mean_ns = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  return st;
}

std::vector<double> bench_samples(BenchMode mode, uint32_t iters) {
  if (iters < 1000) throw std::invalid_argument("at least 1000 iterations are required");
  uint32_t warm = warmup_for(iters);
  std::vector<double> all;
  switch (mode) {
    case BenchMode::Baseline: all = baseline_samples(iters + warm); break;
    case BenchMode::Async: all = getpid_samples(Convention::Async, iters + warm); break;
    case BenchMode::Sync: all = getpid_samples(Convention::Sync, iters + warm); break;
  }
  all.erase(all.begin(), all.begin() + warm);
  return all;
}

std::vector<BenchResult> bench_getpid(const std::vector<BenchMode>& modes, uint32_t iters) {
  if (iters < 1000) throw std::invalid_argument("at least 1000 iterations are required");
  // Modes alternate in rounds so that host drift hits all of them alike.
  std::vector<BenchMode> order{BenchMode::Baseline};
  for (auto m : modes)
    if (std::find(order.begin(), order.end(), m) == order.end()) order.push_back(m);
  std::map<BenchMode, std::vector<double>> pooled;
  for (uint32_t done = 0; done < iters;) {
    uint32_t n = std::min(kRoundIters, iters - done);
    // A short tail is folded into the previous round.
    if (iters - done - n < kRoundIters) n = iters - done;
    for (auto m : order) {
      auto s = bench_samples(m, n);
      pooled[m].insert(pooled[m].end(), s.begin(), s.end());
    }
    done += n;
  }
  auto base = summarize(pooled[BenchMode::Baseline]);
  std::vector<BenchResult> out;
  for (auto m : modes) {
    BenchResult r;
    r.mode = m;
    r.stats = m == BenchMode::Baseline ? base : summarize(pooled[m]);
    r.ratio = base.median_ns > 0 ? r.stats.median_ns / base.median_ns : 0;
    out.push_back(r);
  }
  return out;
}

std::string bench_csv(const std::vector<BenchResult>& results) {
  std::string out = "mode,median_ns,ratio\n";
  char buf[128];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%s,%.0f,%.3f\n", to_string(r.mode), r.stats.median_ns, r.ratio);
    out += buf;
  }
  return out;
}

std::string bench_table(const std::vector<BenchResult>& results) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-9s %8s %10s %10s %10s %10s %7s\n", "mode", "n", "min_ns", "median_ns", "p99_ns",
                "mean_ns", "ratio");
  out += buf;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-9s %8zu %10.0f %10.0f %10.0f %10.0f %7.3f\n", to_string(r.mode), r.stats.n,
                  r.stats.min_ns, r.stats.median_ns, r.stats.p99_ns, r.stats.mean_ns, r.ratio);
    out += buf;
  }
  return out;
}

}  // namespace sandboxd
