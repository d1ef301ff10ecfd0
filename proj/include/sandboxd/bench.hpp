// bench.hpp - getpid latency under both syscall conventions, against a bare
// message ping-pong between a worker and a loop thread.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sandboxd {

enum class BenchMode { Baseline, Async, Sync };

const char* to_string(BenchMode m);

struct LatencyStats {
  size_t n = 0;
  double min_ns = 0;
  double median_ns = 0;
  // Nearest-rank 99th percentile.
  double p99_ns = 0;
  double mean_ns = 0;
};

// Throws std::invalid_argument on an empty sample set.
LatencyStats summarize(std::vector<double> samples_ns);

struct BenchResult {
  BenchMode mode = BenchMode::Baseline;
  LatencyStats stats;
  // median / baseline median.
  double ratio = 1.0;
};

// Per-call latencies in ns. Runs iters plus 20% warmup and drops the warmup.
// Throws std::invalid_argument when iters < 1000.
std::vector<double> bench_samples(BenchMode mode, uint32_t iters);

// The baseline is always measured so that ratios can be computed; it is
// reported only if listed in `modes`. Modes run interleaved in rounds of
// 1000 calls and the samples are pooled per mode.
std::vector<BenchResult> bench_getpid(const std::vector<BenchMode>& modes, uint32_t iters);

// "mode,median_ns,ratio" header followed by one line per result.
std::string bench_csv(const std::vector<BenchResult>& results);
std::string bench_table(const std::vector<BenchResult>& results);

}  // namespace sandboxd
