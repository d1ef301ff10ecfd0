// Helpers shared by the unit and acceptance tests.
#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sandboxd/kernel.hpp"
#include "sandboxd/runtime.hpp"
#include "sandboxd/userland.hpp"

namespace testkit {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "sandboxd-test-XXXXXX").string();
    if (::mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline void write_host(const fs::path& p, std::string_view data) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
}

inline std::string read_host(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  return out + "'";
}

struct HostResult {
  int code = -1;
  std::string out;
};

// Runs `cmd` under the host /bin/sh and captures stdout.
inline HostResult host_run(const std::string& cmd) {
  HostResult r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  std::array<char, 65536> buf;
  size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  int st = ::pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : 128 + WTERMSIG(st);
  return r;
}

inline bool host_has(const std::string& tool) {
  return host_run("command -v " + tool + " >/dev/null 2>&1 && echo yes").out == "yes\n";
}

// A booted kernel with the full userland, shut down on destruction.
class Booted {
 public:
  explicit Booted(sandboxd::KernelConfig cfg = {}) : reg_(sandboxd::make_registry()), k_(reg_, std::move(cfg)) {
    k_.boot_sync();
  }
  Booted(sandboxd::ProgramRegistry reg, sandboxd::KernelConfig cfg)
      : reg_(std::move(reg)), k_(reg_, std::move(cfg)) {
    k_.boot_sync();
  }
  ~Booted() { k_.shutdown(); }
  sandboxd::Kernel& operator*() { return k_; }
  sandboxd::Kernel* operator->() { return &k_; }

 private:
  sandboxd::ProgramRegistry reg_;
  sandboxd::Kernel k_;
};

inline sandboxd::KernelConfig config_for(sandboxd::Convention c) {
  sandboxd::KernelConfig cfg;
  cfg.mode = c;
  return cfg;
}

// Deterministic text with a small vocabulary so grep/sort/wc have work to do.
inline std::string random_text(std::mt19937_64& rng, size_t lines) {
  static const std::vector<std::string> words = {
      "apple", "banana", "cherry", "Apple", "date",  "elder", "fig",  "grape", "kiwi", "lemon",
      "mango", "10",     "9",      "-3",    "0.5",   "zeta",  "Zulu", "a-b",   "x_y",  "apple-pie",
  };
  std::uniform_int_distribution<size_t> wpick(0, words.size() - 1), wcount(0, 9);
  std::uniform_int_distribution<int> sp(0, 9);
  std::string out;
  for (size_t i = 0; i < lines; ++i) {
    size_t n = wcount(rng);
    for (size_t w = 0; w < n; ++w) {
      if (w) out += sp(rng) == 0 ? "\t" : (sp(rng) == 1 ? "  " : " ");
      out += words[wpick(rng)];
    }
    out += '\n';
  }
  return out;
}

inline std::string random_bytes(std::mt19937_64& rng, size_t n) {
  std::string s(n, '\0');
  std::uniform_int_distribution<int> b(0, 255);
  for (auto& c : s) c = static_cast<char>(b(rng));
  return s;
}

// Polls `pred` every millisecond until it holds or `ms` pass.
template <class F>
bool eventually(F pred, int ms = 5000) {
  for (int i = 0; i < ms; ++i) {
    if (pred()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  return pred();
}

}  // namespace testkit
