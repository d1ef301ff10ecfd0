// kernel.hpp - the single-threaded kernel: task table, syscall dispatch,
// process lifecycle, signals and the host embedding API.
//
// All kernel state is owned by one loop thread. Guests reach it only through
// frames posted to the KernelEndpoint; host code reaches it through the public
// methods below, which post closures onto the loop and are safe to call from
// any thread (but never block the loop itself).
#pragma once

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sandboxd/abi.hpp"
#include "sandboxd/channel.hpp"
#include "sandboxd/error.hpp"
#include "sandboxd/fd.hpp"
#include "sandboxd/ipc.hpp"
#include "sandboxd/vfs.hpp"
#include "sandboxd/wire.hpp"
#include "sandboxd/worker.hpp"

namespace sandboxd {

struct FsConfig {
  // "dir:PATH" or "http://..."; empty for a memory-only filesystem.
  std::string underlay;
  // Host directories copied into the upper layer: (host dir, guest path).
  std::vector<std::pair<std::filesystem::path, std::string>> mounts;
};

struct KernelConfig {
  FsConfig fs;
  std::string shell = "/bin/sh";
  size_t pipe_capacity = kDefaultPipeCapacity;
  // Exported to root processes as SANDBOXD_MODE; guests pick their syscall
  // convention from it.
  Convention mode = Convention::Async;
  Environ base_env = {{"PATH", "/usr/bin:/bin"}, {"HOME", "/"}};

  // Applies SANDBOXD_PIPE_CAP and SANDBOXD_MODE from the host environment.
  static KernelConfig from_env();
};

// Byte sink for host-side stdout/stderr capture. Runs on the kernel loop.
using ByteSink = std::function<void(std::span<const uint8_t>)>;

struct KernelAudit {
  uint64_t envelopes = 0;
  uint64_t replies = 0;
  // Calls dropped because their task was killed or exited.
  uint64_t discarded = 0;
  uint64_t parked = 0;
  uint64_t exits = 0;
  uint64_t reaped = 0;
  uint64_t zombies = 0;
  uint64_t live_tasks = 0;
  // Every open object's refcount equals the (task, fd) and host references
  // to it.
  bool refcounts_ok = true;

  bool correlation_ok() const { return envelopes == replies + discarded + parked; }
  bool zombies_ok() const { return exits == reaped + zombies; }
};

struct TaskInfo {
  uint32_t pid = 0;
  uint32_t ppid = 0;
  bool zombie = false;
  std::string cwd;
  std::vector<std::string> argv;
  uint32_t session = 0;
  Convention conv = Convention::Async;
  std::vector<int> fds;
};

class Kernel;

// Handle on a host-launched process tree (kernel.system and friends).
class HostSession : public std::enable_shared_from_this<HostSession> {
 public:
  uint32_t pid() const { return pid_; }
  // Queues bytes for the root's stdin. Ignored after close_stdin.
  void write_stdin(std::string_view data);
  void close_stdin();
  // SIGINT to the root process, as a terminal would on Ctrl-C.
  void interrupt();
  // SIGKILL to every process started from this session.
  void kill();
  // Blocks until the root exits; returns its shell-style exit code.
  int wait();
  std::optional<int> exit_code() const;

 private:
  friend class Kernel;
  Kernel* kernel_ = nullptr;
  uint32_t pid_ = 0;
  std::shared_ptr<PipeWriteEnd> stdin_;
  std::shared_ptr<PipeReadEnd> stdout_;
  std::shared_ptr<PipeReadEnd> stderr_;
  bool stdin_open_ = true;
  bool stdin_busy_ = false;
  std::deque<Bytes> stdin_queue_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::optional<int> code_;
};

struct LaunchOptions {
  std::string path;
  std::vector<std::string> argv;
  Environ env;
  std::string cwd = "/";
  ByteSink on_stdout;
  ByteSink on_stderr;
  // Called once on the loop with (pid, exit code); pid 0 and 127 if the
  // program could not be started.
  std::function<void(uint32_t, int)> on_exit;
  // Leave the root's stdin open for write_stdin; otherwise it reads EOF.
  bool interactive_stdin = false;
};

class Kernel : public KernelEndpoint {
 public:
  Kernel(const ProgramRegistry& registry, KernelConfig config = {});
  ~Kernel() override;

  Kernel(const Kernel&) = delete;
  Kernel& operator=(const Kernel&) = delete;

  // Starts the loop and initializes the filesystem there. `ready` runs once
  // on the loop with nullopt on success or the FsInitError.
  void boot(std::function<void(std::optional<Error>)> ready);
  // boot() and wait; throws Error(FsInitError).
  void boot_sync();
  void shutdown();

  const KernelConfig& config() const { return config_; }
  const ProgramRegistry& registry() const { return registry_; }

  // Spawns `shell -c cmdline` with its stdio captured into the sinks.
  std::shared_ptr<HostSession> system(const std::string& cmdline, std::function<void(uint32_t, int)> on_exit,
                                      ByteSink on_stdout, ByteSink on_stderr);
  std::shared_ptr<HostSession> launch(LaunchOptions opts);

  // Blocking convenience: run a command line, collect output and status.
  struct RunResult {
    int code = 0;
    std::string out;
    std::string err;
  };
  RunResult run(const std::string& cmdline, const std::string& stdin_data = {});

  // Fires exactly once when some process listens on `port` (immediately if
  // one already does). Runs on the loop.
  void notify_on_listen(uint16_t port, std::function<void()> cb);

  // Host side of a socket conversation: connect to `port`, write `request`
  // and shut down the write side, then read until the peer closes. `done` runs on the loop with (0, bytes) or
  // (errno, {}).
  void host_exchange(uint16_t port, Bytes request, std::function<void(int, Bytes)> done);

  int kill(uint32_t pid, int32_t sig);
  int kill_session(uint32_t session, int32_t sig);

  // Runs `fn` on the loop and waits for its result. Must not be called from
  // the loop thread.
  template <class F>
  auto call(F fn) -> decltype(fn()) {
    using R = decltype(fn());
    if (on_loop()) return fn();
    std::packaged_task<R()> task(std::move(fn));
    auto fut = task.get_future();
    if (!post([&task] { task(); })) throw std::logic_error("kernel is not running");
    return fut.get();
  }
  // False once the kernel has shut down.
  bool post(std::function<void()> fn);
  bool on_loop() const { return std::this_thread::get_id() == loop_id_.load(); }

  // Filesystem access for staging and tests; runs on the loop.
  void stage_file(const std::string& path, std::string_view data, uint32_t mode = 0644);
  std::optional<std::string> read_file(const std::string& path);
  Vfs& vfs_unsafe() { return vfs_; }

  KernelAudit audit();
  std::vector<TaskInfo> tasks();
  std::optional<TaskInfo> task(uint32_t pid);
  // Blocks until the kernel has no live tasks or the timeout passes.
  bool wait_idle(std::chrono::milliseconds timeout);

  // KernelEndpoint
  void post_from_guest(uint64_t worker_id, Convention conv, Bytes frame) override;

 private:
  struct Task;
  struct Call;
  using CallPtr = std::shared_ptr<Call>;
  friend class HostSession;

  void loop();
  void init_fs();
  void install_natives();

  void on_frame(uint64_t worker_id, Convention conv, const Bytes& frame);
  void on_sync_frame(Task& t, const SyncFrame& f);
  void dispatch(Task& t, const CallPtr& c);
  void park(Task& t, const CallPtr& c, std::function<size_t()> cancel);
  void unpark(Task& t, const CallPtr& c);
  void reply(const CallPtr& c, int64_t ret, int64_t aux = 0, int32_t e = 0);
  void fail(const CallPtr& c, int32_t e) { reply(c, -1, 0, e); }

  // Trap handlers.
  void sys_spawn(Task& t, const CallPtr& c);
  void sys_fork(Task& t, const CallPtr& c);
  void sys_wait4(Task& t, const CallPtr& c);
  void sys_pread(Task& t, const CallPtr& c);
  void sys_pwrite(Task& t, const CallPtr& c);
  void sys_accept(Task& t, const CallPtr& c);
  void sys_connect(Task& t, const CallPtr& c);
  void sys_dirents(Task& t, const CallPtr& c, size_t max_entries);
  void sys_attach_heap(Task& t, const CallPtr& c);
  void sys_path(Task& t, const CallPtr& c);

  struct Exec {
    GuestImage image;
    std::string program;
  };
  Result<Exec> resolve_exec(const std::string& cwd, const std::string& path, std::vector<std::string> argv,
                            Environ env);
  Result<uint32_t> start_task(Exec exec, uint32_t ppid, uint32_t session, const std::string& cwd, FdTable fds);
  uint32_t alloc_pid();
  Task* find(uint32_t pid);
  Task* find_worker(uint64_t worker_id);

  void finish_task(Task& t, int32_t wait_status);
  bool try_reap_for(Task& parent);
  void reap(Task& child);
  int deliver_signal(Task& t, int32_t sig);
  void sweep_graveyard();

  void launch_on_loop(const std::shared_ptr<HostSession>& s, LaunchOptions opts);
  void drain(const std::shared_ptr<PipeReadEnd>& end, ByteSink sink);
  void pump_stdin(const std::shared_ptr<HostSession>& s);
  void host_ref(const FdObjectPtr& obj);
  void host_unref(const FdObjectPtr& obj);

  const ProgramRegistry& registry_;
  KernelConfig config_;
  Vfs vfs_;
  SocketTable sockets_;

  Channel<std::function<void()>> events_;
  std::thread loop_thread_;
  std::atomic<std::thread::id> loop_id_{};
  std::atomic<bool> booted_{false};

  std::map<uint32_t, std::unique_ptr<Task>> tasks_;
  std::map<uint64_t, uint32_t> worker_pid_;
  std::vector<WorkerHandle> graveyard_;
  std::map<FdObject*, std::pair<FdObjectPtr, uint32_t>> host_refs_;
  uint32_t next_pid_ = 1;
  KernelAudit counters_;

  std::mutex idle_mu_;
  std::condition_variable idle_cv_;
  size_t live_ = 0;
};

}  // namespace sandboxd
