// runtime.hpp - the library guest programs link against.
//
// A GuestContext is created on the guest thread once the init message has
// arrived. It issues syscalls under the task's convention: async calls are
// encoded envelopes whose replies are matched to continuations by id; sync
// calls marshal their arguments into the shared region and block on the wake
// word. The typed helpers at the bottom block in both conventions.
#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sandboxd/abi.hpp"
#include "sandboxd/wire.hpp"
#include "sandboxd/worker.hpp"

namespace sandboxd {

// Thrown to unwind a guest after its exit call.
struct GuestExit {
  int code;
};
// Thrown to unwind a guest that the kernel terminated.
struct GuestKilled {};

struct Ret {
  int64_t v = 0;
  int32_t e = 0;

  bool ok() const { return e == 0; }
  explicit operator bool() const { return ok(); }
};

struct CallResult {
  int64_t ret = 0;
  int64_t aux = 0;
  int32_t err = 0;
  Bytes payload;
};

inline constexpr size_t kDefaultHeapSize = size_t{1} << 20;
inline constexpr size_t kRetvalOff = 64;
inline constexpr size_t kWakeOff = 80;
inline constexpr size_t kScratchOff = 128;

class GuestContext {
 public:
  GuestContext(std::shared_ptr<Worker> worker, InitMessage init);
  ~GuestContext();

  GuestContext(const GuestContext&) = delete;
  GuestContext& operator=(const GuestContext&) = delete;

  const std::vector<std::string>& argv() const { return argv_; }
  const Environ& environ() const { return env_; }
  std::string getenv(const std::string& key, const std::string& fallback = "") const;
  Convention convention() const { return conv_; }
  const std::optional<ForkSnapshot>& fork_snapshot() const { return snapshot_; }
  Worker& worker() { return *worker_; }

  // Async convention. `cont` runs exactly once, on this thread, from pump().
  using Continuation = std::function<void(const CallResult&)>;
  uint32_t syscall_async(Trap trap, std::vector<Value> args, Continuation cont);
  // By trap name; an unknown name completes with ENOSYS.
  uint32_t syscall_async(std::string_view name, std::vector<Value> args, Continuation cont);
  // Waits for one kernel message and handles it.
  void pump();
  void pump_until(const std::function<bool()>& done);
  size_t outstanding() const { return conts_.size(); }

  // Sync convention. Switches this guest to sync calls; done at startup when
  // SANDBOXD_MODE=sync.
  int attach_heap(size_t size = kDefaultHeapSize, size_t retval_off = kRetvalOff, size_t wake_off = kWakeOff);
  SharedRegion* region() { return region_.get(); }
  // Raw six-slot call. Pointers are offsets into region(). Signal handlers
  // do not run here; the next invoke() or poll_signals() runs them.
  std::pair<int64_t, int32_t> syscall_sync(Trap trap, const std::array<int64_t, kSyncSlots>& slots);

  // Either convention. Out arguments are passed as an i64 capacity and come
  // back in CallResult::payload.
  CallResult invoke(Trap trap, std::vector<Value> args);

  // Signal handlers run on this thread between syscalls.
  int on_signal(int32_t sig, std::function<void(int32_t)> fn);
  int set_disposition(int32_t sig, Disposition d);
  void poll_signals();

  // Flushes stdio, issues exit and unwinds with GuestExit.
  [[noreturn]] void exit(int code);
  void check_killed() const;

  // Buffered stdout; stderr is written through (after flushing stdout so the
  // two stay ordered when they share a pipe).
  void out(std::string_view s);
  void err(std::string_view s);
  void flush();

  // Sleeps while still handling signals and kills.
  void sleep_for(std::chrono::milliseconds d);

  // Typed calls.
  Ret open(const std::string& path, int64_t flags, int64_t mode = 0644);
  Ret close(int fd);
  Ret pread(int fd, Bytes& out, size_t cap, int64_t off);
  Ret read(int fd, Bytes& out, size_t cap) { return pread(fd, out, cap, -1); }
  Ret pwrite(int fd, std::span<const uint8_t> data, int64_t off);
  // Writes everything, retrying after EINTR and short writes.
  Ret write_all(int fd, std::string_view data);
  Ret llseek(int fd, int64_t off, int whence);
  Ret stat(const std::string& path, StatRecord& st);
  Ret lstat(const std::string& path, StatRecord& st);
  Ret fstat(int fd, StatRecord& st);
  Ret access(const std::string& path, int64_t mode);
  Ret mkdir(const std::string& path, int64_t mode = 0755);
  Ret rmdir(const std::string& path);
  Ret unlink(const std::string& path);
  Ret utimes(const std::string& path, int64_t atime_ns, int64_t mtime_ns);
  Ret readlink(const std::string& path, std::string& target);
  Ret chdir(const std::string& path);
  Ret getcwd(std::string& cwd);
  Ret getpid();
  Ret getppid();
  Ret getdents(int fd, std::vector<DirentRecord>& out, size_t cap = 4096);
  Ret readdir(int fd, std::vector<DirentRecord>& out);
  Ret pipe(std::array<int, 2>& fds);
  Ret spawn(const std::string& path, const std::vector<std::string>& argv, const Environ& env,
            const std::vector<std::pair<int, int>>& grants = {});
  Ret wait4(int64_t pid, int& status, int64_t options = 0);
  Ret kill(int64_t pid, int32_t sig);
  Ret socket();
  Ret bind(int fd, int64_t port);
  Ret listen(int fd, int64_t backlog = 0);
  Ret accept(int fd);
  Ret connect(int fd, int64_t port);
  Ret getsockname(int fd);
  // Only meaningful for snapshotable programs: `heap` and `resume_pc` are
  // handed to the child's Program::resume.
  Ret fork(const Bytes& heap, uint64_t resume_pc);

  // Convenience built on the calls above.
  Ret read_file(const std::string& path, std::string& content);
  Ret list_dir(const std::string& path, std::vector<DirentRecord>& entries);

 private:
  void handle(KernelMessage& msg);
  void run_handler(int32_t sig);
  Ret simple(Trap trap, std::vector<Value> args);

  std::shared_ptr<Worker> worker_;
  std::vector<std::string> argv_;
  Environ env_;
  std::optional<ForkSnapshot> snapshot_;
  Convention conv_ = Convention::Async;
  CallIdAllocator ids_;
  std::map<uint32_t, Continuation> conts_;
  std::shared_ptr<SharedRegion> region_;
  uint32_t seq_ = 0;
  std::map<int32_t, std::function<void(int32_t)>> handlers_;
  std::vector<int32_t> pending_signals_;
  int handler_depth_ = 0;
  std::string out_buf_;
};

// Wraps a plain function as a registered program.
Program make_program(std::string name, std::function<int(GuestContext&)> main);

}  // namespace sandboxd
