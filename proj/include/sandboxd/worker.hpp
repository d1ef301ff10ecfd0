// worker.hpp - isolated guest execution contexts.
//
// Each guest process runs on its own host thread and talks to exactly one
// kernel endpoint. Kernel -> guest traffic is a per-worker Channel of
// KernelMessage; guest -> kernel traffic is encoded frames posted to the
// kernel endpoint. Buffers are always copied, except for an explicit
// SharedRegion grant.
#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "sandboxd/abi.hpp"
#include "sandboxd/channel.hpp"
#include "sandboxd/shared_region.hpp"
#include "sandboxd/wire.hpp"

namespace sandboxd {

class GuestContext;

struct ForkSnapshot {
  Bytes heap;
  uint64_t resume_pc = 0;
};

struct InitMessage {
  std::vector<std::string> argv;
  Environ environ;
  std::optional<ForkSnapshot> fork_snapshot;
};

struct EncodedReply {
  Bytes frame;
};

struct SignalMessage {
  int32_t sig = 0;
};

struct RegionGrant {
  std::shared_ptr<SharedRegion> region;
};

using KernelMessage = std::variant<InitMessage, EncodedReply, SignalMessage, RegionGrant>;

// A native guest program. `resume` is present only for programs that can
// serialize their own state, which is what fork requires.
struct Program {
  std::string name;
  std::function<int(GuestContext&)> main;
  std::function<int(GuestContext&, const ForkSnapshot&)> resume;

  bool snapshotable() const { return static_cast<bool>(resume); }
};

class ProgramRegistry {
 public:
  void add(Program p);
  const Program* find(const std::string& name) const;
  std::vector<std::string> names() const;

  // Interpreter table: absolute path of an interpreter -> program name.
  void add_interpreter(const std::string& path, const std::string& program);
  std::optional<std::string> interpreter(const std::string& path) const;
  const std::map<std::string, std::string>& interpreters() const { return interpreters_; }

 private:
  std::map<std::string, Program> programs_;
  std::map<std::string, std::string> interpreters_;
};

struct RegisteredEntry {
  std::string name;
};

struct InterpreterEntry {
  std::string interpreter_path;
  std::string script_path;
};

struct GuestImage {
  Bytes bytes;
  std::variant<RegisteredEntry, InterpreterEntry> entry;
  std::vector<std::string> argv;
  Environ environ;
  std::optional<ForkSnapshot> fork_snapshot;
};

// Receives guest -> kernel frames. Implemented by the kernel; must be safe to
// call from any thread.
class KernelEndpoint {
 public:
  virtual ~KernelEndpoint() = default;
  virtual void post_from_guest(uint64_t worker_id, Convention conv, Bytes frame) = 0;
};

class Worker {
 public:
  Worker(uint64_t id, KernelEndpoint* kernel) : id_(id), kernel_(kernel) {}
  ~Worker();

  Worker(const Worker&) = delete;
  Worker& operator=(const Worker&) = delete;

  uint64_t id() const { return id_; }
  Channel<KernelMessage>& inbox() { return to_guest_; }
  bool killed() const { return killed_.load(std::memory_order_acquire); }
  bool finished() const { return finished_.load(std::memory_order_acquire); }
  std::shared_ptr<SharedRegion> shared() const;

  // Guest -> kernel. Dropped silently once the worker is terminated.
  void post(Convention conv, Bytes frame);

  void join();

 private:
  friend std::shared_ptr<Worker> launch_worker(const GuestImage&, const ProgramRegistry&, KernelEndpoint*);
  friend void terminate_worker(Worker&);
  friend std::shared_ptr<SharedRegion> attach_shared_region(Worker&, size_t, size_t, size_t);
  friend void run_guest(const std::shared_ptr<Worker>&, Program);

  uint64_t id_;
  KernelEndpoint* kernel_;
  Channel<KernelMessage> to_guest_;
  std::atomic<bool> killed_{false};
  std::atomic<bool> finished_{false};
  mutable std::mutex shared_mu_;
  std::shared_ptr<SharedRegion> shared_;
  std::thread thread_;
};

using WorkerHandle = std::shared_ptr<Worker>;

// Starts a guest thread for `image`. The guest does not run its main body
// until an InitMessage arrives. Throws Error(UnknownExecutable) or
// Error(LaunchFailure).
WorkerHandle launch_worker(const GuestImage& image, const ProgramRegistry& registry, KernelEndpoint* kernel);

// Throws Error(WorkerGone) after termination.
void send_to_guest(Worker& w, KernelMessage msg);

// Idempotent. Closes the inbox and wakes a sync waiter with Killed; the guest
// thread unwinds at its next cancellation point.
void terminate_worker(Worker& w);

// Throws Error(AlreadyAttached) or Error(BadOffset).
std::shared_ptr<SharedRegion> attach_shared_region(Worker& w, size_t size, size_t retval_off, size_t wake_off);

// Guest thread body; defined by the guest runtime.
void run_guest(const std::shared_ptr<Worker>& w, Program program);

}  // namespace sandboxd
