#include "sandboxd/worker.hpp"

#include <system_error>

#include "sandboxd/error.hpp"

namespace sandboxd {

void ProgramRegistry::add(Program p) {
  auto name = p.name;
  programs_[name] = std::move(p);
}

const Program* ProgramRegistry::find(const std::string& name) const {
  auto it = programs_.find(name);
  return it == programs_.end() ? nullptr : &it->second;
}

std::vector<std::string> ProgramRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [n, _] : programs_) out.push_back(n);
  return out;
}

void ProgramRegistry::add_interpreter(const std::string& path, const std::string& program) {
  interpreters_[path] = program;
}

std::optional<std::string> ProgramRegistry::interpreter(const std::string& path) const {
  auto it = interpreters_.find(path);
  if (it == interpreters_.end()) return std::nullopt;
  return it->second;
}

Worker::~Worker() {
  if (thread_.joinable()) {
    if (thread_.get_id() == std::this_thread::get_id())
      thread_.detach();
    else
      thread_.join();
  }
}

std::shared_ptr<SharedRegion> Worker::shared() const {
  std::lock_guard lk(shared_mu_);
  return shared_;
}

void Worker::post(Convention conv, Bytes frame) {
  if (killed()) return;
  kernel_->post_from_guest(id_, conv, std::move(frame));
}

void Worker::join() {
  if (thread_.joinable() && thread_.get_id() != std::this_thread::get_id()) thread_.join();
}

WorkerHandle launch_worker(const GuestImage& image, const ProgramRegistry& registry, KernelEndpoint* kernel) {
  static std::atomic<uint64_t> next_id{1};

  const Program* prog = nullptr;
  if (const auto* reg = std::get_if<RegisteredEntry>(&image.entry)) {
    prog = registry.find(reg->name);
    if (prog == nullptr) throw Error(ErrorKind::UnknownExecutable, reg->name);
  } else {
    const auto& interp = std::get<InterpreterEntry>(image.entry);
    auto name = registry.interpreter(interp.interpreter_path);
    if (name) prog = registry.find(*name);
    if (prog == nullptr) throw Error(ErrorKind::UnknownExecutable, interp.interpreter_path);
  }

  auto w = std::make_shared<Worker>(next_id.fetch_add(1), kernel);
  try {
    w->thread_ = std::thread([w, p = *prog] { run_guest(w, p); });
  } catch (const std::system_error& e) {
    throw Error(ErrorKind::LaunchFailure, e.what());
  }
  return w;
}

void send_to_guest(Worker& w, KernelMessage msg) {
  if (w.killed() || !w.inbox().push(std::move(msg))) throw Error(ErrorKind::WorkerGone, "worker " + std::to_string(w.id()));
}

void terminate_worker(Worker& w) {
  if (w.killed_.exchange(true, std::memory_order_acq_rel)) return;
  w.to_guest_.close();
  if (auto region = w.shared()) region->kill();
}

std::shared_ptr<SharedRegion> attach_shared_region(Worker& w, size_t size, size_t retval_off, size_t wake_off) {
  std::lock_guard lk(w.shared_mu_);
  if (w.shared_) throw Error(ErrorKind::AlreadyAttached, "worker " + std::to_string(w.id()));
  w.shared_ = std::make_shared<SharedRegion>(size, retval_off, wake_off);
  return w.shared_;
}

}  // namespace sandboxd
