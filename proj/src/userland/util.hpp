// Helpers shared by the guest utilities.
#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sandboxd/runtime.hpp"

namespace sandboxd::userland {

// Chunked reader over a guest fd that also splits lines.
class FdReader {
 public:
  FdReader(GuestContext& ctx, int fd) : ctx_(ctx), fd_(fd) {}

  // Next chunk; empty at EOF. Sets error() on failure.
  std::string_view chunk();
  // Next line including its '\n' (the last line may lack it); nullopt at EOF.
  std::optional<std::string> line();
  // Everything that is left.
  std::string rest();
  int error() const { return err_; }

 private:
  bool fill();

  GuestContext& ctx_;
  int fd_;
  std::string buf_;
  size_t pos_ = 0;
  bool eof_ = false;
  int err_ = 0;
};

// Input named on a command line: "-" is stdin. Closes what it opened.
class Input {
 public:
  Input(GuestContext& ctx, const std::string& path);
  ~Input();
  Input(const Input&) = delete;
  Input& operator=(const Input&) = delete;

  bool ok() const { return err_ == 0; }
  int error() const { return err_; }
  int fd() const { return fd_; }
  FdReader& reader() { return *reader_; }

 private:
  GuestContext& ctx_;
  int fd_ = -1;
  bool owned_ = false;
  int err_ = 0;
  std::optional<FdReader> reader_;
};

// Writes "prog: what: strerror" to stderr.
void report(GuestContext& ctx, std::string_view prog, std::string_view what, int e);
void report(GuestContext& ctx, std::string_view prog, std::string_view msg);

bool parse_int(std::string_view s, int64_t& out);

// Splits "-abc" style clusters; stops at "--" or the first operand. Unknown
// flags are reported and make the result nullopt. Flags listed in
// `with_value` consume the next argument (or the rest of the cluster).
struct Flags {
  std::vector<std::pair<char, std::string>> set;
  std::vector<std::string> operands;

  bool has(char c) const;
  std::optional<std::string> value(char c) const;
};
std::optional<Flags> parse_flags(GuestContext& ctx, std::string_view prog, const std::vector<std::string>& argv,
                                 std::string_view allowed, std::string_view with_value = "");

// Last path component, ignoring trailing slashes.
std::string basename_of(const std::string& path);
std::string join_path(const std::string& dir, const std::string& name);

// PATH lookup for a command name; names containing '/' are returned as is.
std::optional<std::string> find_program(GuestContext& ctx, const std::string& name, const std::string& path_var);

// Waits for `pid`, retrying after EINTR. Returns the wait status or -errno.
int wait_child(GuestContext& ctx, int64_t pid);

// Registration hooks implemented by the individual files.
void register_coreutils(ProgramRegistry& reg);
void register_shell(ProgramRegistry& reg);
void register_demos(ProgramRegistry& reg);

}  // namespace sandboxd::userland
