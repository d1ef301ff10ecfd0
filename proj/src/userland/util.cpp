#include "util.hpp"

#include <charconv>

#include "sandboxd/userland.hpp"

namespace sandboxd::userland {

namespace {
constexpr size_t kChunk = 64 * 1024;
}

bool FdReader::fill() {
  if (eof_ || err_) return false;
  Bytes b;
  for (;;) {
    auto r = ctx_.read(fd_, b, kChunk);
    if (r.e == err::INTR) continue;
    if (!r) {
      err_ = r.e;
      return false;
    }
    if (r.v == 0) {
      eof_ = true;
      return false;
    }
    if (pos_ > 0) {
      buf_.erase(0, pos_);
      pos_ = 0;
    }
    buf_.append(b.begin(), b.end());
    return true;
  }
}

std::string_view FdReader::chunk() {
  if (pos_ < buf_.size()) {
    std::string_view v(buf_);
    v.remove_prefix(pos_);
    pos_ = buf_.size();
    return v;
  }
  buf_.clear();
  pos_ = 0;
  if (!fill()) return {};
  pos_ = buf_.size();
  return buf_;
}

std::optional<std::string> FdReader::line() {
  for (;;) {
    size_t nl = buf_.find('\n', pos_);
    if (nl != std::string::npos) {
      std::string out = buf_.substr(pos_, nl + 1 - pos_);
      pos_ = nl + 1;
      return out;
    }
    if (!fill()) {
      if (pos_ < buf_.size()) {
        std::string out = buf_.substr(pos_);
        pos_ = buf_.size();
        return out;
      }
      return std::nullopt;
    }
  }
}

std::string FdReader::rest() {
  std::string out;
  for (auto c = chunk(); !c.empty(); c = chunk()) out.append(c);
  return out;
}

Input::Input(GuestContext& ctx, const std::string& path) : ctx_(ctx) {
  if (path == "-") {
    fd_ = 0;
  } else {
    auto r = ctx.open(path, oflag::RDONLY);
    if (!r) {
      err_ = r.e;
      return;
    }
    StatRecord st;
    if (ctx.fstat(static_cast<int>(r.v), st) && st.is_dir()) {
      ctx.close(static_cast<int>(r.v));
      err_ = err::ISDIR;
      return;
    }
    fd_ = static_cast<int>(r.v);
    owned_ = true;
  }
  reader_.emplace(ctx, fd_);
}

Input::~Input() {
  if (owned_) ctx_.close(fd_);
}

void report(GuestContext& ctx, std::string_view prog, std::string_view what, int e) {
  std::string m(prog);
  m += ": ";
  m += what;
  m += ": ";
  m += err::message(e);
  m += "\n";
  ctx.err(m);
}

void report(GuestContext& ctx, std::string_view prog, std::string_view msg) {
  std::string m(prog);
  m += ": ";
  m += msg;
  m += "\n";
  ctx.err(m);
}

bool parse_int(std::string_view s, int64_t& out) {
  if (!s.empty() && s[0] == '+') s.remove_prefix(1);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && p == s.data() + s.size() && !s.empty();
}

bool Flags::has(char c) const {
  for (auto& [f, _] : set)
    if (f == c) return true;
  return false;
}

std::optional<std::string> Flags::value(char c) const {
  std::optional<std::string> v;
  for (auto& [f, val] : set)
    if (f == c) v = val;
  return v;
}

std::optional<Flags> parse_flags(GuestContext& ctx, std::string_view prog, const std::vector<std::string>& argv,
                                 std::string_view allowed, std::string_view with_value) {
  Flags f;
  size_t i = 1;
  for (; i < argv.size(); ++i) {
    const std::string& a = argv[i];
    if (a == "--") {
      ++i;
      break;
    }
    if (a.size() < 2 || a[0] != '-') break;
    for (size_t k = 1; k < a.size(); ++k) {
      char c = a[k];
      if (with_value.find(c) != std::string_view::npos) {
        std::string v;
        if (k + 1 < a.size()) {
          v = a.substr(k + 1);
        } else if (i + 1 < argv.size()) {
          v = argv[++i];
        } else {
          report(ctx, prog, std::string("option requires an argument -- '") + c + "'");
          return std::nullopt;
        }
        f.set.emplace_back(c, v);
        break;
      }
      if (allowed.find(c) == std::string_view::npos) {
        report(ctx, prog, std::string("invalid option -- '") + c + "'");
        return std::nullopt;
      }
      f.set.emplace_back(c, "");
    }
  }
  for (; i < argv.size(); ++i) f.operands.push_back(argv[i]);
  return f;
}

std::string basename_of(const std::string& path) {
  std::string p = path;
  while (p.size() > 1 && p.back() == '/') p.pop_back();
  auto slash = p.rfind('/');
  if (slash == std::string::npos || p == "/") return p;
  return p.substr(slash + 1);
}

std::string join_path(const std::string& dir, const std::string& name) {
  if (dir.empty()) return name;
  if (dir.back() == '/') return dir + name;
  return dir + "/" + name;
}

std::optional<std::string> find_program(GuestContext& ctx, const std::string& name, const std::string& path_var) {
  if (name.find('/') != std::string::npos) return name;
  if (name.empty()) return std::nullopt;
  size_t start = 0;
  for (;;) {
    size_t colon = path_var.find(':', start);
    std::string dir = path_var.substr(start, colon == std::string::npos ? std::string::npos : colon - start);
    std::string cand = join_path(dir.empty() ? "." : dir, name);
    StatRecord st;
    if (ctx.stat(cand, st) && st.is_reg() && (st.mode & 0111)) return cand;
    if (colon == std::string::npos) return std::nullopt;
    start = colon + 1;
  }
}

int wait_child(GuestContext& ctx, int64_t pid) {
  for (;;) {
    int status = 0;
    auto r = ctx.wait4(pid, status, 0);
    if (r.e == err::INTR) continue;
    if (!r) return -r.e;
    return status;
  }
}

}  // namespace sandboxd::userland

namespace sandboxd {

void register_userland(ProgramRegistry& reg) {
  userland::register_coreutils(reg);
  userland::register_shell(reg);
  userland::register_demos(reg);
  reg.add_interpreter("/bin/sh", "sh");
}

ProgramRegistry make_registry() {
  ProgramRegistry reg;
  register_userland(reg);
  return reg;
}

}  // namespace sandboxd
