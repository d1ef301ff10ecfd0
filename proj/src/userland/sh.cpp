// The guest shell: a dash-like subset driven by the parser in shell.hpp.
#include <set>

#include "sandboxd/shell.hpp"
#include "util.hpp"

namespace sandboxd::userland {

namespace {

using namespace sandboxd::shell;

bool ifs_space(char c) { return c == ' ' || c == '\t' || c == '\n'; }

class Shell {
 public:
  explicit Shell(GuestContext& ctx) : ctx_(ctx) {
    for (const auto& [k, v] : ctx.environ()) {
      vars_[k] = v;
      exported_.insert(k);
    }
  }

  int main();

 private:
  // Stdio of one command after its redirections.
  struct Stdio {
    int fd[3] = {0, 1, 2};
    std::vector<int> opened;
  };

  int run_text(const std::string& text);
  int run_source(FdReader* reader, const std::string& text);
  int run_pipeline(const Pipeline& p);
  bool apply_redirs(const Command& cmd, Stdio& io);
  void close_opened(Stdio& io);
  bool is_builtin(const std::string& name) const;
  int run_builtin(const std::vector<std::string>& argv, const Stdio& io);

  std::vector<std::string> expand(const Word& w);
  std::string expand_joined(const Word& w);
  std::string var(const std::string& name);
  Environ child_env(const Command& cmd);

  void say(int fd, const std::string& s);
  void diag(const std::string& s) { say(2, "sh: " + s + "\n"); }
  std::string prompt();
  void reap_background();

  GuestContext& ctx_;
  std::map<std::string, std::string> vars_;
  std::set<std::string> exported_;
  std::vector<std::string> positional_;  // $0, $1, ...
  int status_ = 0;
  int64_t last_bg_ = 0;
  std::set<int64_t> background_;
  std::vector<int64_t> foreground_;
  bool interactive_ = false;
  bool exiting_ = false;
  bool interrupted_ = false;
};

void Shell::say(int fd, const std::string& s) {
  if (fd == 1) {
    ctx_.out(s);
    return;
  }
  ctx_.flush();
  ctx_.write_all(fd, s);
}

std::string Shell::var(const std::string& name) {
  if (name == "?") return std::to_string(status_);
  if (name == "$") return std::to_string(ctx_.getpid().v);
  if (name == "!") return last_bg_ ? std::to_string(last_bg_) : "";
  if (name == "#") return std::to_string(positional_.empty() ? 0 : positional_.size() - 1);
  if (name.size() == 1 && name[0] >= '0' && name[0] <= '9') {
    size_t i = static_cast<size_t>(name[0] - '0');
    return i < positional_.size() ? positional_[i] : "";
  }
  auto it = vars_.find(name);
  return it == vars_.end() ? "" : it->second;
}

// Field splitting applies to unquoted expansions only; literal text and
// quoted expansions always contribute to a field even when empty.
std::vector<std::string> Shell::expand(const Word& w) {
  std::vector<std::string> fields;
  std::string cur;
  bool have = false;
  for (const auto& s : w.segs) {
    if (s.kind == Segment::Literal || s.quoted) {
      cur += s.kind == Segment::Literal ? s.text : var(s.text);
      have = true;
      continue;
    }
    std::string v = var(s.text);
    std::vector<std::string> pieces;
    size_t i = 0;
    while (i < v.size()) {
      while (i < v.size() && ifs_space(v[i])) ++i;
      size_t start = i;
      while (i < v.size() && !ifs_space(v[i])) ++i;
      if (i > start) pieces.push_back(v.substr(start, i - start));
    }
    if (pieces.empty()) {
      if (!v.empty() && have) {
        fields.push_back(cur);
        cur.clear();
        have = false;
      }
      continue;
    }
    if (ifs_space(v.front()) && have) {
      fields.push_back(cur);
      cur.clear();
    }
    cur += pieces[0];
    have = true;
    for (size_t k = 1; k < pieces.size(); ++k) {
      fields.push_back(cur);
      cur = pieces[k];
    }
    if (ifs_space(v.back())) {
      fields.push_back(cur);
      cur.clear();
      have = false;
    }
  }
  if (have) fields.push_back(cur);
  return fields;
}

std::string Shell::expand_joined(const Word& w) {
  std::string out;
  for (const auto& s : w.segs) out += s.kind == Segment::Literal ? s.text : var(s.text);
  return out;
}

Environ Shell::child_env(const Command& cmd) {
  Environ env;
  for (const auto& name : exported_) {
    auto it = vars_.find(name);
    if (it != vars_.end()) env[name] = it->second;
  }
  for (const auto& a : cmd.assigns) env[a.name] = expand_joined(a.value);
  return env;
}

bool Shell::apply_redirs(const Command& cmd, Stdio& io) {
  for (const auto& r : cmd.redirs) {
    if (r.mode == Redirect::DupOut) {
      io.fd[2] = io.fd[1];
      continue;
    }
    auto fields = expand(r.target);
    if (fields.size() != 1) {
      diag(unparse(r.target) + ": ambiguous redirect");
      return false;
    }
    int64_t flags = r.mode == Redirect::Read     ? oflag::RDONLY
                    : r.mode == Redirect::Append ? oflag::WRONLY | oflag::CREAT | oflag::APPEND
                                                 : oflag::WRONLY | oflag::CREAT | oflag::TRUNC;
    auto fd = ctx_.open(fields[0], flags, 0644);
    if (!fd) {
      diag(std::string(r.mode == Redirect::Read ? "cannot open " : "cannot create ") + fields[0] + ": " +
           err::message(fd.e));
      return false;
    }
    io.opened.push_back(static_cast<int>(fd.v));
    io.fd[r.fd] = static_cast<int>(fd.v);
  }
  return true;
}

void Shell::close_opened(Stdio& io) {
  for (int fd : io.opened) ctx_.close(fd);
  io.opened.clear();
}

bool Shell::is_builtin(const std::string& name) const {
  static const std::set<std::string> names = {"cd", "exit", "pwd", "export", "unset", "wait", ":"};
  return names.count(name) != 0;
}

int Shell::run_builtin(const std::vector<std::string>& argv, const Stdio& io) {
  const std::string& name = argv[0];
  int out = io.fd[1];
  if (name == ":") return 0;
  if (name == "pwd") {
    std::string cwd;
    auto r = ctx_.getcwd(cwd);
    if (!r) {
      diag("pwd: " + std::string(err::message(r.e)));
      return 1;
    }
    say(out, cwd + "\n");
    return 0;
  }
  if (name == "cd") {
    std::string dir = argv.size() > 1 ? argv[1] : var("HOME");
    if (dir.empty()) dir = "/";
    auto r = ctx_.chdir(dir);
    if (!r) {
      diag("cd: can't cd to " + dir);
      return 2;
    }
    std::string cwd;
    if (ctx_.getcwd(cwd)) vars_["PWD"] = cwd;
    return 0;
  }
  if (name == "exit") {
    int code = status_;
    if (argv.size() > 1) {
      int64_t v;
      if (!parse_int(argv[1], v) || v < 0) {
        diag("exit: Illegal number: " + argv[1]);
        return 2;
      }
      code = static_cast<int>(v & 0xff);
    }
    exiting_ = true;
    return code;
  }
  if (name == "export") {
    if (argv.size() == 1) {
      std::string s;
      for (const auto& n : exported_)
        if (vars_.count(n)) s += "export " + n + "='" + vars_[n] + "'\n";
      say(out, s);
      return 0;
    }
    for (size_t i = 1; i < argv.size(); ++i) {
      const auto& a = argv[i];
      auto eq = a.find('=');
      std::string n = a.substr(0, eq);
      if (!valid_name(n)) {
        diag("export: " + n + ": bad variable name");
        return 2;
      }
      if (eq != std::string::npos) vars_[n] = a.substr(eq + 1);
      exported_.insert(n);
    }
    return 0;
  }
  if (name == "unset") {
    for (size_t i = 1; i < argv.size(); ++i) {
      vars_.erase(argv[i]);
      exported_.erase(argv[i]);
    }
    return 0;
  }
  if (name == "wait") {
    std::vector<int64_t> pids;
    if (argv.size() > 1) {
      for (size_t i = 1; i < argv.size(); ++i) {
        int64_t p;
        if (parse_int(argv[i], p)) pids.push_back(p);
      }
    } else {
      pids.assign(background_.begin(), background_.end());
    }
    int rc = 0;
    for (int64_t p : pids) {
      if (!background_.count(p)) {
        rc = 127;
        continue;
      }
      int st = wait_child(ctx_, p);
      background_.erase(p);
      rc = st < 0 ? 127 : wait::shell_code(st);
    }
    return rc;
  }
  return 0;
}

int Shell::run_pipeline(const Pipeline& p) {
  size_t n = p.cmds.size();

  // A lone builtin or assignment-only command runs in the shell itself.
  if (n == 1 && !p.background) {
    const Command& cmd = p.cmds[0];
    std::vector<std::string> argv;
    for (const auto& w : cmd.words)
      for (auto& f : expand(w)) argv.push_back(std::move(f));
    if (argv.empty() || is_builtin(argv[0])) {
      Stdio io;
      bool ok = apply_redirs(cmd, io);
      int rc = 2;
      if (ok) {
        if (argv.empty()) {
          for (const auto& a : cmd.assigns) vars_[a.name] = expand_joined(a.value);
          rc = 0;
        } else {
          rc = run_builtin(argv, io);
        }
      }
      close_opened(io);
      return rc;
    }
  }

  std::vector<std::array<int, 2>> pipes;
  for (size_t i = 0; i + 1 < n; ++i) {
    std::array<int, 2> fds{};
    auto r = ctx_.pipe(fds);
    if (!r) {
      diag("pipe: " + std::string(err::message(r.e)));
      for (auto& q : pipes) {
        ctx_.close(q[0]);
        ctx_.close(q[1]);
      }
      return 2;
    }
    pipes.push_back(fds);
  }

  std::vector<int64_t> pids;
  int last_status = 0;
  int64_t last_pid = 0;
  std::string path_var = var("PATH");
  ctx_.flush();
  for (size_t i = 0; i < n; ++i) {
    const Command& cmd = p.cmds[i];
    Stdio io;
    if (i > 0) io.fd[0] = pipes[i - 1][0];
    if (i + 1 < n) io.fd[1] = pipes[i][1];
    last_pid = 0;
    std::vector<std::string> argv;
    for (const auto& w : cmd.words)
      for (auto& f : expand(w)) argv.push_back(std::move(f));
    if (!apply_redirs(cmd, io)) {
      last_status = 2;
    } else if (argv.empty()) {
      last_status = 0;
    } else if (is_builtin(argv[0])) {
      last_status = run_builtin(argv, io);
    } else if (auto path = find_program(ctx_, argv[0], path_var); !path) {
      diag(argv[0] + ": not found");
      last_status = 127;
    } else {
      auto pid = ctx_.spawn(*path, argv, child_env(cmd), {{0, io.fd[0]}, {1, io.fd[1]}, {2, io.fd[2]}});
      if (!pid) {
        diag(argv[0] + ": " + err::message(pid.e));
        last_status = pid.e == err::NOENT ? 127 : 126;
      } else {
        pids.push_back(pid.v);
        last_pid = pid.v;
      }
    }
    close_opened(io);
  }
  for (auto& q : pipes) {
    ctx_.close(q[0]);
    ctx_.close(q[1]);
  }

  if (p.background) {
    for (auto pid : pids) background_.insert(pid);
    if (!pids.empty()) last_bg_ = pids.back();
    return 0;
  }
  foreground_ = pids;
  for (auto pid : pids) {
    int st = wait_child(ctx_, pid);
    if (pid == last_pid) last_status = st < 0 ? 127 : wait::shell_code(st);
  }
  foreground_.clear();
  return last_status;
}

// Runs one parsed chunk of input. Syntax errors give status 2.
int Shell::run_text(const std::string& text) {
  auto res = parse(text);
  if (!res.ok()) {
    diag(res.error.message);
    status_ = 2;
    return status_;
  }
  for (const auto& p : res.script->items) {
    status_ = run_pipeline(p);
    if (exiting_) break;
    if (interrupted_ && !interactive_) {
      exiting_ = true;
      if (status_ < 128) status_ = 128 + sig::INT;
      break;
    }
    interrupted_ = false;
  }
  return status_;
}

// Feeds input line by line, joining lines while a quote is still open.
// Either `reader` or `text` supplies the input.
int Shell::run_source(FdReader* reader, const std::string& text) {
  size_t pos = 0;
  std::string pending;
  for (;;) {
    if (interactive_ && pending.empty()) say(2, prompt());
    std::optional<std::string> line;
    if (reader) {
      line = reader->line();
    } else if (pos < text.size()) {
      size_t nl = text.find('\n', pos);
      size_t end = nl == std::string::npos ? text.size() : nl + 1;
      line = text.substr(pos, end - pos);
      pos = end;
    }
    if (!line) break;
    pending += *line;
    auto res = parse(pending);
    if (!res.ok() && res.error.incomplete) continue;
    run_text(pending);
    pending.clear();
    if (exiting_) break;
    if (status_ == 2 && !res.ok() && !interactive_) {
      exiting_ = true;
      break;
    }
  }
  if (!pending.empty() && !exiting_) {
    diag(parse(pending).error.message);
    status_ = 2;
  }
  if (interactive_ && !exiting_) say(2, "\n");
  return status_;
}

std::string Shell::prompt() {
  std::string cwd;
  ctx_.getcwd(cwd);
  return cwd + "$ ";
}

void Shell::reap_background() {
  std::vector<int64_t> done;
  for (int64_t pid : background_) {
    int st = 0;
    auto r = ctx_.wait4(pid, st, wait::NOHANG);
    if (r.ok() && r.v == pid) done.push_back(pid);
    if (!r.ok() && r.e == err::CHILD) done.push_back(pid);
  }
  for (auto pid : done) background_.erase(pid);
}

int Shell::main() {
  const auto& argv = ctx_.argv();
  std::optional<std::string> command;
  std::optional<std::string> script;
  size_t i = 1;
  for (; i < argv.size(); ++i) {
    const auto& a = argv[i];
    if (a == "-c" && i + 1 < argv.size()) {
      command = argv[++i];
      ++i;
      break;
    }
    if (a == "-i") {
      interactive_ = true;
      continue;
    }
    if (a == "--help") {
      ctx_.out("usage: sh [-i] [-c COMMAND [NAME ARG...]] [SCRIPT [ARG...]]\n");
      return 0;
    }
    if (a == "-s" || a == "--") {
      ++i;
      break;
    }
    if (a.size() > 1 && a[0] == '-') {
      diag("illegal option " + a);
      return 2;
    }
    break;
  }
  if (command) {
    positional_.push_back(i < argv.size() ? argv[i++] : argv[0]);
  } else if (i < argv.size()) {
    script = argv[i++];
    positional_.push_back(*script);
  } else {
    positional_.push_back(argv[0]);
  }
  for (; i < argv.size(); ++i) positional_.push_back(argv[i]);

  ctx_.on_signal(sig::CHLD, [this](int32_t) { reap_background(); });
  ctx_.on_signal(sig::INT, [this](int32_t) {
    for (int64_t pid : foreground_) ctx_.kill(pid, sig::INT);
    interrupted_ = true;
  });

  if (command) return run_source(nullptr, *command);
  if (script) {
    std::string text;
    auto r = ctx_.read_file(*script, text);
    if (!r) {
      diag("cannot open " + *script + ": " + err::message(r.e));
      return 127;
    }
    return run_source(nullptr, text);
  }
  FdReader in(ctx_, 0);
  return run_source(&in, "");
}

}  // namespace

void register_shell(ProgramRegistry& reg) {
  reg.add(make_program("sh", [](GuestContext& ctx) {
    Shell sh(ctx);
    return sh.main();
  }));
}

}  // namespace sandboxd::userland
