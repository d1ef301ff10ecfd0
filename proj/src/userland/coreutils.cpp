#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <deque>
#include <memory>
#include <regex>

#include "util.hpp"

namespace sandboxd::userland {

namespace {

using Main = int (*)(GuestContext&);

int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::vector<std::string> operands_or_stdin(const Flags& f) {
  return f.operands.empty() ? std::vector<std::string>{"-"} : f.operands;
}

// ---------------------------------------------------------------------------

int cat_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "cat", ctx.argv(), "u");
  if (!f) return 1;
  int rc = 0;
  for (const auto& path : operands_or_stdin(*f)) {
    Input in(ctx, path);
    if (!in.ok()) {
      report(ctx, "cat", path, in.error());
      rc = 1;
      continue;
    }
    for (auto c = in.reader().chunk(); !c.empty(); c = in.reader().chunk()) ctx.out(c);
    if (in.reader().error()) {
      report(ctx, "cat", path, in.reader().error());
      rc = 1;
    }
  }
  return rc;
}

int copy_file(GuestContext& ctx, const std::string& src, const std::string& dst) {
  Input in(ctx, src);
  if (!in.ok()) {
    report(ctx, "cp", "cannot stat '" + src + "'", in.error());
    return 1;
  }
  StatRecord st;
  uint32_t mode = 0644;
  if (ctx.fstat(in.fd(), st)) mode = st.mode & 07777;
  auto out = ctx.open(dst, oflag::WRONLY | oflag::CREAT | oflag::TRUNC, mode);
  if (!out) {
    report(ctx, "cp", "cannot create regular file '" + dst + "'", out.e);
    return 1;
  }
  int fd = static_cast<int>(out.v);
  int rc = 0;
  for (auto c = in.reader().chunk(); !c.empty(); c = in.reader().chunk()) {
    auto w = ctx.write_all(fd, c);
    if (!w) {
      report(ctx, "cp", "error writing '" + dst + "'", w.e);
      rc = 1;
      break;
    }
  }
  if (in.reader().error()) {
    report(ctx, "cp", "error reading '" + src + "'", in.reader().error());
    rc = 1;
  }
  ctx.close(fd);
  return rc;
}

int cp_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "cp", ctx.argv(), "");
  if (!f) return 1;
  const auto& ops = f->operands;
  if (ops.size() < 2) {
    report(ctx, "cp", ops.empty() ? "missing file operand" : "missing destination file operand after '" + ops[0] + "'");
    return 1;
  }
  std::string dst = ops.back();
  StatRecord st;
  bool dst_dir = ctx.stat(dst, st).ok() && st.is_dir();
  if (ops.size() > 2 && !dst_dir) {
    report(ctx, "cp", "target '" + dst + "' is not a directory");
    return 1;
  }
  int rc = 0;
  for (size_t i = 0; i + 1 < ops.size(); ++i) {
    StatRecord sst;
    if (ctx.stat(ops[i], sst) && sst.is_dir()) {
      report(ctx, "cp", "-r not specified; omitting directory '" + ops[i] + "'");
      rc = 1;
      continue;
    }
    std::string target = dst_dir ? join_path(dst, basename_of(ops[i])) : dst;
    rc |= copy_file(ctx, ops[i], target);
  }
  return rc;
}

int echo_main(GuestContext& ctx) {
  const auto& argv = ctx.argv();
  bool newline = true, escapes = false;
  size_t i = 1;
  for (; i < argv.size(); ++i) {
    const auto& a = argv[i];
    if (a.size() < 2 || a[0] != '-' || a.find_first_not_of("neE", 1) != std::string::npos) break;
    for (size_t k = 1; k < a.size(); ++k) {
      if (a[k] == 'n') newline = false;
      if (a[k] == 'e') escapes = true;
      if (a[k] == 'E') escapes = false;
    }
  }
  std::string out;
  for (size_t first = i; i < argv.size(); ++i) {
    if (i > first) out += ' ';
    if (!escapes) {
      out += argv[i];
      continue;
    }
    const auto& a = argv[i];
    for (size_t k = 0; k < a.size(); ++k) {
      if (a[k] != '\\' || k + 1 == a.size()) {
        out += a[k];
        continue;
      }
      char c = a[++k];
      switch (c) {
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        case 'a': out += '\a'; break;
        case 'b': out += '\b'; break;
        case 'f': out += '\f'; break;
        case 'v': out += '\v'; break;
        case '\\': out += '\\'; break;
        case 'c':
          ctx.out(out);
          return 0;
        default:
          out += '\\';
          out += c;
      }
    }
  }
  if (newline) out += '\n';
  ctx.out(out);
  return 0;
}

// grep ----------------------------------------------------------------------

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

class Matcher {
 public:
  Matcher(const std::string& pattern, bool icase) : icase_(icase) {
    literal_ = pattern.find_first_of(".[]*^$\\") == std::string::npos;
    if (literal_) {
      needle_ = icase ? lower(pattern) : pattern;
    } else {
      auto flags = std::regex::basic | std::regex::nosubs | std::regex::optimize;
      if (icase) flags |= std::regex::icase;
      re_ = std::regex(pattern, flags);
    }
  }
  bool match(std::string_view line) const {
    if (literal_) {
      if (!icase_) return line.find(needle_) != std::string_view::npos;
      return lower(line).find(needle_) != std::string::npos;
    }
    return std::regex_search(line.begin(), line.end(), re_);
  }

 private:
  bool icase_;
  bool literal_;
  std::string needle_;
  std::regex re_;
};

int grep_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "grep", ctx.argv(), "vicnqhH", "e");
  if (!f) return 2;
  std::vector<std::string> ops = f->operands;
  std::string pattern;
  if (auto e = f->value('e')) {
    pattern = *e;
  } else if (!ops.empty()) {
    pattern = ops.front();
    ops.erase(ops.begin());
  } else {
    report(ctx, "grep", "usage: grep [-vicnq] PATTERN [FILE...]");
    return 2;
  }
  std::optional<Matcher> m;
  try {
    m.emplace(pattern, f->has('i'));
  } catch (const std::regex_error&) {
    report(ctx, "grep", "invalid regular expression '" + pattern + "'");
    return 2;
  }
  bool invert = f->has('v'), count = f->has('c'), number = f->has('n'), quiet = f->has('q');
  if (ops.empty()) ops.push_back("-");
  bool names = (ops.size() > 1 || f->has('H')) && !f->has('h');
  bool any = false, error = false;
  for (const auto& path : ops) {
    Input in(ctx, path);
    std::string label = path == "-" ? "(standard input)" : path;
    if (!in.ok()) {
      report(ctx, "grep", path, in.error());
      error = true;
      continue;
    }
    uint64_t n = 0, hits = 0;
    while (auto line = in.reader().line()) {
      ++n;
      std::string_view body(*line);
      if (!body.empty() && body.back() == '\n') body.remove_suffix(1);
      if (m->match(body) == invert) continue;
      ++hits;
      any = true;
      if (quiet) return 0;
      if (count) continue;
      std::string out;
      if (names) out += label + ":";
      if (number) out += std::to_string(n) + ":";
      out.append(body);
      out += '\n';
      ctx.out(out);
    }
    if (count) ctx.out((names ? label + ":" : std::string()) + std::to_string(hits) + "\n");
  }
  if (error && !(quiet && any)) return 2;
  return any ? 0 : 1;
}

// head / tail -----------------------------------------------------------------

// Accepts the obsolete "-N" form by rewriting it to "-n N".
std::vector<std::string> legacy_count(const std::vector<std::string>& argv) {
  std::vector<std::string> out = argv;
  for (size_t i = 1; i < out.size(); ++i) {
    const auto& a = out[i];
    if (a == "--") break;
    if (a.size() > 1 && a[0] == '-' && std::all_of(a.begin() + 1, a.end(), ::isdigit)) {
      out[i] = "-n" + a.substr(1);
    }
  }
  return out;
}

int head_tail(GuestContext& ctx, bool head) {
  const char* prog = head ? "head" : "tail";
  auto f = parse_flags(ctx, prog, legacy_count(ctx.argv()), "qv", "nc");
  if (!f) return 1;
  int64_t lines = 10, bytes = -1;
  bool from_start = false;
  auto parse_count = [&](char flag, int64_t& target) {
    auto v = f->value(flag);
    if (!v) return true;
    std::string s = *v;
    if (!head && !s.empty() && s[0] == '+') {
      from_start = true;
      s = s.substr(1);
    }
    if (!parse_int(s, target) || target < 0) {
      report(ctx, prog, std::string("invalid number of ") + (flag == 'n' ? "lines" : "bytes") + ": '" + *v + "'");
      return false;
    }
    return true;
  };
  if (!parse_count('n', lines) || !parse_count('c', bytes)) return 1;
  auto files = operands_or_stdin(*f);
  bool headers = (files.size() > 1 && !f->has('q')) || f->has('v');
  int rc = 0;
  bool first = true;
  for (const auto& path : files) {
    Input in(ctx, path);
    if (!in.ok()) {
      report(ctx, prog, "cannot open '" + path + "' for reading", in.error());
      rc = 1;
      continue;
    }
    if (headers) {
      ctx.out(std::string(first ? "" : "\n") + "==> " + (path == "-" ? "standard input" : path) + " <==\n");
    }
    first = false;
    auto& r = in.reader();
    if (bytes >= 0) {
      std::string all;
      if (head) {
        for (auto c = r.chunk(); !c.empty() && static_cast<int64_t>(all.size()) < bytes; c = r.chunk()) all.append(c);
        ctx.out(std::string_view(all).substr(0, static_cast<size_t>(bytes)));
      } else {
        all = r.rest();
        size_t skip = from_start ? std::min(all.size(), static_cast<size_t>(std::max<int64_t>(bytes - 1, 0)))
                                 : all.size() - std::min(all.size(), static_cast<size_t>(bytes));
        ctx.out(std::string_view(all).substr(skip));
      }
      continue;
    }
    if (head) {
      for (int64_t i = 0; i < lines; ++i) {
        auto l = r.line();
        if (!l) break;
        ctx.out(*l);
      }
    } else if (from_start) {
      int64_t n = 0;
      while (auto l = r.line())
        if (++n >= lines) ctx.out(*l);
    } else {
      std::deque<std::string> last;
      while (auto l = r.line()) {
        last.push_back(std::move(*l));
        if (static_cast<int64_t>(last.size()) > lines) last.pop_front();
      }
      for (const auto& l : last) ctx.out(l);
    }
  }
  return rc;
}

int head_main(GuestContext& ctx) { return head_tail(ctx, true); }
int tail_main(GuestContext& ctx) { return head_tail(ctx, false); }

// ls --------------------------------------------------------------------------

std::string mode_string(uint32_t mode) {
  std::string s;
  switch (mode & fmode::IFMT) {
    case fmode::IFDIR: s = "d"; break;
    case fmode::IFIFO: s = "p"; break;
    case fmode::IFSOCK: s = "s"; break;
    default: s = "-";
  }
  const char* rwx = "rwxrwxrwx";
  for (int i = 0; i < 9; ++i) s += (mode & (0400u >> i)) ? rwx[i] : '-';
  return s;
}

std::string long_line(const StatRecord& st, const std::string& name) {
  return mode_string(st.mode) + " " + std::to_string(st.nlink) + " " + std::to_string(st.size) + " " + name + "\n";
}

int ls_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "ls", ctx.argv(), "al1d");
  if (!f) return 2;
  bool all = f->has('a'), longf = f->has('l'), dir_itself = f->has('d');
  std::vector<std::string> ops = f->operands.empty() ? std::vector<std::string>{"."} : f->operands;
  std::vector<std::pair<std::string, StatRecord>> files, dirs;
  int rc = 0;
  for (const auto& p : ops) {
    StatRecord st;
    auto r = ctx.stat(p, st);
    if (!r) {
      report(ctx, "ls", "cannot access '" + p + "'", r.e);
      rc = 2;
      continue;
    }
    (st.is_dir() && !dir_itself ? dirs : files).emplace_back(p, st);
  }
  std::sort(files.begin(), files.end(), [](auto& a, auto& b) { return a.first < b.first; });
  std::sort(dirs.begin(), dirs.end(), [](auto& a, auto& b) { return a.first < b.first; });
  for (const auto& [name, st] : files) ctx.out(longf ? long_line(st, name) : name + "\n");
  bool headers = ops.size() > 1;
  bool first = files.empty();
  for (const auto& [dir, _] : dirs) {
    std::vector<DirentRecord> entries;
    auto r = ctx.list_dir(dir, entries);
    if (!r) {
      report(ctx, "ls", "cannot open directory '" + dir + "'", r.e);
      rc = 2;
      continue;
    }
    if (headers) ctx.out(std::string(first ? "" : "\n") + dir + ":\n");
    first = false;
    std::vector<std::string> names;
    for (const auto& e : entries)
      if (all || e.name.empty() || e.name[0] != '.') names.push_back(e.name);
    std::sort(names.begin(), names.end());
    for (const auto& n : names) {
      if (!longf) {
        ctx.out(n + "\n");
        continue;
      }
      StatRecord st;
      if (ctx.lstat(join_path(dir, n), st)) ctx.out(long_line(st, n));
    }
  }
  return rc;
}

// mkdir / rm / rmdir -----------------------------------------------------------

int mkdir_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "mkdir", ctx.argv(), "p");
  if (!f) return 1;
  if (f->operands.empty()) {
    report(ctx, "mkdir", "missing operand");
    return 1;
  }
  bool parents = f->has('p');
  int rc = 0;
  for (const auto& p : f->operands) {
    if (!parents) {
      auto r = ctx.mkdir(p, 0755);
      if (!r) {
        report(ctx, "mkdir", "cannot create directory '" + p + "'", r.e);
        rc = 1;
      }
      continue;
    }
    std::string prefix = p[0] == '/' ? "/" : "";
    size_t start = 0;
    while (start <= p.size()) {
      size_t slash = p.find('/', start);
      std::string part = p.substr(start, slash == std::string::npos ? std::string::npos : slash - start);
      start = slash == std::string::npos ? p.size() + 1 : slash + 1;
      if (part.empty()) continue;
      prefix = join_path(prefix, part);
      auto r = ctx.mkdir(prefix, 0755);
      StatRecord st;
      if (!r && !(r.e == err::EXIST && ctx.stat(prefix, st).ok() && st.is_dir())) {
        report(ctx, "mkdir", "cannot create directory '" + prefix + "'", r.e);
        rc = 1;
        break;
      }
    }
  }
  return rc;
}

int remove_tree(GuestContext& ctx, const std::string& path) {
  std::vector<DirentRecord> entries;
  auto r = ctx.list_dir(path, entries);
  if (!r) {
    report(ctx, "rm", "cannot remove '" + path + "'", r.e);
    return 1;
  }
  int rc = 0;
  for (const auto& e : entries) {
    if (e.name == "." || e.name == "..") continue;
    std::string child = join_path(path, e.name);
    StatRecord st;
    if (ctx.lstat(child, st) && st.is_dir()) {
      rc |= remove_tree(ctx, child);
    } else if (auto u = ctx.unlink(child); !u) {
      report(ctx, "rm", "cannot remove '" + child + "'", u.e);
      rc = 1;
    }
  }
  if (auto d = ctx.rmdir(path); !d) {
    report(ctx, "rm", "cannot remove '" + path + "'", d.e);
    rc = 1;
  }
  return rc;
}

int rm_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "rm", ctx.argv(), "rRf");
  if (!f) return 1;
  bool recursive = f->has('r') || f->has('R'), force = f->has('f');
  if (f->operands.empty() && !force) {
    report(ctx, "rm", "missing operand");
    return 1;
  }
  int rc = 0;
  for (const auto& p : f->operands) {
    StatRecord st;
    auto s = ctx.lstat(p, st);
    if (!s) {
      if (!(force && s.e == err::NOENT)) {
        report(ctx, "rm", "cannot remove '" + p + "'", s.e);
        rc = 1;
      }
      continue;
    }
    if (st.is_dir()) {
      if (!recursive) {
        report(ctx, "rm", "cannot remove '" + p + "'", err::ISDIR);
        rc = 1;
        continue;
      }
      rc |= remove_tree(ctx, p);
      continue;
    }
    if (auto u = ctx.unlink(p); !u) {
      report(ctx, "rm", "cannot remove '" + p + "'", u.e);
      rc = 1;
    }
  }
  return rc;
}

int rmdir_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "rmdir", ctx.argv(), "");
  if (!f) return 1;
  if (f->operands.empty()) {
    report(ctx, "rmdir", "missing operand");
    return 1;
  }
  int rc = 0;
  for (const auto& p : f->operands) {
    if (auto r = ctx.rmdir(p); !r) {
      report(ctx, "rmdir", "failed to remove '" + p + "'", r.e);
      rc = 1;
    }
  }
  return rc;
}

// sha1sum ---------------------------------------------------------------------

int sha1sum_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "sha1sum", ctx.argv(), "bt");
  if (!f) return 1;
  int rc = 0;
  for (const auto& path : operands_or_stdin(*f)) {
    Input in(ctx, path);
    if (!in.ok()) {
      report(ctx, "sha1sum", path, in.error());
      rc = 1;
      continue;
    }
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> md_ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    EVP_DigestInit_ex(md_ctx.get(), EVP_sha1(), nullptr);
    for (auto c = in.reader().chunk(); !c.empty(); c = in.reader().chunk())
      EVP_DigestUpdate(md_ctx.get(), c.data(), c.size());
    if (in.reader().error()) {
      report(ctx, "sha1sum", path, in.reader().error());
      rc = 1;
      continue;
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int md_len = 0;
    EVP_DigestFinal_ex(md_ctx.get(), md, &md_len);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int k = 0; k < md_len; ++k) {
      unsigned char b = md[k];
      out += hex[b >> 4];
      out += hex[b & 15];
    }
    ctx.out(out + "  " + path + "\n");
  }
  return rc;
}

// sort ------------------------------------------------------------------------

// Numeric prefix comparison in the manner of `sort -n` under the C locale:
// optional blanks, optional '-', digits, optional '.' and digits. Anything
// else compares as zero.
struct NumKey {
  bool neg = false;
  std::string_view int_part;   // without leading zeros
  std::string_view frac_part;  // without trailing zeros
};

NumKey num_key(std::string_view s) {
  size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
  NumKey k;
  if (i < s.size() && s[i] == '-') {
    k.neg = true;
    ++i;
  }
  size_t a = i;
  while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
  std::string_view ip = s.substr(a, i - a);
  std::string_view fp;
  if (i < s.size() && s[i] == '.') {
    size_t b = ++i;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    fp = s.substr(b, i - b);
  }
  while (!ip.empty() && ip.front() == '0') ip.remove_prefix(1);
  while (!fp.empty() && fp.back() == '0') fp.remove_suffix(1);
  k.int_part = ip;
  k.frac_part = fp;
  if (ip.empty() && fp.empty()) k.neg = false;
  return k;
}

int cmp_magnitude(const NumKey& a, const NumKey& b) {
  if (a.int_part.size() != b.int_part.size()) return a.int_part.size() < b.int_part.size() ? -1 : 1;
  if (int c = a.int_part.compare(b.int_part)) return c < 0 ? -1 : 1;
  if (int c = a.frac_part.compare(b.frac_part)) return c < 0 ? -1 : 1;
  return 0;
}

int cmp_numeric(std::string_view x, std::string_view y) {
  NumKey a = num_key(x), b = num_key(y);
  if (a.neg != b.neg) return a.neg ? -1 : 1;
  int m = cmp_magnitude(a, b);
  return a.neg ? -m : m;
}

int cmp_bytes(std::string_view a, std::string_view b) {
  int c = a.compare(b);
  return c < 0 ? -1 : c > 0 ? 1 : 0;
}

int sort_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "sort", ctx.argv(), "rnu", "o");
  if (!f) return 2;
  bool reverse = f->has('r'), numeric = f->has('n'), unique = f->has('u');
  std::vector<std::string> lines;
  for (const auto& path : operands_or_stdin(*f)) {
    Input in(ctx, path);
    if (!in.ok()) {
      report(ctx, "sort", "cannot read: " + path, in.error());
      return 2;
    }
    while (auto l = in.reader().line()) {
      if (!l->empty() && l->back() == '\n') l->pop_back();
      lines.push_back(std::move(*l));
    }
  }
  auto key_cmp = [&](const std::string& a, const std::string& b) {
    return numeric ? cmp_numeric(a, b) : cmp_bytes(a, b);
  };
  // Lines with equal keys fall back to a byte comparison, as GNU sort does
  // without -s; -u keeps the first line of each run of equal keys.
  auto full_cmp = [&](const std::string& a, const std::string& b) {
    int c = key_cmp(a, b);
    if (c == 0 && !unique) c = cmp_bytes(a, b);
    return reverse ? -c : c;
  };
  std::stable_sort(lines.begin(), lines.end(), [&](const auto& a, const auto& b) { return full_cmp(a, b) < 0; });
  std::string out;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (unique && i > 0 && key_cmp(lines[i - 1], lines[i]) == 0) continue;
    out += lines[i];
    out += '\n';
  }
  if (auto o = f->value('o')) {
    auto fd = ctx.open(*o, oflag::WRONLY | oflag::CREAT | oflag::TRUNC);
    if (!fd) {
      report(ctx, "sort", "open failed: " + *o, fd.e);
      return 2;
    }
    ctx.write_all(static_cast<int>(fd.v), out);
    ctx.close(static_cast<int>(fd.v));
    return 0;
  }
  ctx.out(out);
  return 0;
}

// stat ------------------------------------------------------------------------

std::string file_type(uint32_t mode) {
  switch (mode & fmode::IFMT) {
    case fmode::IFDIR: return "directory";
    case fmode::IFIFO: return "fifo";
    case fmode::IFSOCK: return "socket";
    default: return "regular file";
  }
}

std::string octal(uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%o", v);
  return buf;
}

std::string stat_format(const std::string& fmt, const std::string& name, const StatRecord& st) {
  std::string out;
  for (size_t i = 0; i < fmt.size(); ++i) {
    if (fmt[i] == '\\' && i + 1 < fmt.size()) {
      char c = fmt[++i];
      out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
      continue;
    }
    if (fmt[i] != '%' || i + 1 == fmt.size()) {
      out += fmt[i];
      continue;
    }
    switch (char c = fmt[++i]) {
      case 'n': out += name; break;
      case 's': out += std::to_string(st.size); break;
      case 'a': out += octal(st.mode & 07777); break;
      case 'A': out += mode_string(st.mode); break;
      case 'F': out += file_type(st.mode); break;
      case 'i': out += std::to_string(st.ino); break;
      case 'h': out += std::to_string(st.nlink); break;
      case 'X': out += std::to_string(st.atime_ns / 1000000000); break;
      case 'Y': out += std::to_string(st.mtime_ns / 1000000000); break;
      case 'Z': out += std::to_string(st.ctime_ns / 1000000000); break;
      case '%': out += '%'; break;
      default:
        out += '%';
        out += c;
    }
  }
  return out;
}

int stat_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "stat", ctx.argv(), "L", "c");
  if (!f) return 1;
  if (f->operands.empty()) {
    report(ctx, "stat", "missing operand");
    return 1;
  }
  std::string fmt = f->value('c').value_or(
      "  File: %n\n  Size: %s\tType: %F\n  Mode: (0%a/%A)\tLinks: %h\tInode: %i\n"
      "Access: %X\nModify: %Y\nChange: %Z");
  int rc = 0;
  for (const auto& p : f->operands) {
    StatRecord st;
    auto r = ctx.stat(p, st);
    if (!r) {
      report(ctx, "stat", "cannot stat '" + p + "'", r.e);
      rc = 1;
      continue;
    }
    ctx.out(stat_format(fmt, p, st) + "\n");
  }
  return rc;
}

// tee / touch -----------------------------------------------------------------

int tee_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "tee", ctx.argv(), "ai");
  if (!f) return 1;
  int64_t flags = oflag::WRONLY | oflag::CREAT | (f->has('a') ? oflag::APPEND : oflag::TRUNC);
  std::vector<std::pair<std::string, int>> outs;
  int rc = 0;
  for (const auto& p : f->operands) {
    auto r = ctx.open(p, flags);
    if (!r) {
      report(ctx, "tee", p, r.e);
      rc = 1;
      continue;
    }
    outs.emplace_back(p, static_cast<int>(r.v));
  }
  FdReader in(ctx, 0);
  for (auto c = in.chunk(); !c.empty(); c = in.chunk()) {
    ctx.flush();
    if (auto w = ctx.write_all(1, c); !w) {
      report(ctx, "tee", "standard output", w.e);
      rc = 1;
    }
    for (auto& [name, fd] : outs) {
      if (fd < 0) continue;
      if (auto w = ctx.write_all(fd, c); !w) {
        report(ctx, "tee", name, w.e);
        rc = 1;
        ctx.close(fd);
        fd = -1;
      }
    }
  }
  for (auto& [_, fd] : outs)
    if (fd >= 0) ctx.close(fd);
  return rc;
}

int touch_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "touch", ctx.argv(), "c");
  if (!f) return 1;
  if (f->operands.empty()) {
    report(ctx, "touch", "missing file operand");
    return 1;
  }
  int rc = 0;
  for (const auto& p : f->operands) {
    StatRecord st;
    if (!ctx.stat(p, st)) {
      if (f->has('c')) continue;
      auto r = ctx.open(p, oflag::WRONLY | oflag::CREAT);
      if (!r) {
        report(ctx, "touch", "cannot touch '" + p + "'", r.e);
        rc = 1;
        continue;
      }
      ctx.close(static_cast<int>(r.v));
    }
    int64_t t = now_ns();
    if (auto u = ctx.utimes(p, t, t); !u) {
      report(ctx, "touch", "setting times of '" + p + "'", u.e);
      rc = 1;
    }
  }
  return rc;
}

// wc --------------------------------------------------------------------------

struct Counts {
  uint64_t lines = 0, words = 0, bytes = 0;
};

// Words follow the C-locale rule of GNU wc 8.x: whitespace ends a word,
// printable characters start one, other bytes do neither.
void count_into(Counts& c, std::string_view data, bool& in_word) {
  c.bytes += data.size();
  for (char ch : data) {
    auto u = static_cast<unsigned char>(ch);
    if (u == '\n') ++c.lines;
    if (u == ' ' || u == '\n' || u == '\t' || u == '\r' || u == '\f' || u == '\v') {
      in_word = false;
    } else if (u >= 0x21 && u < 0x7f) {
      if (!in_word) ++c.words;
      in_word = true;
    }
  }
}

int wc_main(GuestContext& ctx) {
  auto f = parse_flags(ctx, "wc", ctx.argv(), "lwcm");
  if (!f) return 1;
  bool l = f->has('l'), w = f->has('w'), c = f->has('c') || f->has('m');
  if (!l && !w && !c) l = w = c = true;
  int selected = int{l} + int{w} + int{c};
  auto files = operands_or_stdin(*f);

  // Column width as GNU wc computes it: digits of the total size of the
  // regular inputs, at least 7 when any input is not a regular file, and 1
  // for a single count of a single input.
  int width = 1;
  if (!(files.size() == 1 && selected == 1)) {
    uint64_t total = 0;
    int min_width = 1;
    for (const auto& p : files) {
      StatRecord st;
      if (p == "-") {
        if (ctx.fstat(0, st) && st.is_reg())
          total += static_cast<uint64_t>(st.size);
        else
          min_width = 7;
      } else if (ctx.stat(p, st)) {
        if (st.is_reg())
          total += static_cast<uint64_t>(st.size);
        else
          min_width = 7;
      }
    }
    for (; total >= 10; total /= 10) ++width;
    width = std::max(width, min_width);
  }
  auto line = [&](const Counts& k, const std::string& name) {
    std::string out;
    auto col = [&](uint64_t v) {
      std::string s = std::to_string(v);
      if (!out.empty()) out += ' ';
      if (static_cast<int>(s.size()) < width) out.append(static_cast<size_t>(width) - s.size(), ' ');
      out += s;
    };
    if (l) col(k.lines);
    if (w) col(k.words);
    if (c) col(k.bytes);
    if (!name.empty()) out += " " + name;
    ctx.out(out + "\n");
  };
  Counts total;
  int rc = 0;
  for (const auto& p : files) {
    Input in(ctx, p);
    if (!in.ok()) {
      report(ctx, "wc", p, in.error());
      rc = 1;
      continue;
    }
    Counts k;
    bool in_word = false;
    for (auto ch = in.reader().chunk(); !ch.empty(); ch = in.reader().chunk()) count_into(k, ch, in_word);
    total.lines += k.lines;
    total.words += k.words;
    total.bytes += k.bytes;
    line(k, p == "-" ? "" : p);
  }
  if (files.size() > 1) line(total, "total");
  return rc;
}

// xargs -----------------------------------------------------------------------

std::vector<std::string> xargs_tokens(const std::string& in) {
  std::vector<std::string> out;
  std::string cur;
  bool have = false;
  for (size_t i = 0; i < in.size(); ++i) {
    char c = in[i];
    if (c == ' ' || c == '\t' || c == '\n') {
      if (have) out.push_back(cur);
      cur.clear();
      have = false;
    } else if (c == '\'' || c == '"') {
      size_t end = in.find(c, i + 1);
      if (end == std::string::npos) end = in.size();
      cur += in.substr(i + 1, end - i - 1);
      have = true;
      i = end;
    } else if (c == '\\' && i + 1 < in.size()) {
      cur += in[++i];
      have = true;
    } else {
      cur += c;
      have = true;
    }
  }
  if (have) out.push_back(cur);
  return out;
}

int xargs_main(GuestContext& ctx) {
  const auto& argv = ctx.argv();
  int64_t per = 0;
  size_t i = 1;
  for (; i < argv.size(); ++i) {
    const auto& a = argv[i];
    if (a == "--") {
      ++i;
      break;
    }
    if (a.rfind("-n", 0) == 0) {
      std::string v = a.size() > 2 ? a.substr(2) : (i + 1 < argv.size() ? argv[++i] : "");
      if (!parse_int(v, per) || per <= 0) {
        report(ctx, "xargs", "invalid number for -n option");
        return 1;
      }
      continue;
    }
    if (a.size() > 1 && a[0] == '-') {
      report(ctx, "xargs", "invalid option -- '" + a.substr(1) + "'");
      return 1;
    }
    break;
  }
  std::vector<std::string> cmd(argv.begin() + static_cast<std::ptrdiff_t>(i), argv.end());
  if (cmd.empty()) cmd.push_back("echo");
  FdReader in(ctx, 0);
  auto tokens = xargs_tokens(in.rest());
  auto path = find_program(ctx, cmd[0], ctx.getenv("PATH", "/usr/bin:/bin"));
  if (!path) {
    report(ctx, "xargs", cmd[0], err::NOENT);
    return 127;
  }
  ctx.flush();
  int rc = 0;
  size_t pos = 0;
  do {
    std::vector<std::string> args = cmd;
    size_t take = per > 0 ? std::min(tokens.size() - pos, static_cast<size_t>(per)) : tokens.size() - pos;
    args.insert(args.end(), tokens.begin() + static_cast<std::ptrdiff_t>(pos),
                tokens.begin() + static_cast<std::ptrdiff_t>(pos + take));
    pos += take;
    auto pid = ctx.spawn(*path, args, ctx.environ());
    if (!pid) {
      report(ctx, "xargs", cmd[0], pid.e);
      return pid.e == err::NOENT ? 127 : 126;
    }
    int st = wait_child(ctx, pid.v);
    if (st < 0) return 1;
    if (wait::if_signaled(st)) return 125;
    int code = wait::exit_status(st);
    if (code == 255) {
      report(ctx, "xargs", cmd[0] + ": exited with status 255; aborting");
      return 124;
    }
    if (code != 0) rc = 123;
  } while (pos < tokens.size());
  return rc;
}

// small ones --------------------------------------------------------------------

int true_main(GuestContext&) { return 0; }
int false_main(GuestContext&) { return 1; }

int sleep_main(GuestContext& ctx) {
  if (ctx.argv().size() < 2) {
    report(ctx, "sleep", "missing operand");
    return 1;
  }
  double total = 0;
  for (size_t i = 1; i < ctx.argv().size(); ++i) {
    char* end = nullptr;
    const std::string& a = ctx.argv()[i];
    double v = std::strtod(a.c_str(), &end);
    if (end == a.c_str() || *end != '\0' || v < 0) {
      report(ctx, "sleep", "invalid time interval '" + a + "'");
      return 1;
    }
    total += v;
  }
  ctx.sleep_for(std::chrono::milliseconds(static_cast<int64_t>(total * 1000)));
  return 0;
}

// Prints the value of each named environment variable, one per line.
int env_echo_main(GuestContext& ctx) {
  int rc = 0;
  for (size_t i = 1; i < ctx.argv().size(); ++i) {
    auto it = ctx.environ().find(ctx.argv()[i]);
    if (it == ctx.environ().end()) rc = 1;
    ctx.out((it == ctx.environ().end() ? std::string() : it->second) + "\n");
  }
  if (ctx.argv().size() == 1)
    for (const auto& [k, v] : ctx.environ()) ctx.out(k + "=" + v + "\n");
  return rc;
}

struct Tool {
  const char* name;
  Main main;
  const char* usage;
};

const Tool kTools[] = {
    {"cat", cat_main, "cat [FILE...]\nConcatenate files (or stdin) to stdout."},
    {"cp", cp_main, "cp SRC DST | cp SRC... DIR\nCopy regular files."},
    {"echo", echo_main, "echo [-neE] [ARG...]\n-n no newline, -e interpret backslash escapes."},
    {"grep", grep_main,
     "grep [-vicnqhH] [-e] PATTERN [FILE...]\nBasic regular expressions. -v invert, -i ignore case, -c count, "
     "-n line numbers, -q quiet. Exit 0 match, 1 none, 2 error."},
    {"head", head_main, "head [-n N | -c N | -N] [-qv] [FILE...]"},
    {"ls", ls_main, "ls [-a] [-l] [-1] [-d] [PATH...]\nOne name per line, byte order."},
    {"mkdir", mkdir_main, "mkdir [-p] DIR..."},
    {"rm", rm_main, "rm [-r] [-f] PATH..."},
    {"rmdir", rmdir_main, "rmdir DIR..."},
    {"sha1sum", sha1sum_main, "sha1sum [FILE...]\nPrints 'HASH  NAME' per file."},
    {"sort", sort_main, "sort [-r] [-n] [-u] [-o FILE] [FILE...]\nByte order (C locale); -n numeric prefix."},
    {"stat", stat_main, "stat [-c FORMAT] PATH...\nFormat: %n %s %a %A %F %i %h %X %Y %Z."},
    {"tail", tail_main, "tail [-n [+]N | -c [+]N | -N] [-qv] [FILE...]"},
    {"tee", tee_main, "tee [-a] [FILE...]"},
    {"touch", touch_main, "touch [-c] FILE..."},
    {"wc", wc_main, "wc [-l] [-w] [-c] [FILE...]"},
    {"xargs", xargs_main, "xargs [-n N] [COMMAND [ARG...]]\nDefault command is echo."},
    {"true", true_main, "true"},
    {"false", false_main, "false"},
    {"sleep", sleep_main, "sleep SECONDS..."},
    {"env-echo", env_echo_main, "env-echo [NAME...]\nPrints each variable's value, or the whole environment."},
};

}  // namespace

void register_coreutils(ProgramRegistry& reg) {
  for (const auto& t : kTools) {
    Main fn = t.main;
    std::string usage = std::string("usage: ") + t.usage + "\n";
    reg.add(make_program(t.name, [fn, usage](GuestContext& ctx) {
      if (ctx.argv().size() == 2 && ctx.argv()[1] == "--help") {
        ctx.out(usage);
        return 0;
      }
      return fn(ctx);
    }));
  }
}

}  // namespace sandboxd::userland
