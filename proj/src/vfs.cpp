#include "sandboxd/vfs.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "sandboxd/abi.hpp"

namespace sandboxd {

namespace fs = std::filesystem;

int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

// ---------------------------------------------------------------------------
// paths

Result<std::string> resolve_path(const std::string& cwd, const std::string& path) {
  if (path.empty()) return Result<std::string>::fail(err::NOENT);
  std::string joined = path[0] == '/' ? path : cwd + "/" + path;
  std::vector<std::string> parts;
  size_t i = 0;
  while (i < joined.size()) {
    size_t j = joined.find('/', i);
    if (j == std::string::npos) j = joined.size();
    std::string comp = joined.substr(i, j - i);
    if (comp.empty() || comp == ".") {
      // skip
    } else if (comp == "..") {
      if (!parts.empty()) parts.pop_back();
    } else {
      if (comp.size() > 255) return Result<std::string>::fail(err::NAMETOOLONG);
      parts.push_back(std::move(comp));
    }
    i = j + 1;
  }
  std::string out;
  for (const auto& p : parts) out += "/" + p;
  return out.empty() ? std::string("/") : out;
}

std::string dirname_of(const std::string& abs) {
  auto pos = abs.rfind('/');
  if (pos == 0 || pos == std::string::npos) return "/";
  return abs.substr(0, pos);
}

std::string basename_of(const std::string& abs) {
  auto pos = abs.rfind('/');
  return pos == std::string::npos ? abs : abs.substr(pos + 1);
}

namespace {
std::vector<std::string> split_path(const std::string& abs) {
  std::vector<std::string> out;
  size_t i = 1;
  while (i < abs.size()) {
    size_t j = abs.find('/', i);
    if (j == std::string::npos) j = abs.size();
    if (j > i) out.push_back(abs.substr(i, j - i));
    i = j + 1;
  }
  return out;
}
}  // namespace

// ---------------------------------------------------------------------------
// manifests and providers

std::vector<ManifestEntry> parse_manifest(std::string_view text) {
  std::vector<ManifestEntry> out;
  try {
    auto j = nlohmann::json::parse(text);
    if (!j.is_array()) throw Error(ErrorKind::FsInitError, "manifest is not an array");
    for (const auto& e : j) {
      ManifestEntry m;
      m.path = e.at("p").get<std::string>();
      auto k = e.at("k").get<std::string>();
      if (k != "f" && k != "d") throw Error(ErrorKind::FsInitError, "bad manifest kind '" + k + "'");
      m.dir = k == "d";
      m.size = e.value("s", uint64_t{0});
      if (m.path.empty() || m.path[0] != '/') throw Error(ErrorKind::FsInitError, "manifest path not absolute: " + m.path);
      out.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::FsInitError, std::string("bad manifest: ") + e.what());
  }
  return out;
}

std::string serialize_manifest(const std::vector<ManifestEntry>& entries) {
  auto j = nlohmann::json::array();
  for (const auto& e : entries) j.push_back({{"p", e.path}, {"s", e.size}, {"k", e.dir ? "d" : "f"}});
  return j.dump();
}

std::vector<ManifestEntry> DirProvider::manifest() {
  std::error_code ec;
  if (!fs::is_directory(root_, ec)) throw Error(ErrorKind::FsInitError, "underlay directory not found: " + root_.string());
  std::vector<ManifestEntry> out;
  for (auto it = fs::recursive_directory_iterator(root_, ec); !ec && it != fs::recursive_directory_iterator();
       it.increment(ec)) {
    auto rel = fs::relative(it->path(), root_, ec).generic_string();
    if (ec) break;
    if (it->is_directory()) {
      out.push_back({"/" + rel, 0, true});
    } else if (it->is_regular_file()) {
      out.push_back({"/" + rel, static_cast<uint64_t>(it->file_size()), false});
    }
  }
  if (ec) throw Error(ErrorKind::FsInitError, "walking " + root_.string() + ": " + ec.message());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return out;
}

Bytes DirProvider::fetch(const std::string& path) {
  std::ifstream in(root_ / path.substr(1), std::ios::binary);
  if (!in) throw Error(ErrorKind::FsInitError, "cannot read underlay file " + path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::shared_ptr<UnderlayProvider> make_provider(const std::string& spec) {
  if (spec.rfind("dir:", 0) == 0) return std::make_shared<DirProvider>(spec.substr(4));
  if (spec.rfind("http://", 0) == 0) return std::make_shared<HttpProvider>(spec);
  throw Error(ErrorKind::FsInitError, "unsupported underlay '" + spec + "' (expected dir:PATH or http://...)");
}

// ---------------------------------------------------------------------------
// overlay tree

struct Vfs::Node {
  enum class Kind { File, Dir, Whiteout };
  Kind kind = Kind::Dir;
  // File contents for files; metadata only for directories.
  std::shared_ptr<FileData> data;
  std::map<std::string, std::unique_ptr<Node>> children;
  bool opaque = false;

  static std::unique_ptr<Node> make(Kind k, uint64_t ino, uint32_t mode) {
    auto n = std::make_unique<Node>();
    n->kind = k;
    if (k != Kind::Whiteout) {
      n->data = std::make_shared<FileData>();
      n->data->ino = ino;
      n->data->mode = mode;
      n->data->atime_ns = n->data->mtime_ns = n->data->ctime_ns = now_ns();
    }
    return n;
  }
};

struct Vfs::LowerEntry {
  uint64_t size = 0;
  bool dir = false;
  uint64_t ino = 0;
  std::shared_ptr<const Bytes> content;
  std::set<std::string> children;
};

struct Vfs::Lookup {
  int err = 0;
  Node* upper = nullptr;
  // Underlay entry at this exact path, if one would be visible without the
  // upper node.
  LowerEntry* lower = nullptr;

  bool exists() const { return err == 0; }
  bool is_dir() const {
    if (upper) return upper->kind == Node::Kind::Dir;
    return lower && lower->dir;
  }
  bool merges_lower() const { return lower && lower->dir && (!upper || (upper->kind == Node::Kind::Dir && !upper->opaque)); }
};

// Held by every mutating path operation for the node it changes and its
// parent. Operations run to completion on the kernel loop, so a second
// acquisition of the same path is a logic error rather than contention.
class Vfs::NodeLock {
 public:
  NodeLock(Vfs& vfs, std::string path) : vfs_(vfs), path_(std::move(path)) {
    if (!vfs_.locks_.insert(path_).second) throw std::logic_error("node lock re-acquired: " + path_);
  }
  ~NodeLock() { vfs_.locks_.erase(path_); }
  NodeLock(const NodeLock&) = delete;
  NodeLock& operator=(const NodeLock&) = delete;

 private:
  Vfs& vfs_;
  std::string path_;
};

Vfs::Vfs() : root_(Node::make(Node::Kind::Dir, 1, 0755)) {}
Vfs::~Vfs() = default;

void Vfs::mount_underlay(std::shared_ptr<UnderlayProvider> provider) {
  auto entries = provider->manifest();
  provider_ = std::move(provider);
  lower_.clear();
  lower_["/"].dir = true;
  lower_["/"].ino = 1;
  for (const auto& e : entries) {
    auto norm = resolve_path("/", e.path);
    if (!norm || *norm == "/") continue;
    // Parents may be implicit in the manifest.
    std::string p = *norm;
    bool leaf = true;
    while (p != "/") {
      auto parent = dirname_of(p);
      auto& le = lower_[p];
      if (leaf) {
        le.dir = e.dir;
        le.size = e.dir ? 0 : e.size;
      } else {
        le.dir = true;
      }
      if (le.ino == 0) le.ino = next_ino();
      lower_[parent].dir = true;
      lower_[parent].children.insert(basename_of(p));
      leaf = false;
      p = parent;
    }
  }
}

Vfs::Lookup Vfs::lookup(const std::string& path) {
  Lookup r;
  auto comps = split_path(path);
  Node* cur = root_.get();
  bool lower_ok = provider_ != nullptr;
  std::string prefix;
  for (size_t i = 0; i < comps.size(); ++i) {
    const bool last = i + 1 == comps.size();
    prefix += "/" + comps[i];
    if (cur) {
      if (cur->opaque) lower_ok = false;
      auto it = cur->children.find(comps[i]);
      if (it != cur->children.end()) {
        Node* child = it->second.get();
        if (child->kind == Node::Kind::Whiteout) {
          r.err = err::NOENT;
          return r;
        }
        if (child->kind == Node::Kind::File && !last) {
          r.err = err::NOTDIR;
          return r;
        }
        cur = child;
        continue;
      }
      cur = nullptr;
    }
    if (!lower_ok) {
      r.err = err::NOENT;
      return r;
    }
    auto le = lower_.find(prefix);
    if (le == lower_.end()) {
      r.err = err::NOENT;
      return r;
    }
    if (!le->second.dir && !last) {
      r.err = err::NOTDIR;
      return r;
    }
  }
  r.upper = cur;
  if (lower_ok) {
    auto le = lower_.find(path);
    if (le != lower_.end()) r.lower = &le->second;
  }
  if (!r.upper && !r.lower) r.err = err::NOENT;
  return r;
}

Vfs::Node* Vfs::ensure_upper_dir(const std::string& path) {
  Node* cur = root_.get();
  std::string prefix;
  for (const auto& c : split_path(path)) {
    prefix += "/" + c;
    auto it = cur->children.find(c);
    if (it != cur->children.end() && it->second->kind == Node::Kind::Dir) {
      cur = it->second.get();
      continue;
    }
    auto le = lower_.find(prefix);
    uint64_t ino = le != lower_.end() ? le->second.ino : next_ino();
    auto node = Node::make(Node::Kind::Dir, ino, 0755);
    Node* raw = node.get();
    cur->children[c] = std::move(node);
    cur = raw;
  }
  return cur;
}

Result<std::shared_ptr<const Bytes>> Vfs::lower_content(const std::string& path) {
  auto it = lower_.find(path);
  if (it == lower_.end() || it->second.dir || !provider_) return Result<std::shared_ptr<const Bytes>>::fail(err::NOENT);
  auto& le = it->second;
  if (!le.content) {
    ++fetches_[path];
    try {
      le.content = std::make_shared<const Bytes>(provider_->fetch(path));
    } catch (const std::exception&) {
      return Result<std::shared_ptr<const Bytes>>::fail(err::IO);
    }
    le.size = le.content->size();
  }
  return le.content;
}

Result<std::shared_ptr<FileData>> Vfs::copy_up(const std::string& path) {
  auto content = lower_content(path);
  if (!content) return Result<std::shared_ptr<FileData>>::fail(content.error());
  Node* parent = ensure_upper_dir(dirname_of(path));
  auto node = Node::make(Node::Kind::File, lower_.at(path).ino, 0644);
  node->data->content = **content;
  auto data = node->data;
  parent->children[basename_of(path)] = std::move(node);
  return data;
}

Result<FdObjectPtr> Vfs::open(const std::string& path, int64_t flags, uint32_t mode) {
  using R = Result<FdObjectPtr>;
  const int64_t acc = flags & oflag::ACCMODE;
  const bool writable = acc == oflag::WRONLY || acc == oflag::RDWR;
  auto lk = lookup(path);
  if (lk.err == err::NOTDIR) return R::fail(err::NOTDIR);
  if (lk.exists()) {
    if ((flags & oflag::CREAT) && (flags & oflag::EXCL)) return R::fail(err::EXIST);
    if (lk.is_dir()) {
      if (writable) return R::fail(err::ISDIR);
      return FdObjectPtr(new DirHandle(this, path));
    }
    if (flags & oflag::DIRECTORY) return R::fail(err::NOTDIR);
    auto h = std::shared_ptr<FileHandle>(new FileHandle(this, path, flags));
    if (lk.upper) {
      h->upper_ = lk.upper->data;
    } else if (writable) {
      NodeLock lock(*this, path);
      auto data = copy_up(path);
      if (!data) return R::fail(data.error());
      h->upper_ = *data;
    } else {
      h->lower_path_ = path;
    }
    if (writable && (flags & oflag::TRUNC) && h->upper_) {
      NodeLock lock(*this, path);
      h->upper_->content.clear();
      h->upper_->mtime_ns = h->upper_->ctime_ns = now_ns();
    }
    return FdObjectPtr(h);
  }
  if (!(flags & oflag::CREAT)) return R::fail(lk.err);
  if (path == "/") return R::fail(err::ISDIR);
  auto parent = dirname_of(path);
  auto plk = lookup(parent);
  if (!plk.exists()) return R::fail(plk.err);
  if (!plk.is_dir()) return R::fail(err::NOTDIR);
  NodeLock plock(*this, parent);
  NodeLock lock(*this, path);
  Node* pdir = ensure_upper_dir(parent);
  auto node = Node::make(Node::Kind::File, next_ino(), mode & 07777);
  auto data = node->data;
  pdir->children[basename_of(path)] = std::move(node);
  pdir->data->mtime_ns = now_ns();
  auto h = std::shared_ptr<FileHandle>(new FileHandle(this, path, flags));
  h->upper_ = data;
  return FdObjectPtr(h);
}

namespace {
StatRecord stat_of(const FileData& d, bool dir) {
  StatRecord st;
  st.ino = d.ino;
  st.size = dir ? 4096 : static_cast<int64_t>(d.content.size());
  st.mode = (dir ? fmode::IFDIR : fmode::IFREG) | (d.mode & 07777);
  st.nlink = dir ? 2 : 1;
  st.atime_ns = d.atime_ns;
  st.mtime_ns = d.mtime_ns;
  st.ctime_ns = d.ctime_ns;
  return st;
}
}  // namespace

Result<StatRecord> Vfs::stat(const std::string& path) {
  auto lk = lookup(path);
  if (!lk.exists()) return Result<StatRecord>::fail(lk.err);
  if (lk.upper) return stat_of(*lk.upper->data, lk.upper->kind == Node::Kind::Dir);
  StatRecord st;
  st.ino = lk.lower->ino;
  st.size = lk.lower->dir ? 4096 : static_cast<int64_t>(lk.lower->size);
  st.mode = lk.lower->dir ? (fmode::IFDIR | 0755) : (fmode::IFREG | 0644);
  st.nlink = lk.lower->dir ? 2 : 1;
  return st;
}

int Vfs::access(const std::string& path, int64_t mode) {
  auto st = stat(path);
  if (!st) return st.error();
  if ((mode & amode::EXEC) && st->is_reg() && (st->mode & 0111) == 0) return err::ACCES;
  return 0;
}

int Vfs::mkdir(const std::string& path, uint32_t mode) {
  if (path == "/") return err::EXIST;
  auto lk = lookup(path);
  if (lk.exists()) return err::EXIST;
  if (lk.err == err::NOTDIR) return err::NOTDIR;
  auto parent = dirname_of(path);
  auto plk = lookup(parent);
  if (!plk.exists()) return plk.err;
  if (!plk.is_dir()) return err::NOTDIR;
  NodeLock plock(*this, parent);
  NodeLock lock(*this, path);
  Node* pdir = ensure_upper_dir(parent);
  auto name = basename_of(path);
  auto it = pdir->children.find(name);
  const bool over_whiteout = it != pdir->children.end() && it->second->kind == Node::Kind::Whiteout;
  auto node = Node::make(Node::Kind::Dir, next_ino(), mode & 07777);
  node->opaque = over_whiteout;
  pdir->children[name] = std::move(node);
  pdir->data->mtime_ns = now_ns();
  return 0;
}

int Vfs::rmdir(const std::string& path) {
  if (path == "/") return err::BUSY;
  auto lk = lookup(path);
  if (!lk.exists()) return lk.err;
  if (!lk.is_dir()) return err::NOTDIR;
  auto entries = list_locked(path);
  if (!entries) return entries.error();
  if (!entries->empty()) return err::NOTEMPTY;
  auto parent = dirname_of(path);
  NodeLock plock(*this, parent);
  NodeLock lock(*this, path);
  Node* pdir = ensure_upper_dir(parent);
  auto name = basename_of(path);
  if (lk.lower)
    pdir->children[name] = Node::make(Node::Kind::Whiteout, 0, 0);
  else
    pdir->children.erase(name);
  pdir->data->mtime_ns = now_ns();
  return 0;
}

int Vfs::unlink(const std::string& path) {
  auto lk = lookup(path);
  if (!lk.exists()) return lk.err;
  if (lk.is_dir()) return err::ISDIR;
  auto parent = dirname_of(path);
  NodeLock plock(*this, parent);
  NodeLock lock(*this, path);
  Node* pdir = ensure_upper_dir(parent);
  auto name = basename_of(path);
  if (lk.lower)
    pdir->children[name] = Node::make(Node::Kind::Whiteout, 0, 0);
  else
    pdir->children.erase(name);
  pdir->data->mtime_ns = now_ns();
  return 0;
}

int Vfs::utimes(const std::string& path, int64_t atime_ns, int64_t mtime_ns) {
  auto lk = lookup(path);
  if (!lk.exists()) return lk.err;
  NodeLock lock(*this, path);
  std::shared_ptr<FileData> data;
  if (lk.upper) {
    data = lk.upper->data;
  } else if (lk.lower->dir) {
    data = ensure_upper_dir(path)->data;
  } else {
    auto up = copy_up(path);
    if (!up) return up.error();
    data = *up;
  }
  data->atime_ns = atime_ns;
  data->mtime_ns = mtime_ns;
  data->ctime_ns = now_ns();
  return 0;
}

Result<std::string> Vfs::readlink(const std::string& path) {
  auto lk = lookup(path);
  if (!lk.exists()) return Result<std::string>::fail(lk.err);
  return Result<std::string>::fail(err::INVAL);
}

bool Vfs::is_dir(const std::string& path) {
  auto lk = lookup(path);
  return lk.exists() && lk.is_dir();
}

Result<std::vector<DirentRecord>> Vfs::list(const std::string& path) { return list_locked(path); }

Result<std::vector<DirentRecord>> Vfs::list_locked(const std::string& path) {
  using R = Result<std::vector<DirentRecord>>;
  auto lk = lookup(path);
  if (!lk.exists()) return R::fail(lk.err);
  if (!lk.is_dir()) return R::fail(err::NOTDIR);
  std::map<std::string, DirentRecord> merged;
  if (lk.upper) {
    for (const auto& [name, child] : lk.upper->children) {
      if (child->kind == Node::Kind::Whiteout) continue;
      merged[name] = {name, child->data->ino, child->kind == Node::Kind::Dir ? DT_DIR : DT_REG, 0};
    }
  }
  if (lk.merges_lower()) {
    for (const auto& name : lk.lower->children) {
      if (lk.upper && lk.upper->children.count(name)) continue;
      const auto& le = lower_.at(path == "/" ? "/" + name : path + "/" + name);
      merged[name] = {name, le.ino, le.dir ? DT_DIR : DT_REG, 0};
    }
  }
  std::vector<DirentRecord> out;
  out.reserve(merged.size());
  for (auto& [_, d] : merged) out.push_back(std::move(d));
  return out;
}

void Vfs::mkdir_p(const std::string& path, uint32_t mode) {
  std::string prefix;
  for (const auto& c : split_path(path)) {
    prefix += "/" + c;
    if (!is_dir(prefix)) {
      int e = mkdir(prefix, mode);
      if (e != 0) throw Error(ErrorKind::FsInitError, "mkdir " + prefix + ": " + err::message(e));
    }
  }
}

void Vfs::write_file(const std::string& path, std::span<const uint8_t> data, uint32_t mode) {
  mkdir_p(dirname_of(path));
  auto h = open(path, oflag::WRONLY | oflag::CREAT | oflag::TRUNC, mode);
  if (!h) throw Error(ErrorKind::FsInitError, "write " + path + ": " + err::message(h.error()));
  auto& fh = static_cast<FileHandle&>(**h);
  fh.upper_->content.assign(data.begin(), data.end());
  fh.upper_->mode = mode & 07777;
}

void Vfs::make_sink(const std::string& path) {
  write_file(path, {}, 0666);
  auto h = open(path, oflag::RDONLY, 0);
  static_cast<FileHandle&>(**h).upper_->sink = true;
}

std::optional<Bytes> Vfs::read_file(const std::string& path) {
  auto lk = lookup(path);
  if (!lk.exists() || lk.is_dir()) return std::nullopt;
  if (lk.upper) return lk.upper->data->content;
  auto c = lower_content(path);
  if (!c) return std::nullopt;
  return **c;
}

void Vfs::copy_in(const fs::path& host_dir, const std::string& guest_path) {
  std::error_code ec;
  if (!fs::is_directory(host_dir, ec)) throw Error(ErrorKind::FsInitError, "not a directory: " + host_dir.string());
  mkdir_p(guest_path);
  for (auto it = fs::recursive_directory_iterator(host_dir, ec); !ec && it != fs::recursive_directory_iterator();
       it.increment(ec)) {
    auto rel = fs::relative(it->path(), host_dir, ec).generic_string();
    std::string dest = guest_path == "/" ? "/" + rel : guest_path + "/" + rel;
    if (it->is_directory()) {
      mkdir_p(dest);
    } else if (it->is_regular_file()) {
      std::ifstream in(it->path(), std::ios::binary);
      Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      auto perms = static_cast<uint32_t>(it->status().permissions()) & 0777;
      write_file(dest, data, perms);
    }
  }
  if (ec) throw Error(ErrorKind::FsInitError, "copying " + host_dir.string() + ": " + ec.message());
}

size_t Vfs::fetch_count(const std::string& path) const {
  auto it = fetches_.find(path);
  return it == fetches_.end() ? 0 : it->second;
}

size_t Vfs::total_fetches() const {
  size_t n = 0;
  for (const auto& [_, c] : fetches_) n += c;
  return n;
}

// ---------------------------------------------------------------------------
// open objects

Result<size_t> FileHandle::pread(std::span<uint8_t> out, int64_t off) {
  using R = Result<size_t>;
  if ((flags_ & oflag::ACCMODE) == oflag::WRONLY) return R::fail(err::BADF);
  if (off < -1) return R::fail(err::INVAL);
  const bool at_cursor = off == -1;
  if (at_cursor) off = cursor_;
  const Bytes* data = nullptr;
  std::shared_ptr<const Bytes> lower;
  if (upper_) {
    data = &upper_->content;
  } else {
    auto c = vfs_->lower_content(*lower_path_);
    if (!c) return R::fail(c.error());
    lower = *c;
    data = lower.get();
  }
  size_t n = 0;
  if (static_cast<uint64_t>(off) < data->size()) {
    n = std::min(out.size(), data->size() - static_cast<size_t>(off));
    std::memcpy(out.data(), data->data() + off, n);
  }
  if (at_cursor) cursor_ = off + static_cast<int64_t>(n);
  return n;
}

Result<size_t> FileHandle::pwrite(std::span<const uint8_t> in, int64_t off) {
  using R = Result<size_t>;
  if ((flags_ & oflag::ACCMODE) == oflag::RDONLY) return R::fail(err::BADF);
  if (off < -1) return R::fail(err::INVAL);
  const bool at_cursor = off == -1;
  if (upper_->sink) return in.size();
  // An empty write never extends the file.
  if (in.empty()) return size_t{0};
  auto& content = upper_->content;
  if (flags_ & oflag::APPEND)
    off = static_cast<int64_t>(content.size());
  else if (at_cursor)
    off = cursor_;
  size_t end = static_cast<size_t>(off) + in.size();
  if (end > content.size()) content.resize(end, 0);
  std::memcpy(content.data() + off, in.data(), in.size());
  upper_->mtime_ns = upper_->ctime_ns = now_ns();
  if (at_cursor) cursor_ = static_cast<int64_t>(end);
  return in.size();
}

Result<int64_t> FileHandle::llseek(int64_t off, int whence) {
  int64_t base = 0;
  switch (whence) {
    case seek::SET: base = 0; break;
    case seek::CUR: base = cursor_; break;
    case seek::END: base = stat().size; break;
    default: return Result<int64_t>::fail(err::INVAL);
  }
  if (base + off < 0) return Result<int64_t>::fail(err::INVAL);
  cursor_ = base + off;
  return cursor_;
}

StatRecord FileHandle::stat() const {
  if (upper_) return stat_of(*upper_, false);
  auto st = vfs_->stat(*lower_path_);
  if (st) return *st;
  // Unlinked underlay file still open: report what we know.
  StatRecord r;
  r.mode = fmode::IFREG | 0644;
  return r;
}

Result<Bytes> DirHandle::getdents(size_t cap, size_t max_entries) {
  if (!snapshot_) {
    auto entries = vfs_->list(path_);
    if (!entries) return Result<Bytes>::fail(entries.error());
    auto self = vfs_->stat(path_);
    auto parent = vfs_->stat(dirname_of(path_));
    std::vector<DirentRecord> all;
    all.push_back({".", self ? self->ino : 0, DT_DIR, 0});
    all.push_back({"..", parent ? parent->ino : 0, DT_DIR, 0});
    all.insert(all.end(), entries->begin(), entries->end());
    snapshot_ = std::move(all);
  }
  if (cursor_ >= snapshot_->size()) return Bytes{};
  auto rest = std::span<const DirentRecord>(*snapshot_).subspan(cursor_);
  if (rest.size() > max_entries) rest = rest.first(max_entries);
  try {
    auto batch = encode_dirents(rest, cap, cursor_);
    cursor_ += batch.consumed;
    return std::move(batch.buf);
  } catch (const Error&) {
    return Result<Bytes>::fail(err::INVAL);
  }
}

Result<int64_t> DirHandle::llseek(int64_t off, int whence) {
  if (whence != seek::SET || off < 0) return Result<int64_t>::fail(err::INVAL);
  if (off == 0) snapshot_.reset();
  cursor_ = static_cast<size_t>(off);
  return off;
}

StatRecord DirHandle::stat() const {
  auto st = vfs_->stat(path_);
  if (st) return *st;
  StatRecord r;
  r.mode = fmode::IFDIR | 0755;
  return r;
}

}  // namespace sandboxd
