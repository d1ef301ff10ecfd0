// vfs.hpp - the shared filesystem.
//
// A writable in-memory upper layer sits over an optional read-only underlay.
// Underlay files are listed up front from a manifest but their contents are
// fetched only when first read (or copied up), and at most once per path.
// Removing an underlay entry leaves a whiteout in the upper layer; a directory
// re-created over a whiteout is opaque and hides the underlay below it.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sandboxd/error.hpp"
#include "sandboxd/fd.hpp"
#include "sandboxd/wire.hpp"

namespace sandboxd {

struct ManifestEntry {
  std::string path;
  uint64_t size = 0;
  bool dir = false;

  bool operator==(const ManifestEntry&) const = default;
};

// Manifest JSON: [{"p": "/abs/path", "s": size, "k": "f" | "d"}, ...].
std::vector<ManifestEntry> parse_manifest(std::string_view json);
std::string serialize_manifest(const std::vector<ManifestEntry>& entries);

class UnderlayProvider {
 public:
  virtual ~UnderlayProvider() = default;
  // Throws Error(FsInitError) if the underlay cannot be listed.
  virtual std::vector<ManifestEntry> manifest() = 0;
  // Throws Error(FsInitError) on failure.
  virtual Bytes fetch(const std::string& path) = 0;
};

// Host directory; the manifest is built by walking it.
class DirProvider : public UnderlayProvider {
 public:
  explicit DirProvider(std::filesystem::path root) : root_(std::move(root)) {}
  std::vector<ManifestEntry> manifest() override;
  Bytes fetch(const std::string& path) override;

 private:
  std::filesystem::path root_;
};

// http://host[:port][/prefix]. GET {prefix}/.manifest.json, then
// GET {prefix}{path} per file.
class HttpProvider : public UnderlayProvider {
 public:
  explicit HttpProvider(std::string url);
  std::vector<ManifestEntry> manifest() override;
  Bytes fetch(const std::string& path) override;

 private:
  Bytes get(const std::string& path);
  std::string host_;
  int port_ = 80;
  std::string prefix_;
};

// "dir:PATH" or "http://...". Throws Error(FsInitError) for anything else.
std::shared_ptr<UnderlayProvider> make_provider(const std::string& spec);

// Joins `path` onto `cwd` and normalizes "." / ".." / repeated slashes.
// Empty paths yield ENOENT.
Result<std::string> resolve_path(const std::string& cwd, const std::string& path);
std::string dirname_of(const std::string& abs);
std::string basename_of(const std::string& abs);

struct FileData {
  Bytes content;
  uint32_t mode = 0644;
  uint64_t ino = 0;
  int64_t atime_ns = 0;
  int64_t mtime_ns = 0;
  int64_t ctime_ns = 0;
  // Discards writes and always reads empty, like /dev/null.
  bool sink = false;
};

class Vfs;

class FileHandle : public FdObject {
 public:
  FdKind kind() const override { return FdKind::File; }

  // off < 0 means "at the cursor, then advance it".
  Result<size_t> pread(std::span<uint8_t> out, int64_t off);
  Result<size_t> pwrite(std::span<const uint8_t> in, int64_t off);
  Result<int64_t> llseek(int64_t off, int whence);
  StatRecord stat() const;
  const std::string& path() const { return path_; }

 private:
  friend class Vfs;
  FileHandle(Vfs* vfs, std::string path, int64_t flags) : vfs_(vfs), path_(std::move(path)), flags_(flags) {}

  Vfs* vfs_;
  std::string path_;
  int64_t flags_;
  int64_t cursor_ = 0;
  std::shared_ptr<FileData> upper_;
  // Set when reading an underlay file that has not been copied up.
  std::optional<std::string> lower_path_;
};

class DirHandle : public FdObject {
 public:
  FdKind kind() const override { return FdKind::Dir; }

  // Fills at most `cap` bytes of dirent records from the cursor. The listing
  // is snapshotted on the first call.
  Result<Bytes> getdents(size_t cap, size_t max_entries = SIZE_MAX);
  Result<int64_t> llseek(int64_t off, int whence);
  StatRecord stat() const;
  const std::string& path() const { return path_; }

 private:
  friend class Vfs;
  DirHandle(Vfs* vfs, std::string path) : vfs_(vfs), path_(std::move(path)) {}

  Vfs* vfs_;
  std::string path_;
  std::optional<std::vector<DirentRecord>> snapshot_;
  size_t cursor_ = 0;
};

class Vfs {
 public:
  Vfs();
  ~Vfs();
  Vfs(const Vfs&) = delete;
  Vfs& operator=(const Vfs&) = delete;

  // Loads the manifest; throws Error(FsInitError).
  void mount_underlay(std::shared_ptr<UnderlayProvider> provider);

  // All paths below are absolute and normalized.
  Result<FdObjectPtr> open(const std::string& path, int64_t flags, uint32_t mode);
  Result<StatRecord> stat(const std::string& path);
  int access(const std::string& path, int64_t mode);
  int mkdir(const std::string& path, uint32_t mode);
  int rmdir(const std::string& path);
  int unlink(const std::string& path);
  int utimes(const std::string& path, int64_t atime_ns, int64_t mtime_ns);
  Result<std::string> readlink(const std::string& path);
  bool is_dir(const std::string& path);
  // Merged directory listing (without "." and ".."), sorted by name.
  Result<std::vector<DirentRecord>> list(const std::string& path);

  // Host staging helpers. write_file creates missing parents.
  void write_file(const std::string& path, std::span<const uint8_t> data, uint32_t mode = 0644);
  void make_sink(const std::string& path);
  void mkdir_p(const std::string& path, uint32_t mode = 0755);
  std::optional<Bytes> read_file(const std::string& path);
  // Copies a host directory tree into the upper layer at `guest_path`.
  void copy_in(const std::filesystem::path& host_dir, const std::string& guest_path);

  size_t fetch_count(const std::string& path) const;
  size_t total_fetches() const;
  size_t locks_held() const { return locks_.size(); }

  // Underlay content for `path`, fetched on first use. EIO on provider failure.
  Result<std::shared_ptr<const Bytes>> lower_content(const std::string& path);

 private:
  friend class FileHandle;
  friend class DirHandle;
  struct Node;
  struct LowerEntry;
  struct Lookup;
  class NodeLock;

  Lookup lookup(const std::string& path);
  Node* ensure_upper_dir(const std::string& path);
  Result<std::shared_ptr<FileData>> copy_up(const std::string& path);
  Result<std::vector<DirentRecord>> list_locked(const std::string& path);
  uint64_t next_ino() { return next_ino_++; }

  std::unique_ptr<Node> root_;
  std::shared_ptr<UnderlayProvider> provider_;
  std::map<std::string, LowerEntry> lower_;
  std::map<std::string, size_t> fetches_;
  std::set<std::string> locks_;
  uint64_t next_ino_ = 2;
};

int64_t now_ns();

}  // namespace sandboxd
