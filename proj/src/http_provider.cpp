#include "httplib.h"
#include "sandboxd/vfs.hpp"

namespace sandboxd {

HttpProvider::HttpProvider(std::string url) {
  const std::string scheme = "http://";
  if (url.rfind(scheme, 0) != 0) throw Error(ErrorKind::FsInitError, "not an http url: " + url);
  auto rest = url.substr(scheme.size());
  auto slash = rest.find('/');
  auto authority = rest.substr(0, slash);
  prefix_ = slash == std::string::npos ? "" : rest.substr(slash);
  while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  auto colon = authority.rfind(':');
  if (colon != std::string::npos) {
    host_ = authority.substr(0, colon);
    try {
      port_ = std::stoi(authority.substr(colon + 1));
    } catch (const std::exception&) {
      throw Error(ErrorKind::FsInitError, "bad port in " + url);
    }
  } else {
    host_ = authority;
  }
  if (host_.empty()) throw Error(ErrorKind::FsInitError, "missing host in " + url);
}

Bytes HttpProvider::get(const std::string& path) {
  httplib::Client cli(host_, port_);
  cli.set_connection_timeout(5);
  cli.set_read_timeout(30);
  auto res = cli.Get(prefix_ + path);
  if (!res) throw Error(ErrorKind::FsInitError, "GET " + path + ": " + httplib::to_string(res.error()));
  if (res->status != 200) throw Error(ErrorKind::FsInitError, "GET " + path + ": HTTP " + std::to_string(res->status));
  return to_bytes(res->body);
}

std::vector<ManifestEntry> HttpProvider::manifest() {
  auto body = get("/.manifest.json");
  return parse_manifest(std::string(body.begin(), body.end()));
}

Bytes HttpProvider::fetch(const std::string& path) { return get(path); }

}  // namespace sandboxd
