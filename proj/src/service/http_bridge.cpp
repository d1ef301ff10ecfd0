#include "sandboxd/http_bridge.hpp"

#include <cctype>
#include <future>
#include <set>

#include "sandboxd/error.hpp"
#include "sandboxd/kernel.hpp"

namespace sandboxd {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

bool valid_token(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s)
    if (c <= ' ' || c >= 127 || c == ':') return false;
  return true;
}

[[noreturn]] void malformed(const std::string& what) { throw Error(ErrorKind::MalformedResponse, what); }

// Reads one CRLF-terminated line starting at `pos`.
std::optional<std::string_view> read_line(std::string_view s, size_t& pos) {
  size_t end = s.find("\r\n", pos);
  if (end == std::string_view::npos) return std::nullopt;
  auto line = s.substr(pos, end - pos);
  pos = end + 2;
  return line;
}

}  // namespace

bool iequals(std::string_view a, std::string_view b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (std::tolower(static_cast<unsigned char>(a[i])) != std::tolower(static_cast<unsigned char>(b[i]))) return false;
  return true;
}

std::optional<std::string> HttpResponse::header(const std::string& name) const {
  for (const auto& [k, v] : headers)
    if (iequals(k, name)) return v;
  return std::nullopt;
}

Bytes serialize_request(const HttpRequest& req) {
  if (!valid_token(req.method)) throw Error(ErrorKind::Protocol, "bad method");
  if (req.path.empty() || req.path.find_first_of(" \r\n") != std::string::npos)
    throw Error(ErrorKind::Protocol, "bad request target");
  std::set<std::string> seen;
  bool has_host = false, has_len = false, has_conn = false;
  for (const auto& [k, v] : req.headers) {
    if (!valid_token(k) || v.find_first_of("\r\n") != std::string::npos)
      throw Error(ErrorKind::Protocol, "bad header " + k);
    if (!seen.insert(lower(k)).second) throw Error(ErrorKind::Protocol, "duplicate header " + k);
    if (iequals(k, "host")) has_host = true;
    if (iequals(k, "connection")) has_conn = true;
    if (iequals(k, "content-length")) {
      has_len = true;
      if (v != std::to_string(req.body.size())) throw Error(ErrorKind::Protocol, "Content-Length does not match body");
    }
  }
  std::string head = req.method + " " + req.path + " HTTP/1.1\r\n";
  for (const auto& [k, v] : req.headers) head += k + ": " + v + "\r\n";
  if (!has_host) head += "Host: localhost:" + std::to_string(req.port) + "\r\n";
  if (!has_len && !req.body.empty()) head += "Content-Length: " + std::to_string(req.body.size()) + "\r\n";
  if (!has_conn) head += "Connection: close\r\n";
  head += "\r\n";
  Bytes out(head.begin(), head.end());
  out.insert(out.end(), req.body.begin(), req.body.end());
  return out;
}

std::optional<Bytes> decode_chunked(std::span<const uint8_t> data) {
  std::string_view s(reinterpret_cast<const char*>(data.data()), data.size());
  size_t pos = 0;
  Bytes out;
  for (;;) {
    auto line = read_line(s, pos);
    if (!line) return std::nullopt;
    auto size_part = trim(line->substr(0, line->find(';')));
    if (size_part.empty() || size_part.size() > 15) return std::nullopt;
    size_t n = 0;
    for (char c : size_part) {
      int d = std::isdigit(static_cast<unsigned char>(c))  ? c - '0'
              : (c >= 'a' && c <= 'f')                     ? c - 'a' + 10
              : (c >= 'A' && c <= 'F')                     ? c - 'A' + 10
                                                           : -1;
      if (d < 0) return std::nullopt;
      n = n * 16 + static_cast<size_t>(d);
    }
    if (n == 0) break;
    if (s.size() - pos < n + 2) return std::nullopt;
    out.insert(out.end(), data.begin() + static_cast<std::ptrdiff_t>(pos),
               data.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    if (s.substr(pos, 2) != "\r\n") return std::nullopt;
    pos += 2;
  }
  // Trailer section: header lines until an empty line.
  for (;;) {
    auto line = read_line(s, pos);
    if (!line) return std::nullopt;
    if (line->empty()) break;
  }
  return out;
}

HttpResponse parse_response(std::span<const uint8_t> raw) {
  std::string_view s(reinterpret_cast<const char*>(raw.data()), raw.size());
  size_t pos = 0;
  auto status_line = read_line(s, pos);
  if (!status_line) malformed("no status line");
  HttpResponse res;
  auto sl = *status_line;
  if (sl.substr(0, 7) != "HTTP/1." || sl.size() < 12 || sl[8] != ' ') malformed("bad status line");
  for (size_t i = 9; i < 12; ++i)
    if (!std::isdigit(static_cast<unsigned char>(sl[i]))) malformed("bad status code");
  res.status = std::stoi(std::string(sl.substr(9, 3)));
  if (sl.size() > 12) {
    if (sl[12] != ' ') malformed("bad status line");
    res.reason = std::string(sl.substr(13));
  }
  for (;;) {
    auto line = read_line(s, pos);
    if (!line) malformed("truncated headers");
    if (line->empty()) break;
    auto colon = line->find(':');
    if (colon == std::string_view::npos || !valid_token(line->substr(0, colon))) malformed("bad header line");
    res.headers.emplace_back(std::string(line->substr(0, colon)), std::string(trim(line->substr(colon + 1))));
  }
  auto rest = raw.subspan(pos);
  auto te = res.header("Transfer-Encoding");
  if (te && lower(*te).find("chunked") != std::string::npos) {
    auto body = decode_chunked(rest);
    if (!body) malformed("bad chunked body");
    res.body = std::move(*body);
    return res;
  }
  if (auto cl = res.header("Content-Length")) {
    size_t n = 0;
    if (cl->empty() || cl->size() > 18) malformed("bad Content-Length");
    for (char c : *cl) {
      if (!std::isdigit(static_cast<unsigned char>(c))) malformed("bad Content-Length");
      n = n * 10 + static_cast<size_t>(c - '0');
    }
    if (rest.size() < n) malformed("body shorter than Content-Length");
    res.body.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n));
    return res;
  }
  res.body.assign(rest.begin(), rest.end());
  return res;
}

void http_request(Kernel& k, const HttpRequest& req, std::function<void(int, HttpResponse)> done) {
  k.host_exchange(req.port, serialize_request(req), [done = std::move(done)](int e, Bytes raw) {
    if (e) return done(e, {});
    try {
      done(0, parse_response(raw));
    } catch (const Error&) {
      done(-1, {});
    }
  });
}

HttpResponse http_request_sync(Kernel& k, const HttpRequest& req) {
  std::promise<std::pair<int, Bytes>> p;
  auto fut = p.get_future();
  k.host_exchange(req.port, serialize_request(req),
                  [&p](int e, Bytes raw) { p.set_value({e, std::move(raw)}); });
  auto [e, raw] = fut.get();
  if (e == err::CONNREFUSED) throw Error(ErrorKind::ConnectionRefused, "port " + std::to_string(req.port));
  if (e) throw Error(ErrorKind::MalformedResponse, std::string("exchange failed: ") + err::message(e));
  return parse_response(raw);
}

}  // namespace sandboxd
