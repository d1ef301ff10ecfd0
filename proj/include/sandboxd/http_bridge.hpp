// http_bridge.hpp - HTTP/1.1 requests from the host to servers running
// inside the kernel, carried over a kernel socket.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sandboxd/wire.hpp"

namespace sandboxd {

class Kernel;

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

struct HttpRequest {
  std::string method = "GET";
  std::string path = "/";
  HttpHeaders headers;
  Bytes body;
  uint16_t port = 8080;
};

struct HttpResponse {
  int status = 0;
  std::string reason;
  HttpHeaders headers;
  Bytes body;

  // First header with this name, compared case-insensitively.
  std::optional<std::string> header(const std::string& name) const;
};

bool iequals(std::string_view a, std::string_view b);

// Request line, caller headers, then Host, Content-Length (when there is a
// body) and Connection: close unless the caller already set them. Throws
// Error(Protocol) for duplicate header names or a Content-Length that
// disagrees with the body.
Bytes serialize_request(const HttpRequest& req);

// Parses a complete response read until the peer closed. Handles
// Content-Length, chunked transfer coding and close-delimited bodies.
// Throws Error(MalformedResponse).
HttpResponse parse_response(std::span<const uint8_t> raw);

// Decodes a chunked body that starts at the first chunk-size line. Chunk
// extensions and trailers are skipped. Returns nullopt if malformed or
// truncated.
std::optional<Bytes> decode_chunked(std::span<const uint8_t> data);

// Sends `req` to the in-kernel listener on req.port. `done` runs on the
// kernel loop with (0, response), (errno, {}) such as ECONNREFUSED, or
// (-1, {}) when the response is malformed.
void http_request(Kernel& k, const HttpRequest& req, std::function<void(int, HttpResponse)> done);

// Blocking form. Throws Error(ConnectionRefused) or Error(MalformedResponse).
HttpResponse http_request_sync(Kernel& k, const HttpRequest& req);

}  // namespace sandboxd
