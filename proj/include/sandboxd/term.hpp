// term.hpp - the terminal service: interactive shells over a websocket.
//
// A client opens a websocket, sends a text handshake {"version", "cols",
// "rows"} and receives {"version", "pid"} once its shell is running. After
// that every binary message carries whole frames:
//
//   u8 kind, u32 length (little-endian), payload
//
// stdin (0) goes to the shell, with byte 0x03 turned into SIGINT. stdout (1)
// and stderr (2) come back in arrival order. resize (3) carries u16 cols,
// u16 rows. exit (4) carries the shell's i32 exit code and is the last frame
// of a session.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "sandboxd/wire.hpp"

namespace sandboxd {

class Kernel;

inline constexpr int kTermVersion = 1;
inline constexpr size_t kMaxTermFrame = 1 << 20;

enum class FrameKind : uint8_t { Stdin = 0, Stdout = 1, Stderr = 2, Resize = 3, Exit = 4 };

struct TermFrame {
  FrameKind kind = FrameKind::Stdin;
  Bytes payload;

  bool operator==(const TermFrame&) const = default;
};

Bytes encode_frame(const TermFrame& f);

// Reassembles frames from arbitrarily split input.
class FrameDecoder {
 public:
  void feed(std::span<const uint8_t> data);
  // Next complete frame, if any. Throws Error(Protocol) on an unknown kind or
  // a length above kMaxTermFrame.
  std::optional<TermFrame> next();
  size_t buffered() const { return buf_.size() - pos_; }

 private:
  Bytes buf_;
  size_t pos_ = 0;
};

struct TermSize {
  uint16_t cols = 80;
  uint16_t rows = 24;

  bool operator==(const TermSize&) const = default;
};

Bytes resize_payload(TermSize size);
std::optional<TermSize> parse_resize(std::span<const uint8_t> payload);
Bytes exit_payload(int32_t code);
std::optional<int32_t> parse_exit(std::span<const uint8_t> payload);

struct Handshake {
  int version = kTermVersion;
  TermSize size;
};

std::string handshake_json(const Handshake& h);
// nullopt on bad JSON, a missing field or an unsupported version.
std::optional<Handshake> parse_handshake(std::string_view text);
std::string ack_json(uint32_t pid);
std::optional<uint32_t> parse_ack(std::string_view text);

// Websocket server on its own thread. Each connection gets a fresh
// `/bin/sh -i` in `kernel`; closing the connection kills that shell's
// session.
class TermService {
 public:
  // Port 0 picks a free port. Throws std::system_error if the address cannot
  // be bound.
  TermService(Kernel& kernel, const std::string& address = "127.0.0.1", uint16_t port = 0);
  ~TermService();

  TermService(const TermService&) = delete;
  TermService& operator=(const TermService&) = delete;

  uint16_t port() const;
  size_t active_sessions() const;
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sandboxd
