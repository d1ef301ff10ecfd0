#include "sandboxd/term.hpp"

#include <atomic>
#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <deque>
#include <json.hpp>
#include <thread>

#include "sandboxd/error.hpp"
#include "sandboxd/kernel.hpp"

namespace sandboxd {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using json = nlohmann::json;

// frames ----------------------------------------------------------------------

Bytes encode_frame(const TermFrame& f) {
  Bytes out;
  out.reserve(5 + f.payload.size());
  out.push_back(static_cast<uint8_t>(f.kind));
  put_u32(out, static_cast<uint32_t>(f.payload.size()));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

void FrameDecoder::feed(std::span<const uint8_t> data) {
  if (pos_ > 0 && pos_ == buf_.size()) {
    buf_.clear();
    pos_ = 0;
  }
  buf_.insert(buf_.end(), data.begin(), data.end());
}

std::optional<TermFrame> FrameDecoder::next() {
  std::span<const uint8_t> rest(buf_.data() + pos_, buf_.size() - pos_);
  if (rest.size() < 5) return std::nullopt;
  if (rest[0] > static_cast<uint8_t>(FrameKind::Exit)) throw Error(ErrorKind::Protocol, "unknown frame kind");
  uint32_t len = get_u32(rest, 1);
  if (len > kMaxTermFrame) throw Error(ErrorKind::Protocol, "frame too large");
  if (rest.size() - 5 < len) return std::nullopt;
  TermFrame f{static_cast<FrameKind>(rest[0]), Bytes(rest.begin() + 5, rest.begin() + 5 + len)};
  pos_ += 5 + len;
  if (pos_ == buf_.size()) {
    buf_.clear();
    pos_ = 0;
  }
  return f;
}

Bytes resize_payload(TermSize size) {
  Bytes b;
  put_u16(b, size.cols);
  put_u16(b, size.rows);
  return b;
}

std::optional<TermSize> parse_resize(std::span<const uint8_t> payload) {
  if (payload.size() != 4) return std::nullopt;
  return TermSize{get_u16(payload, 0), get_u16(payload, 2)};
}

Bytes exit_payload(int32_t code) {
  Bytes b;
  put_u32(b, static_cast<uint32_t>(code));
  return b;
}

std::optional<int32_t> parse_exit(std::span<const uint8_t> payload) {
  if (payload.size() != 4) return std::nullopt;
  return static_cast<int32_t>(get_u32(payload, 0));
}

std::string handshake_json(const Handshake& h) {
  return json{{"version", h.version}, {"cols", h.size.cols}, {"rows", h.size.rows}}.dump();
}

std::optional<Handshake> parse_handshake(std::string_view text) {
  auto j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto uint_field = [&](const char* k, uint64_t max) -> std::optional<uint64_t> {
    auto it = j.find(k);
    if (it == j.end() || !it->is_number_unsigned()) return std::nullopt;
    auto v = it->get<uint64_t>();
    if (v > max) return std::nullopt;
    return v;
  };
  auto v = uint_field("version", 1000);
  auto c = uint_field("cols", 0xffff);
  auto r = uint_field("rows", 0xffff);
  if (!v || !c || !r || *v != static_cast<uint64_t>(kTermVersion)) return std::nullopt;
  return Handshake{static_cast<int>(*v), {static_cast<uint16_t>(*c), static_cast<uint16_t>(*r)}};
}

std::string ack_json(uint32_t pid) { return json{{"version", kTermVersion}, {"pid", pid}}.dump(); }

std::optional<uint32_t> parse_ack(std::string_view text) {
  auto j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto it = j.find("pid");
  if (it == j.end() || !it->is_number_unsigned()) return std::nullopt;
  return it->get<uint32_t>();
}

// service ---------------------------------------------------------------------

namespace {

class Session : public std::enable_shared_from_this<Session> {
 public:
  Session(tcp::socket sock, Kernel& k, std::shared_ptr<asio::io_context> ioc,
          std::shared_ptr<std::atomic<size_t>> active)
      : ws_(std::move(sock)), kernel_(k), ioc_(std::move(ioc)), active_(std::move(active)) {}

  ~Session() {
    if (counted_) --*active_;
  }

  void start() {
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
      if (!ec) self->read_handshake();
    });
  }

  // Called from the io thread while stopping the service.
  void abort() {
    if (shell_ && !exited_) shell_->kill();
    beast::error_code ec;
    ws_.next_layer().close(ec);
  }

 private:
  void read_handshake() {
    ws_.async_read(rbuf_, [self = shared_from_this()](beast::error_code ec, size_t) {
      if (ec) return;
      self->on_handshake();
    });
  }

  void on_handshake() {
    std::string text = beast::buffers_to_string(rbuf_.data());
    rbuf_.consume(rbuf_.size());
    auto h = ws_.got_text() ? parse_handshake(text) : std::nullopt;
    if (!h) {
      ws_.async_close(websocket::close_reason(websocket::close_code::policy_error, "bad handshake"),
                      [self = shared_from_this()](beast::error_code) {});
      return;
    }
    size_ = h->size;
    std::weak_ptr<Session> weak = weak_from_this();
    auto ioc = ioc_;
    auto relay = [weak, ioc](FrameKind kind) {
      return [weak, ioc, kind](std::span<const uint8_t> b) {
        asio::post(*ioc, [weak, kind, bytes = Bytes(b.begin(), b.end())]() mutable {
          if (auto s = weak.lock()) s->send(TermFrame{kind, std::move(bytes)});
        });
      };
    };
    LaunchOptions o;
    o.path = kernel_.config().shell;
    o.argv = {"sh", "-i"};
    o.env = {{"COLUMNS", std::to_string(size_.cols)}, {"LINES", std::to_string(size_.rows)}};
    o.interactive_stdin = true;
    o.on_stdout = relay(FrameKind::Stdout);
    o.on_stderr = relay(FrameKind::Stderr);
    Kernel* k = &kernel_;
    o.on_exit = [weak, ioc, k](uint32_t, int code) {
      // Output the shell wrote before exiting is already queued on the loop.
      k->post([weak, ioc, code] {
        asio::post(*ioc, [weak, code] {
          if (auto s = weak.lock()) s->on_exit(code);
        });
      });
    };
    shell_ = kernel_.launch(std::move(o));
    ++*active_;
    counted_ = true;
    queue(true, ack_json(shell_->pid()));
    read_frames();
  }

  void read_frames() {
    ws_.async_read(rbuf_, [self = shared_from_this()](beast::error_code ec, size_t) {
      if (ec) return self->on_disconnect();
      self->on_message();
    });
  }

  void on_message() {
    if (ws_.got_binary()) {
      auto data = rbuf_.cdata();
      decoder_.feed(std::span<const uint8_t>(static_cast<const uint8_t*>(data.data()), data.size()));
    }
    rbuf_.consume(rbuf_.size());
    try {
      while (auto f = decoder_.next()) handle(*f);
    } catch (const Error&) {
      on_disconnect();
      ws_.async_close(websocket::close_reason(websocket::close_code::protocol_error),
                      [self = shared_from_this()](beast::error_code) {});
      return;
    }
    read_frames();
  }

  void handle(const TermFrame& f) {
    if (exited_) return;
    switch (f.kind) {
      case FrameKind::Stdin: {
        std::string_view s(reinterpret_cast<const char*>(f.payload.data()), f.payload.size());
        for (size_t at = s.find('\x03'); at != std::string_view::npos; at = s.find('\x03')) {
          if (at > 0) shell_->write_stdin(s.substr(0, at));
          shell_->interrupt();
          s.remove_prefix(at + 1);
        }
        if (!s.empty()) shell_->write_stdin(s);
        break;
      }
      case FrameKind::Resize:
        if (auto r = parse_resize(f.payload)) size_ = *r;
        break;
      default:
        break;
    }
  }

  void on_disconnect() {
    if (closed_) return;
    closed_ = true;
    if (shell_ && !exited_) shell_->kill();
  }

  void on_exit(int code) {
    if (exited_) return;
    exited_ = true;
    send(TermFrame{FrameKind::Exit, exit_payload(code)});
  }

  void send(TermFrame f) {
    if (closed_ || exit_queued_) return;
    if (f.kind == FrameKind::Exit) exit_queued_ = true;
    Bytes b = encode_frame(f);
    queue(false, std::string(b.begin(), b.end()));
  }

  void queue(bool text, std::string data) {
    wq_.emplace_back(text, std::move(data));
    if (!writing_) write_next();
  }

  void write_next() {
    if (wq_.empty()) {
      writing_ = false;
      if (exit_queued_ && !closed_) {
        closed_ = true;
        ws_.async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {});
      }
      return;
    }
    writing_ = true;
    ws_.text(wq_.front().first);
    ws_.async_write(asio::buffer(wq_.front().second), [self = shared_from_this()](beast::error_code ec, size_t) {
      self->wq_.pop_front();
      if (ec) {
        self->wq_.clear();
        self->writing_ = false;
        return self->on_disconnect();
      }
      self->write_next();
    });
  }

  websocket::stream<tcp::socket> ws_;
  Kernel& kernel_;
  std::shared_ptr<asio::io_context> ioc_;
  // Shared so that sessions outliving the service can still decrement it.
  std::shared_ptr<std::atomic<size_t>> active_;
  bool counted_ = false;
  beast::flat_buffer rbuf_;
  FrameDecoder decoder_;
  TermSize size_;
  std::shared_ptr<HostSession> shell_;
  std::deque<std::pair<bool, std::string>> wq_;
  bool writing_ = false;
  bool exited_ = false;
  bool exit_queued_ = false;
  bool closed_ = false;
};

}  // namespace

struct TermService::Impl {
  Kernel& kernel;
  std::shared_ptr<asio::io_context> ioc = std::make_shared<asio::io_context>();
  tcp::acceptor acceptor{*ioc};
  std::shared_ptr<std::atomic<size_t>> active = std::make_shared<std::atomic<size_t>>(0);
  uint16_t port = 0;
  std::vector<std::weak_ptr<Session>> sessions;
  std::thread thread;
  bool stopped = false;

  explicit Impl(Kernel& k) : kernel(k) {}

  void accept() {
    acceptor.async_accept([this](beast::error_code ec, tcp::socket sock) {
      if (ec) return;
      auto s = std::make_shared<Session>(std::move(sock), kernel, ioc, active);
      std::erase_if(sessions, [](const auto& w) { return w.expired(); });
      sessions.push_back(s);
      s->start();
      accept();
    });
  }
};

TermService::TermService(Kernel& kernel, const std::string& address, uint16_t port)
    : impl_(std::make_unique<Impl>(kernel)) {
  tcp::endpoint ep(asio::ip::make_address(address), port);
  impl_->acceptor.open(ep.protocol());
  impl_->acceptor.set_option(asio::socket_base::reuse_address(true));
  impl_->acceptor.bind(ep);
  impl_->acceptor.listen();
  impl_->port = impl_->acceptor.local_endpoint().port();
  impl_->accept();
  impl_->thread = std::thread([ioc = impl_->ioc] { ioc->run(); });
}

TermService::~TermService() { stop(); }

uint16_t TermService::port() const { return impl_->port; }

size_t TermService::active_sessions() const { return impl_->active->load(); }

void TermService::stop() {
  if (impl_->stopped) return;
  impl_->stopped = true;
  asio::post(*impl_->ioc, [impl = impl_.get()] {
    beast::error_code ec;
    impl->acceptor.close(ec);
    for (auto& w : impl->sessions)
      if (auto s = w.lock()) s->abort();
  });
  // Let the aborts and their handlers drain, then stop.
  asio::post(*impl_->ioc, [ioc = impl_->ioc] { ioc->stop(); });
  impl_->thread.join();
  impl_->sessions.clear();
}

}  // namespace sandboxd
