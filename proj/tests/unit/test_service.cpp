#include <doctest.h>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <random>

#include "sandboxd/bench.hpp"
#include "sandboxd/http_bridge.hpp"
#ifdef SANDBOXD_HAVE_TERM
#include "sandboxd/term.hpp"
#endif
#include "support.hpp"

using namespace sandboxd;
using testkit::Booted;
namespace beast = boost::beast;
namespace http = beast::http;
namespace asio = boost::asio;

namespace {

std::string str(const Bytes& b) { return std::string(b.begin(), b.end()); }
Bytes bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }

// Random response bytes with a body framed by length, chunks or close.
std::string random_response(std::mt19937_64& rng, std::string& body) {
  body = testkit::random_bytes(rng, rng() % 3000);
  std::string head = "HTTP/1.1 200 OK\r\nX-Seed: " + std::to_string(rng() % 1000) + "\r\n";
  switch (rng() % 3) {
    case 0:
      return head + "Content-Length: " + std::to_string(body.size()) + "\r\n\r\n" + body;
    case 1: {
      std::string out = head + "Transfer-Encoding: chunked\r\n\r\n";
      size_t off = 0;
      while (off < body.size()) {
        size_t n = std::min<size_t>(body.size() - off, 1 + rng() % 500);
        char size[32];
        std::snprintf(size, sizeof size, rng() % 2 ? "%zx" : "%zX", n);
        out += size;
        if (rng() % 4 == 0) out += ";ext=1";
        out += "\r\n" + body.substr(off, n) + "\r\n";
        off += n;
      }
      out += "0\r\n";
      if (rng() % 3 == 0) out += "Trailer-Field: x\r\n";
      return out + "\r\n";
    }
    default:
      return head + "\r\n" + body;
  }
}

// Beast as the reference parser.
std::string beast_body(const std::string& raw) {
  http::response_parser<http::string_body> p;
  p.eager(true);
  beast::error_code ec;
  size_t used = 0;
  while (!p.is_done() && !ec && used < raw.size()) used += p.put(asio::buffer(raw.data() + used, raw.size() - used), ec);
  if (ec == http::error::need_more) ec = {};
  if (!p.is_done() && !ec) p.put_eof(ec);
  REQUIRE_FALSE(ec);
  return p.get().body();
}

#ifdef SANDBOXD_HAVE_TERM
// Minimal synchronous websocket client for the terminal service.
struct TermClient {
  asio::io_context ioc;
  beast::websocket::stream<asio::ip::tcp::socket> ws{ioc};
  FrameDecoder dec;
  std::string out;
  std::optional<int32_t> exit_code;

  explicit TermClient(uint16_t port) {
    asio::ip::tcp::resolver r(ioc);
    asio::connect(ws.next_layer(), r.resolve("127.0.0.1", std::to_string(port)));
    ws.handshake("127.0.0.1", "/");
  }
  uint32_t hello(TermSize size = {}) {
    ws.text(true);
    ws.write(asio::buffer(handshake_json({kTermVersion, size})));
    beast::flat_buffer buf;
    ws.read(buf);
    auto pid = parse_ack(beast::buffers_to_string(buf.data()));
    REQUIRE(pid);
    ws.binary(true);
    return *pid;
  }
  void send(FrameKind k, std::string_view data) {
    ws.binary(true);
    ws.write(asio::buffer(encode_frame({k, bytes(data)})));
  }
  // Reads until `pred` holds on the collected output or the session ends.
  void read_until(const std::function<bool()>& pred) {
    while (!pred() && !exit_code) {
      beast::flat_buffer buf;
      ws.read(buf);
      auto d = buf.data();
      dec.feed(std::span<const uint8_t>(static_cast<const uint8_t*>(d.data()), d.size()));
      while (auto f = dec.next()) {
        if (f->kind == FrameKind::Exit)
          exit_code = parse_exit(f->payload);
        else
          out += str(f->payload);
      }
    }
  }
};
#endif

}  // namespace

TEST_CASE("serialized requests parse with the reference parser") {
  HttpRequest req;
  req.method = "POST";
  req.path = "/upload?x=1";
  req.headers = {{"X-A", "1"}, {"Accept", "*/*"}};
  req.body = bytes("payload bytes");
  req.port = 8080;
  Bytes raw = serialize_request(req);
  http::request_parser<http::string_body> p;
  beast::error_code ec;
  size_t used = 0;
  while (!p.is_done() && !ec && used < raw.size()) used += p.put(asio::buffer(raw.data() + used, raw.size() - used), ec);
  REQUIRE_FALSE(ec);
  REQUIRE(p.is_done());
  const auto& m = p.get();
  CHECK(m.method_string() == "POST");
  CHECK(m.target() == "/upload?x=1");
  CHECK(m[http::field::host] == "localhost:8080");
  CHECK(m[http::field::content_length] == "13");
  CHECK(m[http::field::connection] == "close");
  CHECK(m["X-A"] == "1");
  CHECK(m.body() == "payload bytes");

  HttpRequest dup;
  dup.headers = {{"X-A", "1"}, {"x-a", "2"}};
  CHECK_THROWS_AS(serialize_request(dup), Error);
  HttpRequest badlen;
  badlen.headers = {{"Content-Length", "3"}};
  badlen.body = bytes("four");
  CHECK_THROWS_AS(serialize_request(badlen), Error);
}

TEST_CASE("response parsing agrees with the reference parser") {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 300; ++i) {
    std::string body;
    std::string raw = random_response(rng, body);
    auto ours = parse_response(bytes(raw));
    CHECK(ours.status == 200);
    CHECK(ours.reason == "OK");
    CHECK(str(ours.body) == body);
    CHECK(str(ours.body) == beast_body(raw));
    CHECK(ours.header("x-seed").has_value());
  }
}

TEST_CASE("malformed responses are rejected") {
  for (std::string raw : {"", "HTTP/1.1\r\n\r\n", "SMTP 200 OK\r\n\r\n", "HTTP/1.1 abc OK\r\n\r\n",
                          "HTTP/1.1 200 OK\r\nContent-Length: 10\r\n\r\nshort",
                          "HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\nzz\r\n",
                          "HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n5\r\nab"}) {
    CAPTURE(raw);
    CHECK_THROWS_AS(parse_response(bytes(raw)), Error);
  }
  CHECK_FALSE(decode_chunked(bytes("3\r\nabc\r\n")));
  CHECK(decode_chunked(bytes("3\r\nabc\r\n0\r\n\r\n")) == bytes("abc"));
}

TEST_CASE("bridge fetches files from an in-kernel server") {
  Booted k;
  std::mt19937_64 rng(4);
  std::string page = testkit::random_bytes(rng, 70000);
  k->stage_file("/www/page.bin", page);
  k->stage_file("/www/index.html", "<p>hi</p>");
  std::atomic<bool> up{false};
  k->notify_on_listen(8080, [&] { up = true; });
  auto srv = k->system("httpd -p 8080 -r /www", nullptr, nullptr, nullptr);
  REQUIRE(testkit::eventually([&] { return up.load(); }));
  HttpRequest req;
  req.path = "/page.bin";
  auto r = http_request_sync(*k, req);
  CHECK(r.status == 200);
  CHECK(str(r.body) == page);
  req.path = "/";
  r = http_request_sync(*k, req);
  CHECK(str(r.body) == "<p>hi</p>");
  CHECK(r.header("content-type") == "text/html");
  req.path = "/missing";
  CHECK(http_request_sync(*k, req).status == 404);
  req.method = "DELETE";
  CHECK(http_request_sync(*k, req).status == 405);
  srv->kill();
  srv->wait();

  auto chunked = k->system("httpd -p 8081 -r /www -c 1000", nullptr, nullptr, nullptr);
  HttpRequest c;
  c.port = 8081;
  c.path = "/page.bin";
  HttpResponse cr;
  REQUIRE(testkit::eventually([&] {
    try {
      cr = http_request_sync(*k, c);
      return true;
    } catch (const Error&) {
      return false;
    }
  }));
  CHECK(cr.header("transfer-encoding") == "chunked");
  CHECK(str(cr.body) == page);
  chunked->kill();
  chunked->wait();

  HttpRequest none;
  none.port = 9;
  try {
    http_request_sync(*k, none);
    FAIL("expected ConnectionRefused");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ConnectionRefused);
  }
}

TEST_CASE("latency summary uses nearest-rank percentiles") {
  std::vector<double> v(100);
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(100 - i);
  auto s = summarize(v);
  CHECK(s.n == 100);
  CHECK(s.min_ns == 1);
  CHECK(s.median_ns == doctest::Approx(50.5));
  CHECK(s.p99_ns == 99);
  CHECK(s.mean_ns == doctest::Approx(50.5));
  CHECK(summarize({7}).p99_ns == 7);
  CHECK(summarize({1, 2, 3}).median_ns == 2);
  CHECK_THROWS_AS(summarize({}), std::invalid_argument);
  CHECK_THROWS_AS(bench_samples(BenchMode::Async, 999), std::invalid_argument);
}

TEST_CASE("bench csv has a header and one row per mode") {
  auto rs = bench_getpid({BenchMode::Baseline, BenchMode::Async, BenchMode::Sync}, 2000);
  REQUIRE(rs.size() == 3);
  CHECK(rs[0].ratio == doctest::Approx(1.0));
  std::string csv = bench_csv(rs);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "mode,median_ns,ratio");
  std::vector<std::string> modes;
  while (std::getline(in, line)) {
    auto a = line.find(','), b = line.rfind(',');
    REQUIRE(a != b);
    modes.push_back(line.substr(0, a));
    CHECK(std::stod(line.substr(a + 1, b - a - 1)) > 0);
    CHECK(std::stod(line.substr(b + 1)) > 0);
  }
  CHECK(modes == std::vector<std::string>{"baseline", "async", "sync"});
  CHECK(bench_getpid({BenchMode::Sync}, 1000).size() == 1);
}

#ifdef SANDBOXD_HAVE_TERM
TEST_CASE("terminal frames round trip through arbitrary splits") {
  std::mt19937_64 rng(2);
  std::vector<TermFrame> frames;
  Bytes stream;
  for (int i = 0; i < 200; ++i) {
    TermFrame f{static_cast<FrameKind>(rng() % 5), bytes(testkit::random_bytes(rng, rng() % 300))};
    Bytes e = encode_frame(f);
    CHECK(e.size() == 5 + f.payload.size());
    stream.insert(stream.end(), e.begin(), e.end());
    frames.push_back(std::move(f));
  }
  FrameDecoder d;
  std::vector<TermFrame> got;
  for (size_t off = 0; off < stream.size();) {
    size_t n = std::min<size_t>(stream.size() - off, 1 + rng() % 97);
    d.feed(std::span<const uint8_t>(stream.data() + off, n));
    off += n;
    while (auto f = d.next()) got.push_back(std::move(*f));
  }
  CHECK(got == frames);
  CHECK(d.buffered() == 0);

  FrameDecoder bad;
  bad.feed(Bytes{9, 0, 0, 0, 0});
  CHECK_THROWS_AS(bad.next(), Error);
  FrameDecoder big;
  big.feed(Bytes{1, 0xff, 0xff, 0xff, 0x7f});
  CHECK_THROWS_AS(big.next(), Error);
}

TEST_CASE("terminal payloads and handshake") {
  CHECK(resize_payload({132, 43}) == Bytes{132, 0, 43, 0});
  CHECK(parse_resize(resize_payload({500, 60})) == TermSize{500, 60});
  CHECK_FALSE(parse_resize(Bytes{1, 2, 3}));
  CHECK(parse_exit(exit_payload(-2)) == -2);
  CHECK_FALSE(parse_exit(Bytes{1}));
  auto h = parse_handshake(handshake_json({1, {100, 30}}));
  REQUIRE(h);
  CHECK(h->size == TermSize{100, 30});
  CHECK_FALSE(parse_handshake("{\"version\":2,\"cols\":80,\"rows\":24}"));
  CHECK_FALSE(parse_handshake("not json"));
  CHECK_FALSE(parse_handshake("{\"version\":1}"));
  CHECK(parse_ack(ack_json(42)) == 42u);
  CHECK_FALSE(parse_ack("{}"));
}

TEST_CASE("terminal service runs an interactive shell") {
  Booted k;
  TermService svc(*k);
  REQUIRE(svc.port() != 0);
  {
    TermClient c(svc.port());
    uint32_t pid = c.hello({100, 40});
    CHECK(pid > 0);
    c.send(FrameKind::Stdin, "echo $COLUMNS x $LINES\n");
    c.read_until([&] { return c.out.find("100 x 40\n") != std::string::npos; });
    CHECK(c.out.find("100 x 40\n") != std::string::npos);
    c.send(FrameKind::Resize, str(resize_payload({90, 20})));
    c.send(FrameKind::Stdin, "sleep 30\n");
    // Ctrl-C only reaches a job that is already running.
    REQUIRE(testkit::eventually([&] {
      for (const auto& t : k->tasks())
        if (!t.zombie && !t.argv.empty() && t.argv[0] == "sleep") return true;
      return false;
    }));
    c.send(FrameKind::Stdin, "\x03");
    c.send(FrameKind::Stdin, "echo status $?\n");
    c.read_until([&] { return c.out.find("status 130\n") != std::string::npos; });
    CHECK(c.out.find("status 130\n") != std::string::npos);
    c.send(FrameKind::Stdin, "exit 4\n");
    c.read_until([] { return false; });
    CHECK(c.exit_code == 4);
  }
  // A client that disconnects has its shell killed.
  uint32_t orphan = 0;
  {
    TermClient c(svc.port());
    orphan = c.hello();
    CHECK(testkit::eventually([&] { return svc.active_sessions() == 1; }));
    beast::get_lowest_layer(c.ws).close();
  }
  CHECK(testkit::eventually([&] { return svc.active_sessions() == 0; }));
  CHECK(testkit::eventually([&] {
    auto t = k->task(orphan);
    return !t || t->zombie;
  }));
  // A bad handshake is refused.
  {
    TermClient c(svc.port());
    c.ws.text(true);
    c.ws.write(asio::buffer(std::string("{\"version\":9}")));
    beast::flat_buffer buf;
    beast::error_code ec;
    c.ws.read(buf, ec);
    CHECK(ec == beast::websocket::error::closed);
  }
  svc.stop();
}
#endif

#ifdef SANDBOXD_CLI
namespace {

int cli(const std::string& args, std::string* out = nullptr) {
  auto r = testkit::host_run(std::string(SANDBOXD_CLI) + " " + args);
  if (out) *out = r.out;
  return r.code;
}

}  // namespace

TEST_CASE("command-line tool") {
  if (std::string(SANDBOXD_CLI).empty()) return;
  std::string out;
  CHECK(cli("run echo hello there", &out) == 0);
  CHECK(out == "hello there\n");
  // Dash arguments after the program belong to the guest, in order.
  CHECK(cli("run /bin/sh -c 'echo -n x; exit 6'", &out) == 6);
  CHECK(out == "x");
  CHECK(cli("run echo -n -e 'b\\tc' -n", &out) == 0);
  CHECK(out == "b\tc -n");
  CHECK(cli("run /usr/bin/false") == 1);
  CHECK(cli("run nosuchprogram 2>/dev/null") == 127);
  CHECK(cli("--mode sync run forktest 2>/dev/null") == 2);
  CHECK(cli("--mode async run forktest", &out) == 0);
  CHECK(cli("--bogus 2>/dev/null") == 64);
  CHECK(cli("bench --iters 5 2>/dev/null") == 64);
  CHECK(cli("--underlay dir:/definitely/not/here run true 2>/dev/null") == 71);

  testkit::TempDir dir;
  testkit::write_host(dir / "in.txt", "b\na\nc\n");
  CHECK(cli("--mount " + dir.path().string() + ":/mnt run sort /mnt/in.txt", &out) == 0);
  CHECK(out == "a\nb\nc\n");
  CHECK(cli("sh </dev/null", &out) == 0);
  auto piped = testkit::host_run("printf 'echo piped $((1))\\necho ok\\n' | " + std::string(SANDBOXD_CLI) +
                                 " sh 2>/dev/null");
  CHECK(piped.out.find("ok\n") != std::string::npos);

  testkit::write_host(dir / "www/hello.txt", "hello over http\n");
  CHECK(cli("--mount " + (dir / "www").string() + ":/www http --start 'httpd -p 8080 -r /www' /hello.txt", &out) ==
        0);
  CHECK(out == "hello over http\n");
  CHECK(cli("http --port 8090 /x 2>/dev/null") == 7);

  auto csv = testkit::host_run(std::string(SANDBOXD_CLI) + " bench --iters 1000 --csv");
  CHECK(csv.code == 0);
  CHECK(csv.out.rfind("mode,median_ns,ratio\n", 0) == 0);
}
#endif
