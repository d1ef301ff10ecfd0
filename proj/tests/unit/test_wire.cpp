#include <doctest.h>

#include <random>

#include "sandboxd/error.hpp"
#include "sandboxd/wire.hpp"

using namespace sandboxd;

namespace {

Value random_value(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> kind(0, 3), len(0, 40), byte(0, 255);
  switch (kind(rng)) {
    case 0:
      return static_cast<int64_t>(rng());
    case 1: {
      std::string s(len(rng), 'x');
      for (auto& c : s) c = static_cast<char>('a' + byte(rng) % 26);
      return s;
    }
    case 2: {
      Bytes b(len(rng));
      for (auto& x : b) x = static_cast<uint8_t>(byte(rng));
      return b;
    }
    default: {
      std::vector<int64_t> v(len(rng) % 7);
      for (auto& x : v) x = static_cast<int64_t>(rng());
      return v;
    }
  }
}

}  // namespace

TEST_CASE("envelope round trip over random argument lists") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 500; ++i) {
    SyscallEnvelope env{static_cast<uint32_t>(rng()), static_cast<uint32_t>(rng() % 40), {}};
    size_t n = rng() % 7;
    for (size_t k = 0; k < n; ++k) env.args.push_back(random_value(rng));
    CHECK(decode_envelope(encode(env)) == env);
  }
}

TEST_CASE("envelope layout is little-endian with tagged values") {
  SyscallEnvelope env{0x01020304, 6, {int64_t{-1}, std::string("hi")}};
  Bytes b = encode(env);
  Bytes want = {4, 3, 2, 1, 6, 0, 0, 0, 2, 0, 0x01, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff,
                0x02, 2, 0, 0, 0, 'h', 'i'};
  CHECK(b == want);
}

TEST_CASE("reply round trip with and without payload") {
  SyscallReply a{9, -1, 0, 2, std::nullopt};
  CHECK(decode_reply(encode(a)) == a);
  SyscallReply b{10, 3, 77, 0, Bytes{1, 2, 3}};
  CHECK(decode_reply(encode(b)) == b);
  SyscallReply c{11, 0, 0, 0, Bytes{}};
  CHECK(decode_reply(encode(c)) == c);
}

TEST_CASE("every strict prefix of a frame is rejected") {
  SyscallEnvelope env{1, 20, {std::string("/etc/passwd"), int64_t{0}, Bytes{1, 2, 3}}};
  Bytes b = encode(env);
  for (size_t n = 0; n < b.size(); ++n)
    CHECK_THROWS_AS(decode_envelope(std::span<const uint8_t>(b.data(), n)), Error);
  Bytes extra = b;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_envelope(extra), Error);

  Bytes r = encode(SyscallReply{1, 5, 0, 0, Bytes{9, 9}});
  for (size_t n = 0; n < r.size(); ++n) CHECK_THROWS_AS(decode_reply(std::span<const uint8_t>(r.data(), n)), Error);
}

TEST_CASE("unknown value tag is a protocol error") {
  Bytes b = encode(SyscallEnvelope{1, 6, {int64_t{1}}});
  b[10] = 0x7f;
  try {
    decode_envelope(b);
    FAIL("expected a throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Protocol);
  }
}

TEST_CASE("sync frame fast path matches the generic encoding") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    SyncFrame f{static_cast<uint32_t>(rng()), static_cast<uint32_t>(rng() % 35), {}};
    for (auto& s : f.slots) s = static_cast<int64_t>(rng());
    SyscallEnvelope env{f.id, f.trap, std::vector<Value>(f.slots.begin(), f.slots.end())};
    Bytes fast = encode_sync(f);
    CHECK(fast == encode(env));
    CHECK(fast.size() == kSyncFrameSize);
    auto back = decode_sync(fast);
    REQUIRE(back);
    CHECK(back->id == f.id);
    CHECK(back->slots == f.slots);
  }
  // Anything but six i64 values falls back to the generic decoder.
  CHECK_FALSE(decode_sync(encode(SyscallEnvelope{1, 6, {}})));
  CHECK_FALSE(decode_sync(encode(SyscallEnvelope{1, 6, {int64_t{1}, int64_t{2}, int64_t{3}, int64_t{4},
                                                        int64_t{5}, std::string("123456")}})));
}

TEST_CASE("trap table is consistent") {
  std::set<uint32_t> numbers;
  std::set<std::string_view> names;
  for (const auto& t : trap_table()) {
    CHECK(numbers.insert(static_cast<uint32_t>(t.trap)).second);
    CHECK(names.insert(t.name).second);
    CHECK(trap_info(static_cast<uint32_t>(t.trap)) == &t);
    CHECK(trap_info(t.name) == &t);
    // Every trap usable under the sync convention fits in the six slots.
    if (!t.async_only) CHECK(sync_slot_count(t) <= kSyncSlots);
  }
  CHECK(trap_table().size() == 34);
  CHECK(trap_info(999u) == nullptr);
  CHECK(trap_info("nosuchcall") == nullptr);
  const auto& pread = trap_info(Trap::Pread);
  CHECK(sync_slot_of(pread, 0) == 0);
  CHECK(sync_slot_of(pread, 1) == 1);
  CHECK(sync_slot_of(pread, 2) == 3);
}

TEST_CASE("call ids start at 1, skip 0 and skip outstanding ids on wrap") {
  CallIdAllocator a;
  CHECK(a.next() == 1);
  CHECK(a.next() == 2);
  a.release(1);
  CHECK(a.outstanding_count() == 1);

  CallIdAllocator w(0xfffffffe);
  uint32_t x = w.next(), y = w.next(), z = w.next();
  CHECK(x == 0xfffffffe);
  CHECK(y == 0xffffffff);
  CHECK(z == 1);
  CallIdAllocator held(1);
  held.next();  // 1 stays outstanding
  CallIdAllocator copy = held;
  (void)copy;
  CallIdAllocator wrap(0xffffffff);
  CHECK(wrap.next() == 0xffffffff);
  CHECK(wrap.next() == 1);
  CHECK(wrap.next() == 2);
  wrap.release(1);
  CHECK(wrap.outstanding(2));
  CHECK_FALSE(wrap.outstanding(1));
}

TEST_CASE("dirent records are 8-aligned and round trip") {
  CHECK(dirent_reclen(0) == 24);
  CHECK(dirent_reclen(4) == 24);
  CHECK(dirent_reclen(5) == 32);
  std::vector<DirentRecord> es = {{"a", 2, DT_REG, 0}, {"subdir", 3, DT_DIR, 0}, {std::string(40, 'n'), 4, DT_REG, 0}};
  auto batch = encode_dirents(es, 4096, 10);
  CHECK(batch.consumed == 3);
  CHECK(batch.buf.size() % 8 == 0);
  auto back = decode_dirents(batch.buf);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].name == es[i].name);
    CHECK(back[i].ino == es[i].ino);
    CHECK(back[i].dtype == es[i].dtype);
    CHECK(back[i].next_off == 11 + i);
  }
}

TEST_CASE("dirent batch stops at the capacity") {
  std::vector<DirentRecord> es = {{"one", 2, DT_REG, 0}, {"two", 3, DT_REG, 0}};
  auto batch = encode_dirents(es, 30);
  CHECK(batch.consumed == 1);
  CHECK(batch.buf.size() == 24);
  CHECK_THROWS_AS(encode_dirents(es, 10), Error);
  CHECK(encode_dirents(std::span<const DirentRecord>{}, 0).consumed == 0);
}

TEST_CASE("stat record is 48 bytes and round trips") {
  StatRecord st{42, 1234, 0100644, 1, 1, 2, 3};
  Bytes b(kStatSize);
  encode_stat(st, b);
  CHECK(decode_stat(b) == st);
  CHECK(st.is_reg());
  CHECK_FALSE(st.is_dir());
  StatRecord d{1, 0, 040755, 2, 0, 0, 0};
  CHECK(d.is_dir());
}

TEST_CASE("exec args pack and unpack") {
  std::vector<std::string> argv = {"sh", "-c", "echo 'a b'", ""};
  Environ env = {{"PATH", "/usr/bin"}, {"EMPTY", ""}, {"EQ", "a=b"}};
  auto back = unpack_exec_args(pack_exec_args(argv, env));
  REQUIRE(back);
  CHECK(back->first == argv);
  CHECK(back->second == env);
  Bytes bad = pack_exec_args(argv, env);
  bad.resize(bad.size() - 1);
  CHECK_FALSE(unpack_exec_args(bad));
}
