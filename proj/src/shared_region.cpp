#include "sandboxd/shared_region.hpp"

#include <cstring>
#include <new>
#include <thread>

#if defined(__linux__)
#include <linux/futex.h>
#include <sys/syscall.h>
#include <unistd.h>
#endif

#include "sandboxd/error.hpp"

namespace sandboxd {

namespace {
void store_le(uint8_t* p, uint64_t v, size_t n) {
  for (size_t i = 0; i < n; ++i) p[i] = static_cast<uint8_t>(v >> (8 * i));
}
uint64_t load_le(const uint8_t* p, size_t n) {
  uint64_t v = 0;
  for (size_t i = n; i-- > 0;) v = (v << 8) | p[i];
  return v;
}

// Polls before sleeping. On a single core the yield hands the CPU straight to
// the kernel loop, which usually completes the call before we get it back.
constexpr int kSpinYields = 4;

#if defined(__linux__)
void futex_wait(uint32_t* addr, uint32_t expected) {
  syscall(SYS_futex, addr, FUTEX_WAIT_PRIVATE, expected, nullptr, nullptr, 0);
}
void futex_wake(uint32_t* addr) { syscall(SYS_futex, addr, FUTEX_WAKE_PRIVATE, INT32_MAX, nullptr, nullptr, 0); }
#endif
}  // namespace

SharedRegion::SharedRegion(size_t size, size_t retval_off, size_t wake_off)
    : size_(size), retval_off_(retval_off), wake_off_(wake_off) {
  if (retval_off > size || size - retval_off < 16 || wake_off > size || size - wake_off < 16)
    throw Error(ErrorKind::BadOffset, "offsets must leave 16 bytes before the end of the region");
  if (wake_off % 4 != 0) throw Error(ErrorKind::BadOffset, "wake offset must be 4-byte aligned");
  if (wake_off + 4 > retval_off && wake_off < retval_off + slot::kSize)
    throw Error(ErrorKind::BadOffset, "wake word overlaps the retval slot");
  // operator new[] returns storage aligned for any fundamental type, so the
  // wake word is suitably aligned for atomic access.
  data_.reset(new uint8_t[size]());
}

std::atomic_ref<uint32_t> SharedRegion::wake_word() const {
  return std::atomic_ref<uint32_t>(*reinterpret_cast<uint32_t*>(data_.get() + wake_off_));
}

void SharedRegion::notify() {
  // seq_cst pairs with the sleeper increment in wait(): either we see the
  // sleeper or it sees the new word before it blocks.
  std::atomic_thread_fence(std::memory_order_seq_cst);
  if (sleepers_.load(std::memory_order_relaxed) == 0) return;
#if defined(__linux__)
  futex_wake(reinterpret_cast<uint32_t*>(data_.get() + wake_off_));
#else
  wake_word().notify_all();
#endif
}

void SharedRegion::store_wake(Wake w) {
  auto word = wake_word();
  if (word.load(std::memory_order_relaxed) == static_cast<uint32_t>(Wake::Killed)) return;
  word.store(static_cast<uint32_t>(w), std::memory_order_release);
  notify();
}

void SharedRegion::complete(uint32_t seq, int64_t ret, int32_t errno_) {
  uint8_t* s = data_.get() + retval_off_;
  store_le(s + slot::kSeq, seq, 4);
  store_le(s + slot::kErrno, static_cast<uint32_t>(errno_), 4);
  store_le(s + slot::kRet, static_cast<uint64_t>(ret), 8);
  store_wake(Wake::Complete);
}

void SharedRegion::signal() { store_wake(Wake::Signal); }

void SharedRegion::kill() {
  auto word = wake_word();
  word.store(static_cast<uint32_t>(Wake::Killed), std::memory_order_release);
  notify();
}

Wake SharedRegion::wait() {
  auto word = wake_word();
  int spins = 0;
  for (;;) {
    uint32_t w = word.load(std::memory_order_acquire);
    if (w == static_cast<uint32_t>(Wake::Parked)) {
      if (spins++ < kSpinYields) {
        std::this_thread::yield();
        continue;
      }
      sleepers_.fetch_add(1, std::memory_order_seq_cst);
#if defined(__linux__)
      if (word.load(std::memory_order_seq_cst) == w)
        futex_wait(reinterpret_cast<uint32_t*>(data_.get() + wake_off_), w);
#else
      word.wait(w, std::memory_order_acquire);
#endif
      sleepers_.fetch_sub(1, std::memory_order_relaxed);
      continue;
    }
    if (w == static_cast<uint32_t>(Wake::Killed)) return Wake::Killed;
    if (word.compare_exchange_strong(w, static_cast<uint32_t>(Wake::Parked), std::memory_order_acq_rel))
      return static_cast<Wake>(w);
  }
}

Wake SharedRegion::peek() const { return static_cast<Wake>(wake_word().load(std::memory_order_acquire)); }

void SharedRegion::arm(uint32_t seq) {
  store_le(data_.get() + retval_off_ + slot::kSeq, seq, 4);
}

uint32_t SharedRegion::seq() const { return static_cast<uint32_t>(load_le(data_.get() + retval_off_ + slot::kSeq, 4)); }

int64_t SharedRegion::ret() const { return static_cast<int64_t>(load_le(data_.get() + retval_off_ + slot::kRet, 8)); }

int32_t SharedRegion::errno_value() const {
  return static_cast<int32_t>(load_le(data_.get() + retval_off_ + slot::kErrno, 4));
}

}  // namespace sandboxd
