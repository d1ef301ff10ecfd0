#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>

#include "sandboxd/wire.hpp"

namespace sandboxd {

// A byte array shared between the kernel and one sync-convention guest.
//
// The retval slot (seq, errno, ret) lives at retval_off and the 32-bit wake
// word at wake_off. The kernel writes the slot with plain stores and then
// publishes it with a release store to the wake word; the guest acquires the
// wake word before reading the slot.
class SharedRegion {
 public:
  // Throws Error(BadOffset) unless both offsets leave 16 bytes of room, the
  // wake word is 4-byte aligned, and the wake word lies outside the slot.
  SharedRegion(size_t size, size_t retval_off, size_t wake_off);

  SharedRegion(const SharedRegion&) = delete;
  SharedRegion& operator=(const SharedRegion&) = delete;

  std::span<uint8_t> bytes() { return {data_.get(), size_}; }
  std::span<const uint8_t> bytes() const { return {data_.get(), size_}; }
  size_t size() const { return size_; }
  size_t retval_off() const { return retval_off_; }
  size_t wake_off() const { return wake_off_; }

  // True when [off, off + len) lies inside the region.
  bool range_ok(uint64_t off, uint64_t len) const { return off <= size_ && len <= size_ - off; }

  // Kernel side.
  void complete(uint32_t seq, int64_t ret, int32_t errno_);
  void signal();
  void kill();

  // Guest side. Blocks while the wake word is Parked and consumes the state
  // it wakes with (Killed is sticky and never consumed).
  Wake wait();
  Wake peek() const;
  void arm(uint32_t seq);

  uint32_t seq() const;
  int64_t ret() const;
  int32_t errno_value() const;

 private:
  std::atomic_ref<uint32_t> wake_word() const;
  void store_wake(Wake w);
  void notify();

  size_t size_;
  size_t retval_off_;
  size_t wake_off_;
  std::unique_ptr<uint8_t[]> data_;
  // Guests blocked in the futex; the kernel skips the wake syscall when zero.
  std::atomic<uint32_t> sleepers_{0};
};

}  // namespace sandboxd
