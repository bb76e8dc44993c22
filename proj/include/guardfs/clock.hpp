#pragma once

#include <atomic>

#include "guardfs/types.hpp"

namespace guardfs {

class Clock {
 public:
  virtual ~Clock() = default;
  virtual UnixNanos now() const = 0;
  virtual void sleep_until(UnixNanos deadline) = 0;

  void sleep_for(std::chrono::nanoseconds d) { sleep_until(now() + d); }
};

/// Wall clock (system_clock) with real sleeps.
class SystemClock final : public Clock {
 public:
  UnixNanos now() const override;
  void sleep_until(UnixNanos deadline) override;
};

/// Manually advanced clock for simulated runs. Sleeping jumps forward.
class VirtualClock final : public Clock {
 public:
  explicit VirtualClock(UnixNanos start = UnixNanos{0}) : now_(start.count()) {}

  UnixNanos now() const override { return UnixNanos{now_.load()}; }
  void sleep_until(UnixNanos deadline) override;
  void advance(std::chrono::nanoseconds d) { now_ += d.count(); }

 private:
  std::atomic<std::int64_t> now_;
};

/// Process-wide wall clock instance.
Clock& system_clock();

/// Start of the aligned window of `length` that contains `t`.
inline UnixNanos window_floor(UnixNanos t, std::chrono::nanoseconds length) {
  auto n = t.count() / length.count();
  if (t.count() < 0 && t.count() % length.count() != 0) --n;
  return UnixNanos{n * length.count()};
}

/// First aligned boundary strictly after `t`.
inline UnixNanos next_boundary(UnixNanos t, std::chrono::nanoseconds length) {
  return window_floor(t, length) + length;
}

}  // namespace guardfs
