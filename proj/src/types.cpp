#include "guardfs/types.hpp"

#include <thread>

#include "guardfs/clock.hpp"

namespace guardfs {

namespace {
constexpr std::array<std::string_view, 12> kKindNames = {
    "open",   "create", "read",    "write", "rename",   "unlink",
    "readdir", "getattr", "mkdir", "rmdir", "truncate", "release",
};
}  // namespace

std::string_view to_string(CallKind kind) {
  return kKindNames[static_cast<std::size_t>(kind)];
}

std::optional<CallKind> parse_call_kind(std::string_view text) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == text) return static_cast<CallKind>(i);
  }
  return std::nullopt;
}

UnixNanos SystemClock::now() const {
  return std::chrono::duration_cast<UnixNanos>(
      std::chrono::system_clock::now().time_since_epoch());
}

void SystemClock::sleep_until(UnixNanos deadline) {
  auto remaining = deadline - now();
  if (remaining > UnixNanos::zero()) std::this_thread::sleep_for(remaining);
}

void VirtualClock::sleep_until(UnixNanos deadline) {
  auto cur = now_.load();
  while (cur < deadline.count() && !now_.compare_exchange_weak(cur, deadline.count())) {
  }
}

Clock& system_clock() {
  static SystemClock clock;
  return clock;
}

}  // namespace guardfs
