#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace guardfs {

using Pid = std::int32_t;

/// Nanoseconds since the unix epoch. Used for every timestamp that crosses
/// module boundaries so simulated and live runs share one timeline.
using UnixNanos = std::chrono::nanoseconds;

/// Milliseconds since the unix epoch (wire formats use this resolution).
using UnixMillis = std::int64_t;

inline constexpr UnixMillis to_millis(UnixNanos t) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(t).count();
}

inline constexpr UnixNanos from_millis(UnixMillis ms) {
  return std::chrono::milliseconds(ms);
}

/// File-system call kinds observed by the overlay.
enum class CallKind : std::uint8_t {
  Open,
  Create,
  Read,
  Write,
  Rename,
  Unlink,
  ReadDir,
  GetAttr,
  Mkdir,
  Rmdir,
  Truncate,
  Release,
};

inline constexpr std::array<CallKind, 12> kAllCallKinds = {
    CallKind::Open,   CallKind::Create,  CallKind::Read,    CallKind::Write,
    CallKind::Rename, CallKind::Unlink,  CallKind::ReadDir, CallKind::GetAttr,
    CallKind::Mkdir,  CallKind::Rmdir,   CallKind::Truncate, CallKind::Release,
};

/// Calls that change underlay state. Create and Mkdir count as modifying.
constexpr bool is_modifying(CallKind kind) {
  switch (kind) {
    case CallKind::Write:
    case CallKind::Rename:
    case CallKind::Unlink:
    case CallKind::Truncate:
    case CallKind::Rmdir:
    case CallKind::Create:
    case CallKind::Mkdir:
      return true;
    default:
      return false;
  }
}

std::string_view to_string(CallKind kind);
std::optional<CallKind> parse_call_kind(std::string_view text);

/// Thrown when input text or files violate a documented format.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace guardfs
