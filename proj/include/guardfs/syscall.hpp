#pragma once

#include <sys/stat.h>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "guardfs/types.hpp"

namespace guardfs {

using Handle = std::uint64_t;

struct FileAttr {
  std::uint64_t ino = 0;
  std::uint64_t size = 0;
  std::uint64_t blocks = 0;
  std::uint32_t mode = 0;
  std::uint32_t nlink = 1;
  std::uint32_t uid = 0;
  std::uint32_t gid = 0;
  std::uint32_t blksize = 4096;
  std::int64_t atime_ns = 0;
  std::int64_t mtime_ns = 0;
  std::int64_t ctime_ns = 0;

  bool operator==(const FileAttr&) const = default;
};

FileAttr attr_from_stat(const struct ::stat& st);

struct DirEntry {
  std::string name;
  std::uint64_t ino = 0;
  std::uint32_t type = 0;  // DT_* value

  bool operator==(const DirEntry&) const = default;
};

struct CallContext {
  Pid pid = 0;
  UnixNanos timestamp{};
  CallKind op = CallKind::GetAttr;
};

/// Kind-specific request payloads. Paths are absolute overlay paths.
namespace req {
struct Open {
  std::string path;
  int flags = 0;
};
struct Create {
  std::string path;
  int flags = 0;
  std::uint32_t mode = 0644;
};
struct Read {
  Handle handle = 0;
  std::uint64_t offset = 0;
  std::uint32_t size = 0;
};
struct Write {
  Handle handle = 0;
  std::uint64_t offset = 0;
  std::span<const std::uint8_t> data;  // borrowed for the duration of the call
};
struct Rename {
  std::string from;
  std::string to;
  unsigned flags = 0;
};
struct Unlink {
  std::string path;
};
struct ReadDir {
  std::string path;
};
struct GetAttr {
  std::string path;
};
struct Mkdir {
  std::string path;
  std::uint32_t mode = 0755;
};
struct Rmdir {
  std::string path;
};
struct Truncate {
  std::string path;
  std::optional<Handle> handle;
  std::uint64_t size = 0;
};
struct Release {
  Handle handle = 0;
};
}  // namespace req

/// Alternatives are declared in CallKind order, so index() == kind.
using RequestPayload =
    std::variant<req::Open, req::Create, req::Read, req::Write, req::Rename, req::Unlink,
                 req::ReadDir, req::GetAttr, req::Mkdir, req::Rmdir, req::Truncate, req::Release>;

struct SyscallRequest {
  CallContext ctx;
  RequestPayload payload;

  CallKind kind() const { return static_cast<CallKind>(payload.index()); }
};

/// Builds a request whose context kind matches the payload.
template <typename Payload>
SyscallRequest make_request(Pid pid, UnixNanos ts, Payload payload) {
  SyscallRequest r{CallContext{pid, ts, CallKind::GetAttr}, RequestPayload(std::move(payload))};
  r.ctx.op = r.kind();
  return r;
}

namespace resp {
struct Done {
  bool operator==(const Done&) const = default;
};
struct Opened {
  Handle handle = 0;
  FileAttr attr;
  bool operator==(const Opened&) const = default;
};
struct Data {
  std::vector<std::uint8_t> bytes;
  bool operator==(const Data&) const = default;
};
struct Written {
  std::uint64_t count = 0;
  bool operator==(const Written&) const = default;
};
struct Entries {
  std::vector<DirEntry> entries;
  bool operator==(const Entries&) const = default;
};
struct Attr {
  FileAttr attr;
  bool operator==(const Attr&) const = default;
};
}  // namespace resp

using ResponsePayload = std::variant<resp::Done, resp::Opened, resp::Data, resp::Written,
                                     resp::Entries, resp::Attr>;

/// Either an errno-style error (error != 0) or a kind-specific result.
struct SyscallResponse {
  int error = 0;
  ResponsePayload result;

  bool ok() const { return error == 0; }
  static SyscallResponse failure(int err) { return SyscallResponse{err, resp::Done{}}; }

  template <typename T>
  const T& as() const {
    return std::get<T>(result);
  }

  bool operator==(const SyscallResponse&) const = default;
};

/// True when a successful response carries the result type `kind` promises.
bool well_formed(CallKind kind, const SyscallResponse& response);

}  // namespace guardfs
