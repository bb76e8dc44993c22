#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "guardfs/defense.hpp"

// Newline-delimited verdict records shared by the detector (producer) and the
// overlay (consumer): `verdict <pid> <malicious|benign> <unix_ts_ms>`.
namespace guardfs::channel {

struct VerdictRecord {
  Pid pid = 0;
  defense::VerdictState state = defense::VerdictState::Malicious;
  UnixMillis ts = 0;

  bool operator==(const VerdictRecord&) const = default;
};

std::string format_verdict(const VerdictRecord& r);
/// Throws FormatError on anything but a well-formed record.
VerdictRecord parse_verdict(std::string_view line);

/// Endpoint descriptor: "unix:/path/to.sock", "file:/path", or a bare path
/// (treated as a file).
struct Endpoint {
  enum class Kind { File, UnixSocket };
  Kind kind = Kind::File;
  std::filesystem::path path;

  static Endpoint parse(std::string_view descriptor);
};

class VerdictPublisher {
 public:
  virtual ~VerdictPublisher() = default;
  /// False when the record could not be delivered.
  virtual bool publish(const VerdictRecord& r) = 0;
};

/// Appends records to a file, flushing each one.
class FileVerdictPublisher final : public VerdictPublisher {
 public:
  explicit FileVerdictPublisher(const std::filesystem::path& path);
  ~FileVerdictPublisher() override;
  bool publish(const VerdictRecord& r) override;

 private:
  int fd_ = -1;
};

/// Connects to a listening unix stream socket; reconnects with bounded
/// backoff when the peer goes away.
class SocketVerdictPublisher final : public VerdictPublisher {
 public:
  explicit SocketVerdictPublisher(std::filesystem::path path, int max_attempts = 5);
  ~SocketVerdictPublisher() override;
  bool publish(const VerdictRecord& r) override;

 private:
  bool connect_once();

  std::filesystem::path path_;
  int max_attempts_;
  int fd_ = -1;
};

std::unique_ptr<VerdictPublisher> make_publisher(const Endpoint& ep);

/// Non-blocking source of records; poll() returns whatever complete lines
/// arrived since the last call. Malformed lines are skipped and logged.
class VerdictSource {
 public:
  virtual ~VerdictSource() = default;
  virtual std::vector<VerdictRecord> poll() = 0;
};

class FileTailSource final : public VerdictSource {
 public:
  /// Starts at the current end of the file unless `from_start`.
  explicit FileTailSource(std::filesystem::path path, bool from_start = false);
  std::vector<VerdictRecord> poll() override;

 private:
  std::filesystem::path path_;
  std::uint64_t offset_ = 0;
  std::string partial_;
};

class SocketVerdictServer final : public VerdictSource {
 public:
  explicit SocketVerdictServer(std::filesystem::path path);
  ~SocketVerdictServer() override;
  std::vector<VerdictRecord> poll() override;

 private:
  std::filesystem::path path_;
  int listen_fd_ = -1;
  struct Conn {
    int fd;
    std::string partial;
  };
  std::vector<Conn> conns_;
};

std::unique_ptr<VerdictSource> make_source(const Endpoint& ep);

}  // namespace guardfs::channel
