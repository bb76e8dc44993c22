#include "guardfs/verdict_channel.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <spdlog/spdlog.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include "guardfs/textio.hpp"

namespace guardfs::channel {

using defense::VerdictState;

std::string format_verdict(const VerdictRecord& r) {
  std::string line = "verdict ";
  line += std::to_string(r.pid);
  line += r.state == VerdictState::Malicious ? " malicious " : " benign ";
  line += std::to_string(r.ts);
  return line;
}

VerdictRecord parse_verdict(std::string_view line) {
  auto f = textio::split_ws(textio::trim(line));
  if (f.size() != 4 || f[0] != "verdict") {
    throw FormatError("bad verdict record '" + std::string(line) + "'");
  }
  VerdictRecord r;
  r.pid = textio::parse_int<Pid>(f[1]);
  if (r.pid <= 0) throw FormatError("verdict pid must be positive");
  if (f[2] == "malicious") {
    r.state = VerdictState::Malicious;
  } else if (f[2] == "benign") {
    r.state = VerdictState::Benign;
  } else {
    throw FormatError("bad verdict label '" + std::string(f[2]) + "'");
  }
  r.ts = textio::parse_int<UnixMillis>(f[3]);
  return r;
}

Endpoint Endpoint::parse(std::string_view descriptor) {
  Endpoint ep;
  if (descriptor.starts_with("unix:")) {
    ep.kind = Kind::UnixSocket;
    ep.path = std::string(descriptor.substr(5));
  } else if (descriptor.starts_with("file:")) {
    ep.path = std::string(descriptor.substr(5));
  } else {
    ep.path = std::string(descriptor);
  }
  if (ep.path.empty()) throw std::invalid_argument("empty verdict channel path");
  return ep;
}

namespace {

bool write_all(int fd, std::string_view data) {
  std::size_t off = 0;
  while (off < data.size()) {
    ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0 && errno == ENOTSOCK) n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

sockaddr_un make_addr(const std::filesystem::path& path) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  const auto s = path.string();
  if (s.size() >= sizeof(addr.sun_path)) throw std::invalid_argument("socket path too long: " + s);
  std::memcpy(addr.sun_path, s.c_str(), s.size() + 1);
  return addr;
}

// Splits complete lines off `buffer` and parses them.
void drain_lines(std::string& buffer, std::vector<VerdictRecord>& out) {
  std::size_t start = 0;
  while (true) {
    auto nl = buffer.find('\n', start);
    if (nl == std::string::npos) break;
    std::string_view line(buffer.data() + start, nl - start);
    if (!textio::trim(line).empty()) {
      try {
        out.push_back(parse_verdict(line));
      } catch (const std::exception& e) {
        spdlog::warn("skipping verdict line: {}", e.what());
      }
    }
    start = nl + 1;
  }
  buffer.erase(0, start);
}

}  // namespace

FileVerdictPublisher::FileVerdictPublisher(const std::filesystem::path& path) {
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) {
    throw std::runtime_error("cannot open verdict file " + path.string() + ": " +
                             std::strerror(errno));
  }
}

FileVerdictPublisher::~FileVerdictPublisher() { ::close(fd_); }

bool FileVerdictPublisher::publish(const VerdictRecord& r) {
  return write_all(fd_, format_verdict(r) + "\n");
}

SocketVerdictPublisher::SocketVerdictPublisher(std::filesystem::path path, int max_attempts)
    : path_(std::move(path)), max_attempts_(max_attempts) {}

SocketVerdictPublisher::~SocketVerdictPublisher() {
  if (fd_ >= 0) ::close(fd_);
}

bool SocketVerdictPublisher::connect_once() {
  if (fd_ >= 0) return true;
  fd_ = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) return false;
  auto addr = make_addr(path_);
  if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd_);
    fd_ = -1;
    return false;
  }
  return true;
}

bool SocketVerdictPublisher::publish(const VerdictRecord& r) {
  const std::string line = format_verdict(r) + "\n";
  auto backoff = std::chrono::milliseconds(10);
  for (int attempt = 0; attempt < max_attempts_; ++attempt) {
    if (connect_once() && write_all(fd_, line)) return true;
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
    std::this_thread::sleep_for(backoff);
    backoff = std::min(backoff * 2, std::chrono::milliseconds(500));
  }
  spdlog::warn("verdict channel {} unreachable, dropping record for pid {}", path_.string(),
               r.pid);
  return false;
}

std::unique_ptr<VerdictPublisher> make_publisher(const Endpoint& ep) {
  if (ep.kind == Endpoint::Kind::UnixSocket) return std::make_unique<SocketVerdictPublisher>(ep.path);
  return std::make_unique<FileVerdictPublisher>(ep.path);
}

FileTailSource::FileTailSource(std::filesystem::path path, bool from_start)
    : path_(std::move(path)) {
  std::error_code ec;
  if (!from_start) {
    auto size = std::filesystem::file_size(path_, ec);
    if (!ec) offset_ = size;
  }
}

std::vector<VerdictRecord> FileTailSource::poll() {
  std::vector<VerdictRecord> out;
  int fd = ::open(path_.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) return out;
  struct stat st {};
  if (::fstat(fd, &st) == 0 && static_cast<std::uint64_t>(st.st_size) < offset_) {
    offset_ = 0;  // truncated and rewritten
    partial_.clear();
  }
  char buf[8192];
  while (true) {
    ssize_t n = ::pread(fd, buf, sizeof(buf), static_cast<off_t>(offset_));
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    partial_.append(buf, static_cast<std::size_t>(n));
    offset_ += static_cast<std::uint64_t>(n);
  }
  ::close(fd);
  drain_lines(partial_, out);
  return out;
}

SocketVerdictServer::SocketVerdictServer(std::filesystem::path path) : path_(std::move(path)) {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
  listen_fd_ = ::socket(AF_UNIX, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
  if (listen_fd_ < 0) throw std::runtime_error("socket: " + std::string(std::strerror(errno)));
  auto addr = make_addr(path_);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(listen_fd_, 16) != 0) {
    const std::string err = std::strerror(errno);
    ::close(listen_fd_);
    throw std::runtime_error("cannot listen on " + path_.string() + ": " + err);
  }
}

SocketVerdictServer::~SocketVerdictServer() {
  for (auto& c : conns_) ::close(c.fd);
  ::close(listen_fd_);
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

std::vector<VerdictRecord> SocketVerdictServer::poll() {
  while (true) {
    int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
    if (fd < 0) break;
    conns_.push_back(Conn{fd, {}});
  }
  std::vector<VerdictRecord> out;
  char buf[4096];
  for (auto& c : conns_) {
    while (true) {
      ssize_t n = ::read(c.fd, buf, sizeof(buf));
      if (n > 0) {
        c.partial.append(buf, static_cast<std::size_t>(n));
        continue;
      }
      if (n < 0 && errno == EINTR) continue;
      if (n == 0) {
        ::close(c.fd);
        c.fd = -1;
      }
      break;
    }
    drain_lines(c.partial, out);
  }
  std::erase_if(conns_, [](const Conn& c) { return c.fd < 0; });
  return out;
}

std::unique_ptr<VerdictSource> make_source(const Endpoint& ep) {
  if (ep.kind == Endpoint::Kind::UnixSocket) return std::make_unique<SocketVerdictServer>(ep.path);
  return std::make_unique<FileTailSource>(ep.path);
}

}  // namespace guardfs::channel
