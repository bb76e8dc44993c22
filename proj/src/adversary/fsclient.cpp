#include <dirent.h>
#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>

#include "guardfs/adversary.hpp"
#include "guardfs/session.hpp"

namespace guardfs::adversary {

int FsClient::open(const std::string& path, int flags, Handle& out) {
  auto r = call(req::Open{path, flags});
  if (r.ok()) out = r.as<resp::Opened>().handle;
  return r.error;
}

int FsClient::create(const std::string& path, Handle& out, std::uint32_t mode) {
  auto r = call(req::Create{path, O_WRONLY | O_CREAT | O_TRUNC, mode});
  if (r.ok()) out = r.as<resp::Opened>().handle;
  return r.error;
}

int FsClient::read(Handle h, std::uint64_t offset, std::uint32_t size,
                   std::vector<std::uint8_t>& out) {
  auto r = call(req::Read{h, offset, size});
  if (r.ok()) {
    out = r.as<resp::Data>().bytes;
  } else {
    out.clear();
  }
  return r.error;
}

int FsClient::write(Handle h, std::uint64_t offset, std::span<const std::uint8_t> data) {
  return call(req::Write{h, offset, data}).error;
}

int FsClient::release(Handle h) { return call(req::Release{h}).error; }

int FsClient::rename(const std::string& from, const std::string& to) {
  return call(req::Rename{from, to, 0}).error;
}

int FsClient::unlink(const std::string& path) { return call(req::Unlink{path}).error; }

int FsClient::mkdir(const std::string& path, std::uint32_t mode) {
  return call(req::Mkdir{path, mode}).error;
}

int FsClient::list(const std::string& path, std::vector<DirEntry>& out) {
  auto r = call(req::ReadDir{path});
  if (r.ok()) out = r.as<resp::Entries>().entries;
  return r.error;
}

int FsClient::stat(const std::string& path, FileAttr& out) {
  auto r = call(req::GetAttr{path});
  if (r.ok()) out = r.as<resp::Attr>().attr;
  return r.error;
}

PosixFsClient::PosixFsClient() = default;

PosixFsClient::~PosixFsClient() {
  for (auto& [h, fd] : fds_) ::close(fd);
}

SyscallResponse PosixFsClient::call(const RequestPayload& payload) {
  auto fail = [] { return SyscallResponse::failure(errno ? errno : EIO); };
  auto stat_path = [&](const std::string& path) -> SyscallResponse {
    struct ::stat st {};
    if (::lstat(path.c_str(), &st) != 0) return fail();
    return {0, resp::Attr{attr_from_stat(st)}};
  };
  auto fd_of = [&](Handle h) {
    auto it = fds_.find(h);
    return it == fds_.end() ? -1 : it->second;
  };
  errno = 0;
  return std::visit(
      [&](const auto& p) -> SyscallResponse {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, req::Open> || std::is_same_v<P, req::Create>) {
          int fd;
          if constexpr (std::is_same_v<P, req::Create>) {
            fd = ::open(p.path.c_str(), p.flags | O_CREAT | O_CLOEXEC, p.mode);
          } else {
            fd = ::open(p.path.c_str(), p.flags | O_CLOEXEC);
          }
          if (fd < 0) return fail();
          struct ::stat st {};
          ::fstat(fd, &st);
          const Handle h = next_++;
          fds_[h] = fd;
          return {0, resp::Opened{h, attr_from_stat(st)}};
        } else if constexpr (std::is_same_v<P, req::Read>) {
          const int fd = fd_of(p.handle);
          if (fd < 0) return SyscallResponse::failure(EBADF);
          resp::Data d;
          d.bytes.resize(p.size);
          std::size_t got = 0;
          while (got < p.size) {
            ssize_t n = ::pread(fd, d.bytes.data() + got, p.size - got,
                                static_cast<off_t>(p.offset + got));
            if (n < 0 && errno == EINTR) continue;
            if (n < 0) return fail();
            if (n == 0) break;
            got += static_cast<std::size_t>(n);
          }
          d.bytes.resize(got);
          return {0, std::move(d)};
        } else if constexpr (std::is_same_v<P, req::Write>) {
          const int fd = fd_of(p.handle);
          if (fd < 0) return SyscallResponse::failure(EBADF);
          std::size_t done = 0;
          while (done < p.data.size()) {
            ssize_t n = ::pwrite(fd, p.data.data() + done, p.data.size() - done,
                                 static_cast<off_t>(p.offset + done));
            if (n < 0 && errno == EINTR) return fail();
            if (n < 0) return fail();
            done += static_cast<std::size_t>(n);
          }
          return {0, resp::Written{done}};
        } else if constexpr (std::is_same_v<P, req::Rename>) {
          if (::rename(p.from.c_str(), p.to.c_str()) != 0) return fail();
          return {0, resp::Done{}};
        } else if constexpr (std::is_same_v<P, req::Unlink>) {
          if (::unlink(p.path.c_str()) != 0) return fail();
          return {0, resp::Done{}};
        } else if constexpr (std::is_same_v<P, req::ReadDir>) {
          DIR* dir = ::opendir(p.path.c_str());
          if (!dir) return fail();
          resp::Entries out;
          while (auto* de = ::readdir(dir)) {
            std::string name = de->d_name;
            if (name == "." || name == "..") continue;
            out.entries.push_back({name, de->d_ino, de->d_type});
          }
          ::closedir(dir);
          std::sort(out.entries.begin(), out.entries.end(),
                    [](const DirEntry& a, const DirEntry& b) { return a.name < b.name; });
          return {0, std::move(out)};
        } else if constexpr (std::is_same_v<P, req::GetAttr>) {
          return stat_path(p.path);
        } else if constexpr (std::is_same_v<P, req::Mkdir>) {
          if (::mkdir(p.path.c_str(), p.mode) != 0) return fail();
          return stat_path(p.path);
        } else if constexpr (std::is_same_v<P, req::Rmdir>) {
          if (::rmdir(p.path.c_str()) != 0) return fail();
          return {0, resp::Done{}};
        } else if constexpr (std::is_same_v<P, req::Truncate>) {
          int rc = p.handle ? ::ftruncate(fd_of(*p.handle), static_cast<off_t>(p.size))
                            : ::truncate(p.path.c_str(), static_cast<off_t>(p.size));
          if (rc != 0) return fail();
          return stat_path(p.path);
        } else {
          auto it = fds_.find(p.handle);
          if (it == fds_.end()) return SyscallResponse::failure(EBADF);
          ::close(it->second);
          fds_.erase(it);
          return {0, resp::Done{}};
        }
      },
      payload);
}

namespace {
constexpr std::size_t kMaxTransfer = 128 * 1024;
}

OverlayFsClient::OverlayFsClient(overlay::Overlay& ov, VirtualClock& clock, Pid pid,
                                 session::MountSession* session, SimCost cost)
    : ov_(ov), clock_(clock), pid_(pid), session_(session), cost_(cost) {}

SyscallResponse OverlayFsClient::dispatch_one(const RequestPayload& payload, std::uint64_t bytes) {
  if (session_) session_->run_cycle(clock_.now());
  // A killed simulated process makes no further calls.
  if (ov_.engine().kill_requested(pid_)) return SyscallResponse::failure(ESRCH);
  auto req = SyscallRequest{CallContext{pid_, clock_.now(), CallKind::GetAttr}, payload};
  req.ctx.op = req.kind();
  auto r = ov_.dispatch(req);
  if (auto* d = std::get_if<resp::Data>(&r.result)) bytes = d->bytes.size();
  clock_.advance(cost_.per_call + std::chrono::nanoseconds(static_cast<std::int64_t>(
                                      double(bytes) / cost_.throughput * 1e9)));
  return r;
}

SyscallResponse OverlayFsClient::call(const RequestPayload& payload) {
  if (const auto* w = std::get_if<req::Write>(&payload); w && w->data.size() > kMaxTransfer) {
    std::uint64_t done = 0;
    while (done < w->data.size()) {
      const auto n = std::min<std::size_t>(kMaxTransfer, w->data.size() - done);
      auto r = dispatch_one(req::Write{w->handle, w->offset + done, w->data.subspan(done, n)}, n);
      if (!r.ok()) return r;
      done += r.as<resp::Written>().count;
    }
    return {0, resp::Written{done}};
  }
  if (const auto* rd = std::get_if<req::Read>(&payload); rd && rd->size > kMaxTransfer) {
    resp::Data out;
    while (out.bytes.size() < rd->size) {
      const auto n = static_cast<std::uint32_t>(
          std::min<std::size_t>(kMaxTransfer, rd->size - out.bytes.size()));
      auto r = dispatch_one(req::Read{rd->handle, rd->offset + out.bytes.size(), n}, 0);
      if (!r.ok()) return r;
      const auto& part = r.as<resp::Data>().bytes;
      out.bytes.insert(out.bytes.end(), part.begin(), part.end());
      if (part.size() < n) break;
    }
    return {0, std::move(out)};
  }
  std::uint64_t bytes = 0;
  if (const auto* w = std::get_if<req::Write>(&payload)) bytes = w->data.size();
  return dispatch_one(payload, bytes);
}

}  // namespace guardfs::adversary
