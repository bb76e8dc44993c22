#include "guardfs/fuse.hpp"

#include <fcntl.h>
#include <linux/fuse.h>
#include <poll.h>
#include <spdlog/spdlog.h>
#include <sys/eventfd.h>
#include <sys/mount.h>
#include <sys/statvfs.h>
#include <sys/uio.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "guardfs/process.hpp"

namespace guardfs::fuse {

namespace {

constexpr std::uint64_t kRootNode = FUSE_ROOT_ID;

fuse_attr to_fuse(const FileAttr& a) {
  fuse_attr f{};
  f.ino = a.ino;
  f.size = a.size;
  f.blocks = a.blocks;
  f.atime = static_cast<std::uint64_t>(a.atime_ns / 1000000000);
  f.atimensec = static_cast<std::uint32_t>(a.atime_ns % 1000000000);
  f.mtime = static_cast<std::uint64_t>(a.mtime_ns / 1000000000);
  f.mtimensec = static_cast<std::uint32_t>(a.mtime_ns % 1000000000);
  f.ctime = static_cast<std::uint64_t>(a.ctime_ns / 1000000000);
  f.ctimensec = static_cast<std::uint32_t>(a.ctime_ns % 1000000000);
  f.mode = a.mode;
  f.nlink = a.nlink;
  f.uid = a.uid;
  f.gid = a.gid;
  f.blksize = a.blksize;
  return f;
}

template <typename T>
const T* body(const std::uint8_t* buf, std::size_t len) {
  if (len < sizeof(fuse_in_header) + sizeof(T)) return nullptr;
  return reinterpret_cast<const T*>(buf + sizeof(fuse_in_header));
}

// Directory listings taken at opendir, sliced by readdir offsets.
std::mutex dirs_mu;
std::unordered_map<std::uint64_t, std::vector<DirEntry>> dir_listings;
std::atomic<std::uint64_t> next_dir_handle{1};

}  // namespace

bool available() {
  if (::geteuid() != 0) return false;
  int fd = ::open("/dev/fuse", O_RDWR | O_CLOEXEC);
  if (fd < 0) return false;
  ::close(fd);
  return true;
}

FuseDriver::FuseDriver(FuseOptions options) : options_(options) {
  if (options_.threads < 1) throw std::invalid_argument("fuse driver needs at least one thread");
}

FuseDriver::~FuseDriver() { stop(); }

void FuseDriver::start(overlay::Overlay& ov) {
  overlay_ = &ov;
  root_ = ov.config().overlay_root.lexically_normal().string();
  while (root_.size() > 1 && root_.back() == '/') root_.pop_back();
  paths_[kRootNode] = root_;
  ids_[root_] = kRootNode;

  std::error_code ec;
  std::filesystem::create_directories(root_, ec);
  fd_ = ::open("/dev/fuse", O_RDWR | O_CLOEXEC | O_NONBLOCK);
  if (fd_ < 0) throw std::runtime_error("cannot open /dev/fuse: " + std::string(std::strerror(errno)));
  std::string data = "fd=" + std::to_string(fd_) + ",rootmode=40000,user_id=" +
                     std::to_string(::geteuid()) + ",group_id=" + std::to_string(::getegid());
  if (options_.allow_other) data += ",allow_other";
  if (::mount("guardfs", root_.c_str(), "fuse.guardfs", MS_NOSUID | MS_NODEV, data.c_str()) != 0) {
    const std::string err = std::strerror(errno);
    ::close(fd_);
    fd_ = -1;
    throw std::runtime_error("mount " + root_ + " failed: " + err);
  }
  mounted_ = true;
  stop_fd_ = ::eventfd(0, EFD_CLOEXEC | EFD_NONBLOCK);
  for (int i = 0; i < options_.threads; ++i) workers_.emplace_back([this] { worker(); });
}

void FuseDriver::stop() {
  if (stopping_.exchange(true)) return;
  if (mounted_ && ::umount2(root_.c_str(), MNT_DETACH) != 0) {
    spdlog::warn("umount {} failed: {}", root_, std::strerror(errno));
  }
  mounted_ = false;
  if (stop_fd_ >= 0) {
    std::uint64_t one = 1;
    if (::write(stop_fd_, &one, sizeof(one)) < 0) spdlog::warn("stop signal failed");
  }
  for (auto& t : workers_) t.join();
  workers_.clear();
  if (fd_ >= 0) ::close(fd_);
  if (stop_fd_ >= 0) ::close(stop_fd_);
  fd_ = stop_fd_ = -1;
}

void FuseDriver::worker() {
  std::vector<std::uint8_t> buf(options_.max_write + 64 * 1024);
  pollfd fds[2] = {{fd_, POLLIN, 0}, {stop_fd_, POLLIN, 0}};
  while (!stopping_.load()) {
    fds[0].revents = fds[1].revents = 0;
    int r = ::poll(fds, 2, 500);
    if (r < 0 && errno != EINTR) break;
    if (fds[1].revents) break;
    if (r <= 0) continue;
    ssize_t n = ::read(fd_, buf.data(), buf.size());
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR || errno == ENOENT) continue;
      if (errno != ENODEV) spdlog::warn("fuse read failed: {}", std::strerror(errno));
      break;
    }
    if (static_cast<std::size_t>(n) < sizeof(fuse_in_header)) continue;
    try {
      handle(buf.data(), static_cast<std::size_t>(n));
    } catch (const std::exception& e) {
      const auto* in = reinterpret_cast<const fuse_in_header*>(buf.data());
      spdlog::error("fuse opcode {} failed: {}", in->opcode, e.what());
      reply(in->unique, EIO);
    }
  }
}

void FuseDriver::reply(std::uint64_t unique, int error, const void* data, std::size_t size,
                       const void* data2, std::size_t size2) {
  fuse_out_header out{};
  out.unique = unique;
  out.error = -error;
  iovec iov[3];
  int cnt = 1;
  iov[0] = {&out, sizeof(out)};
  if (error == 0 && size > 0) iov[cnt++] = {const_cast<void*>(data), size};
  if (error == 0 && size2 > 0) iov[cnt++] = {const_cast<void*>(data2), size2};
  std::size_t total = 0;
  for (int i = 0; i < cnt; ++i) total += iov[i].iov_len;
  out.len = static_cast<std::uint32_t>(total);
  if (::writev(fd_, iov, cnt) < 0 && errno != ENOENT) {
    spdlog::debug("fuse reply failed: {}", std::strerror(errno));
  }
}

std::uint64_t FuseDriver::node_for(const std::string& path) {
  std::lock_guard lock(nodes_mu_);
  auto it = ids_.find(path);
  if (it != ids_.end()) return it->second;
  const auto id = next_node_++;
  ids_[path] = id;
  paths_[id] = path;
  return id;
}

std::string FuseDriver::path_of(std::uint64_t nodeid) {
  std::lock_guard lock(nodes_mu_);
  auto it = paths_.find(nodeid);
  if (it == paths_.end()) throw std::out_of_range("unknown node " + std::to_string(nodeid));
  return it->second;
}

std::string FuseDriver::child(std::uint64_t parent, const char* name) {
  auto p = path_of(parent);
  if (p != "/") p += '/';
  return p + name;
}

void FuseDriver::rename_nodes(const std::string& from, const std::string& to) {
  std::lock_guard lock(nodes_mu_);
  const std::string prefix = from + "/";
  std::vector<std::pair<std::string, std::uint64_t>> moved;
  for (const auto& [path, id] : ids_) {
    if (path == from || path.starts_with(prefix)) moved.emplace_back(path, id);
  }
  if (auto it = ids_.find(to); it != ids_.end()) {
    paths_.erase(it->second);
    ids_.erase(it);
  }
  for (const auto& [path, id] : moved) {
    ids_.erase(path);
    std::string renamed = to + path.substr(from.size());
    ids_[renamed] = id;
    paths_[id] = renamed;
  }
}

void FuseDriver::handle(const std::uint8_t* buf, std::size_t len) {
  const auto* in = reinterpret_cast<const fuse_in_header*>(buf);
  const std::uint64_t unique = in->unique;
  const char* names = reinterpret_cast<const char*>(buf + sizeof(fuse_in_header));
  auto& ov = *overlay_;
  const UnixNanos now = ov.engine().clock().now();
  const Pid pid = in->pid > 0 ? proc::tgid_of(static_cast<Pid>(in->pid)).value_or(in->pid) : 0;

  auto send_entry = [&](const std::string& path, const FileAttr& attr) {
    fuse_entry_out e{};
    e.nodeid = node_for(path);
    e.attr = to_fuse(attr);
    reply(unique, 0, &e, sizeof(e));
  };
  auto getattr = [&](const std::string& path) {
    return ov.dispatch(make_request(pid, now, req::GetAttr{path}));
  };

  switch (in->opcode) {
    case FUSE_INIT: {
      const auto* init = body<fuse_init_in>(buf, len);
      fuse_init_out out{};
      out.major = FUSE_KERNEL_VERSION;
      out.minor = FUSE_KERNEL_MINOR_VERSION;
      out.max_readahead = init ? init->max_readahead : 0;
      const std::uint32_t want = FUSE_ASYNC_READ | FUSE_ATOMIC_O_TRUNC | FUSE_BIG_WRITES |
                                 FUSE_MAX_PAGES;
      out.flags = init ? (init->flags & want) : 0;
      out.max_background = 64;
      out.congestion_threshold = 48;
      out.max_write = options_.max_write;
      out.time_gran = 1;
      out.max_pages = static_cast<std::uint16_t>(options_.max_write / 4096);
      reply(unique, 0, &out, sizeof(out));
      return;
    }
    case FUSE_DESTROY:
      reply(unique, 0);
      return;
    case FUSE_FORGET:
    case FUSE_BATCH_FORGET:
    case FUSE_INTERRUPT:
      return;
    case FUSE_LOOKUP: {
      const auto path = child(in->nodeid, names);
      auto r = getattr(path);
      if (!r.ok()) return reply(unique, r.error);
      return send_entry(path, r.as<resp::Attr>().attr);
    }
    case FUSE_GETATTR: {
      auto r = getattr(path_of(in->nodeid));
      if (!r.ok()) return reply(unique, r.error);
      fuse_attr_out out{};
      out.attr = to_fuse(r.as<resp::Attr>().attr);
      return reply(unique, 0, &out, sizeof(out));
    }
    case FUSE_SETATTR: {
      const auto* s = body<fuse_setattr_in>(buf, len);
      if (!s) return reply(unique, EINVAL);
      const auto path = path_of(in->nodeid);
      if (s->valid & FATTR_SIZE) {
        req::Truncate t{path, std::nullopt, s->size};
        if (s->valid & FATTR_FH) t.handle = s->fh;
        auto r = ov.dispatch(make_request(pid, now, t));
        if (!r.ok()) return reply(unique, r.error);
      }
      // Mode, owner and time changes are accepted but not applied.
      auto r = getattr(path);
      if (!r.ok()) return reply(unique, r.error);
      fuse_attr_out out{};
      out.attr = to_fuse(r.as<resp::Attr>().attr);
      return reply(unique, 0, &out, sizeof(out));
    }
    case FUSE_MKDIR: {
      const auto* m = body<fuse_mkdir_in>(buf, len);
      if (!m) return reply(unique, EINVAL);
      const auto path = child(in->nodeid, names + sizeof(fuse_mkdir_in));
      auto r = ov.dispatch(make_request(pid, now, req::Mkdir{path, m->mode & ~m->umask & 07777}));
      if (!r.ok()) return reply(unique, r.error);
      return send_entry(path, r.as<resp::Attr>().attr);
    }
    case FUSE_UNLINK:
    case FUSE_RMDIR: {
      const auto path = child(in->nodeid, names);
      auto r = in->opcode == FUSE_UNLINK ? ov.dispatch(make_request(pid, now, req::Unlink{path}))
                                         : ov.dispatch(make_request(pid, now, req::Rmdir{path}));
      return reply(unique, r.error);
    }
    case FUSE_RENAME:
    case FUSE_RENAME2: {
      std::uint64_t newdir = 0;
      unsigned flags = 0;
      const char* p = nullptr;
      if (in->opcode == FUSE_RENAME) {
        const auto* rn = body<fuse_rename_in>(buf, len);
        if (!rn) return reply(unique, EINVAL);
        newdir = rn->newdir;
        p = names + sizeof(fuse_rename_in);
      } else {
        const auto* rn = body<fuse_rename2_in>(buf, len);
        if (!rn) return reply(unique, EINVAL);
        newdir = rn->newdir;
        flags = rn->flags;
        p = names + sizeof(fuse_rename2_in);
      }
      const auto from = child(in->nodeid, p);
      const auto to = child(newdir, p + std::strlen(p) + 1);
      auto r = ov.dispatch(make_request(pid, now, req::Rename{from, to, flags}));
      if (r.ok()) rename_nodes(from, to);
      return reply(unique, r.error);
    }
    case FUSE_OPEN: {
      const auto* o = body<fuse_open_in>(buf, len);
      if (!o) return reply(unique, EINVAL);
      const int flags = static_cast<int>(o->flags) & ~(O_CREAT | O_EXCL | O_NOCTTY);
      auto r = ov.dispatch(make_request(pid, now, req::Open{path_of(in->nodeid), flags}));
      if (!r.ok()) return reply(unique, r.error);
      fuse_open_out out{};
      out.fh = r.as<resp::Opened>().handle;
      out.open_flags = FOPEN_DIRECT_IO;
      return reply(unique, 0, &out, sizeof(out));
    }
    case FUSE_CREATE: {
      const auto* c = body<fuse_create_in>(buf, len);
      if (!c) return reply(unique, EINVAL);
      const auto path = child(in->nodeid, names + sizeof(fuse_create_in));
      const int flags = static_cast<int>(c->flags) & ~O_NOCTTY;
      auto r = ov.dispatch(
          make_request(pid, now, req::Create{path, flags, c->mode & ~c->umask & 07777}));
      if (!r.ok()) return reply(unique, r.error);
      const auto& opened = r.as<resp::Opened>();
      fuse_entry_out e{};
      e.nodeid = node_for(path);
      e.attr = to_fuse(opened.attr);
      fuse_open_out o{};
      o.fh = opened.handle;
      o.open_flags = FOPEN_DIRECT_IO;
      return reply(unique, 0, &e, sizeof(e), &o, sizeof(o));
    }
    case FUSE_READ: {
      const auto* rd = body<fuse_read_in>(buf, len);
      if (!rd) return reply(unique, EINVAL);
      auto r = ov.dispatch(make_request(pid, now, req::Read{rd->fh, rd->offset, rd->size}));
      if (!r.ok()) return reply(unique, r.error);
      const auto& bytes = r.as<resp::Data>().bytes;
      return reply(unique, 0, bytes.data(), bytes.size());
    }
    case FUSE_WRITE: {
      const auto* w = body<fuse_write_in>(buf, len);
      if (!w) return reply(unique, EINVAL);
      const auto* data = buf + sizeof(fuse_in_header) + sizeof(fuse_write_in);
      const std::size_t avail = len - sizeof(fuse_in_header) - sizeof(fuse_write_in);
      std::span<const std::uint8_t> span(data, std::min<std::size_t>(w->size, avail));
      auto r = ov.dispatch(make_request(pid, now, req::Write{w->fh, w->offset, span}));
      if (!r.ok()) return reply(unique, r.error);
      fuse_write_out out{};
      out.size = static_cast<std::uint32_t>(r.as<resp::Written>().count);
      return reply(unique, 0, &out, sizeof(out));
    }
    case FUSE_RELEASE: {
      const auto* rl = body<fuse_release_in>(buf, len);
      if (!rl) return reply(unique, EINVAL);
      // Release may arrive after the opener exited; attribute it to the owner.
      auto entry = ov.handles().get(rl->fh);
      const Pid owner = entry ? entry->owner : pid;
      ov.dispatch(make_request(owner, now, req::Release{rl->fh}));
      return reply(unique, 0);
    }
    case FUSE_OPENDIR: {
      auto r = ov.dispatch(make_request(pid, now, req::ReadDir{path_of(in->nodeid)}));
      if (!r.ok()) return reply(unique, r.error);
      fuse_open_out out{};
      out.fh = next_dir_handle++;
      {
        std::lock_guard lock(dirs_mu);
        dir_listings[out.fh] = r.as<resp::Entries>().entries;
      }
      return reply(unique, 0, &out, sizeof(out));
    }
    case FUSE_READDIR: {
      const auto* rd = body<fuse_read_in>(buf, len);
      if (!rd) return reply(unique, EINVAL);
      std::vector<char> out;
      std::lock_guard lock(dirs_mu);
      auto it = dir_listings.find(rd->fh);
      if (it == dir_listings.end()) return reply(unique, EBADF);
      for (std::size_t i = rd->offset; i < it->second.size(); ++i) {
        const auto& de = it->second[i];
        const std::size_t entlen = FUSE_NAME_OFFSET + de.name.size();
        const std::size_t padded = FUSE_DIRENT_ALIGN(entlen);
        if (out.size() + padded > rd->size) break;
        std::vector<char> rec(padded, 0);
        auto* d = reinterpret_cast<fuse_dirent*>(rec.data());
        d->ino = de.ino;
        d->off = i + 1;
        d->namelen = static_cast<std::uint32_t>(de.name.size());
        d->type = de.type;
        std::memcpy(rec.data() + FUSE_NAME_OFFSET, de.name.data(), de.name.size());
        out.insert(out.end(), rec.begin(), rec.end());
      }
      return reply(unique, 0, out.data(), out.size());
    }
    case FUSE_RELEASEDIR: {
      const auto* rl = body<fuse_release_in>(buf, len);
      if (rl) {
        std::lock_guard lock(dirs_mu);
        dir_listings.erase(rl->fh);
      }
      return reply(unique, 0);
    }
    case FUSE_STATFS: {
      struct statvfs sv {};
      if (::statvfs(ov.config().underlay_root.c_str(), &sv) != 0) return reply(unique, errno);
      fuse_statfs_out out{};
      out.st.blocks = sv.f_blocks;
      out.st.bfree = sv.f_bfree;
      out.st.bavail = sv.f_bavail;
      out.st.files = sv.f_files;
      out.st.ffree = sv.f_ffree;
      out.st.bsize = static_cast<std::uint32_t>(sv.f_bsize);
      out.st.namelen = static_cast<std::uint32_t>(sv.f_namemax);
      out.st.frsize = static_cast<std::uint32_t>(sv.f_frsize);
      return reply(unique, 0, &out, sizeof(out));
    }
    case FUSE_FLUSH:
    case FUSE_FSYNC:
    case FUSE_FSYNCDIR:
    case FUSE_ACCESS:
      return reply(unique, 0);
    default:
      return reply(unique, ENOSYS);
  }
}

}  // namespace guardfs::fuse
