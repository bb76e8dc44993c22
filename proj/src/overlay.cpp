#include "guardfs/overlay.hpp"

#include <dirent.h>
#include <fcntl.h>
#include <spdlog/spdlog.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>

namespace guardfs::overlay {

namespace fs = std::filesystem;
using defense::Action;
using defense::AuditAction;
using defense::GatePhase;

namespace {

std::string strip_trailing_slashes(std::string s) {
  while (s.size() > 1 && s.back() == '/') s.pop_back();
  return s;
}

std::string parent_of(const std::string& path) {
  auto pos = path.rfind('/');
  if (pos == std::string::npos || pos == 0) return "/";
  return path.substr(0, pos);
}

std::string leaf_of(const std::string& path) {
  auto pos = path.rfind('/');
  return pos == std::string::npos ? path : path.substr(pos + 1);
}

}  // namespace

void MountConfig::validate() const {
  if (!overlay_root.is_absolute()) throw ConfigError("overlay_root must be absolute");
  if (!underlay_root.is_absolute()) throw ConfigError("underlay_root must be absolute");
  const auto o = strip_trailing_slashes(overlay_root.lexically_normal().string());
  const auto u = strip_trailing_slashes(underlay_root.lexically_normal().string());
  if (o == u) throw ConfigError("overlay_root and underlay_root must differ");
  if (o.starts_with(u + "/")) throw ConfigError("overlay_root must not lie inside underlay_root");
  std::error_code ec;
  if (!fs::is_directory(underlay_root, ec)) {
    throw ConfigError("underlay_root " + underlay_root.string() + " is not a directory");
  }
  if (window_seconds <= 0) throw ConfigError("window_seconds must be positive");
  try {
    mode.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (fabrication.nominal_throughput <= 0) throw ConfigError("nominal throughput must be positive");
}

fs::path map_path(const fs::path& overlay_path, const MountConfig& cfg) {
  if (!overlay_path.is_absolute()) {
    throw PathEscapeError("overlay path must be absolute: " + overlay_path.string());
  }
  const std::string norm = overlay_path.lexically_normal().string();
  const std::string root = strip_trailing_slashes(cfg.overlay_root.lexically_normal().string());
  const std::string under = strip_trailing_slashes(cfg.underlay_root.lexically_normal().string());
  std::string rest;
  if (root == "/") {
    rest = norm.substr(1);
  } else if (norm == root || norm == root + "/") {
    rest = norm.substr(root.size());
    if (!rest.empty()) rest.erase(0, 1);
  } else if (norm.starts_with(root + "/")) {
    rest = norm.substr(root.size() + 1);
  } else {
    throw PathEscapeError("path escapes overlay root: " + overlay_path.string());
  }
  if (rest.empty()) {
    const bool slash = !norm.empty() && norm.back() == '/';
    return fs::path(under == "/" ? "/" : under + (slash ? "/" : ""));
  }
  return fs::path(under == "/" ? "/" + rest : under + "/" + rest);
}

Handle FileHandleTable::insert(HandleEntry entry) {
  std::lock_guard lock(mu_);
  Handle h = next_++;
  entries_.emplace(h, std::move(entry));
  return h;
}

std::optional<HandleEntry> FileHandleTable::get(Handle h) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(h);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::optional<HandleEntry> FileHandleTable::remove(Handle h) {
  std::lock_guard lock(mu_);
  auto it = entries_.find(h);
  if (it == entries_.end()) return std::nullopt;
  HandleEntry e = std::move(it->second);
  entries_.erase(it);
  return e;
}

std::size_t FileHandleTable::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::vector<HandleEntry> FileHandleTable::drain() {
  std::lock_guard lock(mu_);
  std::vector<HandleEntry> out;
  out.reserve(entries_.size());
  for (auto& [h, e] : entries_) out.push_back(std::move(e));
  entries_.clear();
  return out;
}

Overlay::Overlay(MountConfig cfg, defense::DefenseEngine& engine, telemetry::EventSink& sink)
    : cfg_(std::move(cfg)), engine_(engine), sink_(sink) {
  cfg_.validate();
  gate_wait_ = [this](const CallContext& ctx, UnixNanos deadline, std::uint64_t bytes) {
    engine_.gates().wait(ctx.pid, deadline, bytes);
  };
}

Overlay::~Overlay() { close_all(); }

void Overlay::close_all() {
  for (auto& e : handles_.drain()) {
    if (e.fd >= 0) ::close(e.fd);
  }
}

DispatchStats Overlay::stats() const {
  std::lock_guard lock(stats_mu_);
  return stats_;
}

std::map<Pid, UnixMillis> Overlay::first_modifying() const {
  std::lock_guard lock(stats_mu_);
  return first_modifying_;
}

std::string Overlay::event_path(const SyscallRequest& req) const {
  return std::visit(
      [&](const auto& p) -> std::string {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, req::Rename>) {
          return p.from;
        } else if constexpr (std::is_same_v<P, req::Read> || std::is_same_v<P, req::Write> ||
                             std::is_same_v<P, req::Release>) {
          auto h = handles_.get(p.handle);
          return h ? h->path : std::string();
        } else {
          return p.path;
        }
      },
      req.payload);
}

bool Overlay::hidden_for(Pid pid, const std::string& path) const {
  std::lock_guard lock(view_mu_);
  auto it = views_.find(pid);
  return it != views_.end() && it->second.hidden.contains(path);
}

std::optional<FileAttr> Overlay::phantom_for(Pid pid, const std::string& path) const {
  std::lock_guard lock(view_mu_);
  auto it = views_.find(pid);
  if (it == views_.end()) return std::nullopt;
  auto p = it->second.phantoms.find(path);
  if (p == it->second.phantoms.end()) return std::nullopt;
  return p->second;
}

SyscallResponse Overlay::dispatch(const SyscallRequest& req) {
  const CallKind kind = req.kind();
  CallContext ctx = req.ctx;
  ctx.op = kind;

  telemetry::FsEvent ev;
  ev.ts = to_millis(ctx.timestamp);
  ev.pid = ctx.pid;
  ev.op = kind;
  ev.path = event_path(req);
  std::uint64_t write_bytes = 0;
  if (const auto* w = std::get_if<req::Write>(&req.payload)) {
    write_bytes = w->data.size();
    ev.bytes = write_bytes;
    ev.entropy = telemetry::shannon_entropy(w->data);
  } else if (const auto* r = std::get_if<req::Read>(&req.payload)) {
    ev.bytes = r->size;
  }
  const UnixMillis filed = sink_.record(ev);
  if (from_millis(filed) > ctx.timestamp) ctx.timestamp = from_millis(filed);

  // An open that truncates is decided as the truncation it performs.
  bool trunc_open = false;
  if (const auto* o = std::get_if<req::Open>(&req.payload)) {
    trunc_open = (o->flags & O_TRUNC) != 0;
    if (trunc_open) ctx.op = CallKind::Truncate;
  }

  {
    std::lock_guard lock(stats_mu_);
    ++stats_.dispatched;
    if (is_modifying(ctx.op)) first_modifying_.try_emplace(ctx.pid, filed);
  }

  if (!engine_.available()) {
    if (!warned_fail_open_.exchange(true)) {
      spdlog::warn("defense engine unavailable; {} calls", cfg_.fail_closed ? "failing" : "forwarding");
    }
    if (cfg_.fail_closed) return SyscallResponse::failure(EIO);
    std::lock_guard lock(stats_mu_);
    ++stats_.fail_open;
    ++stats_.forwarded;
  } else {
    GatePhase phase = GatePhase::Fresh;
    while (true) {
      const Action action = engine_.decide(ctx, phase);
      if (action.kind == Action::Kind::Delay) {
        engine_.audit(ctx, AuditAction::Delay);
        {
          std::lock_guard lock(stats_mu_);
          ++stats_.delayed;
        }
        gate_wait_(ctx, action.deadline, write_bytes);
        phase = GatePhase::Released;
        continue;
      }
      if (action.kind == Action::Kind::Kill) {
        engine_.audit(ctx, AuditAction::Kill);
        engine_.request_kill(ctx.pid);
        std::lock_guard lock(stats_mu_);
        ++stats_.killed;
        return SyscallResponse::failure(EINTR);
      }
      if (action.kind == Action::Kind::Fabricate) {
        engine_.audit(ctx, AuditAction::Fabricate);
        {
          std::lock_guard lock(stats_mu_);
          ++stats_.fabricated;
        }
        if (trunc_open) {
          // The open itself is genuine; only the truncation is withheld.
          SyscallRequest plain = req;
          std::get<req::Open>(plain.payload).flags &= ~O_TRUNC;
          return execute(plain, ctx.pid);
        }
        engine_.clock().sleep_for(cfg_.fabrication.delay_for(write_bytes));
        return fabricate(req, ctx.pid, engine_.clock().now());
      }
      engine_.audit(ctx, AuditAction::Forward);
      std::lock_guard lock(stats_mu_);
      ++stats_.forwarded;
      break;
    }
  }
  return execute(req, ctx.pid);
}

SyscallResponse Overlay::fabricate(const SyscallRequest& req, Pid pid, UnixNanos now) {
  defense::FabricationContext fc;
  fc.now = now;
  std::lock_guard lock(view_mu_);
  auto& view = views_[pid];
  auto base_attr = [&](const std::string& path) -> std::optional<FileAttr> {
    if (auto it = view.phantoms.find(path); it != view.phantoms.end()) return it->second;
    struct ::stat st {};
    try {
      if (::lstat(map_path(path, cfg_).c_str(), &st) == 0) return attr_from_stat(st);
    } catch (const PathEscapeError&) {
    }
    return std::nullopt;
  };

  if (const auto* c = std::get_if<req::Create>(&req.payload)) {
    fc.phantom_handle = handles_.insert(HandleEntry{-1, c->path, pid, true});
    auto r = fabricate_response(req, fc);
    auto& opened = std::get<resp::Opened>(r.result);
    opened.attr.ino = next_phantom_ino_++;
    view.phantoms[c->path] = opened.attr;
    view.hidden.erase(c->path);
    return r;
  }
  if (const auto* m = std::get_if<req::Mkdir>(&req.payload)) {
    auto r = fabricate_response(req, fc);
    auto& attr = std::get<resp::Attr>(r.result).attr;
    attr.ino = next_phantom_ino_++;
    view.phantoms[m->path] = attr;
    view.hidden.erase(m->path);
    return r;
  }
  if (const auto* t = std::get_if<req::Truncate>(&req.payload)) {
    std::string path = t->path;
    if (t->handle) {
      if (auto h = handles_.get(*t->handle)) path = h->path;
    }
    fc.base = base_attr(path);
    auto r = fabricate_response(req, fc);
    if (view.phantoms.contains(path)) view.phantoms[path] = std::get<resp::Attr>(r.result).attr;
    return r;
  }
  if (const auto* u = std::get_if<req::Unlink>(&req.payload)) {
    if (!view.phantoms.erase(u->path)) {
      if (!base_attr(u->path) || view.hidden.contains(u->path)) return SyscallResponse::failure(ENOENT);
      view.hidden.insert(u->path);
    }
    return fabricate_response(req, fc);
  }
  if (const auto* d = std::get_if<req::Rmdir>(&req.payload)) {
    if (!view.phantoms.erase(d->path)) {
      if (!base_attr(d->path) || view.hidden.contains(d->path)) return SyscallResponse::failure(ENOENT);
      view.hidden.insert(d->path);
    }
    return fabricate_response(req, fc);
  }
  if (const auto* rn = std::get_if<req::Rename>(&req.payload)) {
    if (view.hidden.contains(rn->from)) return SyscallResponse::failure(ENOENT);
    auto attr = base_attr(rn->from);
    if (!attr) return SyscallResponse::failure(ENOENT);
    view.phantoms.erase(rn->from);
    view.hidden.insert(rn->from);
    view.hidden.erase(rn->to);
    view.phantoms[rn->to] = *attr;
    return fabricate_response(req, fc);
  }
  if (const auto* w = std::get_if<req::Write>(&req.payload)) {
    auto r = fabricate_response(req, fc);
    if (auto h = handles_.get(w->handle)) {
      if (auto it = view.phantoms.find(h->path); it != view.phantoms.end()) {
        it->second.size = std::max<std::uint64_t>(it->second.size, w->offset + w->data.size());
        it->second.mtime_ns = now.count();
      }
    }
    return r;
  }
  return fabricate_response(req, fc);
}

SyscallResponse Overlay::execute(const SyscallRequest& req, Pid pid) {
  auto errno_response = [] { return SyscallResponse::failure(errno); };
  auto stat_response = [&](const std::string& underlay) {
    struct ::stat st {};
    if (::lstat(underlay.c_str(), &st) != 0) return errno_response();
    return SyscallResponse{0, resp::Attr{attr_from_stat(st)}};
  };

  try {
    return std::visit(
        [&](const auto& p) -> SyscallResponse {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, req::Open>) {
            if (hidden_for(pid, p.path)) return SyscallResponse::failure(ENOENT);
            if (auto ph = phantom_for(pid, p.path)) {
              return {0, resp::Opened{handles_.insert(HandleEntry{-1, p.path, pid, true}), *ph}};
            }
            const auto u = map_path(p.path, cfg_);
            int fd = ::open(u.c_str(), (p.flags & ~(O_CREAT | O_EXCL)) | O_CLOEXEC);
            if (fd < 0) return errno_response();
            struct ::stat st {};
            ::fstat(fd, &st);
            return {0, resp::Opened{handles_.insert(HandleEntry{fd, p.path, pid, false}),
                                    attr_from_stat(st)}};
          } else if constexpr (std::is_same_v<P, req::Create>) {
            const auto u = map_path(p.path, cfg_);
            int fd = ::open(u.c_str(), p.flags | O_CREAT | O_CLOEXEC, p.mode);
            if (fd < 0) return errno_response();
            {
              std::lock_guard lock(view_mu_);
              if (auto it = views_.find(pid); it != views_.end()) {
                it->second.hidden.erase(p.path);
                it->second.phantoms.erase(p.path);
              }
            }
            struct ::stat st {};
            ::fstat(fd, &st);
            return {0, resp::Opened{handles_.insert(HandleEntry{fd, p.path, pid, false}),
                                    attr_from_stat(st)}};
          } else if constexpr (std::is_same_v<P, req::Read>) {
            auto h = handles_.get(p.handle);
            if (!h) return SyscallResponse::failure(EBADF);
            if (h->phantom) return {0, resp::Data{}};
            resp::Data d;
            d.bytes.resize(p.size);
            std::size_t got = 0;
            while (got < p.size) {
              ssize_t n = ::pread(h->fd, d.bytes.data() + got, p.size - got,
                                  static_cast<off_t>(p.offset + got));
              if (n < 0) {
                if (errno == EINTR) continue;
                return errno_response();
              }
              if (n == 0) break;
              got += static_cast<std::size_t>(n);
            }
            d.bytes.resize(got);
            return {0, std::move(d)};
          } else if constexpr (std::is_same_v<P, req::Write>) {
            auto h = handles_.get(p.handle);
            if (!h) return SyscallResponse::failure(EBADF);
            if (h->phantom) return {0, resp::Written{p.data.size()}};
            std::size_t put = 0;
            while (put < p.data.size()) {
              ssize_t n = ::pwrite(h->fd, p.data.data() + put, p.data.size() - put,
                                   static_cast<off_t>(p.offset + put));
              if (n < 0) {
                if (errno == EINTR) continue;
                if (put > 0) break;
                return errno_response();
              }
              put += static_cast<std::size_t>(n);
            }
            return {0, resp::Written{put}};
          } else if constexpr (std::is_same_v<P, req::Rename>) {
            if (hidden_for(pid, p.from)) return SyscallResponse::failure(ENOENT);
            const auto from = map_path(p.from, cfg_);
            const auto to = map_path(p.to, cfg_);
            int rc = p.flags == 0 ? ::rename(from.c_str(), to.c_str())
                                  : ::renameat2(AT_FDCWD, from.c_str(), AT_FDCWD, to.c_str(), p.flags);
            if (rc != 0) return errno_response();
            return {0, resp::Done{}};
          } else if constexpr (std::is_same_v<P, req::Unlink>) {
            if (hidden_for(pid, p.path)) return SyscallResponse::failure(ENOENT);
            if (::unlink(map_path(p.path, cfg_).c_str()) != 0) return errno_response();
            return {0, resp::Done{}};
          } else if constexpr (std::is_same_v<P, req::ReadDir>) {
            if (hidden_for(pid, p.path)) return SyscallResponse::failure(ENOENT);
            resp::Entries out;
            if (auto ph = phantom_for(pid, p.path); ph && S_ISDIR(ph->mode)) {
              // Phantom directory: only phantom children.
            } else {
              const auto u = map_path(p.path, cfg_);
              DIR* dir = ::opendir(u.c_str());
              if (dir == nullptr) return errno_response();
              while (auto* de = ::readdir(dir)) {
                std::string name = de->d_name;
                if (name == "." || name == "..") continue;
                out.entries.push_back(DirEntry{name, de->d_ino, de->d_type});
              }
              ::closedir(dir);
            }
            std::lock_guard lock(view_mu_);
            if (auto it = views_.find(pid); it != views_.end()) {
              const std::string dir = strip_trailing_slashes(p.path);
              std::erase_if(out.entries, [&](const DirEntry& e) {
                return it->second.hidden.contains(dir + "/" + e.name);
              });
              for (const auto& [path, attr] : it->second.phantoms) {
                if (parent_of(path) != dir) continue;
                const std::string name = leaf_of(path);
                bool present = std::any_of(out.entries.begin(), out.entries.end(),
                                           [&](const DirEntry& e) { return e.name == name; });
                if (!present) {
                  out.entries.push_back(
                      DirEntry{name, attr.ino, S_ISDIR(attr.mode) ? unsigned(DT_DIR) : unsigned(DT_REG)});
                }
              }
            }
            std::sort(out.entries.begin(), out.entries.end(),
                      [](const DirEntry& a, const DirEntry& b) { return a.name < b.name; });
            return {0, std::move(out)};
          } else if constexpr (std::is_same_v<P, req::GetAttr>) {
            if (hidden_for(pid, p.path)) return SyscallResponse::failure(ENOENT);
            if (auto ph = phantom_for(pid, p.path)) return {0, resp::Attr{*ph}};
            return stat_response(map_path(p.path, cfg_).string());
          } else if constexpr (std::is_same_v<P, req::Mkdir>) {
            const auto u = map_path(p.path, cfg_);
            if (::mkdir(u.c_str(), p.mode) != 0) return errno_response();
            return stat_response(u.string());
          } else if constexpr (std::is_same_v<P, req::Rmdir>) {
            if (hidden_for(pid, p.path)) return SyscallResponse::failure(ENOENT);
            if (::rmdir(map_path(p.path, cfg_).c_str()) != 0) return errno_response();
            return {0, resp::Done{}};
          } else if constexpr (std::is_same_v<P, req::Truncate>) {
            if (p.handle) {
              auto h = handles_.get(*p.handle);
              if (!h) return SyscallResponse::failure(EBADF);
              if (h->phantom) {
                auto ph = phantom_for(pid, h->path).value_or(FileAttr{});
                ph.size = p.size;
                return {0, resp::Attr{ph}};
              }
              if (::ftruncate(h->fd, static_cast<off_t>(p.size)) != 0) return errno_response();
              struct ::stat st {};
              ::fstat(h->fd, &st);
              return {0, resp::Attr{attr_from_stat(st)}};
            }
            if (hidden_for(pid, p.path)) return SyscallResponse::failure(ENOENT);
            const auto u = map_path(p.path, cfg_);
            if (::truncate(u.c_str(), static_cast<off_t>(p.size)) != 0) return errno_response();
            return stat_response(u.string());
          } else {
            static_assert(std::is_same_v<P, req::Release>);
            auto h = handles_.remove(p.handle);
            if (!h) return SyscallResponse::failure(EBADF);
            if (h->fd >= 0) ::close(h->fd);
            return {0, resp::Done{}};
          }
        },
        req.payload);
  } catch (const PathEscapeError& e) {
    spdlog::warn("rejected call: {}", e.what());
    return SyscallResponse::failure(EACCES);
  }
}

}  // namespace guardfs::overlay
