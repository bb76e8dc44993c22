#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>

#include "guardfs/defense.hpp"
#include "guardfs/syscall.hpp"
#include "guardfs/telemetry.hpp"

namespace guardfs::overlay {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class PathEscapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MountConfig {
  std::filesystem::path overlay_root;
  std::filesystem::path underlay_root;
  defense::DefenseMode mode;
  int window_seconds = 5;
  std::string verdict_channel;  // empty: verdicts come only from the embedded detector
  bool fail_closed = false;     // EIO instead of Forward while the engine is down
  std::optional<defense::GateScope> gate_scope;
  defense::FabricationPolicy fabrication;
  bool propagate_to_descendants = true;

  /// Throws ConfigError.
  void validate() const;
};

/// Overlay path -> underlay path. Pure, lexical; ".." that leaves the overlay
/// root throws PathEscapeError, as does a relative path.
std::filesystem::path map_path(const std::filesystem::path& overlay_path, const MountConfig& cfg);

struct HandleEntry {
  int fd = -1;  // -1 for phantom handles
  std::string path;
  Pid owner = 0;
  bool phantom = false;
};

class FileHandleTable {
 public:
  Handle insert(HandleEntry entry);
  std::optional<HandleEntry> get(Handle h) const;
  /// Removes and returns the entry; the caller closes the fd.
  std::optional<HandleEntry> remove(Handle h);
  std::size_t size() const;
  /// Removes everything, returning the entries.
  std::vector<HandleEntry> drain();

 private:
  mutable std::mutex mu_;
  Handle next_ = 1;
  std::unordered_map<Handle, HandleEntry> entries_;
};

struct DispatchStats {
  std::uint64_t dispatched = 0;
  std::uint64_t forwarded = 0;
  std::uint64_t fabricated = 0;
  std::uint64_t delayed = 0;
  std::uint64_t killed = 0;
  std::uint64_t fail_open = 0;
};

/// The syscall gateway: telemetry, decision, execution or fabrication.
class Overlay {
 public:
  /// Called when a decision says Delay; must return once the gate for
  /// `deadline` is released.
  using GateWait = std::function<void(const CallContext&, UnixNanos deadline, std::uint64_t bytes)>;

  Overlay(MountConfig cfg, defense::DefenseEngine& engine, telemetry::EventSink& sink);
  ~Overlay();
  Overlay(const Overlay&) = delete;
  Overlay& operator=(const Overlay&) = delete;

  SyscallResponse dispatch(const SyscallRequest& req);

  void set_gate_wait(GateWait wait) { gate_wait_ = std::move(wait); }

  const MountConfig& config() const { return cfg_; }
  FileHandleTable& handles() { return handles_; }
  defense::DefenseEngine& engine() { return engine_; }
  DispatchStats stats() const;

  /// Arrival time of each PID's first modifying call.
  std::map<Pid, UnixMillis> first_modifying() const;

  /// Closes every open handle.
  void close_all();

 private:
  struct View {
    std::map<std::string, FileAttr> phantoms;  // overlay path -> attributes
    std::set<std::string> hidden;
  };

  SyscallResponse execute(const SyscallRequest& req, Pid pid);
  SyscallResponse fabricate(const SyscallRequest& req, Pid pid, UnixNanos now);
  std::string event_path(const SyscallRequest& req) const;
  bool hidden_for(Pid pid, const std::string& path) const;
  std::optional<FileAttr> phantom_for(Pid pid, const std::string& path) const;

  MountConfig cfg_;
  defense::DefenseEngine& engine_;
  telemetry::EventSink& sink_;
  FileHandleTable handles_;
  GateWait gate_wait_;

  mutable std::mutex view_mu_;
  std::unordered_map<Pid, View> views_;
  std::atomic<std::uint64_t> next_phantom_ino_{1ull << 48};

  mutable std::mutex stats_mu_;
  DispatchStats stats_;
  std::map<Pid, UnixMillis> first_modifying_;
  std::atomic<bool> warned_fail_open_{false};
};

}  // namespace guardfs::overlay
