#pragma once

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "guardfs/clock.hpp"
#include "guardfs/defense.hpp"
#include "guardfs/detector.hpp"
#include "guardfs/overlay.hpp"
#include "guardfs/telemetry.hpp"
#include "guardfs/verdict_channel.hpp"

namespace guardfs::session {

/// Feeds requests into an overlay (the kernel bridge, or nothing at all when
/// the caller dispatches in-process).
class CallDriver {
 public:
  virtual ~CallDriver() = default;
  virtual void start(overlay::Overlay& ov) = 0;
  /// Stops delivering requests and returns once in-flight calls are done.
  virtual void stop() = 0;
};

/// Driver for in-process use: callers invoke Overlay::dispatch themselves.
class DirectDriver final : public CallDriver {
 public:
  void start(overlay::Overlay&) override {}
  void stop() override {}
};

struct SessionOptions {
  overlay::MountConfig config;
  /// Embedded detector; null when verdicts only arrive on the channel.
  std::shared_ptr<const detector::Model> model;
  double threshold = 0.5;

  // Optional outputs; empty paths disable them.
  std::filesystem::path event_log;
  std::filesystem::path audit_log;
  std::filesystem::path feature_csv;
  std::filesystem::path verdict_log;

  /// How long a closed gate is held past its boundary when verdicts come
  /// from an external process.
  std::chrono::milliseconds verdict_grace{300};
  /// Expire verdicts of dead PIDs. Off for simulated runs, where PIDs are
  /// synthetic.
  bool collect_dead_pids = true;

  /// Null: the system clock, with a background cycle thread. A virtual clock
  /// turns the session into a simulation driven by run_cycle().
  Clock* clock = nullptr;
};

/// One attached overlay: recorder, engine, detector and driver wired together.
class MountSession {
 public:
  /// Throws overlay::ConfigError when the configuration is invalid or the
  /// overlay root is already attached in this process.
  static std::unique_ptr<MountSession> attach(SessionOptions options,
                                              std::unique_ptr<CallDriver> driver);
  ~MountSession();
  MountSession(const MountSession&) = delete;
  MountSession& operator=(const MountSession&) = delete;

  /// Releases gates, stops the driver, flushes the last window and logs.
  /// Idempotent.
  void detach();
  bool attached() const { return attached_.load(); }

  /// Closes every window ending at or before `now`, classifies and applies
  /// verdicts, then opens the gates that are due.
  void run_cycle(UnixNanos now);

  overlay::Overlay& overlay() { return *overlay_; }
  defense::DefenseEngine& engine() { return *engine_; }
  Clock& clock() { return *clock_; }
  const SessionOptions& options() const { return options_; }

  std::vector<telemetry::FeatureVector> vectors() const;
  /// Verdicts in application order; ts is when they took effect.
  std::vector<channel::VerdictRecord> verdicts() const;
  std::uint64_t skewed_events() const { return recorder_->skewed(); }

 private:
  explicit MountSession(SessionOptions options);
  void apply(const channel::VerdictRecord& r);
  void cycle_loop();
  void channel_loop();

  SessionOptions options_;
  Clock* clock_;
  bool simulated_;
  std::unique_ptr<defense::AuditLog> audit_;
  std::unique_ptr<defense::DefenseEngine> engine_;
  std::unique_ptr<telemetry::EventLog> event_log_;
  std::unique_ptr<telemetry::WindowRecorder> recorder_;
  std::unique_ptr<overlay::Overlay> overlay_;
  std::unique_ptr<detector::LiveDetector> detector_;
  std::unique_ptr<channel::VerdictSource> source_;
  std::unique_ptr<channel::VerdictPublisher> publisher_;
  std::unique_ptr<CallDriver> driver_;
  int feature_fd_ = -1;

  std::mutex cycle_mu_;
  mutable std::mutex out_mu_;
  std::vector<telemetry::FeatureVector> vectors_;
  std::vector<channel::VerdictRecord> verdicts_;
  UnixMillis last_maintain_ = 0;

  std::atomic<bool> attached_{false};
  std::mutex stop_mu_;
  std::condition_variable stop_cv_;
  bool stopping_ = false;
  std::thread cycle_thread_;
  std::thread channel_thread_;
};

}  // namespace guardfs::session
