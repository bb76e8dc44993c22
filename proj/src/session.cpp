#include "guardfs/session.hpp"

#include <fcntl.h>
#include <spdlog/spdlog.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <set>

namespace guardfs::session {

namespace {

std::mutex registry_mu;
std::set<std::string> registry;

std::string registry_key(const overlay::MountConfig& cfg) {
  return cfg.overlay_root.lexically_normal().string();
}

}  // namespace

MountSession::MountSession(SessionOptions options)
    : options_(std::move(options)),
      clock_(options_.clock ? options_.clock : &system_clock()),
      simulated_(options_.clock != nullptr) {}

std::unique_ptr<MountSession> MountSession::attach(SessionOptions options,
                                                   std::unique_ptr<CallDriver> driver) {
  options.config.validate();
  if (!driver) throw std::invalid_argument("attach needs a call driver");
  const auto key = registry_key(options.config);
  {
    std::lock_guard lock(registry_mu);
    if (!registry.insert(key).second) {
      throw overlay::ConfigError("overlay root " + key + " is already attached");
    }
  }

  std::unique_ptr<MountSession> s;
  try {
    s.reset(new MountSession(std::move(options)));
    const auto& cfg = s->options_.config;
    if (!s->options_.audit_log.empty()) {
      s->audit_ = std::make_unique<defense::AuditLog>(s->options_.audit_log);
    }
    defense::EngineOptions eo;
    eo.mode = cfg.mode;
    eo.scope = cfg.gate_scope;
    eo.fabrication = cfg.fabrication;
    eo.propagate_to_descendants = cfg.propagate_to_descendants && !s->simulated_;
    eo.simulated_kills = s->simulated_;
    s->engine_ = std::make_unique<defense::DefenseEngine>(eo, *s->clock_, s->audit_.get());

    if (!s->options_.event_log.empty()) {
      s->event_log_ = std::make_unique<telemetry::EventLog>(s->options_.event_log);
    }
    s->recorder_ = std::make_unique<telemetry::WindowRecorder>(
        cfg.window_seconds, s->event_log_.get(), to_millis(s->clock_->now()));
    s->overlay_ = std::make_unique<overlay::Overlay>(cfg, *s->engine_, *s->recorder_);

    if (s->options_.model) {
      s->detector_ = std::make_unique<detector::LiveDetector>(s->options_.model,
                                                              s->options_.threshold);
    }
    if (!cfg.verdict_channel.empty()) {
      s->source_ = channel::make_source(channel::Endpoint::parse(cfg.verdict_channel));
    }
    if (!s->options_.verdict_log.empty()) {
      s->publisher_ = std::make_unique<channel::FileVerdictPublisher>(s->options_.verdict_log);
    }
    if (!s->options_.feature_csv.empty()) {
      s->feature_fd_ = ::open(s->options_.feature_csv.c_str(),
                              O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
      if (s->feature_fd_ < 0) {
        throw std::runtime_error("cannot open " + s->options_.feature_csv.string() + ": " +
                                 std::strerror(errno));
      }
      std::string header(telemetry::kFeatureCsvHeader);
      header += '\n';
      if (::write(s->feature_fd_, header.data(), header.size()) < 0) {
        spdlog::warn("feature csv write failed: {}", std::strerror(errno));
      }
    }

    if (s->simulated_) {
      // Virtual time: waiting at a gate means jumping to its deadline.
      MountSession* self = s.get();
      s->overlay_->set_gate_wait([self](const CallContext&, UnixNanos deadline, std::uint64_t) {
        self->clock_->sleep_until(deadline);
        self->run_cycle(deadline);
      });
    }

    s->driver_ = std::move(driver);
    s->driver_->start(*s->overlay_);
    s->attached_ = true;
    if (!s->simulated_) {
      s->cycle_thread_ = std::thread([self = s.get()] { self->cycle_loop(); });
      if (s->source_) s->channel_thread_ = std::thread([self = s.get()] { self->channel_loop(); });
    }
  } catch (...) {
    std::lock_guard lock(registry_mu);
    registry.erase(key);
    throw;
  }
  spdlog::info("attached {} -> {} ({})", s->options_.config.overlay_root.string(),
               s->options_.config.underlay_root.string(),
               defense::to_string(s->options_.config.mode));
  return s;
}

MountSession::~MountSession() {
  try {
    detach();
  } catch (const std::exception& e) {
    spdlog::error("detach failed: {}", e.what());
  }
}

void MountSession::detach() {
  if (!attached_.exchange(false)) return;
  engine_->gates().open_all();
  driver_->stop();
  {
    std::lock_guard lock(stop_mu_);
    stopping_ = true;
  }
  stop_cv_.notify_all();
  if (cycle_thread_.joinable()) cycle_thread_.join();
  if (channel_thread_.joinable()) channel_thread_.join();

  // Flush the partially filled window as well.
  const auto window = std::chrono::seconds(options_.config.window_seconds);
  run_cycle(next_boundary(clock_->now(), window));

  if (event_log_) event_log_->flush();
  if (audit_) audit_->flush();
  if (feature_fd_ >= 0) {
    ::close(feature_fd_);
    feature_fd_ = -1;
  }
  overlay_->close_all();
  engine_->join_kills();
  std::lock_guard lock(registry_mu);
  registry.erase(registry_key(options_.config));
}

void MountSession::apply(const channel::VerdictRecord& r) {
  engine_->on_verdict(r.pid, r.state, r.ts);
  // Stamped after the store update: any call timed later sees the verdict.
  channel::VerdictRecord effective = r;
  effective.ts = std::max(r.ts, to_millis(clock_->now()));
  if (publisher_) publisher_->publish(effective);
  std::lock_guard lock(out_mu_);
  verdicts_.push_back(effective);
}

void MountSession::run_cycle(UnixNanos now) {
  std::lock_guard lock(cycle_mu_);
  const auto window = std::chrono::seconds(options_.config.window_seconds);
  const UnixNanos boundary = window_floor(now, window);
  try {
    for (const auto& w : recorder_->close_until(to_millis(boundary))) {
      auto vs = telemetry::aggregate(w);
      if (feature_fd_ >= 0 && !vs.empty()) {
        std::string rows;
        for (const auto& v : vs) {
          rows += telemetry::format_feature_row(v);
          rows += '\n';
        }
        if (::write(feature_fd_, rows.data(), rows.size()) < 0) {
          spdlog::warn("feature csv write failed: {}", std::strerror(errno));
        }
      }
      if (detector_) {
        for (const auto& r : detector_->classify(vs, to_millis(now))) apply(r);
      }
      std::lock_guard out(out_mu_);
      vectors_.insert(vectors_.end(), vs.begin(), vs.end());
    }
    if (options_.collect_dead_pids && !simulated_ && to_millis(now) - last_maintain_ >= 1000) {
      engine_->maintain(to_millis(now));
      last_maintain_ = to_millis(now);
    }
    if (!engine_->available()) {
      spdlog::info("defense engine recovered");
      engine_->set_available(true);
    }
  } catch (const std::exception& e) {
    // Calls keep flowing (fail-open or fail-closed per config) until the
    // next cycle succeeds.
    spdlog::error("window cycle failed: {}", e.what());
    engine_->set_available(false);
  }
  const auto grace = source_ && !detector_ ? options_.verdict_grace : std::chrono::milliseconds(0);
  engine_->gates().release_through(simulated_ ? now : now - grace);
}

void MountSession::cycle_loop() {
  std::unique_lock lock(stop_mu_);
  while (!stopping_) {
    lock.unlock();
    run_cycle(clock_->now());
    lock.lock();
    stop_cv_.wait_for(lock, std::chrono::milliseconds(20), [this] { return stopping_; });
  }
}

void MountSession::channel_loop() {
  std::unique_lock lock(stop_mu_);
  while (!stopping_) {
    lock.unlock();
    try {
      for (const auto& r : source_->poll()) {
        std::lock_guard cycle(cycle_mu_);
        apply(r);
      }
    } catch (const std::exception& e) {
      spdlog::warn("verdict channel poll failed: {}", e.what());
    }
    lock.lock();
    stop_cv_.wait_for(lock, std::chrono::milliseconds(10), [this] { return stopping_; });
  }
}

std::vector<telemetry::FeatureVector> MountSession::vectors() const {
  std::lock_guard lock(out_mu_);
  return vectors_;
}

std::vector<channel::VerdictRecord> MountSession::verdicts() const {
  std::lock_guard lock(out_mu_);
  return verdicts_;
}

}  // namespace guardfs::session
