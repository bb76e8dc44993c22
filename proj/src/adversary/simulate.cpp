#include <algorithm>

#include "guardfs/adversary.hpp"

namespace guardfs::adversary {

namespace {

constexpr const char* kSimRoot = "/guardfs-sim";

/// One simulated process with its own clock, engine and overlay, all
/// sharing the underlay.
struct SimProc {
  SimProc(const SimOptions& o, const std::filesystem::path& underlay, Pid pid, UnixNanos start)
      : clock(start),
        engine(engine_options(o), clock),
        ov(config(o, underlay), engine, sink),
        fs(ov, clock, pid, nullptr, o.cost) {
    ov.set_gate_wait([this](const CallContext&, UnixNanos deadline, std::uint64_t) {
      clock.sleep_until(deadline);
    });
  }

  static defense::EngineOptions engine_options(const SimOptions& o) {
    defense::EngineOptions eo;
    eo.mode = o.mode;
    eo.propagate_to_descendants = false;
    eo.simulated_kills = true;
    return eo;
  }

  static overlay::MountConfig config(const SimOptions& o, const std::filesystem::path& underlay) {
    overlay::MountConfig cfg;
    cfg.overlay_root = kSimRoot;
    cfg.underlay_root = std::filesystem::absolute(underlay);
    cfg.mode = o.mode;
    if (o.mode.period_s > 0) cfg.window_seconds = o.mode.period_s;
    return cfg;
  }

  VirtualClock clock;
  defense::DefenseEngine engine;
  telemetry::VectorSink sink;
  overlay::Overlay ov;
  OverlayFsClient fs;
};

std::optional<UnixNanos> deadline_of(const SimOptions& o) {
  if (!o.cap) return std::nullopt;
  return o.start + *o.cap;
}

void collect(SimProc& p, SimResult& out) {
  auto events = p.sink.take();
  if (!events.empty() &&
      std::find(out.pids.begin(), out.pids.end(), p.fs.pid()) == out.pids.end()) {
    out.pids.push_back(p.fs.pid());
  }
  out.events.insert(out.events.end(), events.begin(), events.end());
  out.end = std::max(out.end, p.clock.now());
}

void finish(SimResult& out, UnixNanos start) {
  std::stable_sort(out.events.begin(), out.events.end(),
                   [](const auto& a, const auto& b) { return a.ts < b.ts; });
  std::sort(out.pids.begin(), out.pids.end());
  out.stats.duration_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(out.end - start).count();
}

}  // namespace

SimResult simulate_ransomware(const RansomSpec& spec, const std::filesystem::path& underlay,
                              const SimOptions& options) {
  spec.validate();
  SimResult out;
  out.end = options.start;
  const auto deadline = deadline_of(options);

  SimProc coordinator(options, underlay, options.base_pid, options.start);
  const auto files = list_targets(coordinator.fs, kSimRoot, spec);
  if (spec.parallelism == 1) {
    out.stats = encrypt_files(coordinator.fs, spec, files, spec.rate, kSimRoot,
                              worker_seed(spec.seed, 0), deadline);
    collect(coordinator, out);
    finish(out, options.start);
    return out;
  }
  const UnixNanos listed = coordinator.clock.now();
  collect(coordinator, out);
  const auto parts = partition(files, spec.parallelism);
  for (int i = 0; i < spec.parallelism; ++i) {
    SimProc worker(options, underlay, options.base_pid + 1 + i, listed);
    out.stats.merge(encrypt_files(worker.fs, spec, parts[static_cast<std::size_t>(i)],
                                  spec.rate / spec.parallelism, kSimRoot,
                                  worker_seed(spec.seed, i), deadline));
    collect(worker, out);
  }
  finish(out, options.start);
  return out;
}

SimResult simulate_benign(const BenignSpec& spec, const std::filesystem::path& underlay,
                          const SimOptions& options) {
  spec.validate();
  SimResult out;
  out.end = options.start;
  const auto deadline = deadline_of(options);
  for (int i = 0; i < spec.parallelism; ++i) {
    SimProc worker(options, underlay, options.base_pid + i, options.start);
    out.stats.merge(run_benign(worker.fs, spec, kSimRoot, i, deadline));
    collect(worker, out);
  }
  finish(out, options.start);
  return out;
}

}  // namespace guardfs::adversary
