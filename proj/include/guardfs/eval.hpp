#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "guardfs/adversary.hpp"
#include "guardfs/defense.hpp"
#include "guardfs/detector.hpp"
#include "guardfs/verdict_channel.hpp"

namespace guardfs::eval {

// ---------------------------------------------------------------- snapshots

/// Digest recorded for a file that could not be read.
inline constexpr std::string_view kUnreadableDigest = "unreadable";

struct FileDigest {
  std::string sha256;
  std::uint64_t size = 0;

  bool operator==(const FileDigest&) const = default;
};

struct SnapshotManifest {
  std::map<std::string, FileDigest> files;  // relative path -> digest
  UnixMillis captured_at = 0;
};

/// Every regular file under `root` (symlinks are not followed).
SnapshotManifest snapshot(const std::filesystem::path& root);

/// `captured_at` on the first line, then `sha256 size path` lines.
void write_snapshot(const std::filesystem::path& path, const SnapshotManifest& m);
SnapshotManifest read_snapshot(const std::filesystem::path& path);

struct LossReport {
  std::vector<std::string> files_modified;  // baseline paths, sorted
  std::uint64_t bytes_lost = 0;
};

/// A baseline file is lost when its digest no longer occurs anywhere in
/// `after`; a renamed but intact file is not lost. Baseline paths under any
/// `excluded` prefix are skipped (legitimate rewrites by benign workloads).
LossReport bytes_lost(const SnapshotManifest& baseline, const SnapshotManifest& after,
                      const std::vector<std::string>& excluded = {});

/// Baseline bytes the sample would encrypt: files matching its suffixes and
/// not hidden.
std::uint64_t eligible_bytes(const SnapshotManifest& baseline, const adversary::RansomSpec& spec);

// ---------------------------------------------------------------- bounds

struct ThroughputModel {
  double delta = 0.0;    // underlay throughput, bytes/s
  double epsilon = 0.0;  // encryption rate, bytes/s
  double beta = 0.0;     // throughput of all malicious processes, bytes/s
  double t = 0.0;        // gate period, s

  void validate() const;
};

struct BufferBound {
  double literal = 0.0;  // min(δ,ε) + min(δ,β)·T, as printed
  double product = 0.0;  // (min(δ,ε) + min(δ,β))·T
};

BufferBound buffer_bound(const ThroughputModel& m);
/// min(δ,ε)·T/2.
double expected_loss(const ThroughputModel& m);

/// Sequential write of `bytes` into `dir` (normally through a mount),
/// fsynced; returns bytes per second. The file is removed afterwards.
double calibrate_throughput(const std::filesystem::path& dir, std::uint64_t bytes = 256ull << 20);

// ---------------------------------------------------------------- resources

struct ResourceSample {
  UnixMillis ts = 0;
  Pid pid = 0;
  double cpu_percent = 0.0;
  std::uint64_t rss_bytes = 0;
  std::string workload;
  std::string guard;
};

/// Samples /proc/<pid>/stat for registered process trees at a fixed cadence
/// on its own thread.
class ResourceSampler {
 public:
  explicit ResourceSampler(std::chrono::milliseconds cadence = std::chrono::milliseconds(200),
                           std::string guard = "");
  ~ResourceSampler();
  ResourceSampler(const ResourceSampler&) = delete;
  ResourceSampler& operator=(const ResourceSampler&) = delete;

  /// Tracks `pid` and, when `tree` is set, every descendant that appears.
  void add(Pid pid, const std::string& workload, bool tree = true);
  void start();
  void stop();

  std::vector<ResourceSample> samples() const;
  /// Ticks where a live PID's stat could not be read.
  std::uint64_t gaps() const { return gaps_.load(); }

 private:
  struct Tracked {
    std::string workload;
    bool tree = false;
  };
  struct Last {
    std::uint64_t ticks = 0;
    std::chrono::steady_clock::time_point at;
    std::string workload;
  };
  void tick();
  void loop();

  std::chrono::milliseconds cadence_;
  std::string guard_;
  mutable std::mutex mu_;
  std::map<Pid, Tracked> roots_;
  std::map<Pid, Last> last_;
  std::vector<ResourceSample> samples_;
  std::atomic<std::uint64_t> gaps_{0};
  std::atomic<bool> running_{false};
  std::thread thread_;
};

// ---------------------------------------------------------------- experiments

struct ExperimentPlan {
  std::string label = "run";
  std::filesystem::path corpus;    // pristine tree, copied for every run
  std::filesystem::path work_dir;  // run directories are created here
  defense::DefenseMode mode;
  int window_seconds = 5;
  std::shared_ptr<const detector::Model> model;
  double threshold = 0.5;
  std::optional<adversary::RansomSpec> sample;
  std::vector<adversary::BenignSpec> benign;
  std::chrono::milliseconds cap{300000};
  /// End the run as soon as the sample is flagged.
  bool stop_when_flagged = false;
  /// Launch the sample this far into a window (paired runs see the same
  /// phase); empty launches immediately.
  std::optional<std::chrono::milliseconds> launch_phase;
  std::chrono::milliseconds sample_cadence{200};
  /// Remove the run's underlay copy afterwards (logs are kept).
  bool remove_underlay = true;
  std::vector<std::string> excluded;
};

struct WorkloadRun {
  std::string name;
  std::vector<Pid> pids;
  std::int64_t elapsed_ms = 0;
  int exit_code = 0;
  std::map<std::string, std::string> stats;
};

struct ExperimentReport {
  std::string label;
  std::string mode;
  std::uint64_t seed = 0;
  LossReport loss;
  std::uint64_t eligible_bytes = 0;
  std::uint64_t baseline_bytes = 0;

  std::optional<UnixMillis> first_modifying;
  std::optional<UnixMillis> first_malicious;
  std::optional<std::int64_t> detection_delay_ms;

  bool partial = false;  // sample crashed or was cut off by the cap
  bool cap_reached = false;
  std::int64_t wall_ms = 0;

  std::optional<WorkloadRun> sample;
  std::vector<WorkloadRun> benign;
  std::vector<channel::VerdictRecord> verdicts;
  std::vector<defense::KillEvent> kills;
  std::vector<Pid> malicious_pids;
  std::vector<ResourceSample> resources;

  /// Forwarded modifying calls of flagged PIDs timed after their verdict.
  std::uint64_t post_verdict_forwards = 0;
  /// Lost files no flagged-or-sample PID touched before its verdict.
  std::uint64_t unexplained_losses = 0;

  std::filesystem::path run_dir;
};

/// Copies the corpus, mounts it in `plan.mode`, runs the workloads, and
/// accounts the loss. Needs FUSE.
ExperimentReport run_experiment(const ExperimentPlan& plan);

/// Same protocol in virtual time without a kernel mount: one simulated
/// sample process against an in-process overlay with the embedded detector.
struct SimTrialPlan {
  std::filesystem::path underlay;  // prepared copy, mutated in place
  adversary::RansomSpec sample;
  defense::DefenseMode mode;
  int window_seconds = 5;
  std::shared_ptr<const detector::Model> model;
  double threshold = 0.5;
  UnixNanos start = std::chrono::seconds(1700000000);
  adversary::SimCost cost;
  std::optional<std::chrono::nanoseconds> cap;
  Pid pid = 30000;
};

struct SimTrialReport {
  LossReport loss;
  std::uint64_t eligible_bytes = 0;
  std::optional<std::int64_t> detection_delay_ms;
  std::vector<channel::VerdictRecord> verdicts;
  adversary::WorkStats stats;
  UnixNanos end{};
};

SimTrialReport run_sim_trial(const SimTrialPlan& plan);

// ---------------------------------------------------------------- reports

std::string loss_table_csv(const std::vector<ExperimentReport>& reports);
std::string timing_table_csv(const std::vector<ExperimentReport>& reports);

struct OverheadRow {
  std::string workload;
  std::uint64_t seed = 0;
  std::int64_t baseline_ms = 0;
  std::int64_t guarded_ms = 0;
  double overhead_pct = 0.0;
  double cpu_mean_pct = 0.0;  // workload processes under the guarded run
  std::uint64_t rss_peak = 0;
};

/// Pairs benign runs of `baseline` and `guarded` by workload name.
std::vector<OverheadRow> overhead_rows(const ExperimentReport& baseline,
                                       const ExperimentReport& guarded);
std::string overhead_table_csv(const std::vector<OverheadRow>& rows);

/// Flat `key=value` summary of one run.
std::map<std::string, std::string> summary(const ExperimentReport& r);

double median(std::vector<double> values);

}  // namespace guardfs::eval
