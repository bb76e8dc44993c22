#include "guardfs/eval.hpp"

#include <fcntl.h>
#include <spdlog/spdlog.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "guardfs/digest.hpp"
#include "guardfs/fuse.hpp"
#include "guardfs/process.hpp"
#include "guardfs/session.hpp"
#include "guardfs/telemetry.hpp"
#include "guardfs/textio.hpp"

namespace fs = std::filesystem;

namespace guardfs::eval {

namespace {

UnixMillis now_ms() { return to_millis(system_clock().now()); }

bool hidden_component(const std::string& rel) {
  for (const auto& part : fs::path(rel)) {
    const auto s = part.string();
    if (!s.empty() && s[0] == '.' && s != "." && s != "..") return true;
  }
  return false;
}

bool under_prefix(const std::string& rel, const std::string& prefix) {
  if (prefix.empty()) return false;
  if (rel == prefix) return true;
  const std::string p = prefix.ends_with('/') ? prefix : prefix + "/";
  return rel.starts_with(p);
}

std::string relative_to(const std::string& path, const std::string& root) {
  const std::string r = root.ends_with('/') ? root : root + "/";
  return path.starts_with(r) ? path.substr(r.size()) : path;
}

}  // namespace

// ---------------------------------------------------------------- snapshots

SnapshotManifest snapshot(const fs::path& root) {
  SnapshotManifest m;
  m.captured_at = now_ms();
  std::error_code ec;
  fs::recursive_directory_iterator it(root, fs::directory_options::skip_permission_denied, ec);
  if (ec) throw std::runtime_error("cannot walk " + root.string() + ": " + ec.message());
  for (const auto& entry : it) {
    if (!entry.is_regular_file(ec) || entry.is_symlink(ec)) continue;
    const auto rel = entry.path().lexically_relative(root).generic_string();
    FileDigest d;
    d.size = entry.file_size(ec);
    if (ec) d.size = 0;
    auto digest = sha256_file(entry.path());
    d.sha256 = digest ? *digest : std::string(kUnreadableDigest);
    m.files.emplace(rel, std::move(d));
  }
  return m;
}

void write_snapshot(const fs::path& path, const SnapshotManifest& m) {
  std::string out = "captured_at " + std::to_string(m.captured_at) + "\n";
  for (const auto& [p, d] : m.files) {
    out += d.sha256 + " " + std::to_string(d.size) + " " + telemetry::percent_encode(p) + "\n";
  }
  textio::write_file_atomic(path, out);
}

SnapshotManifest read_snapshot(const fs::path& path) {
  std::istringstream in(textio::read_file(path));
  SnapshotManifest m;
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("captured_at ")) {
    throw FormatError(path.string() + ": missing captured_at");
  }
  m.captured_at = textio::parse_int<UnixMillis>(line.substr(12));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto parts = textio::split_ws(line);
    if (parts.size() != 3) throw FormatError(path.string() + ": bad line '" + line + "'");
    m.files[telemetry::percent_decode(parts[2])] =
        FileDigest{std::string(parts[0]), textio::parse_int<std::uint64_t>(parts[1])};
  }
  return m;
}

LossReport bytes_lost(const SnapshotManifest& baseline, const SnapshotManifest& after,
                      const std::vector<std::string>& excluded) {
  std::set<std::string> present;
  for (const auto& [p, d] : after.files) {
    if (d.sha256 != kUnreadableDigest) present.insert(d.sha256);
  }
  LossReport r;
  for (const auto& [p, d] : baseline.files) {
    if (std::any_of(excluded.begin(), excluded.end(),
                    [&](const std::string& x) { return under_prefix(p, x); })) {
      continue;
    }
    if (d.sha256 == kUnreadableDigest || !present.count(d.sha256)) {
      r.files_modified.push_back(p);
      r.bytes_lost += d.size;
    }
  }
  return r;
}

std::uint64_t eligible_bytes(const SnapshotManifest& baseline, const adversary::RansomSpec& spec) {
  std::uint64_t total = 0;
  for (const auto& [p, d] : baseline.files) {
    const auto name = fs::path(p).filename().string();
    if (hidden_component(p) || name.ends_with(".locked") || name.ends_with(".enc")) continue;
    if (spec.eligible(p)) total += d.size;
  }
  return total;
}

// ---------------------------------------------------------------- bounds

void ThroughputModel::validate() const {
  for (double v : {delta, epsilon, beta, t}) {
    if (!std::isfinite(v) || v < 0) throw std::invalid_argument("throughput model fields must be finite and >= 0");
  }
}

BufferBound buffer_bound(const ThroughputModel& m) {
  m.validate();
  const double a = std::min(m.delta, m.epsilon);
  const double b = std::min(m.delta, m.beta);
  return {a + b * m.t, (a + b) * m.t};
}

double expected_loss(const ThroughputModel& m) {
  m.validate();
  return std::min(m.delta, m.epsilon) * m.t * 0.5;
}

double calibrate_throughput(const fs::path& dir, std::uint64_t bytes) {
  const fs::path file = dir / ".guardfs-calibration";
  const int fd = ::open(file.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0600);
  if (fd < 0) throw std::runtime_error("cannot create " + file.string() + ": " + std::strerror(errno));
  std::vector<std::uint8_t> chunk(1 << 20);
  std::mt19937_64 rng(42);
  for (std::size_t i = 0; i + 8 <= chunk.size(); i += 8) {
    const std::uint64_t v = rng();
    std::memcpy(chunk.data() + i, &v, 8);
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::uint64_t done = 0;
  bool ok = true;
  while (done < bytes && ok) {
    const auto n = static_cast<std::size_t>(std::min<std::uint64_t>(chunk.size(), bytes - done));
    const ssize_t w = ::write(fd, chunk.data(), n);
    if (w <= 0) {
      if (w < 0 && errno == EINTR) continue;
      ok = false;
      break;
    }
    done += static_cast<std::uint64_t>(w);
  }
  ::fsync(fd);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ::close(fd);
  std::error_code ec;
  fs::remove(file, ec);
  if (!ok) throw std::runtime_error("calibration write failed: " + std::string(std::strerror(errno)));
  return secs > 0 ? double(done) / secs : 0.0;
}

// ---------------------------------------------------------------- resources

ResourceSampler::ResourceSampler(std::chrono::milliseconds cadence, std::string guard)
    : cadence_(cadence), guard_(std::move(guard)) {
  if (cadence_.count() <= 0) throw std::invalid_argument("sampling cadence must be positive");
}

ResourceSampler::~ResourceSampler() { stop(); }

void ResourceSampler::add(Pid pid, const std::string& workload, bool tree) {
  std::lock_guard lock(mu_);
  roots_[pid] = Tracked{workload, tree};
}

void ResourceSampler::start() {
  if (running_.exchange(true)) return;
  tick();  // first readings only establish the baseline
  thread_ = std::thread([this] { loop(); });
}

void ResourceSampler::stop() {
  if (!running_.exchange(false)) return;
  if (thread_.joinable()) thread_.join();
}

void ResourceSampler::loop() {
  auto next = std::chrono::steady_clock::now() + cadence_;
  while (running_.load()) {
    std::this_thread::sleep_until(next);
    next += cadence_;
    tick();
  }
}

void ResourceSampler::tick() {
  const double hz = double(proc::clock_ticks_per_second());
  const auto at = std::chrono::steady_clock::now();
  const UnixMillis ts = now_ms();
  std::lock_guard lock(mu_);
  std::map<Pid, std::string> targets;
  for (auto it = roots_.begin(); it != roots_.end();) {
    const auto& [root, t] = *it;
    if (!proc::is_alive(root)) {
      it = roots_.erase(it);
      continue;
    }
    targets.emplace(root, t.workload);
    if (t.tree) {
      for (Pid d : proc::descendants(root)) targets.emplace(d, t.workload);
    }
    ++it;
  }
  for (const auto& [pid, workload] : targets) {
    const auto st = proc::read_stat(pid);
    if (!st) {
      if (proc::is_alive(pid)) ++gaps_;
      last_.erase(pid);
      continue;
    }
    auto found = last_.find(pid);
    if (found != last_.end()) {
      const double dt = std::chrono::duration<double>(at - found->second.at).count();
      const double used = double(st->cpu_ticks - std::min(st->cpu_ticks, found->second.ticks)) / hz;
      samples_.push_back(ResourceSample{ts, pid, dt > 0 ? 100.0 * used / dt : 0.0, st->rss_bytes,
                                        workload, guard_});
    }
    last_[pid] = Last{st->cpu_ticks, at, workload};
  }
  std::erase_if(last_, [&](const auto& kv) { return !targets.count(kv.first); });
}

std::vector<ResourceSample> ResourceSampler::samples() const {
  std::lock_guard lock(mu_);
  return samples_;
}

// ---------------------------------------------------------------- experiments

namespace {

std::optional<UnixMillis> earliest(const std::map<Pid, UnixMillis>& by_pid,
                                   const std::set<Pid>& pids) {
  std::optional<UnixMillis> out;
  for (Pid p : pids) {
    auto it = by_pid.find(p);
    if (it != by_pid.end() && (!out || it->second < *out)) out = it->second;
  }
  return out;
}

std::map<Pid, UnixMillis> first_malicious(const std::vector<channel::VerdictRecord>& verdicts) {
  std::map<Pid, UnixMillis> out;
  for (const auto& v : verdicts) {
    if (v.state == defense::VerdictState::Malicious) out.try_emplace(v.pid, v.ts);
  }
  return out;
}

/// Joins the audit and event logs against the loss report: no modifying call
/// of a flagged PID may have been forwarded after its verdict, and every lost
/// file must have been touched by a sample or flagged PID before its verdict.
void stealth_join(ExperimentReport& r, const fs::path& audit_log, const fs::path& event_log,
                  const std::string& overlay_root, const std::set<Pid>& sample) {
  const auto flagged = first_malicious(r.verdicts);
  if (fs::exists(audit_log)) {
    for (const auto& a : defense::AuditLog::read(audit_log)) {
      auto it = flagged.find(a.pid);
      if (it != flagged.end() && a.action == defense::AuditAction::Forward &&
          is_modifying(a.kind) && a.ts > it->second) {
        ++r.post_verdict_forwards;
      }
    }
  }
  std::set<std::string> lost(r.loss.files_modified.begin(), r.loss.files_modified.end());
  if (lost.empty() || !fs::exists(event_log)) {
    if (!lost.empty()) r.unexplained_losses = lost.size();
    return;
  }
  std::set<std::string> explained;
  for (const auto& e : telemetry::EventLog::read(event_log)) {
    if (!is_modifying(e.op)) continue;
    const bool ours = sample.count(e.pid) || flagged.count(e.pid);
    if (!ours) continue;
    auto it = flagged.find(e.pid);
    if (it != flagged.end() && e.ts > it->second) continue;
    const auto rel = relative_to(e.path, overlay_root);
    if (lost.count(rel)) explained.insert(rel);
  }
  r.unexplained_losses = lost.size() - explained.size();
}

WorkloadRun finish_run(adversary::RunHandle& h, const std::string& name) {
  WorkloadRun w;
  w.name = name;
  w.exit_code = h.wait();
  w.pids = h.pids();
  w.elapsed_ms = h.elapsed().count();
  w.stats = h.stats();
  return w;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentPlan& plan) {
  if (plan.corpus.empty() || !fs::is_directory(plan.corpus)) {
    throw std::invalid_argument("corpus directory " + plan.corpus.string() + " does not exist");
  }
  if (!plan.sample && plan.benign.empty()) throw std::invalid_argument("plan has no workloads");
  if (plan.mode.kind != defense::DefenseMode::Kind::NoDefense && !plan.model) {
    throw std::invalid_argument("defense mode " + defense::to_string(plan.mode) + " needs a model");
  }

  ExperimentReport r;
  r.label = plan.label;
  r.mode = defense::to_string(plan.mode);
  if (plan.sample) r.seed = plan.sample->seed;
  else r.seed = plan.benign.front().seed;

  const fs::path run_dir = fs::absolute(plan.work_dir / plan.label);
  fs::remove_all(run_dir);
  fs::create_directories(run_dir);
  const fs::path underlay = run_dir / "underlay";
  const fs::path mnt = run_dir / "mnt";
  fs::create_directories(mnt);
  fs::copy(plan.corpus, underlay, fs::copy_options::recursive);
  r.run_dir = run_dir;

  const auto baseline = snapshot(underlay);
  write_snapshot(run_dir / "baseline.snapshot", baseline);
  for (const auto& [p, d] : baseline.files) r.baseline_bytes += d.size;
  if (plan.sample) r.eligible_bytes = eligible_bytes(baseline, *plan.sample);

  session::SessionOptions so;
  so.config.overlay_root = mnt;
  so.config.underlay_root = underlay;
  so.config.mode = plan.mode;
  so.config.window_seconds = plan.window_seconds;
  so.model = plan.model;
  so.threshold = plan.threshold;
  so.event_log = run_dir / "events.log";
  so.audit_log = run_dir / "audit.log";
  so.feature_csv = run_dir / "features.csv";
  so.verdict_log = run_dir / "verdicts.log";
  auto session = session::MountSession::attach(so, std::make_unique<fuse::FuseDriver>());

  ResourceSampler sampler(plan.sample_cadence, r.mode);
  sampler.add(::getpid(), "guard", false);
  sampler.start();

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<adversary::RunHandle> benign;
  std::vector<std::string> excluded = plan.excluded;
  for (std::size_t i = 0; i < plan.benign.size(); ++i) {
    const auto& b = plan.benign[i];
    excluded.push_back(b.output_dir());
    benign.push_back(adversary::run_benign_process(
        b, mnt, run_dir / ("benign-" + std::string(adversary::to_string(b.workload)) + "-" +
                           std::to_string(i) + ".stats")));
    sampler.add(benign.back().pid(), std::string(adversary::to_string(b.workload)));
  }

  std::optional<adversary::RunHandle> sample;
  if (plan.sample) {
    if (plan.launch_phase) {
      const auto window = std::chrono::seconds(plan.window_seconds);
      auto at = window_floor(system_clock().now(), window) + *plan.launch_phase;
      if (at <= system_clock().now()) at += window;
      system_clock().sleep_until(at);
    }
    sample.emplace(adversary::run_ransomware(*plan.sample, mnt, run_dir / "sample.stats"));
    sampler.add(sample->pid(), plan.sample->family);
  }

  bool stopped_on_flag = false;
  const auto deadline = t0 + plan.cap;
  while (true) {
    bool busy = sample && sample->running();
    for (auto& b : benign) busy = b.running() || busy;
    if (!busy) break;
    if (std::chrono::steady_clock::now() >= deadline) {
      r.cap_reached = true;
      break;
    }
    if (plan.stop_when_flagged && sample) {
      const auto pids = sample->pids();
      const std::set<Pid> ps(pids.begin(), pids.end());
      const auto flagged = first_malicious(session->verdicts());
      if (std::any_of(flagged.begin(), flagged.end(),
                      [&](const auto& kv) { return ps.count(kv.first) > 0; })) {
        stopped_on_flag = true;
        break;
      }
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }

  if (sample) {
    if (sample->running()) sample->kill();
    r.sample = finish_run(*sample, plan.sample->family);
    if (r.cap_reached) r.partial = true;
    if (r.sample->exit_code != 0 && !stopped_on_flag &&
        plan.mode.kind != defense::DefenseMode::Kind::PKill) {
      r.partial = true;
    }
  }
  for (std::size_t i = 0; i < benign.size(); ++i) {
    if (benign[i].running()) benign[i].kill();
    r.benign.push_back(finish_run(benign[i], std::string(adversary::to_string(plan.benign[i].workload))));
  }
  r.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                  std::chrono::steady_clock::now() - t0).count();
  sampler.stop();
  r.resources = sampler.samples();

  session->detach();
  const auto fm = session->overlay().first_modifying();
  r.verdicts = session->verdicts();
  r.kills = session->engine().kills();
  session.reset();

  std::set<Pid> sample_pids;
  if (r.sample) sample_pids.insert(r.sample->pids.begin(), r.sample->pids.end());
  const auto flagged = first_malicious(r.verdicts);
  for (const auto& [pid, ts] : flagged) r.malicious_pids.push_back(pid);
  r.first_modifying = earliest(fm, sample_pids);
  r.first_malicious = earliest(flagged, sample_pids);
  if (r.first_modifying && r.first_malicious) {
    r.detection_delay_ms = *r.first_malicious - *r.first_modifying;
  }

  const auto after = snapshot(underlay);
  write_snapshot(run_dir / "after.snapshot", after);
  r.loss = bytes_lost(baseline, after, excluded);
  stealth_join(r, so.audit_log, so.event_log, mnt.lexically_normal().string(), sample_pids);

  if (plan.remove_underlay) {
    std::error_code ec;
    fs::remove_all(underlay, ec);
  }
  std::string kv;
  for (const auto& [k, v] : summary(r)) kv += k + "=" + v + "\n";
  textio::write_file_atomic(run_dir / "summary.txt", kv);
  return r;
}

SimTrialReport run_sim_trial(const SimTrialPlan& plan) {
  if (plan.sample.parallelism != 1) {
    throw std::invalid_argument("simulated trials run single-process samples");
  }
  static std::atomic<int> counter{0};
  VirtualClock clock(plan.start);
  session::SessionOptions so;
  so.config.overlay_root = "/guardfs-trial-" + std::to_string(::getpid()) + "-" +
                           std::to_string(counter.fetch_add(1));
  so.config.underlay_root = fs::absolute(plan.underlay);
  so.config.mode = plan.mode;
  so.config.window_seconds = plan.window_seconds;
  so.model = plan.model;
  so.threshold = plan.threshold;
  so.collect_dead_pids = false;
  so.clock = &clock;

  SimTrialReport r;
  const auto baseline = snapshot(plan.underlay);
  r.eligible_bytes = eligible_bytes(baseline, plan.sample);

  auto session = session::MountSession::attach(so, std::make_unique<session::DirectDriver>());
  const std::string root = so.config.overlay_root.string();
  adversary::OverlayFsClient client(session->overlay(), clock, plan.pid, session.get(), plan.cost);
  std::optional<UnixNanos> deadline;
  if (plan.cap) deadline = plan.start + *plan.cap;
  const auto files = adversary::list_targets(client, root, plan.sample);
  r.stats = adversary::encrypt_files(client, plan.sample, files, plan.sample.rate, root,
                                     adversary::worker_seed(plan.sample.seed, 0), deadline);
  session->detach();
  r.end = clock.now();
  r.verdicts = session->verdicts();
  const auto fm = session->overlay().first_modifying();
  const auto flagged = first_malicious(r.verdicts);
  auto a = fm.find(plan.pid);
  auto b = flagged.find(plan.pid);
  if (a != fm.end() && b != flagged.end()) r.detection_delay_ms = b->second - a->second;
  session.reset();

  r.loss = bytes_lost(baseline, snapshot(plan.underlay));
  return r;
}

// ---------------------------------------------------------------- reports

namespace {

std::string opt(const std::optional<std::int64_t>& v) { return v ? std::to_string(*v) : ""; }

}  // namespace

std::string loss_table_csv(const std::vector<ExperimentReport>& reports) {
  std::string out =
      "label,mode,seed,bytes_lost,kilobytes_lost,files_lost,eligible_bytes,loss_pct,"
      "detection_delay_ms,flagged,partial\n";
  for (const auto& r : reports) {
    const double pct = r.eligible_bytes ? 100.0 * double(r.loss.bytes_lost) / double(r.eligible_bytes) : 0.0;
    out += r.label + "," + r.mode + "," + std::to_string(r.seed) + "," +
           std::to_string(r.loss.bytes_lost) + "," + std::to_string(r.loss.bytes_lost / 1024) + "," +
           std::to_string(r.loss.files_modified.size()) + "," + std::to_string(r.eligible_bytes) +
           "," + textio::format_double(pct) + "," + opt(r.detection_delay_ms) + "," +
           (r.first_malicious ? "1" : "0") + "," + (r.partial ? "1" : "0") + "\n";
  }
  return out;
}

std::string timing_table_csv(const std::vector<ExperimentReport>& reports) {
  std::string out = "label,mode,seed,first_modifying_ms,first_malicious_ms,detection_delay_ms\n";
  for (const auto& r : reports) {
    out += r.label + "," + r.mode + "," + std::to_string(r.seed) + "," + opt(r.first_modifying) +
           "," + opt(r.first_malicious) + "," + opt(r.detection_delay_ms) + "\n";
  }
  return out;
}

std::vector<OverheadRow> overhead_rows(const ExperimentReport& baseline,
                                       const ExperimentReport& guarded) {
  std::vector<OverheadRow> rows;
  for (const auto& g : guarded.benign) {
    auto b = std::find_if(baseline.benign.begin(), baseline.benign.end(),
                          [&](const WorkloadRun& w) { return w.name == g.name; });
    if (b == baseline.benign.end()) continue;
    OverheadRow row;
    row.workload = g.name;
    row.seed = guarded.seed;
    row.baseline_ms = b->elapsed_ms;
    row.guarded_ms = g.elapsed_ms;
    row.overhead_pct = b->elapsed_ms > 0
                           ? 100.0 * double(g.elapsed_ms - b->elapsed_ms) / double(b->elapsed_ms)
                           : 0.0;
    double cpu = 0;
    std::size_t n = 0;
    for (const auto& s : guarded.resources) {
      if (s.workload != g.name) continue;
      cpu += s.cpu_percent;
      ++n;
      row.rss_peak = std::max(row.rss_peak, s.rss_bytes);
    }
    row.cpu_mean_pct = n ? cpu / double(n) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

std::string overhead_table_csv(const std::vector<OverheadRow>& rows) {
  std::string out = "workload,seed,baseline_ms,guarded_ms,overhead_pct,cpu_mean_pct,rss_peak_bytes\n";
  for (const auto& r : rows) {
    out += r.workload + "," + std::to_string(r.seed) + "," + std::to_string(r.baseline_ms) + "," +
           std::to_string(r.guarded_ms) + "," + textio::format_double(r.overhead_pct) + "," +
           textio::format_double(r.cpu_mean_pct) + "," + std::to_string(r.rss_peak) + "\n";
  }
  return out;
}

std::map<std::string, std::string> summary(const ExperimentReport& r) {
  std::map<std::string, std::string> kv{
      {"label", r.label},
      {"mode", r.mode},
      {"seed", std::to_string(r.seed)},
      {"bytes_lost", std::to_string(r.loss.bytes_lost)},
      {"files_lost", std::to_string(r.loss.files_modified.size())},
      {"eligible_bytes", std::to_string(r.eligible_bytes)},
      {"baseline_bytes", std::to_string(r.baseline_bytes)},
      {"detection_delay_ms", opt(r.detection_delay_ms)},
      {"partial", r.partial ? "1" : "0"},
      {"cap_reached", r.cap_reached ? "1" : "0"},
      {"wall_ms", std::to_string(r.wall_ms)},
      {"malicious_pids", std::to_string(r.malicious_pids.size())},
      {"kills", std::to_string(r.kills.size())},
      {"post_verdict_forwards", std::to_string(r.post_verdict_forwards)},
      {"unexplained_losses", std::to_string(r.unexplained_losses)},
  };
  if (r.sample) kv["sample_elapsed_ms"] = std::to_string(r.sample->elapsed_ms);
  for (const auto& b : r.benign) kv["benign_" + b.name + "_elapsed_ms"] = std::to_string(b.elapsed_ms);
  return kv;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace guardfs::eval
