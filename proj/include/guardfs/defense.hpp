#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "guardfs/clock.hpp"
#include "guardfs/process.hpp"
#include "guardfs/syscall.hpp"

namespace guardfs::defense {

struct DefenseMode {
  enum class Kind { NoDefense, PKill, Obf, DelObf, TrackObf };

  Kind kind = Kind::NoDefense;
  int period_s = 0;  // T, only for DelObf and TrackObf

  static DefenseMode none() { return {}; }
  static DefenseMode pkill() { return {Kind::PKill, 0}; }
  static DefenseMode obf() { return {Kind::Obf, 0}; }
  static DefenseMode del_obf(int t) { return {Kind::DelObf, t}; }
  static DefenseMode track_obf(int t) { return {Kind::TrackObf, t}; }

  bool gated() const { return kind == Kind::DelObf || kind == Kind::TrackObf; }
  std::chrono::nanoseconds period() const { return std::chrono::seconds(period_s); }
  /// Throws std::invalid_argument when T is missing or non-positive.
  void validate() const;

  bool operator==(const DefenseMode&) const = default;
};

/// "none", "pkill", "obf", "delobf:5", "trackobf:5".
std::string to_string(const DefenseMode& mode);
/// Accepts the names above, case-insensitive. A bare "delobf"/"trackobf"
/// takes `default_period`.
DefenseMode parse_defense_mode(std::string_view text, int default_period = 5);

enum class VerdictState : std::uint8_t { Unknown, Benign, Malicious };
std::string_view to_string(VerdictState s);

struct Verdict {
  VerdictState state = VerdictState::Unknown;
  UnixMillis decided_at = 0;

  bool operator==(const Verdict&) const = default;
};

/// pid -> verdict, copy-on-write. Readers take a snapshot without blocking
/// writers; writers are serialized.
class VerdictStore {
 public:
  struct Entry {
    Verdict verdict;
    std::optional<UnixMillis> died_at;
  };
  using Map = std::unordered_map<Pid, Entry>;

  enum class Transition { Applied, Unchanged, Rejected };

  VerdictStore();

  Verdict get(Pid pid) const;
  std::shared_ptr<const Map> snapshot() const;

  /// `state` must be Benign or Malicious. Malicious is absorbing: any later
  /// Benign is rejected.
  Transition apply(Pid pid, VerdictState state, UnixMillis ts);

  void mark_dead(Pid pid, UnixMillis ts);
  /// Drops entries whose PID died at least `expiry` ago. Returns the count.
  std::size_t collect_garbage(UnixMillis now, std::chrono::milliseconds expiry);
  std::size_t size() const;

 private:
  mutable std::mutex write_mu_;
  std::shared_ptr<const Map> map_;
};

struct Action {
  enum class Kind { Forward, Fabricate, Delay, Kill };

  Kind kind = Kind::Forward;
  UnixNanos deadline{};  // Delay only

  static Action forward() { return {}; }
  static Action fabricate() { return {Kind::Fabricate, {}}; }
  static Action delay_until(UnixNanos t) { return {Kind::Delay, t}; }
  static Action kill() { return {Kind::Kill, {}}; }

  bool operator==(const Action&) const = default;
};
std::string_view to_string(Action::Kind kind);

/// Fresh: the call has not waited at a gate yet. Released: it has, and is
/// being re-decided after release.
enum class GatePhase { Fresh, Released };

/// Which calls of a gated PID are held: everything, or only modifying calls.
enum class GateScope { AllCalls, ModifyingOnly };

/// DelObf holds every call; TrackObf holds only modifying calls of unknown
/// PIDs, so reads keep flowing while the first window is classified.
GateScope default_gate_scope(const DefenseMode& mode);

/// The per-call decision table. Pure.
Action decide(const CallContext& ctx, CallKind kind, const DefenseMode& mode,
              const Verdict& verdict, GatePhase phase = GatePhase::Fresh,
              std::optional<GateScope> scope = std::nullopt);

inline Action decide(const CallContext& ctx, CallKind kind, const DefenseMode& mode,
                     const VerdictStore& store, GatePhase phase = GatePhase::Fresh) {
  return decide(ctx, kind, mode, store.get(ctx.pid), phase);
}

struct GateWaiter {
  std::uint64_t call_id = 0;
  Pid pid = 0;
  std::uint64_t bytes = 0;  // buffer length for Write, else 0
};

struct PendingGate {
  UnixNanos deadline{};
  std::deque<GateWaiter> waiters;
  std::uint64_t buffered_bytes = 0;

  void add(const GateWaiter& w) {
    waiters.push_back(w);
    buffered_bytes += w.bytes;
  }
};

/// Empties the gate and returns waiter ids in submission order, or nothing
/// when `now` is before the deadline.
std::vector<std::uint64_t> gate_release(PendingGate& gate, UnixNanos now);

/// Thread-safe set of gates keyed by deadline. Callers block in wait();
/// a timer context calls release_through().
class GateKeeper {
 public:
  /// Blocks until the gate for `deadline` is released.
  void wait(Pid pid, UnixNanos deadline, std::uint64_t bytes);

  /// Releases every gate whose deadline is <= `now`. Returns waiters released.
  std::size_t release_through(UnixNanos now);
  /// Releases everything and lets future waits pass straight through.
  std::size_t open_all();

  std::uint64_t buffered_bytes() const;
  std::uint64_t peak_buffered_bytes() const;
  std::size_t waiting() const;
  /// Earliest pending deadline, if any.
  std::optional<UnixNanos> next_deadline() const;

 private:
  std::size_t release_locked(UnixNanos now);

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<UnixNanos, PendingGate> gates_;
  std::set<std::uint64_t> released_;
  std::uint64_t next_id_ = 1;
  std::uint64_t buffered_ = 0;
  std::uint64_t peak_ = 0;
  std::size_t waiting_ = 0;
  UnixNanos released_through_{std::numeric_limits<std::int64_t>::min()};
  bool open_ = false;
};

/// Latency model for fabricated calls: max(min_delay, bytes / throughput).
struct FabricationPolicy {
  double nominal_throughput = 200e6;  // bytes per second
  std::chrono::nanoseconds min_delay = std::chrono::microseconds(50);

  std::chrono::nanoseconds delay_for(std::uint64_t bytes) const;
};

/// Values the caller supplies so fabricated results look like genuine ones.
struct FabricationContext {
  Handle phantom_handle = 0;        // Create
  std::optional<FileAttr> base;     // current attributes of the target, if any
  UnixNanos now{};
};

/// Success result for a modifying call. Throws std::logic_error for a
/// non-modifying kind.
SyscallResponse fabricate_response(const SyscallRequest& req, const FabricationContext& fc = {});

enum class AuditAction { Forward, Fabricate, Delay, Kill };
std::string_view to_string(AuditAction a);

struct AuditRecord {
  UnixMillis ts = 0;
  Pid pid = 0;
  CallKind kind = CallKind::GetAttr;
  AuditAction action = AuditAction::Forward;

  bool operator==(const AuditRecord&) const = default;
};

/// `action <ts_ms> <pid> <kind> <forward|fabricate|delay|kill>`
std::string format_audit(const AuditRecord& r);
AuditRecord parse_audit(std::string_view line);

class AuditLog {
 public:
  explicit AuditLog(const std::filesystem::path& path);
  ~AuditLog();
  AuditLog(const AuditLog&) = delete;
  AuditLog& operator=(const AuditLog&) = delete;

  void append(const AuditRecord& r);
  void flush();

  static std::vector<AuditRecord> read(const std::filesystem::path& path);

 private:
  std::mutex mu_;
  int fd_ = -1;
  std::string buffer_;
};

struct VerdictEvent {
  Pid pid = 0;
  VerdictState state = VerdictState::Unknown;
  UnixMillis ts = 0;
  VerdictStore::Transition result = VerdictStore::Transition::Unchanged;
};

struct KillEvent {
  Pid pid = 0;
  UnixMillis verdict_ts = 0;
  UnixMillis confirmed_ts = 0;  // 0 when not confirmed
  bool terminated = false;
  std::string reason;
};

struct EngineOptions {
  DefenseMode mode;
  std::optional<GateScope> scope;
  FabricationPolicy fabrication;
  /// A Malicious verdict also covers the PID's descendants.
  bool propagate_to_descendants = true;
  /// How long verdicts of dead PIDs are kept.
  std::chrono::milliseconds verdict_expiry{60000};
  /// Simulated PIDs: kills are recorded as immediate and no signal is sent.
  bool simulated_kills = false;
};

/// Stateful side of the defense: verdict store, gates, kills and audit.
class DefenseEngine {
 public:
  DefenseEngine(EngineOptions options, Clock& clock, AuditLog* audit = nullptr);
  ~DefenseEngine();
  DefenseEngine(const DefenseEngine&) = delete;
  DefenseEngine& operator=(const DefenseEngine&) = delete;

  const EngineOptions& options() const { return options_; }
  const DefenseMode& mode() const { return options_.mode; }
  Clock& clock() { return clock_; }

  /// Verdict for `pid`, folding in Malicious ancestors when propagation is on.
  Verdict effective_verdict(Pid pid) const;
  Action decide(const CallContext& ctx, GatePhase phase) const;
  void audit(const CallContext& ctx, AuditAction action);

  /// Applies a verdict. Under PKill a new Malicious verdict starts a kill of
  /// the process tree on a background thread.
  VerdictStore::Transition on_verdict(Pid pid, VerdictState state, UnixMillis ts);

  /// Kill requested from the call path; idempotent per PID.
  void request_kill(Pid pid);
  bool kill_requested(Pid pid) const;

  GateKeeper& gates() { return gates_; }
  VerdictStore& store() { return store_; }
  const VerdictStore& store() const { return store_; }

  bool available() const { return available_.load(); }
  void set_available(bool up) { available_.store(up); }

  /// Marks dead PIDs and expires old verdicts.
  void maintain(UnixMillis now);

  std::vector<VerdictEvent> verdict_timeline() const;
  std::vector<KillEvent> kills() const;
  /// Waits for background kills to finish.
  void join_kills();

 private:
  void start_kill(Pid pid, UnixMillis verdict_ts);
  std::optional<Pid> cached_parent(Pid pid) const;

  EngineOptions options_;
  Clock& clock_;
  AuditLog* audit_;
  VerdictStore store_;
  GateKeeper gates_;
  std::atomic<bool> available_{true};

  mutable std::mutex mu_;
  mutable std::unordered_map<Pid, Pid> parents_;
  std::vector<VerdictEvent> timeline_;
  std::vector<KillEvent> kills_;
  std::set<Pid> kill_requested_;
  std::vector<std::thread> killers_;
};

}  // namespace guardfs::defense
