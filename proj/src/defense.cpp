#include "guardfs/defense.hpp"

#include <fcntl.h>
#include <spdlog/spdlog.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cstring>
#include <fstream>

#include "guardfs/textio.hpp"

namespace guardfs::defense {

void DefenseMode::validate() const {
  if (gated() && period_s <= 0) {
    throw std::invalid_argument("timer T must be positive for " + to_string(*this));
  }
}

std::string to_string(const DefenseMode& mode) {
  switch (mode.kind) {
    case DefenseMode::Kind::NoDefense: return "none";
    case DefenseMode::Kind::PKill: return "pkill";
    case DefenseMode::Kind::Obf: return "obf";
    case DefenseMode::Kind::DelObf: return "delobf:" + std::to_string(mode.period_s);
    case DefenseMode::Kind::TrackObf: return "trackobf:" + std::to_string(mode.period_s);
  }
  return "?";
}

DefenseMode parse_defense_mode(std::string_view text, int default_period) {
  std::string s(textio::trim(text));
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  std::erase(s, '+');
  std::erase(s, '_');
  std::erase(s, '-');
  int period = default_period;
  if (auto colon = s.find(':'); colon != std::string::npos) {
    period = textio::parse_int<int>(s.substr(colon + 1));
    s.resize(colon);
  }
  DefenseMode m;
  if (s == "none" || s == "nodefense") {
    m = DefenseMode::none();
  } else if (s == "pkill" || s == "kill") {
    m = DefenseMode::pkill();
  } else if (s == "obf") {
    m = DefenseMode::obf();
  } else if (s == "delobf" || s == "del") {
    m = DefenseMode::del_obf(period);
  } else if (s == "trackobf" || s == "track") {
    m = DefenseMode::track_obf(period);
  } else {
    throw std::invalid_argument("unknown defense mode '" + std::string(text) + "'");
  }
  m.validate();
  return m;
}

std::string_view to_string(VerdictState s) {
  switch (s) {
    case VerdictState::Unknown: return "unknown";
    case VerdictState::Benign: return "benign";
    case VerdictState::Malicious: return "malicious";
  }
  return "?";
}

VerdictStore::VerdictStore() : map_(std::make_shared<const Map>()) {}

std::shared_ptr<const VerdictStore::Map> VerdictStore::snapshot() const {
  return std::atomic_load(&map_);
}

Verdict VerdictStore::get(Pid pid) const {
  auto snap = snapshot();
  auto it = snap->find(pid);
  return it == snap->end() ? Verdict{} : it->second.verdict;
}

VerdictStore::Transition VerdictStore::apply(Pid pid, VerdictState state, UnixMillis ts) {
  if (state == VerdictState::Unknown) {
    throw std::invalid_argument("a verdict must be benign or malicious");
  }
  std::lock_guard lock(write_mu_);
  auto current = std::atomic_load(&map_);
  auto it = current->find(pid);
  const VerdictState old = it == current->end() ? VerdictState::Unknown : it->second.verdict.state;
  if (old == state) return Transition::Unchanged;
  if (old == VerdictState::Malicious) return Transition::Rejected;
  auto next = std::make_shared<Map>(*current);
  (*next)[pid] = Entry{Verdict{state, ts}, std::nullopt};
  std::atomic_store(&map_, std::shared_ptr<const Map>(std::move(next)));
  return Transition::Applied;
}

void VerdictStore::mark_dead(Pid pid, UnixMillis ts) {
  std::lock_guard lock(write_mu_);
  auto current = std::atomic_load(&map_);
  auto it = current->find(pid);
  if (it == current->end() || it->second.died_at) return;
  auto next = std::make_shared<Map>(*current);
  (*next)[pid].died_at = ts;
  std::atomic_store(&map_, std::shared_ptr<const Map>(std::move(next)));
}

std::size_t VerdictStore::collect_garbage(UnixMillis now, std::chrono::milliseconds expiry) {
  std::lock_guard lock(write_mu_);
  auto current = std::atomic_load(&map_);
  auto next = std::make_shared<Map>(*current);
  std::size_t removed = std::erase_if(*next, [&](const auto& kv) {
    return kv.second.died_at && *kv.second.died_at + expiry.count() <= now;
  });
  if (removed > 0) std::atomic_store(&map_, std::shared_ptr<const Map>(std::move(next)));
  return removed;
}

std::size_t VerdictStore::size() const { return snapshot()->size(); }

std::string_view to_string(Action::Kind kind) {
  switch (kind) {
    case Action::Kind::Forward: return "forward";
    case Action::Kind::Fabricate: return "fabricate";
    case Action::Kind::Delay: return "delay";
    case Action::Kind::Kill: return "kill";
  }
  return "?";
}

GateScope default_gate_scope(const DefenseMode& mode) {
  return mode.kind == DefenseMode::Kind::TrackObf ? GateScope::ModifyingOnly : GateScope::AllCalls;
}

Action decide(const CallContext& ctx, CallKind kind, const DefenseMode& mode,
              const Verdict& verdict, GatePhase phase, std::optional<GateScope> scope) {
  const bool malicious = verdict.state == VerdictState::Malicious;
  const bool modifying = is_modifying(kind);
  const GateScope s = scope.value_or(default_gate_scope(mode));
  const bool holdable = s == GateScope::AllCalls || modifying;
  auto obfuscate = [&] { return malicious && modifying ? Action::fabricate() : Action::forward(); };

  switch (mode.kind) {
    case DefenseMode::Kind::NoDefense:
      return Action::forward();
    case DefenseMode::Kind::PKill:
      return malicious ? Action::kill() : Action::forward();
    case DefenseMode::Kind::Obf:
      return obfuscate();
    case DefenseMode::Kind::DelObf:
      if (phase == GatePhase::Fresh && holdable) {
        return Action::delay_until(next_boundary(ctx.timestamp, mode.period()));
      }
      return obfuscate();
    case DefenseMode::Kind::TrackObf:
      if (verdict.state == VerdictState::Unknown && phase == GatePhase::Fresh && holdable) {
        return Action::delay_until(next_boundary(ctx.timestamp, mode.period()));
      }
      return obfuscate();
  }
  return Action::forward();
}

std::vector<std::uint64_t> gate_release(PendingGate& gate, UnixNanos now) {
  if (now < gate.deadline) return {};
  std::vector<std::uint64_t> ids;
  ids.reserve(gate.waiters.size());
  for (const auto& w : gate.waiters) ids.push_back(w.call_id);
  gate.waiters.clear();
  gate.buffered_bytes = 0;
  return ids;
}

void GateKeeper::wait(Pid pid, UnixNanos deadline, std::uint64_t bytes) {
  std::unique_lock lock(mu_);
  if (open_ || deadline <= released_through_) return;
  const std::uint64_t id = next_id_++;
  auto& gate = gates_[deadline];
  gate.deadline = deadline;
  gate.add(GateWaiter{id, pid, bytes});
  buffered_ += bytes;
  peak_ = std::max(peak_, buffered_);
  ++waiting_;
  cv_.wait(lock, [&] { return released_.contains(id); });
  released_.erase(id);
  buffered_ -= bytes;
  --waiting_;
}

std::size_t GateKeeper::release_locked(UnixNanos now) {
  std::size_t n = 0;
  while (!gates_.empty() && gates_.begin()->first <= now) {
    for (auto id : gate_release(gates_.begin()->second, now)) {
      released_.insert(id);
      ++n;
    }
    gates_.erase(gates_.begin());
  }
  released_through_ = std::max(released_through_, now);
  return n;
}

std::size_t GateKeeper::release_through(UnixNanos now) {
  std::size_t n;
  {
    std::lock_guard lock(mu_);
    n = release_locked(now);
  }
  cv_.notify_all();
  return n;
}

std::size_t GateKeeper::open_all() {
  std::size_t n;
  {
    std::lock_guard lock(mu_);
    open_ = true;
    n = release_locked(UnixNanos{std::numeric_limits<std::int64_t>::max()});
  }
  cv_.notify_all();
  return n;
}

std::uint64_t GateKeeper::buffered_bytes() const {
  std::lock_guard lock(mu_);
  return buffered_;
}

std::uint64_t GateKeeper::peak_buffered_bytes() const {
  std::lock_guard lock(mu_);
  return peak_;
}

std::size_t GateKeeper::waiting() const {
  std::lock_guard lock(mu_);
  return waiting_;
}

std::optional<UnixNanos> GateKeeper::next_deadline() const {
  std::lock_guard lock(mu_);
  if (gates_.empty()) return std::nullopt;
  return gates_.begin()->first;
}

std::chrono::nanoseconds FabricationPolicy::delay_for(std::uint64_t bytes) const {
  const auto transfer = std::chrono::nanoseconds(
      static_cast<std::int64_t>(static_cast<double>(bytes) / nominal_throughput * 1e9));
  return std::max(min_delay, transfer);
}

SyscallResponse fabricate_response(const SyscallRequest& req, const FabricationContext& fc) {
  const std::int64_t now_ns = fc.now.count();
  auto fresh_attr = [&](std::uint32_t type_bits, std::uint32_t perm) {
    FileAttr a;
    a.mode = type_bits | (perm & 07777);
    a.uid = ::geteuid();
    a.gid = ::getegid();
    a.atime_ns = a.mtime_ns = a.ctime_ns = now_ns;
    if (fc.base) a.ino = fc.base->ino;
    return a;
  };

  return std::visit(
      [&](const auto& p) -> SyscallResponse {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, req::Write>) {
          return {0, resp::Written{p.data.size()}};
        } else if constexpr (std::is_same_v<P, req::Create>) {
          return {0, resp::Opened{fc.phantom_handle, fresh_attr(S_IFREG, p.mode)}};
        } else if constexpr (std::is_same_v<P, req::Mkdir>) {
          FileAttr a = fresh_attr(S_IFDIR, p.mode);
          a.nlink = 2;
          a.size = 4096;
          a.blocks = 8;
          return {0, resp::Attr{a}};
        } else if constexpr (std::is_same_v<P, req::Truncate>) {
          FileAttr a = fc.base.value_or(fresh_attr(S_IFREG, 0644));
          a.size = p.size;
          a.blocks = (p.size + 511) / 512;
          a.mtime_ns = a.ctime_ns = now_ns;
          return {0, resp::Attr{a}};
        } else if constexpr (std::is_same_v<P, req::Rename> || std::is_same_v<P, req::Unlink> ||
                             std::is_same_v<P, req::Rmdir>) {
          return {0, resp::Done{}};
        } else {
          throw std::logic_error("fabricate_response called for non-modifying call " +
                                 std::string(to_string(req.kind())));
        }
      },
      req.payload);
}

std::string_view to_string(AuditAction a) {
  switch (a) {
    case AuditAction::Forward: return "forward";
    case AuditAction::Fabricate: return "fabricate";
    case AuditAction::Delay: return "delay";
    case AuditAction::Kill: return "kill";
  }
  return "?";
}

std::string format_audit(const AuditRecord& r) {
  std::string line = "action ";
  line += std::to_string(r.ts);
  line += ' ';
  line += std::to_string(r.pid);
  line += ' ';
  line += to_string(r.kind);
  line += ' ';
  line += to_string(r.action);
  return line;
}

AuditRecord parse_audit(std::string_view line) {
  auto f = textio::split_ws(line);
  if (f.size() != 5 || f[0] != "action") {
    throw FormatError("bad audit record '" + std::string(line) + "'");
  }
  AuditRecord r;
  r.ts = textio::parse_int<UnixMillis>(f[1]);
  r.pid = textio::parse_int<Pid>(f[2]);
  auto kind = parse_call_kind(f[3]);
  if (!kind) throw FormatError("bad call kind in audit record");
  r.kind = *kind;
  if (f[4] == "forward") {
    r.action = AuditAction::Forward;
  } else if (f[4] == "fabricate") {
    r.action = AuditAction::Fabricate;
  } else if (f[4] == "delay") {
    r.action = AuditAction::Delay;
  } else if (f[4] == "kill") {
    r.action = AuditAction::Kill;
  } else {
    throw FormatError("bad audit action '" + std::string(f[4]) + "'");
  }
  return r;
}

AuditLog::AuditLog(const std::filesystem::path& path) {
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd_ < 0) {
    throw std::runtime_error("cannot open audit log " + path.string() + ": " +
                             std::strerror(errno));
  }
}

AuditLog::~AuditLog() {
  flush();
  ::close(fd_);
}

void AuditLog::append(const AuditRecord& r) {
  std::lock_guard lock(mu_);
  buffer_ += format_audit(r);
  buffer_ += '\n';
  if (buffer_.size() < (1u << 16)) return;
  (void)!::write(fd_, buffer_.data(), buffer_.size());
  buffer_.clear();
}

void AuditLog::flush() {
  std::lock_guard lock(mu_);
  std::size_t off = 0;
  while (off < buffer_.size()) {
    ssize_t n = ::write(fd_, buffer_.data() + off, buffer_.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      spdlog::warn("audit log write failed: {}", std::strerror(errno));
      break;
    }
    off += static_cast<std::size_t>(n);
  }
  buffer_.clear();
}

std::vector<AuditRecord> AuditLog::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read audit log " + path.string());
  std::vector<AuditRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_audit(line));
  }
  return out;
}

DefenseEngine::DefenseEngine(EngineOptions options, Clock& clock, AuditLog* audit)
    : options_(std::move(options)), clock_(clock), audit_(audit) {
  options_.mode.validate();
}

DefenseEngine::~DefenseEngine() { join_kills(); }

std::optional<Pid> DefenseEngine::cached_parent(Pid pid) const {
  {
    std::lock_guard lock(mu_);
    if (auto it = parents_.find(pid); it != parents_.end()) return it->second;
  }
  auto parent = proc::parent_of(pid);
  if (!parent) return std::nullopt;
  std::lock_guard lock(mu_);
  parents_[pid] = *parent;
  return parent;
}

Verdict DefenseEngine::effective_verdict(Pid pid) const {
  auto snap = store_.snapshot();
  auto lookup = [&](Pid p) {
    auto it = snap->find(p);
    return it == snap->end() ? Verdict{} : it->second.verdict;
  };
  Verdict own = lookup(pid);
  if (own.state == VerdictState::Malicious || !options_.propagate_to_descendants) return own;
  // Only walk ancestry when some PID is flagged at all.
  bool any_malicious = std::any_of(snap->begin(), snap->end(), [](const auto& kv) {
    return kv.second.verdict.state == VerdictState::Malicious;
  });
  if (!any_malicious) return own;
  Pid p = pid;
  for (int depth = 0; depth < 32; ++depth) {
    auto parent = cached_parent(p);
    if (!parent || *parent <= 1) break;
    Verdict v = lookup(*parent);
    if (v.state == VerdictState::Malicious) return v;
    p = *parent;
  }
  return own;
}

Action DefenseEngine::decide(const CallContext& ctx, GatePhase phase) const {
  return defense::decide(ctx, ctx.op, options_.mode, effective_verdict(ctx.pid), phase,
                         options_.scope);
}

void DefenseEngine::audit(const CallContext& ctx, AuditAction action) {
  if (audit_ != nullptr) audit_->append(AuditRecord{to_millis(ctx.timestamp), ctx.pid, ctx.op, action});
}

VerdictStore::Transition DefenseEngine::on_verdict(Pid pid, VerdictState state, UnixMillis ts) {
  auto result = store_.apply(pid, state, ts);
  {
    std::lock_guard lock(mu_);
    timeline_.push_back(VerdictEvent{pid, state, ts, result});
  }
  if (result == VerdictStore::Transition::Rejected) {
    spdlog::warn("ignoring {} verdict for pid {}: already malicious", to_string(state), pid);
  } else if (result == VerdictStore::Transition::Applied) {
    spdlog::info("pid {} classified {}", pid, to_string(state));
    if (state == VerdictState::Malicious && options_.mode.kind == DefenseMode::Kind::PKill) {
      start_kill(pid, ts);
    }
  }
  return result;
}

void DefenseEngine::request_kill(Pid pid) {
  if (options_.mode.kind != DefenseMode::Kind::PKill) return;
  start_kill(pid, to_millis(clock_.now()));
}

void DefenseEngine::start_kill(Pid pid, UnixMillis verdict_ts) {
  std::lock_guard lock(mu_);
  if (!kill_requested_.insert(pid).second) return;
  if (options_.simulated_kills) {
    const UnixMillis now = to_millis(clock_.now());
    kills_.push_back(KillEvent{pid, verdict_ts, now, true, {}});
    return;
  }
  const bool tree = options_.propagate_to_descendants;
  killers_.emplace_back([this, pid, verdict_ts, tree] {
    auto result = proc::kill_process(pid, tree);
    KillEvent ev{pid, verdict_ts, 0, result.terminated, result.reason};
    if (result.terminated) ev.confirmed_ts = to_millis(system_clock().now());
    if (!result.terminated) spdlog::warn("kill of pid {} failed: {}", pid, result.reason);
    std::lock_guard inner(mu_);
    kills_.push_back(ev);
  });
}

bool DefenseEngine::kill_requested(Pid pid) const {
  std::lock_guard lock(mu_);
  return kill_requested_.count(pid) > 0;
}

void DefenseEngine::maintain(UnixMillis now) {
  auto snap = store_.snapshot();
  for (const auto& [pid, entry] : *snap) {
    if (!entry.died_at && !proc::is_alive(pid)) store_.mark_dead(pid, now);
  }
  store_.collect_garbage(now, options_.verdict_expiry);
  std::lock_guard lock(mu_);
  std::erase_if(parents_, [](const auto& kv) { return !proc::is_alive(kv.first); });
}

std::vector<VerdictEvent> DefenseEngine::verdict_timeline() const {
  std::lock_guard lock(mu_);
  return timeline_;
}

std::vector<KillEvent> DefenseEngine::kills() const {
  std::lock_guard lock(mu_);
  return kills_;
}

void DefenseEngine::join_kills() {
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(mu_);
    threads.swap(killers_);
  }
  for (auto& t : threads) t.join();
}

}  // namespace guardfs::defense
