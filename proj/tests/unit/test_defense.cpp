#include <gtest/gtest.h>

#include <thread>

#include "guardfs/defense.hpp"

using namespace guardfs;
using namespace guardfs::defense;
using namespace std::chrono_literals;

namespace {

const std::vector<DefenseMode> kModes = {DefenseMode::none(), DefenseMode::pkill(), DefenseMode::obf(),
                                         DefenseMode::del_obf(5), DefenseMode::track_obf(5),
                                         DefenseMode::del_obf(2), DefenseMode::track_obf(10)};
const std::vector<VerdictState> kStates = {VerdictState::Unknown, VerdictState::Benign,
                                           VerdictState::Malicious};

// The table written out case by case, independent of the implementation's
// control flow.
Action table(const CallContext& ctx, CallKind kind, const DefenseMode& m, VerdictState v,
             GatePhase phase) {
  bool mal = v == VerdictState::Malicious;
  bool mod = is_modifying(kind);
  auto gate = [&] { return Action::delay_until(next_boundary(ctx.timestamp, std::chrono::seconds(m.period_s))); };
  Action after = (mal && mod) ? Action::fabricate() : Action::forward();
  using K = DefenseMode::Kind;
  if (m.kind == K::NoDefense) return Action::forward();
  if (m.kind == K::PKill) return mal ? Action::kill() : Action::forward();
  if (m.kind == K::Obf) return after;
  if (m.kind == K::DelObf) return phase == GatePhase::Fresh ? gate() : after;
  // TrackObf: only modifying calls of unknown PIDs wait for the first window.
  if (v == VerdictState::Unknown && phase == GatePhase::Fresh && mod) return gate();
  return after;
}

}  // namespace

TEST(Decide, ExhaustiveAgainstTable) {
  std::size_t cases = 0;
  for (auto& mode : kModes)
    for (auto state : kStates)
      for (auto kind : kAllCallKinds)
        for (auto phase : {GatePhase::Fresh, GatePhase::Released})
          for (UnixNanos ts : {UnixNanos{1700000000000000000}, UnixNanos{1700000001234567890},
                               UnixNanos{1700000004999999999}}) {
            CallContext ctx{42, ts, kind};
            Verdict v{state, 0};
            EXPECT_EQ(decide(ctx, kind, mode, v, phase), table(ctx, kind, mode, state, phase))
                << to_string(mode) << " " << to_string(state) << " " << to_string(kind);
            ++cases;
          }
  EXPECT_EQ(cases, kModes.size() * 3 * 12 * 2 * 3);
}

TEST(Decide, DocumentedExamples) {
  CallContext w{1, 1700000001000000000ns, CallKind::Write};
  EXPECT_EQ(decide(w, CallKind::Write, DefenseMode::obf(), Verdict{}), Action::forward());
  EXPECT_EQ(decide(w, CallKind::Write, DefenseMode::obf(), Verdict{VerdictState::Malicious, 1}),
            Action::fabricate());
  EXPECT_EQ(decide(w, CallKind::Read, DefenseMode::track_obf(5), Verdict{VerdictState::Malicious, 1}),
            Action::forward());
  EXPECT_EQ(decide(w, CallKind::Write, DefenseMode::del_obf(5), Verdict{}),
            Action::delay_until(1700000005000000000ns));
}

// Safety property: no mode ever forwards a modifying call of a Malicious PID.
TEST(Decide, MaliciousModifyingNeverForwardedUnderObfModes) {
  for (auto& mode : kModes) {
    if (mode.kind == DefenseMode::Kind::NoDefense) continue;
    for (auto kind : kAllCallKinds) {
      if (!is_modifying(kind)) continue;
      for (auto phase : {GatePhase::Fresh, GatePhase::Released}) {
        CallContext ctx{9, 1700000000500000000ns, kind};
        auto a = decide(ctx, kind, mode, Verdict{VerdictState::Malicious, 1}, phase);
        EXPECT_NE(a.kind, Action::Kind::Forward) << to_string(mode);
      }
    }
  }
}

TEST(Decide, GateDeadlineIsNextBoundary) {
  auto m = DefenseMode::del_obf(5);
  for (std::int64_t ms : {0, 1, 4999, 5000, 12345}) {
    UnixNanos ts = std::chrono::milliseconds(1700000000000 + ms);
    auto a = decide(CallContext{1, ts, CallKind::Read}, CallKind::Read, m, Verdict{});
    ASSERT_EQ(a.kind, Action::Kind::Delay);
    EXPECT_GT(a.deadline, ts);
    EXPECT_LE(a.deadline - ts, 5s);
    EXPECT_EQ(a.deadline.count() % 5000000000, 0);
  }
}

TEST(DefenseMode, ParseAndValidate) {
  EXPECT_EQ(parse_defense_mode("none"), DefenseMode::none());
  EXPECT_EQ(parse_defense_mode("PKill"), DefenseMode::pkill());
  EXPECT_EQ(parse_defense_mode("delobf:2"), DefenseMode::del_obf(2));
  EXPECT_EQ(parse_defense_mode("trackobf", 10), DefenseMode::track_obf(10));
  for (auto& m : kModes) EXPECT_EQ(parse_defense_mode(to_string(m)), m);
  EXPECT_THROW(parse_defense_mode("teleport"), std::invalid_argument);
  EXPECT_THROW(DefenseMode::del_obf(0).validate(), std::invalid_argument);
  EXPECT_THROW(DefenseMode::track_obf(-1).validate(), std::invalid_argument);
}

TEST(VerdictStore, Transitions) {
  VerdictStore s;
  EXPECT_EQ(s.get(5).state, VerdictState::Unknown);
  EXPECT_EQ(s.apply(5, VerdictState::Benign, 10), VerdictStore::Transition::Applied);
  EXPECT_EQ(s.apply(5, VerdictState::Benign, 11), VerdictStore::Transition::Unchanged);
  EXPECT_EQ(s.apply(5, VerdictState::Malicious, 12), VerdictStore::Transition::Applied);
  EXPECT_EQ(s.apply(5, VerdictState::Benign, 13), VerdictStore::Transition::Rejected);
  EXPECT_EQ(s.get(5), (Verdict{VerdictState::Malicious, 12}));
  EXPECT_THROW(s.apply(6, VerdictState::Unknown, 1), std::invalid_argument);
}

TEST(VerdictStore, SnapshotIsStable) {
  VerdictStore s;
  s.apply(1, VerdictState::Benign, 1);
  auto snap = s.snapshot();
  s.apply(1, VerdictState::Malicious, 2);
  EXPECT_EQ(snap->at(1).verdict.state, VerdictState::Benign);
  EXPECT_EQ(s.get(1).state, VerdictState::Malicious);
}

TEST(VerdictStore, GarbageCollection) {
  VerdictStore s;
  s.apply(1, VerdictState::Malicious, 0);
  s.apply(2, VerdictState::Benign, 0);
  s.mark_dead(1, 1000);
  EXPECT_EQ(s.collect_garbage(1500, 1000ms), 0u);
  EXPECT_EQ(s.collect_garbage(2000, 1000ms), 1u);
  EXPECT_EQ(s.size(), 1u);
}

TEST(Fabricate, Results) {
  std::vector<std::uint8_t> buf(8192, 1);
  auto w = fabricate_response(make_request(1, 0ns, req::Write{3, 0, buf}));
  ASSERT_TRUE(w.ok());
  EXPECT_EQ(w.as<resp::Written>().count, 8192u);
  auto w0 = fabricate_response(make_request(1, 0ns, req::Write{3, 0, {}}));
  EXPECT_EQ(w0.as<resp::Written>().count, 0u);
  for (auto r : {make_request(1, 0ns, req::Unlink{"/a"}), make_request(1, 0ns, req::Rename{"/a", "/b"}),
                 make_request(1, 0ns, req::Mkdir{"/d"}), make_request(1, 0ns, req::Rmdir{"/d"}),
                 make_request(1, 0ns, req::Truncate{"/a", std::nullopt, 0})}) {
    auto resp = fabricate_response(r);
    EXPECT_TRUE(resp.ok());
    EXPECT_TRUE(well_formed(r.kind(), resp));
  }
  FabricationContext fc;
  fc.phantom_handle = 77;
  auto c = fabricate_response(make_request(1, 0ns, req::Create{"/n"}), fc);
  EXPECT_EQ(c.as<resp::Opened>().handle, 77u);
  EXPECT_THROW(fabricate_response(make_request(1, 0ns, req::Read{1, 0, 10})), std::logic_error);
}

TEST(Fabricate, DelayModel) {
  FabricationPolicy p;
  p.nominal_throughput = 1e6;
  p.min_delay = 100us;
  EXPECT_EQ(p.delay_for(0), 100us);
  EXPECT_EQ(p.delay_for(1000000), 1s);
}

TEST(Gate, ReleaseOnlyAtDeadlineInFifoOrder) {
  PendingGate g;
  g.deadline = 5000ns;
  for (std::uint64_t i = 1; i <= 5; ++i) g.add(GateWaiter{i, static_cast<Pid>(i % 2), i * 10});
  EXPECT_EQ(g.buffered_bytes, 150u);
  EXPECT_TRUE(gate_release(g, 4999ns).empty());
  EXPECT_EQ(g.waiters.size(), 5u);
  EXPECT_EQ(gate_release(g, 5000ns), (std::vector<std::uint64_t>{1, 2, 3, 4, 5}));
  EXPECT_TRUE(g.waiters.empty());
  EXPECT_EQ(g.buffered_bytes, 0u);
  EXPECT_TRUE(gate_release(g, 6000ns).empty());
}

TEST(GateKeeper, BlocksUntilReleased) {
  GateKeeper k;
  std::atomic<int> done{0};
  std::vector<std::thread> ts;
  for (int i = 0; i < 4; ++i)
    ts.emplace_back([&, i] {
      k.wait(i, UnixNanos{i < 2 ? 100 : 200}, 1000);
      ++done;
    });
  while (k.waiting() < 4) std::this_thread::sleep_for(1ms);
  EXPECT_EQ(k.buffered_bytes(), 4000u);
  EXPECT_EQ(k.next_deadline(), UnixNanos{100});
  EXPECT_EQ(k.release_through(UnixNanos{150}), 2u);
  while (done < 2) std::this_thread::sleep_for(1ms);
  EXPECT_EQ(k.waiting(), 2u);
  EXPECT_EQ(k.release_through(UnixNanos{200}), 2u);
  for (auto& t : ts) t.join();
  EXPECT_EQ(done, 4);
  EXPECT_EQ(k.peak_buffered_bytes(), 4000u);
  // Deadlines already passed do not block.
  k.wait(1, UnixNanos{50}, 0);
  k.open_all();
  k.wait(1, UnixNanos{1000000}, 0);
}

TEST(Audit, FormatRoundTrip) {
  AuditRecord r{1700000000001, 31, CallKind::Write, AuditAction::Fabricate};
  EXPECT_EQ(format_audit(r), "action 1700000000001 31 write fabricate");
  EXPECT_EQ(parse_audit(format_audit(r)), r);
  EXPECT_THROW(parse_audit("action x"), FormatError);
}

TEST(Engine, SimulatedKillsAndAbsorbingVerdicts) {
  VirtualClock clock(UnixNanos{1700000000000000000});
  EngineOptions o;
  o.mode = DefenseMode::pkill();
  o.simulated_kills = true;
  o.propagate_to_descendants = false;
  DefenseEngine e(o, clock);
  EXPECT_EQ(e.on_verdict(50001, VerdictState::Malicious, 1700000000000), VerdictStore::Transition::Applied);
  EXPECT_EQ(e.on_verdict(50001, VerdictState::Benign, 1700000000001), VerdictStore::Transition::Rejected);
  e.join_kills();
  auto kills = e.kills();
  ASSERT_EQ(kills.size(), 1u);
  EXPECT_TRUE(kills[0].terminated);
  EXPECT_TRUE(e.kill_requested(50001));
  EXPECT_EQ(e.decide(CallContext{50001, clock.now(), CallKind::Read}, GatePhase::Fresh), Action::kill());
}
