#include <gtest/gtest.h>

#include <fcntl.h>

#include <filesystem>
#include <fstream>

#include "guardfs/overlay.hpp"
#include "guardfs/verdict_channel.hpp"

using namespace guardfs;
using namespace guardfs::overlay;
using namespace std::chrono_literals;
namespace fs = std::filesystem;

namespace {

struct Rig {
  fs::path under;
  VirtualClock clock{UnixNanos{1700000000000000000}};
  defense::DefenseEngine engine;
  telemetry::VectorSink sink;
  Overlay ov;

  explicit Rig(defense::DefenseMode mode, const std::string& name = "ov")
      : under(prepare(name)),
        engine(options(mode), clock),
        ov(MountConfig{"/mnt/guard", under, mode}, engine, sink) {}

  static fs::path prepare(const std::string& name) {
    auto p = fs::temp_directory_path() / ("guardfs-unit-" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    std::ofstream(p / "doc.txt") << "original";
    return p;
  }
  static defense::EngineOptions options(defense::DefenseMode mode) {
    defense::EngineOptions o;
    o.mode = mode;
    o.propagate_to_descendants = false;
    o.simulated_kills = true;
    return o;
  }
  ~Rig() {
    ov.close_all();
    fs::remove_all(under);
  }

  template <typename P>
  SyscallResponse call(Pid pid, P payload) {
    clock.advance(1ms);
    return ov.dispatch(make_request(pid, clock.now(), std::move(payload)));
  }
  std::string underlay(const std::string& rel) {
    std::ifstream in(under / rel);
    return {std::istreambuf_iterator<char>(in), {}};
  }
};

std::span<const std::uint8_t> bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

}  // namespace

TEST(MapPath, Examples) {
  MountConfig c{"/mnt/guard", "/data/under", defense::DefenseMode::none()};
  EXPECT_EQ(map_path("/mnt/guard/a/b.txt", c), fs::path("/data/under/a/b.txt"));
  EXPECT_EQ(map_path("/mnt/guard", c), fs::path("/data/under"));
  EXPECT_EQ(map_path("/mnt/guard/a/../b", c), fs::path("/data/under/b"));
  EXPECT_THROW(map_path("/mnt/guard/../etc/passwd", c), PathEscapeError);
  EXPECT_THROW(map_path("/mnt/guardian/x", c), PathEscapeError);
  EXPECT_THROW(map_path("relative", c), PathEscapeError);
}

TEST(MountConfig, Validation) {
  MountConfig c{"/mnt/guard", "/mnt/guard/inner", defense::DefenseMode::none()};
  EXPECT_THROW(c.validate(), ConfigError);
  MountConfig bad_t{"/a", "/b", defense::DefenseMode{defense::DefenseMode::Kind::DelObf, 0}};
  EXPECT_THROW(bad_t.validate(), ConfigError);
}

TEST(Overlay, PassthroughAndTelemetry) {
  Rig r(defense::DefenseMode::none(), "pass");
  auto c = r.call(7, req::Create{"/mnt/guard/new.txt", O_WRONLY});
  ASSERT_TRUE(c.ok());
  Handle h = c.as<resp::Opened>().handle;
  auto w = r.call(7, req::Write{h, 0, bytes("hello")});
  ASSERT_TRUE(w.ok());
  EXPECT_EQ(w.as<resp::Written>().count, 5u);
  r.call(7, req::Release{h});
  EXPECT_EQ(r.underlay("new.txt"), "hello");
  EXPECT_TRUE(r.call(7, req::Rename{"/mnt/guard/new.txt", "/mnt/guard/moved.txt"}).ok());
  EXPECT_TRUE(fs::exists(r.under / "moved.txt"));
  EXPECT_EQ(r.call(7, req::Unlink{"/mnt/guard/absent"}).error, ENOENT);

  auto events = r.sink.take();
  ASSERT_GE(events.size(), 4u);
  EXPECT_EQ(events[0].op, CallKind::Create);
  EXPECT_EQ(events[1].op, CallKind::Write);
  ASSERT_TRUE(events[1].entropy.has_value());
  EXPECT_NEAR(*events[1].entropy, telemetry::shannon_entropy("hello"), 1e-12);
  EXPECT_EQ(r.ov.stats().forwarded, r.ov.stats().dispatched);
}

TEST(Overlay, ObfFabricatesForMaliciousPidOnly) {
  Rig r(defense::DefenseMode::obf(), "obf");
  r.engine.on_verdict(66, defense::VerdictState::Malicious, 1);

  auto o = r.call(66, req::Open{"/mnt/guard/doc.txt", O_RDWR});
  ASSERT_TRUE(o.ok());
  Handle h = o.as<resp::Opened>().handle;
  auto rd = r.call(66, req::Read{h, 0, 100});
  ASSERT_TRUE(rd.ok());
  EXPECT_EQ(std::string(rd.as<resp::Data>().bytes.begin(), rd.as<resp::Data>().bytes.end()), "original");
  auto w = r.call(66, req::Write{h, 0, bytes("ENCRYPTED")});
  ASSERT_TRUE(w.ok());
  EXPECT_EQ(w.as<resp::Written>().count, 9u);
  r.call(66, req::Release{h});
  EXPECT_EQ(r.underlay("doc.txt"), "original");

  // The sample sees its own changes; everyone else sees the underlay.
  EXPECT_TRUE(r.call(66, req::Rename{"/mnt/guard/doc.txt", "/mnt/guard/doc.txt.locked"}).ok());
  EXPECT_EQ(r.call(66, req::GetAttr{"/mnt/guard/doc.txt"}).error, ENOENT);
  EXPECT_TRUE(r.call(66, req::GetAttr{"/mnt/guard/doc.txt.locked"}).ok());
  EXPECT_TRUE(r.call(5, req::GetAttr{"/mnt/guard/doc.txt"}).ok());
  EXPECT_EQ(r.call(5, req::GetAttr{"/mnt/guard/doc.txt.locked"}).error, ENOENT);
  EXPECT_TRUE(r.call(66, req::Unlink{"/mnt/guard/doc.txt.locked"}).ok());
  EXPECT_TRUE(fs::exists(r.under / "doc.txt"));
  EXPECT_FALSE(fs::exists(r.under / "doc.txt.locked"));

  auto c = r.call(66, req::Create{"/mnt/guard/README_RANSOM.txt", O_WRONLY});
  ASSERT_TRUE(c.ok());
  EXPECT_FALSE(fs::exists(r.under / "README_RANSOM.txt"));
  EXPECT_GT(r.ov.stats().fabricated, 0u);
}

TEST(Overlay, PKillRefusesKilledPid) {
  Rig r(defense::DefenseMode::pkill(), "pkill");
  r.engine.on_verdict(88, defense::VerdictState::Malicious, 1);
  r.engine.join_kills();
  auto o = r.call(88, req::Open{"/mnt/guard/doc.txt", O_RDWR});
  EXPECT_FALSE(o.ok());
  EXPECT_EQ(r.underlay("doc.txt"), "original");
  EXPECT_TRUE(r.call(89, req::GetAttr{"/mnt/guard/doc.txt"}).ok());
}

TEST(Overlay, GatedCallsWaitThenRedecide) {
  Rig r(defense::DefenseMode::track_obf(5), "gate");
  std::vector<UnixNanos> waited;
  r.ov.set_gate_wait([&](const CallContext& ctx, UnixNanos deadline, std::uint64_t) {
    waited.push_back(deadline);
    r.clock.sleep_until(deadline);
    // The detector decides while the call is parked.
    r.engine.on_verdict(ctx.pid, defense::VerdictState::Malicious, to_millis(deadline));
  });
  auto o = r.call(12, req::Open{"/mnt/guard/doc.txt", O_RDWR});
  ASSERT_TRUE(o.ok());
  EXPECT_TRUE(waited.empty());  // reads flow under TrackObf
  auto w = r.call(12, req::Write{o.as<resp::Opened>().handle, 0, bytes("X")});
  ASSERT_TRUE(w.ok());
  ASSERT_EQ(waited.size(), 1u);
  EXPECT_EQ(waited[0], 1700000005000000000ns);
  EXPECT_EQ(r.underlay("doc.txt"), "original");
}

TEST(Overlay, FailOpenWhenEngineDown) {
  Rig r(defense::DefenseMode::obf(), "down");
  r.engine.on_verdict(3, defense::VerdictState::Malicious, 1);
  r.engine.set_available(false);
  EXPECT_TRUE(r.call(3, req::Unlink{"/mnt/guard/doc.txt"}).ok());
  EXPECT_FALSE(fs::exists(r.under / "doc.txt"));
  EXPECT_EQ(r.ov.stats().fail_open, 1u);
}

TEST(VerdictChannel, FormatAndFileTail) {
  channel::VerdictRecord v{123, defense::VerdictState::Malicious, 1700000000000};
  EXPECT_EQ(channel::format_verdict(v), "verdict 123 malicious 1700000000000");
  EXPECT_EQ(channel::parse_verdict(channel::format_verdict(v)), v);
  EXPECT_THROW(channel::parse_verdict("verdict 1 maybe 2"), FormatError);

  auto path = fs::temp_directory_path() / "guardfs-unit-verdicts";
  fs::remove(path);
  std::ofstream(path) << "";
  channel::FileTailSource src(path, true);
  {
    channel::FileVerdictPublisher pub(path);
    EXPECT_TRUE(pub.publish(v));
  }
  std::ofstream(path, std::ios::app) << "garbage line\nverdict 9 benign 5\nverdict 10 mal";
  auto got = src.poll();
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[0], v);
  EXPECT_EQ(got[1].pid, 9);
  std::ofstream(path, std::ios::app) << "icious 6\n";
  got = src.poll();
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0].pid, 10);
  fs::remove(path);
}

TEST(VerdictChannel, UnixSocket) {
  auto path = fs::temp_directory_path() / "guardfs-unit-verdict.sock";
  fs::remove(path);
  channel::SocketVerdictServer server(path);
  channel::SocketVerdictPublisher pub(path);
  ASSERT_TRUE(pub.publish({5, defense::VerdictState::Benign, 1}));
  ASSERT_TRUE(pub.publish({6, defense::VerdictState::Malicious, 2}));
  std::vector<channel::VerdictRecord> got;
  for (int i = 0; i < 100 && got.size() < 2; ++i) {
    auto more = server.poll();
    got.insert(got.end(), more.begin(), more.end());
    std::this_thread::sleep_for(5ms);
  }
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[1].pid, 6);
}
