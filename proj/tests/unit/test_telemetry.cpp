#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "guardfs/telemetry.hpp"

using namespace guardfs;
using namespace guardfs::telemetry;
namespace fs = std::filesystem;

namespace {

// Plug-in estimate straight from the definition, as an independent oracle.
double entropy_oracle(const std::vector<std::uint8_t>& buf) {
  if (buf.empty()) return 0.0;
  std::map<int, double> counts;
  for (auto b : buf) counts[b] += 1;
  double h = 0;
  for (auto& [_, c] : counts) {
    double p = c / buf.size();
    h -= p * std::log2(p);
  }
  return h;
}

FsEvent ev(UnixMillis ts, Pid pid, CallKind op, std::string path = "/f", std::uint64_t bytes = 0,
           std::optional<double> e = std::nullopt) {
  return FsEvent{ts, pid, op, std::move(path), bytes, e};
}

}  // namespace

TEST(Entropy, KnownBuffers) {
  std::vector<std::uint8_t> uniform(256 * 16);
  for (std::size_t i = 0; i < uniform.size(); ++i) uniform[i] = static_cast<std::uint8_t>(i);
  EXPECT_NEAR(shannon_entropy(uniform), 8.0, 1e-9);
  EXPECT_EQ(shannon_entropy(std::vector<std::uint8_t>(4096, 0x41)), 0.0);
  EXPECT_NEAR(shannon_entropy("abab"), 1.0, 1e-12);
  EXPECT_EQ(shannon_entropy(std::span<const std::uint8_t>{}), 0.0);
}

TEST(Entropy, MatchesOracleOnRandomBuffers) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    std::size_t n = 1 + rng() % 3000;
    int alphabet = 1 + static_cast<int>(rng() % 256);
    std::vector<std::uint8_t> buf(n);
    for (auto& b : buf) b = static_cast<std::uint8_t>(rng() % alphabet);
    double h = shannon_entropy(buf);
    EXPECT_NEAR(h, entropy_oracle(buf), 1e-9);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log2(static_cast<double>(alphabet)) + 1e-9);
  }
}

TEST(Entropy, PermutationInvariant) {
  std::mt19937_64 rng(5);
  std::vector<std::uint8_t> buf(1000);
  for (auto& b : buf) b = static_cast<std::uint8_t>(rng() % 17);
  double h = shannon_entropy(buf);
  std::shuffle(buf.begin(), buf.end(), rng);
  EXPECT_NEAR(shannon_entropy(buf), h, 1e-12);
}

TEST(EventFormat, RoundTripsOddPaths) {
  for (std::string p : {"/a b/c%d", "/\xc3\xa9t\xc3\xa9.txt", "/new\nline", "/plain.txt"}) {
    FsEvent e = ev(1700000000123, 42, CallKind::Write, p, 65536, 7.25);
    EXPECT_EQ(parse_event(format_event(e)), e) << p;
    EXPECT_EQ(format_event(e).find('\n'), std::string::npos);
  }
  FsEvent r = ev(5, 1, CallKind::Read, "/x", 10);
  EXPECT_EQ(parse_event(format_event(r)), r);
}

TEST(EventFormat, RejectsGarbage) {
  EXPECT_THROW(parse_event("not an event"), FormatError);
  EXPECT_THROW(parse_event("1 2 teleport /x 0"), FormatError);
}

TEST(PercentEncoding, RoundTrip) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 100; ++i) {
    std::string s(rng() % 40, '\0');
    for (auto& c : s) c = static_cast<char>(rng() % 256);
    auto enc = percent_encode(s);
    EXPECT_EQ(enc.find(' '), std::string::npos);
    EXPECT_EQ(percent_decode(enc), s);
  }
}

TEST(EventLog, WriteThenRead) {
  auto path = fs::temp_directory_path() / "guardfs-unit-events.log";
  std::vector<FsEvent> events = {ev(1, 1, CallKind::Create, "/a"), ev(2, 1, CallKind::Write, "/a", 3, 1.5),
                                 ev(3, 2, CallKind::Rename, "/a")};
  {
    EventLog log(path);
    for (auto& e : events) log.append(e);
  }
  EXPECT_EQ(EventLog::read(path), events);
  fs::remove(path);
}

TEST(Aggregate, CountsAndEntropyStats) {
  Window w{10000, 5, {}};
  w.events = {ev(10001, 7, CallKind::Write, "/a", 10, 2.0), ev(10002, 7, CallKind::Write, "/a", 10, 6.0),
              ev(10003, 7, CallKind::Read, "/a", 10), ev(10004, 7, CallKind::Rename),
              ev(10005, 7, CallKind::Unlink), ev(10006, 7, CallKind::Create),
              ev(10007, 3, CallKind::Read, "/b", 1), ev(10008, 7, CallKind::GetAttr)};
  auto v = aggregate(w);
  ASSERT_EQ(v.size(), 2u);
  EXPECT_EQ(v[0].pid, 3);
  EXPECT_EQ(v[0].reads, 1u);
  EXPECT_EQ(v[0].modifying_ops(), 0u);
  EXPECT_EQ(v[1].pid, 7);
  EXPECT_EQ(v[1].writes, 2u);
  EXPECT_EQ(v[1].reads, 1u);
  EXPECT_EQ(v[1].renames, 1u);
  EXPECT_EQ(v[1].unlinks, 1u);
  EXPECT_EQ(v[1].creates, 1u);
  EXPECT_DOUBLE_EQ(v[1].e_min, 2.0);
  EXPECT_DOUBLE_EQ(v[1].e_mean, 4.0);
  EXPECT_DOUBLE_EQ(v[1].e_max, 6.0);
  EXPECT_EQ(v[1].window_start, 10000);
}

TEST(FeatureRow, RoundTrip) {
  FeatureVector v{1700000005000, 99, 3, 4, 1, 2, 5, 0.5, 3.25, 7.999};
  EXPECT_EQ(parse_feature_row(format_feature_row(v)), v);
  EXPECT_EQ(parse_feature_row(format_feature_row(v) + ",extra,cols"), v);
  EXPECT_EQ(std::count(kFeatureCsvHeader.begin(), kFeatureCsvHeader.end(), ','), 9);
}

TEST(WindowStream, EpochAlignedAndContiguous) {
  std::vector<FsEvent> events = {ev(12345, 1, CallKind::Read), ev(12999, 1, CallKind::Write),
                                 ev(26000, 2, CallKind::Read)};
  auto ws = window_stream(events, 5);
  ASSERT_EQ(ws.size(), 4u);  // [10,15) [15,20) [20,25) [25,30)
  EXPECT_EQ(ws[0].start, 10000);
  for (std::size_t i = 1; i < ws.size(); ++i) EXPECT_EQ(ws[i].start, ws[i - 1].end());
  EXPECT_EQ(ws[0].events.size(), 2u);
  EXPECT_TRUE(ws[1].events.empty());
  EXPECT_EQ(ws[3].events.size(), 1u);
}

TEST(WindowRecorder, PartitionsEveryEventExactlyOnce) {
  std::mt19937_64 rng(11);
  WindowRecorder rec(2, nullptr, 0);
  std::vector<FsEvent> sent;
  UnixMillis t = 0;
  std::vector<Window> closed;
  for (int i = 0; i < 2000; ++i) {
    t += rng() % 40;
    // Occasional late arrivals up to 3 s old.
    UnixMillis ts = (rng() % 10 == 0) ? std::max<UnixMillis>(0, t - static_cast<UnixMillis>(rng() % 3000)) : t;
    FsEvent e = ev(ts, static_cast<Pid>(1 + rng() % 4), CallKind::Read);
    UnixMillis filed = rec.record(e);
    e.ts = filed;
    sent.push_back(e);
    if (i % 100 == 99) {
      auto more = rec.close_until(t - t % 2000);
      closed.insert(closed.end(), more.begin(), more.end());
    }
  }
  auto rest = rec.close_until(t - t % 2000 + 2000);
  closed.insert(closed.end(), rest.begin(), rest.end());

  std::size_t total = 0;
  for (std::size_t i = 0; i < closed.size(); ++i) {
    if (i) EXPECT_EQ(closed[i].start, closed[i - 1].end());
    for (auto& e : closed[i].events) {
      EXPECT_GE(e.ts, closed[i].start);
      EXPECT_LT(e.ts, closed[i].end());
    }
    total += closed[i].events.size();
  }
  EXPECT_EQ(total, sent.size());
  EXPECT_EQ(rec.recorded(), sent.size());
}

TEST(WindowRecorder, LateEventsClampIntoOldestOpenWindow) {
  WindowRecorder rec(5, nullptr, 0);
  rec.record(ev(6000, 1, CallKind::Read));
  auto closed = rec.close_until(5000);
  ASSERT_EQ(closed.size(), 1u);
  EXPECT_TRUE(closed[0].events.empty());
  EXPECT_EQ(rec.record(ev(1000, 1, CallKind::Write)), 5000);
  EXPECT_EQ(rec.skewed(), 1u);
  auto next = rec.close_until(10000);
  ASSERT_EQ(next.size(), 1u);
  EXPECT_EQ(next[0].events.size(), 2u);
}
