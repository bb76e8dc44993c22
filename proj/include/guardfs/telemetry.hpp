#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "guardfs/types.hpp"

namespace guardfs::telemetry {

/// Shannon entropy in bits per byte over the 256 byte values (0 for an empty
/// buffer). Result is in [0, 8].
double shannon_entropy(std::span<const std::uint8_t> buffer);

inline double shannon_entropy(std::string_view text) {
  return shannon_entropy(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// One intercepted call.
struct FsEvent {
  UnixMillis ts = 0;
  Pid pid = 0;
  CallKind op = CallKind::GetAttr;
  std::string path;
  std::uint64_t bytes = 0;
  std::optional<double> entropy;  // Write only

  bool operator==(const FsEvent&) const = default;
};

std::string percent_encode(std::string_view raw);
std::string percent_decode(std::string_view encoded);

/// `ts_ms pid op path bytes [entropy]`, path percent-encoded, no newline.
std::string format_event(const FsEvent& event);
FsEvent parse_event(std::string_view line);

class EventSink {
 public:
  virtual ~EventSink() = default;
  /// Returns the timestamp the event was actually filed under (sinks that
  /// window events may move late events forward).
  virtual UnixMillis record(const FsEvent& event) = 0;
};

/// Collects events in memory, in arrival order.
class VectorSink final : public EventSink {
 public:
  UnixMillis record(const FsEvent& event) override;
  std::vector<FsEvent> take();
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::vector<FsEvent> events_;
};

/// Append-only newline-delimited event log. Write failures drop the pending
/// events and bump `dropped()`; callers keep running.
class EventLog final : public EventSink {
 public:
  explicit EventLog(const std::filesystem::path& path, bool truncate = true);
  ~EventLog() override;
  EventLog(const EventLog&) = delete;
  EventLog& operator=(const EventLog&) = delete;

  UnixMillis record(const FsEvent& event) override {
    append(event);
    return event.ts;
  }
  void append(const FsEvent& event);
  void flush();

  std::uint64_t appended() const { return appended_.load(); }
  std::uint64_t dropped() const { return dropped_.load(); }
  const std::filesystem::path& path() const { return path_; }

  static std::vector<FsEvent> read(const std::filesystem::path& path);
  static void write(const std::filesystem::path& path, std::span<const FsEvent> events);

 private:
  void flush_locked();

  std::filesystem::path path_;
  int fd_ = -1;
  std::mutex mu_;
  std::string buffer_;
  std::size_t buffered_events_ = 0;
  std::atomic<std::uint64_t> appended_{0};
  std::atomic<std::uint64_t> dropped_{0};
};

struct Window {
  UnixMillis start = 0;
  int length_s = 0;
  std::vector<FsEvent> events;

  UnixMillis end() const { return start + static_cast<UnixMillis>(length_s) * 1000; }
};

/// Per-PID aggregate of one window; the classifier's raw input row.
struct FeatureVector {
  UnixMillis window_start = 0;
  Pid pid = 0;
  std::uint64_t writes = 0;
  std::uint64_t reads = 0;
  std::uint64_t renames = 0;
  std::uint64_t unlinks = 0;
  std::uint64_t creates = 0;
  double e_min = 0.0;
  double e_mean = 0.0;
  double e_max = 0.0;

  bool operator==(const FeatureVector&) const = default;

  std::uint64_t modifying_ops() const { return writes + renames + unlinks + creates; }
};

/// One vector per PID with at least one event, sorted by PID.
std::vector<FeatureVector> aggregate(const Window& window);

/// Contiguous epoch-aligned windows covering the events' time span. Events
/// keep their relative order inside each window.
std::vector<Window> window_stream(std::span<const FsEvent> events, int length_s);

inline constexpr std::string_view kFeatureCsvHeader =
    "window_start,pid,writes,reads,renames,unlinks,creates,e_min,e_mean,e_max";

std::string format_feature_row(const FeatureVector& v);
/// Parses the first ten CSV columns; extra columns are ignored.
FeatureVector parse_feature_row(std::string_view line);

/// Live window buffer. Events are assigned to epoch-aligned windows by
/// timestamp; events older than the oldest open window are clamped into it
/// (and counted) so closed windows never change afterwards. Every recorded
/// event is also appended to the log, in the same order it enters its window.
class WindowRecorder final : public EventSink {
 public:
  WindowRecorder(int length_s, EventLog* log, UnixMillis open_from);

  UnixMillis record(const FsEvent& event) override;

  /// Closes and returns every window ending at or before `boundary`,
  /// contiguous and in order (empty windows included).
  std::vector<Window> close_until(UnixMillis boundary);

  int length_s() const { return length_s_; }
  std::uint64_t skewed() const { return skewed_.load(); }
  std::uint64_t recorded() const { return recorded_.load(); }

 private:
  int length_s_;
  EventLog* log_;
  std::mutex mu_;
  UnixMillis floor_;  // start of the oldest open window
  std::map<UnixMillis, std::vector<FsEvent>> open_;
  std::atomic<std::uint64_t> skewed_{0};
  std::atomic<std::uint64_t> recorded_{0};
};

}  // namespace guardfs::telemetry
