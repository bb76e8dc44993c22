#include "guardfs/telemetry.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "guardfs/textio.hpp"

namespace guardfs::telemetry {

double shannon_entropy(std::span<const std::uint8_t> buffer) {
  if (buffer.empty()) return 0.0;
  std::array<std::uint64_t, 256> counts{};
  for (auto b : buffer) ++counts[b];
  const double n = static_cast<double>(buffer.size());
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return std::clamp(h, 0.0, 8.0);
}

std::string percent_encode(std::string_view raw) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  if (raw.empty()) return "-";
  std::string out;
  out.reserve(raw.size());
  for (unsigned char c : raw) {
    const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                      (c >= '0' && c <= '9') || c == '/' || c == '.' || c == '_' ||
                      c == '-' || c == '~';
    if (keep) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 0xF]);
    }
  }
  return out;
}

std::string percent_decode(std::string_view encoded) {
  if (encoded == "-") return {};
  std::string out;
  out.reserve(encoded.size());
  for (std::size_t i = 0; i < encoded.size(); ++i) {
    if (encoded[i] != '%') {
      out.push_back(encoded[i]);
      continue;
    }
    if (i + 2 >= encoded.size()) throw FormatError("truncated percent escape");
    unsigned value = 0;
    auto [ptr, ec] = std::from_chars(encoded.data() + i + 1, encoded.data() + i + 3, value, 16);
    if (ec != std::errc{} || ptr != encoded.data() + i + 3) {
      throw FormatError("bad percent escape");
    }
    out.push_back(static_cast<char>(value));
    i += 2;
  }
  return out;
}

std::string format_event(const FsEvent& e) {
  std::string line;
  line.reserve(64 + e.path.size());
  line += std::to_string(e.ts);
  line += ' ';
  line += std::to_string(e.pid);
  line += ' ';
  line += to_string(e.op);
  line += ' ';
  line += percent_encode(e.path);
  line += ' ';
  line += std::to_string(e.bytes);
  if (e.entropy) {
    line += ' ';
    line += textio::format_double(*e.entropy);
  }
  return line;
}

FsEvent parse_event(std::string_view line) {
  auto fields = textio::split_ws(line);
  if (fields.size() != 5 && fields.size() != 6) {
    throw FormatError("event record needs 5 or 6 fields: '" + std::string(line) + "'");
  }
  FsEvent e;
  e.ts = textio::parse_int<UnixMillis>(fields[0]);
  e.pid = textio::parse_int<Pid>(fields[1]);
  auto op = parse_call_kind(fields[2]);
  if (!op) throw FormatError("unknown call kind '" + std::string(fields[2]) + "'");
  e.op = *op;
  e.path = percent_decode(fields[3]);
  e.bytes = textio::parse_int<std::uint64_t>(fields[4]);
  if (fields.size() == 6) {
    double h = textio::parse_double(fields[5]);
    if (!(h >= 0.0 && h <= 8.0)) throw FormatError("entropy out of range");
    e.entropy = h;
  }
  return e;
}

UnixMillis VectorSink::record(const FsEvent& event) {
  std::lock_guard lock(mu_);
  events_.push_back(event);
  return event.ts;
}

std::vector<FsEvent> VectorSink::take() {
  std::lock_guard lock(mu_);
  return std::exchange(events_, {});
}

std::size_t VectorSink::size() const {
  std::lock_guard lock(mu_);
  return events_.size();
}

namespace {
constexpr std::size_t kLogFlushBytes = 1 << 16;
}

EventLog::EventLog(const std::filesystem::path& path, bool truncate) : path_(path) {
  int flags = O_WRONLY | O_CREAT | O_CLOEXEC | (truncate ? O_TRUNC : O_APPEND);
  fd_ = ::open(path.c_str(), flags, 0644);
  if (fd_ < 0) {
    throw std::runtime_error("cannot open event log " + path.string() + ": " +
                             std::strerror(errno));
  }
}

EventLog::~EventLog() {
  flush();
  if (fd_ >= 0) ::close(fd_);
}

void EventLog::append(const FsEvent& event) {
  std::lock_guard lock(mu_);
  buffer_ += format_event(event);
  buffer_ += '\n';
  ++buffered_events_;
  if (buffer_.size() >= kLogFlushBytes) flush_locked();
}

void EventLog::flush() {
  std::lock_guard lock(mu_);
  flush_locked();
}

void EventLog::flush_locked() {
  if (buffer_.empty()) return;
  std::size_t off = 0;
  bool failed = false;
  while (off < buffer_.size()) {
    ssize_t n = ::write(fd_, buffer_.data() + off, buffer_.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      failed = true;
      break;
    }
    off += static_cast<std::size_t>(n);
  }
  if (failed) {
    dropped_ += buffered_events_;
  } else {
    appended_ += buffered_events_;
  }
  buffer_.clear();
  buffered_events_ = 0;
}

std::vector<FsEvent> EventLog::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read event log " + path.string());
  std::vector<FsEvent> events;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    events.push_back(parse_event(line));
  }
  return events;
}

void EventLog::write(const std::filesystem::path& path, std::span<const FsEvent> events) {
  EventLog log(path, true);
  for (const auto& e : events) log.append(e);
  log.flush();
  if (log.dropped() != 0) throw std::runtime_error("short write to " + path.string());
}

std::vector<FeatureVector> aggregate(const Window& window) {
  struct Acc {
    FeatureVector v;
    double sum = 0.0;
    std::uint64_t n = 0;
  };
  std::map<Pid, Acc> by_pid;
  for (const auto& e : window.events) {
    auto& acc = by_pid[e.pid];
    acc.v.window_start = window.start;
    acc.v.pid = e.pid;
    switch (e.op) {
      case CallKind::Write: {
        ++acc.v.writes;
        const double h = e.entropy.value_or(0.0);
        if (acc.n == 0) {
          acc.v.e_min = acc.v.e_max = h;
        } else {
          acc.v.e_min = std::min(acc.v.e_min, h);
          acc.v.e_max = std::max(acc.v.e_max, h);
        }
        acc.sum += h;
        ++acc.n;
        break;
      }
      case CallKind::Read: ++acc.v.reads; break;
      case CallKind::Rename: ++acc.v.renames; break;
      case CallKind::Unlink: ++acc.v.unlinks; break;
      case CallKind::Create: ++acc.v.creates; break;
      default: break;
    }
  }
  std::vector<FeatureVector> out;
  out.reserve(by_pid.size());
  for (auto& [pid, acc] : by_pid) {
    if (acc.n > 0) {
      // Clamp against rounding so e_min <= e_mean <= e_max holds exactly.
      acc.v.e_mean = std::clamp(acc.sum / static_cast<double>(acc.n), acc.v.e_min, acc.v.e_max);
    }
    out.push_back(acc.v);
  }
  return out;
}

std::vector<Window> window_stream(std::span<const FsEvent> events, int length_s) {
  if (length_s <= 0) throw std::invalid_argument("window length must be positive");
  std::vector<Window> windows;
  if (events.empty()) return windows;
  const UnixMillis len = static_cast<UnixMillis>(length_s) * 1000;
  auto floor_of = [len](UnixMillis ts) {
    UnixMillis q = ts / len;
    if (ts < 0 && ts % len != 0) --q;
    return q * len;
  };
  UnixMillis lo = events.front().ts;
  UnixMillis hi = events.front().ts;
  for (const auto& e : events) {
    lo = std::min(lo, e.ts);
    hi = std::max(hi, e.ts);
  }
  const UnixMillis first = floor_of(lo);
  const auto count = static_cast<std::size_t>((floor_of(hi) - first) / len + 1);
  windows.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    windows[i].start = first + static_cast<UnixMillis>(i) * len;
    windows[i].length_s = length_s;
  }
  for (const auto& e : events) {
    windows[static_cast<std::size_t>((floor_of(e.ts) - first) / len)].events.push_back(e);
  }
  return windows;
}

std::string format_feature_row(const FeatureVector& v) {
  std::string row;
  row += std::to_string(v.window_start) + ',' + std::to_string(v.pid) + ',';
  row += std::to_string(v.writes) + ',' + std::to_string(v.reads) + ',';
  row += std::to_string(v.renames) + ',' + std::to_string(v.unlinks) + ',';
  row += std::to_string(v.creates) + ',';
  row += textio::format_double(v.e_min) + ',' + textio::format_double(v.e_mean) + ',' +
         textio::format_double(v.e_max);
  return row;
}

FeatureVector parse_feature_row(std::string_view line) {
  auto cols = textio::split(line, ',');
  if (cols.size() < 10) throw FormatError("feature row needs 10 columns");
  FeatureVector v;
  v.window_start = textio::parse_int<UnixMillis>(cols[0]);
  v.pid = textio::parse_int<Pid>(cols[1]);
  v.writes = textio::parse_int<std::uint64_t>(cols[2]);
  v.reads = textio::parse_int<std::uint64_t>(cols[3]);
  v.renames = textio::parse_int<std::uint64_t>(cols[4]);
  v.unlinks = textio::parse_int<std::uint64_t>(cols[5]);
  v.creates = textio::parse_int<std::uint64_t>(cols[6]);
  v.e_min = textio::parse_double(cols[7]);
  v.e_mean = textio::parse_double(cols[8]);
  v.e_max = textio::parse_double(cols[9]);
  return v;
}

WindowRecorder::WindowRecorder(int length_s, EventLog* log, UnixMillis open_from)
    : length_s_(length_s), log_(log) {
  if (length_s <= 0) throw std::invalid_argument("window length must be positive");
  const UnixMillis len = static_cast<UnixMillis>(length_s) * 1000;
  floor_ = (open_from / len) * len;
}

UnixMillis WindowRecorder::record(const FsEvent& event) {
  const UnixMillis len = static_cast<UnixMillis>(length_s_) * 1000;
  std::lock_guard lock(mu_);
  FsEvent e = event;
  if (e.ts < floor_) {
    e.ts = floor_;
    ++skewed_;
  }
  open_[(e.ts / len) * len].push_back(e);
  if (log_ != nullptr) log_->append(e);
  ++recorded_;
  return e.ts;
}

std::vector<Window> WindowRecorder::close_until(UnixMillis boundary) {
  const UnixMillis len = static_cast<UnixMillis>(length_s_) * 1000;
  std::vector<Window> closed;
  std::lock_guard lock(mu_);
  while (floor_ + len <= boundary) {
    Window w;
    w.start = floor_;
    w.length_s = length_s_;
    if (auto it = open_.find(floor_); it != open_.end()) {
      w.events = std::move(it->second);
      open_.erase(it);
    }
    closed.push_back(std::move(w));
    floor_ += len;
  }
  return closed;
}

}  // namespace guardfs::telemetry
