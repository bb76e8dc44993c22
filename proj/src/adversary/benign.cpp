#include <fcntl.h>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <random>

#include "guardfs/adversary.hpp"

namespace guardfs::adversary {

std::string_view to_string(Workload w) {
  switch (w) {
    case Workload::ReaderServer: return "reader-server";
    case Workload::Uploader: return "uploader";
    case Workload::Installer: return "installer";
    case Workload::SensorLogger: return "sensor-logger";
    case Workload::Archiver: return "archiver";
  }
  return "?";
}

Workload parse_workload(std::string_view text) {
  for (auto w : {Workload::ReaderServer, Workload::Uploader, Workload::Installer,
                 Workload::SensorLogger, Workload::Archiver}) {
    if (to_string(w) == text) return w;
  }
  throw std::invalid_argument("unknown workload '" + std::string(text) + "'");
}

std::vector<Workload> benign_workloads() {
  return {Workload::Installer, Workload::SensorLogger, Workload::Archiver, Workload::Uploader};
}

void BenignSpec::validate() const {
  if (!(duration_s >= 0)) throw std::invalid_argument("duration must be >= 0");
  if (!(intensity > 0)) throw std::invalid_argument("intensity must be positive");
  if (parallelism < 1) throw std::invalid_argument("parallelism must be >= 1");
}

std::string BenignSpec::output_dir() const {
  return ".bench-" + std::string(to_string(workload)) + "-" + std::to_string(seed);
}

namespace {

using Deadline = std::optional<UnixNanos>;

std::string join(const std::string& dir, const std::string& name) {
  return dir.ends_with('/') ? dir + name : dir + "/" + name;
}

std::chrono::nanoseconds seconds(double s) {
  return std::chrono::nanoseconds(static_cast<std::int64_t>(s * 1e9));
}

bool past(Clock& clock, Deadline deadline) { return deadline && clock.now() >= *deadline; }

std::vector<std::string> corpus_files(FsClient& fs, const std::string& root,
                                      std::vector<std::string> suffixes = {}) {
  RansomSpec walk;
  walk.traversal = Traversal::DepthFirst;
  walk.suffixes = std::move(suffixes);
  return list_targets(fs, root, walk);
}

/// Reads a whole file in 64 KiB calls; appends to `out` when given.
std::uint64_t read_whole(FsClient& fs, const std::string& path, WorkStats& stats,
                         std::vector<std::uint8_t>* out = nullptr, std::uint64_t limit = ~0ull) {
  Handle h;
  if (fs.open(path, O_RDONLY, h) != 0) {
    ++stats.errors;
    return 0;
  }
  std::vector<std::uint8_t> buf;
  std::uint64_t offset = 0;
  while (offset < limit) {
    const auto want = static_cast<std::uint32_t>(std::min<std::uint64_t>(64 * 1024, limit - offset));
    if (fs.read(h, offset, want, buf) != 0) {
      ++stats.errors;
      break;
    }
    if (out) out->insert(out->end(), buf.begin(), buf.end());
    offset += buf.size();
    if (buf.size() < want) break;
  }
  fs.release(h);
  return offset;
}

int write_chunked(FsClient& fs, Handle h, std::uint64_t offset, std::span<const std::uint8_t> data,
                  Deadline dl) {
  constexpr std::size_t kChunk = 128 * 1024;
  for (std::size_t done = 0; done < data.size() && !past(fs.clock(), dl); done += kChunk) {
    const auto n = std::min(kChunk, data.size() - done);
    if (int rc = fs.write(h, offset + done, data.subspan(done, n)); rc != 0) return rc;
  }
  return 0;
}

std::span<const std::uint8_t> bytes_of(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

WorkStats reader_server(FsClient& fs, const BenignSpec& spec, const std::string& root, Deadline dl) {
  WorkStats stats;
  Clock& clock = fs.clock();
  const UnixNanos end = clock.now() + seconds(spec.duration_s);
  const auto files = corpus_files(fs, root);
  if (files.empty()) return stats;
  std::mt19937_64 rng(spec.seed);
  const double rate = 4.0 * (1 << 20) * spec.intensity;
  const UnixNanos t0 = clock.now();
  while (clock.now() < end && !past(clock, dl)) {
    stats.bytes_attempted += read_whole(fs, files[rng() % files.size()], stats);
    ++stats.files_touched;
    clock.sleep_until(std::min(end, t0 + seconds(double(stats.bytes_attempted) / rate)));
  }
  return stats;
}

WorkStats uploader(FsClient& fs, const BenignSpec& spec, const std::string& dir, int worker,
                   Deadline dl) {
  WorkStats stats;
  Clock& clock = fs.clock();
  const UnixNanos end = clock.now() + seconds(spec.duration_s);
  fs.mkdir(dir);
  Handle h;
  if (fs.create(join(dir, "upload-" + std::to_string(worker) + ".bin"), h) != 0) {
    ++stats.errors;
    return stats;
  }
  ++stats.files_touched;
  std::mt19937_64 rng(spec.seed * 31 + static_cast<std::uint64_t>(worker));
  std::vector<std::uint8_t> chunk(64 * 1024);
  const auto period = seconds(0.05 / spec.intensity);
  while (clock.now() < end && !past(clock, dl)) {
    // Received payloads are already compressed.
    for (std::size_t i = 0; i < chunk.size(); i += 8) {
      const std::uint64_t v = rng();
      std::memcpy(chunk.data() + i, &v, 8);
    }
    if (fs.write(h, stats.bytes_attempted, chunk) != 0) ++stats.errors;
    stats.bytes_attempted += chunk.size();
    clock.sleep_until(std::min(end, clock.now() + period));
  }
  fs.release(h);
  return stats;
}

WorkStats installer(FsClient& fs, const BenignSpec& spec, const std::string& root,
                    const std::string& dir, int worker, Deadline dl) {
  WorkStats stats;
  Clock& clock = fs.clock();
  const auto sources = corpus_files(fs, root, {".txt", ".csv"});
  const std::string base = join(dir, "w" + std::to_string(worker));
  fs.mkdir(dir);
  fs.mkdir(base);
  std::mt19937_64 rng(spec.seed * 131 + static_cast<std::uint64_t>(worker));
  const int packages = std::max(1, static_cast<int>(std::lround(10 * spec.intensity)));
  const auto pause = std::chrono::milliseconds(10);
  const auto download = std::chrono::milliseconds(250);
  std::vector<std::string> previous;
  for (int p = 0; p < packages && !past(clock, dl); ++p) {
    std::vector<std::uint8_t> source;
    if (!sources.empty()) read_whole(fs, sources[rng() % sources.size()], stats, &source, 64 * 1024);
    const std::string pkg = join(base, "pkg" + std::to_string(p));
    fs.mkdir(pkg);
    std::vector<std::string> installed;
    for (int f = 0; f < 8 && !past(clock, dl); ++f) {
      const std::size_t size = 2048 + rng() % (14 * 1024);
      std::vector<std::uint8_t> content;
      if (f % 2 == 0 && !source.empty()) {
        // Config and documentation files taken from the package text.
        const std::size_t start = rng() % source.size();
        while (content.size() < size) {
          const auto n = std::min(size - content.size(), source.size() - start);
          content.insert(content.end(), source.begin() + static_cast<std::ptrdiff_t>(start),
                         source.begin() + static_cast<std::ptrdiff_t>(start + n));
        }
      } else {
        content = generate_content(EntropyProfile::Structured, size, rng());
      }
      const std::string name = "file" + std::to_string(f) + (f % 2 == 0 ? ".conf" : ".so");
      const std::string tmp = join(pkg, "." + name + ".tmp");
      Handle h;
      if (fs.create(tmp, h) != 0) {
        ++stats.errors;
        continue;
      }
      if (fs.write(h, 0, content) != 0) ++stats.errors;
      fs.release(h);
      if (fs.rename(tmp, join(pkg, name)) != 0) ++stats.errors;
      installed.push_back(join(pkg, name));
      stats.bytes_attempted += content.size();
      ++stats.files_touched;
      clock.sleep_for(pause);
    }
    if (p % 3 == 2) {
      // Upgrade step: the previous package's files are replaced.
      for (const auto& old : previous) fs.unlink(old);
    }
    previous = installed;
    clock.sleep_for(download);
  }
  return stats;
}

WorkStats sensor_logger(FsClient& fs, const BenignSpec& spec, const std::string& dir, Deadline dl) {
  WorkStats stats;
  Clock& clock = fs.clock();
  fs.mkdir(dir);
  Handle h;
  if (fs.create(join(dir, "sensor.log"), h) != 0) {
    ++stats.errors;
    return stats;
  }
  ++stats.files_touched;
  std::mt19937_64 rng(spec.seed);
  const int samples = static_cast<int>(std::lround(spec.duration_s * spec.intensity));
  const auto period = seconds(1.0 / spec.intensity);
  const UnixNanos t0 = clock.now();
  for (int i = 0; i < samples && !past(clock, dl); ++i) {
    char line[128];
    const int n = std::snprintf(line, sizeof(line),
                                "sample=%d pm25=%d.%d pm10=%d.%d temp=21.%d humidity=4%d\n", i,
                                int(rng() % 40), int(rng() % 10), int(rng() % 60),
                                int(rng() % 10), int(rng() % 10), int(rng() % 10));
    if (fs.write(h, stats.bytes_attempted, bytes_of({line, static_cast<std::size_t>(n)})) != 0) {
      ++stats.errors;
    }
    stats.bytes_attempted += static_cast<std::uint64_t>(n);
    if (i + 1 < samples) clock.sleep_until(t0 + period * (i + 1));
  }
  fs.release(h);
  return stats;
}

void tar_header(std::vector<std::uint8_t>& out, const std::string& name, std::uint64_t size) {
  std::array<char, 512> h{};
  std::snprintf(h.data(), 100, "%s", name.substr(0, 99).c_str());
  std::snprintf(h.data() + 100, 8, "%07o", 0644);
  std::snprintf(h.data() + 108, 8, "%07o", 0);
  std::snprintf(h.data() + 116, 8, "%07o", 0);
  std::snprintf(h.data() + 124, 12, "%011llo", static_cast<unsigned long long>(size));
  std::snprintf(h.data() + 136, 12, "%011o", 0);
  h[156] = '0';
  std::memcpy(h.data() + 257, "ustar", 6);
  std::memcpy(h.data() + 263, "00", 2);
  std::memset(h.data() + 148, ' ', 8);
  unsigned sum = 0;
  for (char c : h) sum += static_cast<unsigned char>(c);
  std::snprintf(h.data() + 148, 8, "%06o", sum);
  out.insert(out.end(), h.begin(), h.end());
}

std::vector<std::uint8_t> gzip(const std::vector<std::uint8_t>& in) {
  z_stream zs{};
  if (deflateInit2(&zs, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw std::runtime_error("deflateInit2 failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, in.size()) + 64);
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw std::runtime_error("deflate failed");
  return out;
}

WorkStats archiver(FsClient& fs, const std::string& root,
                   const std::string& dir, Deadline dl) {
  WorkStats stats;
  Clock& clock = fs.clock();
  std::vector<std::uint8_t> tar;
  for (const auto& path : corpus_files(fs, root)) {
    if (past(clock, dl)) break;
    std::vector<std::uint8_t> content;
    read_whole(fs, path, stats, &content);
    tar_header(tar, path.substr(std::min(path.size(), root.size() + 1)), content.size());
    tar.insert(tar.end(), content.begin(), content.end());
    tar.resize((tar.size() + 511) / 512 * 512, 0);
    ++stats.files_touched;
  }
  tar.resize(tar.size() + 1024, 0);
  const auto archive = gzip(tar);
  if (past(clock, dl)) return stats;
  fs.mkdir(dir);
  Handle h;
  if (fs.create(join(dir, "backup.tar.gz"), h) != 0) {
    ++stats.errors;
    return stats;
  }
  if (write_chunked(fs, h, 0, archive, dl) != 0) ++stats.errors;
  fs.release(h);
  stats.bytes_attempted = archive.size();
  return stats;
}

}  // namespace

WorkStats run_benign(FsClient& fs, const BenignSpec& spec, const std::string& root, int worker,
                     std::optional<UnixNanos> deadline) {
  spec.validate();
  Clock& clock = fs.clock();
  const UnixNanos t0 = clock.now();
  const std::string dir = join(root, spec.output_dir());
  WorkStats stats;
  switch (spec.workload) {
    case Workload::ReaderServer: stats = reader_server(fs, spec, root, deadline); break;
    case Workload::Uploader: stats = uploader(fs, spec, dir, worker, deadline); break;
    case Workload::Installer: stats = installer(fs, spec, root, dir, worker, deadline); break;
    case Workload::SensorLogger: stats = sensor_logger(fs, spec, dir, deadline); break;
    case Workload::Archiver: stats = archiver(fs, root, dir, deadline); break;
  }
  stats.duration_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(clock.now() - t0).count();
  return stats;
}

}  // namespace guardfs::adversary
