#pragma once

#include <sys/types.h>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "guardfs/clock.hpp"
#include "guardfs/defense.hpp"
#include "guardfs/overlay.hpp"
#include "guardfs/syscall.hpp"
#include "guardfs/telemetry.hpp"

namespace guardfs::session {
class MountSession;
}

namespace guardfs::adversary {

// ---------------------------------------------------------------- corpus

enum class EntropyProfile { Low, Structured, High };

struct SuffixClass {
  std::string suffix;  // with the dot
  double weight = 1.0;
  EntropyProfile profile = EntropyProfile::Low;
};

/// .txt/.csv low, .pdf/.docx structured, .jpg/.zip high.
std::vector<SuffixClass> default_suffix_mix();

struct CorpusSpec {
  std::uint64_t total_bytes = 16ull << 20;
  std::size_t file_count = 200;
  std::vector<SuffixClass> suffixes = default_suffix_mix();
  std::uint64_t seed = 1;

  void validate() const;
};

struct ManifestEntry {
  std::string path;  // relative to the corpus root
  std::uint64_t size = 0;
  std::string sha256;

  bool operator==(const ManifestEntry&) const = default;
};
using CorpusManifest = std::vector<ManifestEntry>;

/// Deterministic content for one file.
std::vector<std::uint8_t> generate_content(EntropyProfile profile, std::size_t size,
                                           std::uint64_t seed);

/// Fills the empty directory `root`. On failure the partial tree is removed.
CorpusManifest generate_corpus(const CorpusSpec& spec, const std::filesystem::path& root);

/// `path size sha256` per line.
void write_manifest(const std::filesystem::path& path, const CorpusManifest& manifest);
CorpusManifest read_manifest(const std::filesystem::path& path);

// ---------------------------------------------------------------- clients

/// Everything a workload does to a file system goes through here, so the same
/// code runs against a mounted overlay or in-process against a simulation.
class FsClient {
 public:
  virtual ~FsClient() = default;
  virtual SyscallResponse call(const RequestPayload& payload) = 0;
  virtual Clock& clock() = 0;

  // Convenience wrappers; they return 0 or an errno value.
  int open(const std::string& path, int flags, Handle& out);
  int create(const std::string& path, Handle& out, std::uint32_t mode = 0644);
  int read(Handle h, std::uint64_t offset, std::uint32_t size, std::vector<std::uint8_t>& out);
  int write(Handle h, std::uint64_t offset, std::span<const std::uint8_t> data);
  int release(Handle h);
  int rename(const std::string& from, const std::string& to);
  int unlink(const std::string& path);
  int mkdir(const std::string& path, std::uint32_t mode = 0755);
  int list(const std::string& path, std::vector<DirEntry>& out);
  int stat(const std::string& path, FileAttr& out);
};

/// Real syscalls against real paths (normally a mounted overlay).
class PosixFsClient final : public FsClient {
 public:
  PosixFsClient();
  ~PosixFsClient() override;
  SyscallResponse call(const RequestPayload& payload) override;
  Clock& clock() override { return system_clock(); }

 private:
  std::map<Handle, int> fds_;
  Handle next_ = 1;
};

/// Cost model for simulated calls.
struct SimCost {
  std::chrono::nanoseconds per_call{30000};
  double throughput = 500e6;  // bytes per second, the simulated δ
};

/// Dispatches straight into an Overlay as `pid` on a virtual clock. When a
/// session is given, its window cycle runs before each call. Reads and
/// writes are split at 128 KiB like the kernel bridge does.
class OverlayFsClient final : public FsClient {
 public:
  OverlayFsClient(overlay::Overlay& ov, VirtualClock& clock, Pid pid,
                  session::MountSession* session = nullptr, SimCost cost = {});
  SyscallResponse call(const RequestPayload& payload) override;
  Clock& clock() override { return clock_; }
  Pid pid() const { return pid_; }

 private:
  SyscallResponse dispatch_one(const RequestPayload& payload, std::uint64_t bytes);

  overlay::Overlay& ov_;
  VirtualClock& clock_;
  Pid pid_;
  session::MountSession* session_;
  SimCost cost_;
};

// ---------------------------------------------------------------- ransomware

enum class Traversal { DepthFirst, BreadthFirst, Shuffled };
enum class RansomMode { Overwrite, CreateThenUnlink };

std::string_view to_string(Traversal t);
Traversal parse_traversal(std::string_view text);
std::string_view to_string(RansomMode m);
RansomMode parse_ransom_mode(std::string_view text);

struct RansomSpec {
  std::string family = "custom";
  double rate = 8.0 * (1 << 20);  // ε, bytes per second over all workers
  int parallelism = 1;
  Traversal traversal = Traversal::DepthFirst;
  RansomMode mode = RansomMode::Overwrite;
  double burst_s = 0.0;  // duty cycle; 0 disables
  double sleep_s = 0.0;
  std::vector<std::string> suffixes;  // eligible suffixes; empty: all files
  std::uint64_t seed = 1;
  /// Seconds of benign-looking activity before encryption starts.
  double benign_lead_s = 0.0;
  std::size_t chunk = 64 * 1024;

  void validate() const;
  bool eligible(const std::string& path) const;
};

/// aggressive-parallel, sequential-basic, stealth-throttled, phase-sleeper.
RansomSpec preset(std::string_view name);
/// The three presets the classifier is trained and evaluated on.
std::vector<std::string> training_families();

struct WorkStats {
  std::uint64_t bytes_attempted = 0;
  std::uint64_t files_touched = 0;
  std::int64_t duration_ms = 0;
  std::uint64_t errors = 0;

  void merge(const WorkStats& o);
  std::map<std::string, std::string> to_key_values() const;
};

/// Eligible files under `root`, ordered per the traversal.
std::vector<std::string> list_targets(FsClient& fs, const std::string& root,
                                      const RansomSpec& spec);

/// Key seed of worker `index` of a run seeded with `seed`.
std::uint64_t worker_seed(std::uint64_t seed, int index);

/// Round-robin partition into `parts` lists.
std::vector<std::vector<std::string>> partition(const std::vector<std::string>& files, int parts);

/// Stream-cipher output entropy check helper: ChaCha20 with a key derived
/// from `seed`.
class Encryptor {
 public:
  explicit Encryptor(std::uint64_t seed);
  ~Encryptor();
  Encryptor(const Encryptor&) = delete;
  Encryptor& operator=(const Encryptor&) = delete;

  /// Starts a new keystream for the next file.
  void next_file();
  void apply(std::span<const std::uint8_t> in, std::vector<std::uint8_t>& out);

 private:
  void* ctx_;
  std::array<unsigned char, 32> key_{};
  std::uint64_t file_counter_ = 0;
};

/// Optional benign lead, then encrypts `files` at `rate`, honoring the duty
/// cycle. Stops early at `deadline`.
WorkStats encrypt_files(FsClient& fs, const RansomSpec& spec, const std::vector<std::string>& files,
                        double rate, const std::string& root, std::uint64_t worker_seed,
                        std::optional<UnixNanos> deadline = std::nullopt);
/// Same, pulling paths from `next` until it runs dry. The benign lead reads
/// nothing in this form.
using NextFile = std::function<std::optional<std::string>()>;
WorkStats encrypt_files(FsClient& fs, const RansomSpec& spec, const NextFile& next, double rate,
                        const std::string& root, std::uint64_t worker_seed,
                        std::optional<UnixNanos> deadline = std::nullopt);

// ---------------------------------------------------------------- benign

enum class Workload { ReaderServer, Uploader, Installer, SensorLogger, Archiver };
std::string_view to_string(Workload w);
Workload parse_workload(std::string_view text);
/// The four analogs checked for false positives.
std::vector<Workload> benign_workloads();

struct BenignSpec {
  Workload workload = Workload::SensorLogger;
  double duration_s = 10.0;  // reader-server, uploader, sensor-logger
  double intensity = 1.0;    // scales rates and sizes
  int parallelism = 1;       // installer runs several writers
  std::uint64_t seed = 1;

  void validate() const;
  /// Directory (relative to the target root) the workload writes into.
  std::string output_dir() const;
};

WorkStats run_benign(FsClient& fs, const BenignSpec& spec, const std::string& root, int worker = 0,
                     std::optional<UnixNanos> deadline = std::nullopt);

// ---------------------------------------------------------------- processes

/// Executable spawned for `worker` runs; defaults to /proc/self/exe.
void set_worker_executable(const std::filesystem::path& exe);
std::filesystem::path worker_executable();

/// Entry point for `<exe> worker ...`; returns the exit code.
int worker_main(const std::vector<std::string>& args);

std::vector<std::string> ransom_worker_args(const RansomSpec& spec, const std::string& root,
                                            const std::filesystem::path& stats);
std::vector<std::string> benign_worker_args(const BenignSpec& spec, const std::string& root,
                                            const std::filesystem::path& stats);

/// A spawned workload process tree.
class RunHandle {
 public:
  static RunHandle spawn(const std::vector<std::string>& args, const std::filesystem::path& stats);
  RunHandle(RunHandle&&) noexcept;
  RunHandle& operator=(RunHandle&&) noexcept;
  ~RunHandle();

  Pid pid() const { return pid_; }
  /// Root plus every worker PID the run reported.
  std::vector<Pid> pids() const;
  bool running();
  /// Exit code, or 128 + signal.
  int wait();
  std::optional<int> wait_for(std::chrono::milliseconds timeout);
  /// SIGKILLs the tree and reaps the root.
  void kill();
  std::map<std::string, std::string> stats() const;
  std::chrono::milliseconds elapsed() const;

 private:
  RunHandle() = default;
  void reap(int status);

  Pid pid_ = 0;
  std::filesystem::path stats_;
  std::optional<int> exit_;
  std::chrono::steady_clock::time_point started_;
  std::chrono::steady_clock::time_point ended_;
};

RunHandle run_ransomware(const RansomSpec& spec, const std::filesystem::path& target_root,
                         const std::filesystem::path& stats);
RunHandle run_benign_process(const BenignSpec& spec, const std::filesystem::path& target_root,
                             const std::filesystem::path& stats);

// ---------------------------------------------------------------- simulation

struct SimOptions {
  defense::DefenseMode mode = defense::DefenseMode::none();
  UnixNanos start = std::chrono::seconds(1700000000);
  Pid base_pid = 20000;
  SimCost cost;
  std::optional<std::chrono::nanoseconds> cap;
};

struct SimResult {
  std::vector<telemetry::FsEvent> events;  // merged, by timestamp
  std::vector<Pid> pids;                   // workers that touched files
  WorkStats stats;
  UnixNanos end{};
};

/// Runs every worker of the spec as its own simulated process (sequentially,
/// merged by time) against `underlay`. No detector is involved, so gated
/// modes hold every qualifying call until the next boundary.
SimResult simulate_ransomware(const RansomSpec& spec, const std::filesystem::path& underlay,
                              const SimOptions& options);
SimResult simulate_benign(const BenignSpec& spec, const std::filesystem::path& underlay,
                          const SimOptions& options);

}  // namespace guardfs::adversary
