#include <signal.h>
#include <spawn.h>
#include <spdlog/spdlog.h>
#include <sys/mman.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <functional>
#include <set>
#include <thread>

#include "guardfs/adversary.hpp"
#include "guardfs/process.hpp"
#include "guardfs/textio.hpp"

extern char** environ;

namespace guardfs::adversary {

namespace {

std::filesystem::path& exe_override() {
  static std::filesystem::path exe;
  return exe;
}

std::map<std::string, std::string> parse_options(const std::vector<std::string>& args) {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (!args[i].starts_with("--") || i + 1 >= args.size()) {
      throw std::invalid_argument("worker: expected --key value pairs, got '" + args[i] + "'");
    }
    out[args[i].substr(2)] = args[i + 1];
    ++i;
  }
  return out;
}

std::string need(const std::map<std::string, std::string>& o, const std::string& key) {
  auto it = o.find(key);
  if (it == o.end()) throw std::invalid_argument("worker: missing --" + key);
  return it->second;
}

std::string get(const std::map<std::string, std::string>& o, const std::string& key,
                std::string fallback) {
  auto it = o.find(key);
  return it == o.end() ? fallback : it->second;
}

WorkStats from_key_values(const std::map<std::string, std::string>& kv) {
  WorkStats s;
  auto num = [&](const char* k) { return kv.count(k) ? textio::parse_int<std::int64_t>(kv.at(k)) : 0; };
  s.bytes_attempted = static_cast<std::uint64_t>(num("bytes_attempted"));
  s.files_touched = static_cast<std::uint64_t>(num("files_touched"));
  s.duration_ms = num("duration_ms");
  s.errors = static_cast<std::uint64_t>(num("errors"));
  return s;
}

std::filesystem::path suffixed(const std::filesystem::path& p, const std::string& suffix) {
  return std::filesystem::path(p.string() + suffix);
}

/// Runs `job(i)` in `parts` forked children, records their PIDs and merges
/// the stats they leave behind.
WorkStats fork_workers(int parts, const std::filesystem::path& stats,
                       const std::function<WorkStats(int)>& job) {
  std::set<pid_t> live;
  std::vector<pid_t> all;
  int serial = 0;
  auto start = [&](int i) {
    const int k = serial++;
    const pid_t child = ::fork();
    if (child < 0) throw std::runtime_error(std::string("fork: ") + std::strerror(errno));
    if (child == 0) {
      int code = 0;
      try {
        const auto s = job(i);
        textio::write_key_values(suffixed(stats, ".w" + std::to_string(k)), s.to_key_values());
      } catch (const std::exception& e) {
        std::fprintf(stderr, "worker %d: %s\n", i, e.what());
        code = 1;
      }
      std::fflush(nullptr);
      ::_exit(code);
    }
    live.insert(child);
    all.push_back(child);
    std::string list;
    for (pid_t c : all) list += std::to_string(c) + "\n";
    textio::write_file_atomic(suffixed(stats, ".pids"), list);
  };
  for (int i = 0; i < parts; ++i) start(i);

  while (!live.empty()) {
    int status = 0;
    const pid_t done = ::waitpid(-1, &status, 0);
    if (done < 0) {
      if (errno == EINTR) continue;
      break;
    }
    live.erase(done);
  }

  WorkStats total;
  for (int k = 0; k < serial; ++k) {
    const auto part = suffixed(stats, ".w" + std::to_string(k));
    std::error_code ec;
    if (std::filesystem::exists(part, ec)) {
      total.merge(from_key_values(textio::read_key_values(part)));
    } else {
      ++total.errors;
    }
  }
  return total;
}

RansomSpec ransom_spec_from(const std::map<std::string, std::string>& o) {
  RansomSpec s;
  s.family = get(o, "family", s.family);
  s.rate = textio::parse_double(get(o, "rate", textio::format_double(s.rate)));
  s.parallelism = textio::parse_int<int>(get(o, "parallelism", "1"));
  s.traversal = parse_traversal(get(o, "traversal", std::string(to_string(s.traversal))));
  s.mode = parse_ransom_mode(get(o, "mode", std::string(to_string(s.mode))));
  s.burst_s = textio::parse_double(get(o, "burst", "0"));
  s.sleep_s = textio::parse_double(get(o, "sleep", "0"));
  for (auto part : textio::split(get(o, "suffixes", ""), ',')) {
    if (!part.empty()) s.suffixes.emplace_back(part);
  }
  s.seed = textio::parse_int<std::uint64_t>(get(o, "seed", "1"));
  s.benign_lead_s = textio::parse_double(get(o, "lead", "0"));
  s.chunk = textio::parse_int<std::size_t>(get(o, "chunk", std::to_string(s.chunk)));
  s.validate();
  return s;
}

BenignSpec benign_spec_from(const std::map<std::string, std::string>& o) {
  BenignSpec s;
  s.workload = parse_workload(need(o, "workload"));
  s.duration_s = textio::parse_double(get(o, "duration", textio::format_double(s.duration_s)));
  s.intensity = textio::parse_double(get(o, "intensity", "1"));
  s.parallelism = textio::parse_int<int>(get(o, "parallelism", "1"));
  s.seed = textio::parse_int<std::uint64_t>(get(o, "seed", "1"));
  s.validate();
  return s;
}

}  // namespace

void set_worker_executable(const std::filesystem::path& exe) { exe_override() = exe; }

std::filesystem::path worker_executable() {
  if (!exe_override().empty()) return exe_override();
  return std::filesystem::read_symlink("/proc/self/exe");
}

int worker_main(const std::vector<std::string>& args) {
  try {
    const auto o = parse_options(args);
    const std::string role = need(o, "role");
    const std::string root = need(o, "root");
    const std::filesystem::path stats = need(o, "stats");
    WorkStats total;
    if (role == "ransomware") {
      const auto spec = ransom_spec_from(o);
      PosixFsClient lister;
      const auto files = list_targets(lister, root, spec);
      if (spec.parallelism == 1) {
        textio::write_file_atomic(suffixed(stats, ".pids"), "");
        total = encrypt_files(lister, spec, files, spec.rate, root, worker_seed(spec.seed, 0));
      } else {
        const auto parts = partition(files, spec.parallelism);
        // Workers pull files from a shared cursor, like a process pool's
        // task queue, so a worker that stops early leaves its share to the rest.
        void* mem = ::mmap(nullptr, sizeof(std::atomic<std::size_t>), PROT_READ | PROT_WRITE,
                           MAP_SHARED | MAP_ANONYMOUS, -1, 0);
        if (mem == MAP_FAILED) throw std::runtime_error(std::string("mmap: ") + std::strerror(errno));
        auto* cursor = new (mem) std::atomic<std::size_t>(0);
        total = fork_workers(spec.parallelism, stats, [&](int i) {
          PosixFsClient fs;
          return encrypt_files(
              fs, spec,
              [&]() -> std::optional<std::string> {
                const std::size_t k = cursor->fetch_add(1);
                if (k >= files.size()) return std::nullopt;
                return files[k];
              },
              spec.rate / spec.parallelism, root, worker_seed(spec.seed, i));
        });
        ::munmap(mem, sizeof(std::atomic<std::size_t>));
      }
    } else if (role == "benign") {
      const auto spec = benign_spec_from(o);
      if (spec.parallelism == 1) {
        textio::write_file_atomic(suffixed(stats, ".pids"), "");
        PosixFsClient fs;
        total = run_benign(fs, spec, root, 0);
      } else {
        total = fork_workers(spec.parallelism, stats, [&](int i) {
          PosixFsClient fs;
          return run_benign(fs, spec, root, i);
        });
      }
    } else {
      throw std::invalid_argument("worker: unknown role '" + role + "'");
    }
    textio::write_key_values(stats, total.to_key_values());
    return 0;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "worker failed: %s\n", e.what());
    return 1;
  }
}

std::vector<std::string> ransom_worker_args(const RansomSpec& spec, const std::string& root,
                                            const std::filesystem::path& stats) {
  std::string suffixes;
  for (const auto& s : spec.suffixes) suffixes += (suffixes.empty() ? "" : ",") + s;
  return {"worker", "--role", "ransomware", "--root", root, "--stats", stats.string(),
          "--family", spec.family, "--rate", textio::format_double(spec.rate),
          "--parallelism", std::to_string(spec.parallelism),
          "--traversal", std::string(to_string(spec.traversal)),
          "--mode", std::string(to_string(spec.mode)),
          "--burst", textio::format_double(spec.burst_s), "--sleep", textio::format_double(spec.sleep_s),
          "--suffixes", suffixes, "--seed", std::to_string(spec.seed),
          "--lead", textio::format_double(spec.benign_lead_s), "--chunk", std::to_string(spec.chunk)};
}

std::vector<std::string> benign_worker_args(const BenignSpec& spec, const std::string& root,
                                            const std::filesystem::path& stats) {
  return {"worker", "--role", "benign", "--root", root, "--stats", stats.string(),
          "--workload", std::string(to_string(spec.workload)),
          "--duration", textio::format_double(spec.duration_s),
          "--intensity", textio::format_double(spec.intensity),
          "--parallelism", std::to_string(spec.parallelism), "--seed", std::to_string(spec.seed)};
}

RunHandle RunHandle::spawn(const std::vector<std::string>& args, const std::filesystem::path& stats) {
  const std::string exe = worker_executable().string();
  std::vector<std::string> argv_s;
  argv_s.push_back(exe);
  argv_s.insert(argv_s.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_s) argv.push_back(a.data());
  argv.push_back(nullptr);

  std::error_code ec;
  std::filesystem::remove(stats, ec);
  std::filesystem::remove(suffixed(stats, ".pids"), ec);

  RunHandle h;
  h.stats_ = stats;
  h.started_ = std::chrono::steady_clock::now();
  pid_t pid = 0;
  const int rc = ::posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv.data(), environ);
  if (rc != 0) throw std::runtime_error("posix_spawn " + exe + ": " + std::strerror(rc));
  h.pid_ = pid;
  return h;
}

RunHandle::RunHandle(RunHandle&& o) noexcept { *this = std::move(o); }

RunHandle& RunHandle::operator=(RunHandle&& o) noexcept {
  if (this != &o) {
    if (pid_ > 0 && !exit_) kill();
    pid_ = std::exchange(o.pid_, 0);
    stats_ = std::move(o.stats_);
    exit_ = o.exit_;
    started_ = o.started_;
    ended_ = o.ended_;
  }
  return *this;
}

RunHandle::~RunHandle() {
  if (pid_ > 0 && !exit_) kill();
}

std::vector<Pid> RunHandle::pids() const {
  std::vector<Pid> out{pid_};
  std::ifstream in(suffixed(stats_, ".pids"));
  std::string line;
  while (std::getline(in, line)) {
    if (!textio::trim(line).empty()) out.push_back(textio::parse_int<Pid>(textio::trim(line)));
  }
  return out;
}

void RunHandle::reap(int status) {
  exit_ = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
  ended_ = std::chrono::steady_clock::now();
}

bool RunHandle::running() {
  if (exit_ || pid_ <= 0) return false;
  int status = 0;
  const pid_t r = ::waitpid(pid_, &status, WNOHANG);
  if (r == pid_) {
    reap(status);
    return false;
  }
  return true;
}

int RunHandle::wait() {
  while (!exit_ && pid_ > 0) {
    int status = 0;
    const pid_t r = ::waitpid(pid_, &status, 0);
    if (r == pid_) reap(status);
    else if (errno != EINTR) throw std::runtime_error(std::string("waitpid: ") + std::strerror(errno));
  }
  return exit_.value_or(-1);
}

std::optional<int> RunHandle::wait_for(std::chrono::milliseconds timeout) {
  const auto until = std::chrono::steady_clock::now() + timeout;
  while (running()) {
    if (std::chrono::steady_clock::now() >= until) return std::nullopt;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  return exit_;
}

void RunHandle::kill() {
  if (pid_ <= 1 || exit_) return;
  if (running()) {
    auto r = proc::kill_process(pid_, true);
    if (!r.terminated) spdlog::warn("could not kill run {}: {}", pid_, r.reason);
  }
  if (!exit_) wait();
}

std::map<std::string, std::string> RunHandle::stats() const {
  std::error_code ec;
  if (!std::filesystem::exists(stats_, ec)) return {};
  return textio::read_key_values(stats_);
}

std::chrono::milliseconds RunHandle::elapsed() const {
  const auto end = exit_ ? ended_ : std::chrono::steady_clock::now();
  return std::chrono::duration_cast<std::chrono::milliseconds>(end - started_);
}

RunHandle run_ransomware(const RansomSpec& spec, const std::filesystem::path& target_root,
                         const std::filesystem::path& stats) {
  spec.validate();
  return RunHandle::spawn(ransom_worker_args(spec, target_root.string(), stats), stats);
}

RunHandle run_benign_process(const BenignSpec& spec, const std::filesystem::path& target_root,
                             const std::filesystem::path& stats) {
  spec.validate();
  return RunHandle::spawn(benign_worker_args(spec, target_root.string(), stats), stats);
}

}  // namespace guardfs::adversary
