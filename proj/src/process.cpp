#include "guardfs/process.hpp"

#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "guardfs/textio.hpp"

namespace guardfs::proc {
namespace {

// Fields of /proc/<pid>/stat after the parenthesised command name.
std::optional<std::vector<std::string>> stat_fields(Pid pid) {
  std::ifstream in("/proc/" + std::to_string(pid) + "/stat");
  if (!in) return std::nullopt;
  std::string line;
  std::getline(in, line);
  auto close = line.rfind(')');
  if (close == std::string::npos) return std::nullopt;
  std::istringstream rest(line.substr(close + 1));
  std::vector<std::string> fields;
  std::string f;
  while (rest >> f) fields.push_back(f);
  if (fields.size() < 22) return std::nullopt;
  return fields;
}

}  // namespace

bool is_alive(Pid pid) {
  if (pid <= 0) return false;
  auto fields = stat_fields(pid);
  if (!fields) return false;
  const auto& state = (*fields)[0];
  return state != "Z" && state != "X" && state != "x";
}

std::optional<Pid> parent_of(Pid pid) {
  auto fields = stat_fields(pid);
  if (!fields) return std::nullopt;
  try {
    return textio::parse_int<Pid>((*fields)[1]);
  } catch (const FormatError&) {
    return std::nullopt;
  }
}

std::optional<Pid> tgid_of(Pid tid) {
  std::ifstream in("/proc/" + std::to_string(tid) + "/status");
  if (!in) return std::nullopt;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("Tgid:", 0) == 0) {
      try {
        return textio::parse_int<Pid>(textio::trim(std::string_view(line).substr(5)));
      } catch (const FormatError&) {
        return std::nullopt;
      }
    }
  }
  return std::nullopt;
}

std::vector<Pid> descendants(Pid root) {
  std::multimap<Pid, Pid> children;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator("/proc", ec)) {
    const auto name = entry.path().filename().string();
    if (name.empty() || !std::all_of(name.begin(), name.end(), ::isdigit)) continue;
    Pid pid = 0;
    try {
      pid = textio::parse_int<Pid>(name);
    } catch (const FormatError&) {
      continue;
    }
    if (!is_alive(pid)) continue;
    if (auto parent = parent_of(pid)) children.emplace(*parent, pid);
  }
  std::vector<Pid> out;
  std::vector<Pid> frontier{root};
  while (!frontier.empty()) {
    Pid p = frontier.back();
    frontier.pop_back();
    auto [lo, hi] = children.equal_range(p);
    for (auto it = lo; it != hi; ++it) {
      if (std::find(out.begin(), out.end(), it->second) != out.end()) continue;
      out.push_back(it->second);
      frontier.push_back(it->second);
    }
  }
  return out;
}

KillResult kill_process(Pid pid, bool tree, std::chrono::milliseconds confirm) {
  if (pid <= 1 || pid == ::getpid()) return {false, "permission"};
  if (!is_alive(pid)) return {false, "already dead"};

  std::vector<Pid> targets{pid};
  if (tree) {
    auto desc = descendants(pid);
    std::erase_if(desc, [](Pid p) { return p <= 1 || p == ::getpid(); });
    targets.insert(targets.end(), desc.begin(), desc.end());
  }
  // Stop the root first so it cannot fork replacements while we walk.
  if (::kill(pid, SIGSTOP) != 0 && errno == EPERM) return {false, "permission"};
  if (tree) {
    for (Pid p : descendants(pid)) {
      if (p > 1 && p != ::getpid() &&
          std::find(targets.begin(), targets.end(), p) == targets.end()) {
        targets.push_back(p);
      }
    }
  }
  for (Pid p : targets) {
    if (::kill(p, SIGKILL) != 0 && errno == EPERM && p == pid) {
      return {false, "permission"};
    }
  }

  const auto deadline = std::chrono::steady_clock::now() + confirm;
  while (true) {
    bool any = std::any_of(targets.begin(), targets.end(), is_alive);
    if (!any) return {true, ""};
    if (std::chrono::steady_clock::now() >= deadline) return {false, "still running"};
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
}

std::optional<ProcStat> read_stat(Pid pid) {
  auto fields = stat_fields(pid);
  if (!fields) return std::nullopt;
  try {
    // After the command name: state(0) ppid(1) ... utime(11) stime(12) ... rss(21)
    ProcStat s;
    s.cpu_ticks = textio::parse_int<std::uint64_t>((*fields)[11]) +
                  textio::parse_int<std::uint64_t>((*fields)[12]);
    s.rss_bytes = textio::parse_int<std::uint64_t>((*fields)[21]) *
                  static_cast<std::uint64_t>(::sysconf(_SC_PAGESIZE));
    return s;
  } catch (const FormatError&) {
    return std::nullopt;
  }
}

long clock_ticks_per_second() { return ::sysconf(_SC_CLK_TCK); }

}  // namespace guardfs::proc
