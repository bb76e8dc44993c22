#pragma once

#include <sys/types.h>

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include "guardfs/types.hpp"

// Thin helpers over /proc and process signalling.
namespace guardfs::proc {

/// False for missing PIDs and zombies.
bool is_alive(Pid pid);

std::optional<Pid> parent_of(Pid pid);

/// Thread-group id for a thread id (the kernel reports thread ids to
/// userspace file systems).
std::optional<Pid> tgid_of(Pid tid);

/// All live descendants of `root` (not including `root`), parents first.
std::vector<Pid> descendants(Pid root);

struct KillResult {
  bool terminated = false;
  std::string reason;  // empty on success
};

/// SIGKILLs `pid` (and, when `tree` is set, its descendants) and waits up to
/// `confirm` for the OS to report every target gone. Refuses pid <= 1 and the
/// calling process.
KillResult kill_process(Pid pid, bool tree = true,
                        std::chrono::milliseconds confirm = std::chrono::milliseconds(1000));

/// Cumulative user+system CPU ticks and resident bytes for one process.
struct ProcStat {
  std::uint64_t cpu_ticks = 0;
  std::uint64_t rss_bytes = 0;
};
std::optional<ProcStat> read_stat(Pid pid);

long clock_ticks_per_second();

}  // namespace guardfs::proc
