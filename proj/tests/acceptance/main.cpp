#include <spdlog/spdlog.h>

#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include "guardfs/adversary.hpp"
#include "harness.hpp"

namespace acceptance {

std::filesystem::path work_dir(const std::string& group) {
  auto p = std::filesystem::temp_directory_path() / ("guardfs-acceptance-" + group);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace acceptance

int main(int argc, char** argv) {
  using namespace acceptance;
  spdlog::set_level(spdlog::level::err);
  guardfs::adversary::set_worker_executable(GUARDFS_CLI_PATH);

  const std::vector<std::pair<std::string, std::function<std::vector<Result>()>>> groups = {
      {"fast", run_fast},           {"classifier", run_classifier}, {"sleeper", run_sleeper},
      {"detection", run_detection}, {"defense", run_defense},       {"benign", run_benign}};

  std::vector<std::string> wanted(argv + 1, argv + argc);
  if (wanted.empty())
    for (auto& [name, _] : groups) wanted.push_back(name);

  // ctest hides the output of passing tests, so keep a copy of every line.
  std::filesystem::create_directories("acceptance-results");
  std::ofstream record("acceptance-results/criteria.txt", std::ios::app);
  auto emit = [&](const std::string& line) {
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    record << line << '\n' << std::flush;
  };

  bool all = true;
  for (auto& w : wanted) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](auto& g) { return g.first == w; });
    if (it == groups.end()) {
      std::fprintf(stderr, "unknown group '%s'\n", w.c_str());
      return 2;
    }
    std::vector<Result> results;
    try {
      results = it->second();
    } catch (const std::exception& e) {
      emit(acceptance::fmt("group %s aborted: %s", w.c_str(), e.what()));
      all = false;
      continue;
    }
    for (auto& r : results) {
      emit(acceptance::fmt("criterion %2d %s  %s: ", r.id, r.pass ? "PASS" : "FAIL", r.name.c_str()) + r.detail);
      all = all && r.pass;
    }
  }
  return all ? 0 : 1;
}
