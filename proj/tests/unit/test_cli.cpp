#include <gtest/gtest.h>
#include <sys/wait.h>

#include <csignal>
#include <filesystem>
#include <thread>
#include <fstream>

#include "guardfs/adversary.hpp"
#include "guardfs/eval.hpp"

using namespace guardfs;
namespace fs = std::filesystem;
using namespace std::chrono_literals;

namespace {

const std::string kCli = GUARDFS_CLI_PATH;

int run(const std::string& args) {
  int status = std::system((kCli + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("guardfs-cli-" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("train --data /nonexistent.csv --out /tmp/x.model"), 2);
  EXPECT_EQ(run("attack --target /tmp --family nosuch --stats /tmp/s"), 2);
  EXPECT_EQ(run("mount --overlay /tmp/a --underlay /tmp/b --mode obf"), 2);  // no model
}

TEST(Cli, CorpusSimulateDatasetTrainEval) {
  auto dir = scratch("pipeline");
  fs::create_directories(dir);
  auto corpus = dir / "corpus";
  ASSERT_EQ(run("gen-corpus --out " + corpus.string() + " --size-mib 2 --files 30 --seed 3"), 0);
  EXPECT_TRUE(fs::exists(dir / "corpus.manifest"));
  ASSERT_EQ(run("gen-corpus --out " + corpus.string() + " --size-mib 2 --files 30"), 2);

  std::string logs;
  for (auto fam : {"aggressive-parallel", "sequential-basic"}) {
    for (int seed : {1, 2}) {
      auto log = dir / (std::string(fam) + std::to_string(seed) + ".log");
      ASSERT_EQ(run("simulate --corpus " + corpus.string() + " --family " + fam + " --seed " +
                    std::to_string(seed) + " --events " + log.string() + " --work-dir " +
                    (dir / "w").string()),
                0);
      logs += " --log " + log.string() + ":malicious:" + fam;
    }
  }
  for (auto wl : {"installer", "sensor-logger", "archiver", "uploader"}) {
    for (int seed : {1, 2, 3}) {
      auto log = dir / (std::string(wl) + std::to_string(seed) + ".log");
      ASSERT_EQ(run("simulate --corpus " + corpus.string() + " --workload " + wl + " --duration 20 --seed " +
                    std::to_string(seed) + " --events " + log.string() + " --work-dir " +
                    (dir / "w").string()),
                0);
      logs += " --log " + log.string() + ":benign";
    }
  }
  auto csv = dir / "ds.csv";
  ASSERT_EQ(run("gen-dataset" + logs + " --out " + csv.string()), 0);
  auto model = dir / "m.model";
  ASSERT_EQ(run("train --data " + csv.string() + " --out " + model.string() + " --trees 20"), 0);
  ASSERT_TRUE(fs::exists(model));
  EXPECT_EQ(run("eval --model " + model.string() + " --data " + csv.string()), 0);
  fs::remove_all(dir);
}

TEST(RunHandle, WorkerProcessesEncryptAndReportStats) {
  adversary::set_worker_executable(kCli);
  auto dir = scratch("handle");
  adversary::CorpusSpec cs;
  cs.total_bytes = 1 << 20;
  cs.file_count = 20;
  adversary::generate_corpus(cs, dir / "data");
  auto base = eval::snapshot(dir / "data");
  auto spec = adversary::preset("aggressive-parallel");
  spec.parallelism = 2;
  auto h = adversary::run_ransomware(spec, dir / "data", dir / "stats");
  EXPECT_GT(h.pid(), 1);
  auto code = h.wait_for(30s);
  ASSERT_TRUE(code.has_value());
  EXPECT_EQ(*code, 0);
  EXPECT_EQ(h.pids().size(), 3u);
  auto st = h.stats();
  EXPECT_EQ(std::stoull(st.at("files_touched")), 20u);
  auto loss = eval::bytes_lost(base, eval::snapshot(dir / "data"));
  EXPECT_EQ(loss.bytes_lost, eval::eligible_bytes(base, spec));
  fs::remove_all(dir);
}

TEST(RunHandle, KillStopsALongRun) {
  adversary::set_worker_executable(kCli);
  auto dir = scratch("kill");
  fs::create_directories(dir / "data");
  adversary::BenignSpec spec;
  spec.workload = adversary::Workload::SensorLogger;
  spec.duration_s = 60;
  auto h = adversary::run_benign_process(spec, dir / "data", dir / "stats");
  ASSERT_GT(h.pid(), 1);
  std::this_thread::sleep_for(300ms);
  EXPECT_TRUE(h.running());
  h.kill();
  EXPECT_FALSE(h.running());
  EXPECT_EQ(h.wait(), 128 + SIGKILL);
  fs::remove_all(dir);
}

TEST(RunHandle, SurvivingWorkersTakeOverAKilledWorkersFiles) {
  adversary::set_worker_executable(kCli);
  auto dir = scratch("pool");
  adversary::CorpusSpec cs;
  cs.total_bytes = 4 << 20;
  cs.file_count = 40;
  adversary::generate_corpus(cs, dir / "data");
  auto base = eval::snapshot(dir / "data");
  auto spec = adversary::preset("aggressive-parallel");
  spec.parallelism = 2;
  spec.rate = 2 << 20;
  auto h = adversary::run_ransomware(spec, dir / "data", dir / "stats");
  ASSERT_GT(h.pid(), 1);
  std::vector<Pid> pids;
  for (int i = 0; i < 200 && pids.size() < 3; ++i) {
    std::this_thread::sleep_for(10ms);
    pids = h.pids();
  }
  ASSERT_EQ(pids.size(), 3u);
  const Pid victim = pids[1];
  ASSERT_GT(victim, 1);
  ASSERT_NE(victim, h.pid());
  std::this_thread::sleep_for(300ms);
  ASSERT_EQ(::kill(victim, SIGKILL), 0);
  auto code = h.wait_for(30s);
  ASSERT_TRUE(code.has_value());
  EXPECT_EQ(*code, 0);
  // The survivor drains the queue; the victim's open file is left half done.
  auto loss = eval::bytes_lost(base, eval::snapshot(dir / "data"));
  EXPECT_EQ(loss.bytes_lost, eval::eligible_bytes(base, spec));
  fs::remove_all(dir);
}
