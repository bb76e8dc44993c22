// Criteria that run without workload processes: entropy, passthrough
// conformance, loss accounting, classifier quality, gradient check and the
// sleeper trials in virtual time.

#include <fcntl.h>
#include <sys/stat.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include "guardfs/adversary.hpp"
#include "guardfs/digest.hpp"
#include "guardfs/eval.hpp"
#include "guardfs/fuse.hpp"
#include "guardfs/session.hpp"
#include "guardfs/textio.hpp"
#include "harness.hpp"

namespace fs = std::filesystem;
using namespace guardfs;
using namespace std::chrono_literals;
using Steady = std::chrono::steady_clock;

namespace acceptance {
namespace {

// Pinned tolerances.
constexpr double kEntropyTol = 1e-9;
constexpr double kRandomEntropyMin = 7.99;
constexpr double kEntropyRuntime = 1.0;
constexpr int kConformanceOps = 1000;
constexpr double kConformanceRuntime = 30.0;
constexpr int kLossFiles = 500;
constexpr int kLossMutations = 50;
constexpr double kLossRuntime = 30.0;
constexpr double kForestMin = 0.95;
constexpr double kLogisticMin = 0.90;
constexpr double kUnseenRecallMin = 0.90;
constexpr double kClassifierMinSimSeconds = 20 * 60;
constexpr double kClassifierRuntime = 300.0;
constexpr std::uint64_t kBenignRunsPerWorkload = 6;
constexpr double kBenignRunSeconds = 90.0;
constexpr int kGradientPoints = 10;
constexpr double kGradientRelTol = 1e-5;
constexpr int kSleeperTrials = 20;
constexpr double kSleeperLow = 0.25, kSleeperHigh = 0.75;

// ---------------------------------------------------------------- 1

Result entropy_oracle() {
  auto t0 = Steady::now();
  std::vector<std::uint8_t> uniform(256 * 64);
  for (std::size_t i = 0; i < uniform.size(); ++i) uniform[i] = static_cast<std::uint8_t>(i);
  double hu = telemetry::shannon_entropy(uniform);
  double hc = telemetry::shannon_entropy(std::vector<std::uint8_t>(65536, 7));
  double hab = telemetry::shannon_entropy("abab");
  std::vector<std::uint8_t> rnd(1 << 20);
  std::mt19937_64 rng(1);
  for (std::size_t i = 0; i < rnd.size(); i += 8) {
    auto v = rng();
    std::memcpy(&rnd[i], &v, 8);
  }
  double hr = telemetry::shannon_entropy(rnd);
  double secs = seconds_since(t0);
  bool ok = std::abs(hu - 8.0) <= kEntropyTol && hc == 0.0 && std::abs(hab - 1.0) <= kEntropyTol &&
            hr >= kRandomEntropyMin && secs < kEntropyRuntime;
  return {1, "entropy oracle", ok,
          fmt("uniform=%.12f constant=%.1f abab=%.12f rng1MiB=%.5f (%.3f s)", hu, hc, hab, hr, secs)};
}

// ---------------------------------------------------------------- 2

// Replays one deterministic op sequence against a client and records every
// response in a form that does not depend on handle numbers or inodes.
std::vector<std::string> replay(adversary::FsClient& fs, const std::string& root, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::vector<std::string> dirs = {"", "/d0", "/d1", "/d0/e0"};
  auto pick_dir = [&] { return dirs[rng() % dirs.size()]; };
  auto pick_file = [&] { return pick_dir() + "/f" + std::to_string(rng() % 6); };
  std::vector<std::optional<Handle>> slots(4);
  std::vector<std::string> log;
  auto err = [](int e) { return std::to_string(e); };

  for (int i = 0; i < kConformanceOps; ++i) {
    std::string line = std::to_string(i) + " ";
    const auto slot = rng() % slots.size();
    switch (rng() % 12) {
      case 0: case 1: {
        Handle h;
        int e = fs.create(root + pick_file(), h);
        if (!e) {
          if (slots[slot]) fs.release(*slots[slot]);
          slots[slot] = h;
        }
        line += "create " + err(e);
        break;
      }
      case 2: {
        Handle h;
        int flags = rng() % 2 ? O_RDWR : O_RDONLY;
        int e = fs.open(root + pick_file(), flags, h);
        if (!e) {
          if (slots[slot]) fs.release(*slots[slot]);
          slots[slot] = h;
        }
        line += "open " + err(e);
        break;
      }
      case 3: case 4: {
        std::vector<std::uint8_t> data(1 + rng() % 9000);
        for (auto& b : data) b = static_cast<std::uint8_t>(rng() % 7);
        std::uint64_t off = rng() % 20000;
        line += slots[slot] ? "write " + err(fs.write(*slots[slot], off, data)) : "write skip";
        break;
      }
      case 5: {
        std::uint64_t off = rng() % 20000;
        std::uint32_t size = 1 + rng() % 16384;
        if (!slots[slot]) {
          line += "read skip";
          break;
        }
        std::vector<std::uint8_t> out;
        int e = fs.read(*slots[slot], off, size, out);
        line += "read " + err(e) + " " + std::to_string(out.size()) + " " + sha256_hex(out);
        break;
      }
      case 6: {
        if (slots[slot]) {
          line += "release " + err(fs.release(*slots[slot]));
          slots[slot].reset();
        } else {
          line += "release skip";
        }
        break;
      }
      case 7: {
        std::string a = pick_file(), b = pick_file();
        line += "rename " + err(fs.rename(root + a, root + b));
        break;
      }
      case 8: line += "unlink " + err(fs.unlink(root + pick_file())); break;
      case 9: {
        std::string d = pick_dir();
        if (d.empty()) d = "/d1";
        if (rng() % 3 == 0) {
          auto r = fs.call(req::Rmdir{root + d});
          line += "rmdir " + err(r.error);
        } else {
          line += "mkdir " + err(fs.mkdir(root + d));
        }
        break;
      }
      case 10: {
        auto r = fs.call(req::Truncate{root + pick_file(), std::nullopt, rng() % 12000});
        line += "truncate " + err(r.error);
        break;
      }
      case 11: {
        if (rng() % 2) {
          FileAttr a;
          int e = fs.stat(root + pick_file(), a);
          line += "getattr " + err(e);
          if (!e) line += fmt(" %llu %o", (unsigned long long)a.size, a.mode);
        } else {
          std::vector<DirEntry> entries;
          int e = fs.list(root + pick_dir(), entries);
          std::set<std::string> names;
          for (auto& d : entries)
            if (d.name != "." && d.name != "..") names.insert(d.name);
          line += "readdir " + err(e);
          for (auto& n : names) line += " " + n;
        }
        break;
      }
    }
    log.push_back(line);
  }
  for (auto& s : slots)
    if (s) fs.release(*s);
  return log;
}

std::set<std::string> dir_set(const fs::path& root) {
  std::set<std::string> out;
  for (auto& e : fs::recursive_directory_iterator(root))
    if (e.is_directory()) out.insert(fs::relative(e.path(), root).string());
  return out;
}

std::string first_difference(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    if (a[i] != b[i]) return "'" + a[i] + "' vs '" + b[i] + "'";
  return a.size() == b.size() ? "" : "length differs";
}

Result passthrough_conformance(const fs::path& work) {
  auto t0 = Steady::now();
  const std::uint64_t seed = 2024;
  std::vector<std::string> notes;
  bool ok = true;

  fs::create_directories(work / "bare");
  std::vector<std::string> bare_log;
  {
    adversary::PosixFsClient c;
    bare_log = replay(c, (work / "bare").string(), seed);
  }
  const auto bare_files = eval::snapshot(work / "bare").files;
  const auto bare_dirs = dir_set(work / "bare");
  std::size_t failures = std::count_if(bare_log.begin(), bare_log.end(), [](const std::string& l) {
    auto parts = textio::split_ws(l);
    return parts.size() > 2 && parts[2] != "0" && parts[2] != "skip";
  });

  auto check = [&](const std::string& label, const std::vector<std::string>& log, const fs::path& tree) {
    auto diff = first_difference(bare_log, log);
    bool same_tree = eval::snapshot(tree).files == bare_files && dir_set(tree) == bare_dirs;
    if (!diff.empty() || !same_tree) {
      ok = false;
      notes.push_back(label + " differs" + (diff.empty() ? "" : ": " + diff) + (same_tree ? "" : " (tree)"));
    } else {
      notes.push_back(label + " identical");
    }
  };

  // In-process overlay.
  {
    fs::create_directories(work / "inproc");
    VirtualClock clock(UnixNanos{1700000000000000000});
    defense::EngineOptions eo;
    telemetry::VectorSink sink;
    defense::DefenseEngine engine(eo, clock);
    overlay::Overlay ov(overlay::MountConfig{"/guardfs-conformance", work / "inproc", defense::DefenseMode::none()},
                        engine, sink);
    adversary::OverlayFsClient c(ov, clock, 4242);
    auto log = replay(c, "/guardfs-conformance", seed);
    ov.close_all();
    check("in-process", log, work / "inproc");
  }

  // Kernel mount.
  if (fuse::available()) {
    fs::create_directories(work / "under");
    fs::create_directories(work / "mnt");
    session::SessionOptions so;
    so.config.overlay_root = work / "mnt";
    so.config.underlay_root = work / "under";
    so.config.mode = defense::DefenseMode::none();
    auto s = session::MountSession::attach(so, std::make_unique<fuse::FuseDriver>());
    std::vector<std::string> log;
    {
      adversary::PosixFsClient c;
      log = replay(c, (work / "mnt").string(), seed);
    }
    s->detach();
    check("mounted", log, work / "under");
  } else {
    ok = false;
    notes.push_back("mounted run skipped: /dev/fuse unavailable");
  }

  double secs = seconds_since(t0);
  ok = ok && secs < kConformanceRuntime;
  std::string detail = fmt("%d ops, %zu failing calls in the reference log;", kConformanceOps, failures);
  for (auto& n : notes) detail += " " + n + ";";
  return {2, "passthrough conformance", ok, detail + fmt(" (%.1f s)", secs)};
}

// ---------------------------------------------------------------- 3

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Byte-for-byte comparison, no hashing: a baseline file survives when some
// file afterwards has exactly its content.
std::uint64_t loss_by_brute_force(const std::map<std::string, std::string>& before, const fs::path& after_root) {
  std::multimap<std::size_t, std::string> after;
  for (auto& e : fs::recursive_directory_iterator(after_root))
    if (e.is_regular_file()) {
      auto c = slurp(e.path());
      after.emplace(c.size(), std::move(c));
    }
  std::uint64_t lost = 0;
  for (auto& [path, content] : before) {
    auto [lo, hi] = after.equal_range(content.size());
    bool found = false;
    for (auto it = lo; it != hi && !found; ++it) found = it->second == content;
    if (!found) lost += content.size();
  }
  return lost;
}

Result loss_equivalence(const fs::path& work) {
  auto t0 = Steady::now();
  adversary::CorpusSpec cs;
  cs.total_bytes = 24ull << 20;
  cs.file_count = kLossFiles;
  cs.seed = 77;
  const fs::path root = work / "loss";
  adversary::generate_corpus(cs, root);
  std::map<std::string, std::string> before;
  for (auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) before[fs::relative(e.path(), root).string()] = slurp(e.path());
  auto baseline = eval::snapshot(root);

  std::mt19937_64 rng(78);
  std::vector<std::string> live(before.size());
  std::transform(before.begin(), before.end(), live.begin(), [](auto& kv) { return kv.first; });
  int counts[4] = {0, 0, 0, 0};
  for (int m = 0; m < kLossMutations; ++m) {
    auto idx = rng() % live.size();
    const fs::path p = root / live[idx];
    const int kind = static_cast<int>(rng() % 4);
    ++counts[kind];
    if (kind == 0) {  // flip one bit
      auto c = slurp(p);
      if (c.empty()) c = "x";
      else c[rng() % c.size()] ^= static_cast<char>(1 << (rng() % 8));
      std::ofstream(p, std::ios::binary | std::ios::trunc) << c;
    } else if (kind == 1) {
      fs::remove(p);
      live.erase(live.begin() + static_cast<long>(idx));
    } else if (kind == 2) {
      auto to = "renamed-" + std::to_string(m) + "-" + p.filename().string();
      fs::rename(p, root / to);
      live[idx] = to;
    } else {
      std::string c(1 + rng() % 5000, '\0');
      for (auto& ch : c) ch = static_cast<char>(rng());
      std::ofstream(root / ("created-" + std::to_string(m)), std::ios::binary) << c;
    }
  }
  auto after = eval::snapshot(root);
  auto got = eval::bytes_lost(baseline, after).bytes_lost;
  auto want = loss_by_brute_force(before, root);
  double secs = seconds_since(t0);
  return {3, "loss accounting equivalence", got == want && secs < kLossRuntime,
          fmt("%zu files, mutations flip=%d delete=%d rename=%d create=%d; bytes_lost=%llu oracle=%llu (%.1f s)",
              before.size(), counts[0], counts[1], counts[2], counts[3], (unsigned long long)got,
              (unsigned long long)want, secs)};
}

// ---------------------------------------------------------------- 5

Result gradient_check() {
  std::mt19937_64 rng(55);
  std::normal_distribution<double> z(0, 1);
  std::vector<detector::Features> xs(200);
  std::vector<detector::Label> ys(200);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (auto& v : xs[i]) v = z(rng);
    ys[i] = xs[i][0] - xs[i][5] + 0.7 * z(rng) > 0 ? detector::Label::Malicious : detector::Label::Benign;
  }
  double worst = 0;
  const double h = 1e-6;
  for (int p = 0; p < kGradientPoints; ++p) {
    detector::Features w;
    for (auto& v : w) v = z(rng);
    double b = z(rng);
    auto g = detector::logistic_loss_and_gradient(xs, ys, w, b);
    for (std::size_t j = 0; j <= detector::kFeatureCount; ++j) {
      auto wp = w, wm = w;
      double bp = b, bm = b;
      if (j < detector::kFeatureCount) wp[j] += h, wm[j] -= h;
      else bp += h, bm -= h;
      double fd = (detector::logistic_loss_and_gradient(xs, ys, wp, bp).loss -
                   detector::logistic_loss_and_gradient(xs, ys, wm, bm).loss) / (2 * h);
      double an = j < detector::kFeatureCount ? g.grad_w[j] : g.grad_b;
      double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return {5, "logistic gradient check", worst <= kGradientRelTol,
          fmt("max relative error %.3g over %d points x 9 coordinates (tol %.0e)", worst, kGradientPoints,
              kGradientRelTol)};
}

// ---------------------------------------------------------------- 4

struct SimLog {
  detector::LogSource source;
  double seconds = 0;
};

SimLog record(const adversary::SimResult& r, detector::Label label, const std::string& family) {
  SimLog s;
  s.source.events = r.events;
  s.source.label = label;
  s.source.family = family;
  if (label == detector::Label::Malicious) s.source.malicious_min_e_max = 7.0;
  if (!r.events.empty()) s.seconds = (r.events.back().ts - r.events.front().ts) / 1000.0;
  return s;
}

}  // namespace

std::vector<Result> run_fast() {
  auto work = work_dir("fast");
  std::vector<Result> out;
  out.push_back(entropy_oracle());
  out.push_back(passthrough_conformance(work / "conformance"));
  out.push_back(loss_equivalence(work));
  out.push_back(gradient_check());
  fs::remove_all(work);
  return out;
}

std::vector<Result> run_classifier() {
  auto t0 = Steady::now();
  auto work = work_dir("classifier");
  adversary::CorpusSpec cs;
  cs.total_bytes = 32ull << 20;
  cs.file_count = 300;
  cs.seed = 41;
  const fs::path pristine = work / "pristine";
  adversary::generate_corpus(cs, pristine);
  const fs::path scratch = work / "scratch";

  std::vector<SimLog> logs;
  auto fresh = [&] {
    fs::remove_all(scratch);
    fs::copy(pristine, scratch, fs::copy_options::recursive);
  };
  std::mt19937_64 rng(42);
  auto options = [&](Pid base) {
    adversary::SimOptions o;
    o.start = std::chrono::seconds(1700000000) + std::chrono::milliseconds(rng() % 5000);
    o.base_pid = base;
    return o;
  };
  Pid base = 20000;
  for (const auto& family : adversary::training_families()) {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
      fresh();
      auto spec = adversary::preset(family);
      spec.seed = seed;
      logs.push_back(record(adversary::simulate_ransomware(spec, scratch, options(base += 100)),
                            detector::Label::Malicious, family));
    }
  }
  // Benign side mirrors a file server: clients traversing and reading, and
  // clients uploading already-compressed files.
  for (auto w : {adversary::Workload::ReaderServer, adversary::Workload::Uploader}) {
    for (std::uint64_t seed = 1; seed <= kBenignRunsPerWorkload; ++seed) {
      fresh();
      adversary::BenignSpec spec;
      spec.workload = w;
      spec.seed = seed;
      spec.duration_s = kBenignRunSeconds;
      logs.push_back(record(adversary::simulate_benign(spec, scratch, options(base += 100)),
                            detector::Label::Benign, std::string(adversary::to_string(w))));
    }
  }
  double sim_seconds = 0;
  std::vector<detector::LogSource> sources;
  for (auto& l : logs) {
    sim_seconds += l.seconds;
    sources.push_back(l.source);
  }
  auto ds = detector::build_dataset(sources, 5);

  auto [train, test] = detector::split(ds, 0.8, 7);
  detector::ForestParams fp;
  fp.seed = 7;
  auto forest = detector::evaluate(detector::Model{detector::train_forest(train, fp)}, test);
  auto logistic = detector::evaluate(detector::Model{detector::train_logistic(train)}, test);

  std::string unseen;
  bool unseen_ok = true;
  for (const auto& family : adversary::training_families()) {
    auto [tr, te] = detector::split_unseen_family(ds, family);
    auto rep = detector::evaluate(detector::Model{detector::train_forest(tr, fp)}, te);
    unseen += fmt(" %s=%.3f", family.c_str(), rep.recall);
    unseen_ok = unseen_ok && rep.recall >= kUnseenRecallMin;
  }
  double secs = seconds_since(t0);
  fs::remove_all(work);
  bool ok = sim_seconds >= kClassifierMinSimSeconds && forest.accuracy >= kForestMin &&
            logistic.accuracy >= kLogisticMin && unseen_ok && secs < kClassifierRuntime;
  return {{4, "classifier quality", ok,
           fmt("%zu rows (%zu malicious) from %.1f min simulated; held-out forest=%.3f logistic=%.3f; "
               "unseen-family recall%s (%.0f s)",
               ds.rows.size(), ds.count(detector::Label::Malicious), sim_seconds / 60, forest.accuracy,
               logistic.accuracy, unseen.c_str(), secs)}};
}

std::vector<Result> run_sleeper() {
  auto t0 = Steady::now();
  auto work = work_dir("sleeper");
  adversary::CorpusSpec cs;
  cs.total_bytes = 32ull << 20;
  cs.file_count = 300;
  cs.seed = 5;
  const fs::path pristine = work / "pristine";
  adversary::generate_corpus(cs, pristine);
  auto model = std::make_shared<const detector::Model>(detector::load_model(GUARDFS_REFERENCE_MODEL));

  const int t_seconds = 5;
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<long> phase(0, t_seconds * 1000 - 1);
  double sum = 0;
  int flagged = 0;
  adversary::SimCost cost;
  auto sample = adversary::preset("phase-sleeper");
  for (int t = 0; t < kSleeperTrials; ++t) {
    fs::remove_all(work / "u");
    fs::copy(pristine, work / "u", fs::copy_options::recursive);
    eval::SimTrialPlan p;
    p.underlay = work / "u";
    p.sample = sample;
    p.sample.seed = static_cast<std::uint64_t>(t + 1);
    p.mode = defense::DefenseMode::track_obf(t_seconds);
    p.window_seconds = t_seconds;
    p.model = model;
    p.cost = cost;
    p.start = std::chrono::seconds(1700000000) + std::chrono::milliseconds(phase(rng));
    p.cap = 40s;
    auto r = eval::run_sim_trial(p);
    sum += static_cast<double>(r.loss.bytes_lost);
    flagged += r.detection_delay_ms.has_value();
  }
  fs::remove_all(work);
  const double mean = sum / kSleeperTrials;
  const double et = std::min(cost.throughput, sample.rate) * t_seconds;
  const double ratio = mean / et;
  return {{9, "sleeper loss vs expected bound", ratio >= kSleeperLow && ratio <= kSleeperHigh,
           fmt("mean loss %.2f MiB over %d trials (%d flagged) = %.3f x min(delta,eps)*T (%.1f MiB); band "
               "[%.2f, %.2f] (%.1f s)",
               mean / (1 << 20), kSleeperTrials, flagged, ratio, et / (1 << 20), kSleeperLow, kSleeperHigh,
               seconds_since(t0))}};
}

}  // namespace acceptance
