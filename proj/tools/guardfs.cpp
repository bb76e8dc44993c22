#include <signal.h>
#include <spdlog/spdlog.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "guardfs/adversary.hpp"
#include "guardfs/config.hpp"
#include "guardfs/detector.hpp"
#include "guardfs/eval.hpp"
#include "guardfs/fuse.hpp"
#include "guardfs/session.hpp"
#include "guardfs/textio.hpp"

namespace fs = std::filesystem;
using namespace guardfs;

namespace {

/// Bad flags or inputs; exits 2.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void configure_logging() {
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("GUARDFS_LOG_LEVEL")) {
    const std::string v = env;
    if (v == "error") spdlog::set_level(spdlog::level::err);
    else if (v == "warn") spdlog::set_level(spdlog::level::warn);
    else if (v == "info") spdlog::set_level(spdlog::level::info);
    else if (v == "debug") spdlog::set_level(spdlog::level::debug);
    else spdlog::warn("ignoring GUARDFS_LOG_LEVEL={} (expected error, warn, info or debug)", v);
  }
}

template <typename T>
T pick(const std::optional<T>& flag, const std::optional<T>& config, T fallback) {
  if (flag) return *flag;
  if (config) return *config;
  return fallback;
}

std::shared_ptr<const detector::Model> load_model_or_throw(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("model file " + path.string() + " does not exist");
  return std::make_shared<const detector::Model>(detector::load_model(path));
}

void print_kv(const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) std::printf("%s=%s\n", k.c_str(), v.c_str());
}

adversary::RansomSpec ransom_spec(const std::string& family, const std::optional<double>& rate_mib,
                                  const std::optional<int>& parallelism, std::uint64_t seed) {
  adversary::RansomSpec s;
  try {
    s = adversary::preset(family);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (rate_mib) s.rate = *rate_mib * (1 << 20);
  if (parallelism) s.parallelism = *parallelism;
  s.seed = seed;
  s.validate();
  return s;
}

// ---------------------------------------------------------------- mount

struct MountArgs {
  std::string config;
  std::optional<std::string> overlay, underlay, mode, model, channel;
  std::optional<std::string> event_log, audit_log, feature_csv, verdict_log;
  std::optional<int> window;
  std::optional<double> threshold;
  bool fail_closed = false;
};

int cmd_mount(const MountArgs& a) {
  config::Config c;
  if (!a.config.empty()) c = config::load(a.config);
  auto as_path = [](const std::optional<std::string>& s) -> std::optional<fs::path> {
    if (!s) return std::nullopt;
    return fs::absolute(*s);
  };
  session::SessionOptions so;
  const auto overlay = pick(as_path(a.overlay), c.overlay_root, fs::path());
  const auto underlay = pick(as_path(a.underlay), c.underlay_root, fs::path());
  if (overlay.empty() || underlay.empty()) throw UsageError("mount needs --overlay and --underlay");
  so.config.overlay_root = overlay;
  so.config.underlay_root = underlay;
  const int window = pick(a.window, c.window, 5);
  so.config.mode = defense::parse_defense_mode(pick(a.mode, c.mode, std::string("none")), window);
  so.config.window_seconds = so.config.mode.gated() ? so.config.mode.period_s : window;
  so.config.verdict_channel = pick(a.channel, c.verdict_channel, std::string());
  so.config.fail_closed = a.fail_closed || c.fail_closed.value_or(false);
  so.threshold = pick(a.threshold, c.threshold, 0.5);
  const auto model = pick(as_path(a.model), c.model, fs::path());
  if (!model.empty()) {
    so.model = load_model_or_throw(model);
  } else if (so.config.mode.kind != defense::DefenseMode::Kind::NoDefense &&
             so.config.verdict_channel.empty()) {
    throw UsageError("mode " + defense::to_string(so.config.mode) +
                     " needs --model (or a verdict channel)");
  }
  so.event_log = pick(as_path(a.event_log), c.event_log, fs::path());
  so.audit_log = pick(as_path(a.audit_log), c.audit_log, fs::path());
  so.feature_csv = pick(as_path(a.feature_csv), c.feature_csv, fs::path());
  so.verdict_log = pick(as_path(a.verdict_log), c.verdict_log, fs::path());

  if (!fuse::available()) throw std::runtime_error("/dev/fuse is not usable here");

  // Signals are taken synchronously so detach runs on the main thread.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGHUP);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  auto s = session::MountSession::attach(so, std::make_unique<fuse::FuseDriver>());
  std::printf("mounted %s (%s)\n", overlay.c_str(), defense::to_string(so.config.mode).c_str());
  std::fflush(stdout);
  int sig = 0;
  sigwait(&set, &sig);
  spdlog::info("signal {}, unmounting", sig);
  s->detach();
  const auto st = s->overlay().stats();
  std::printf("unmounted dispatched=%llu forwarded=%llu fabricated=%llu delayed=%llu killed=%llu\n",
              static_cast<unsigned long long>(st.dispatched),
              static_cast<unsigned long long>(st.forwarded),
              static_cast<unsigned long long>(st.fabricated),
              static_cast<unsigned long long>(st.delayed), static_cast<unsigned long long>(st.killed));
  return 0;
}

// ---------------------------------------------------------------- corpus

int cmd_gen_corpus(const std::string& out, double size_mib, std::size_t files, std::uint64_t seed,
                   const std::string& manifest) {
  adversary::CorpusSpec spec;
  spec.total_bytes = static_cast<std::uint64_t>(size_mib * (1 << 20));
  spec.file_count = files;
  spec.seed = seed;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  fs::create_directories(out);
  const auto m = adversary::generate_corpus(spec, out);
  const fs::path mpath = manifest.empty() ? fs::path(out).parent_path() /
                                                (fs::path(out).filename().string() + ".manifest")
                                          : fs::path(manifest);
  adversary::write_manifest(mpath, m);
  std::uint64_t total = 0;
  for (const auto& e : m) total += e.size;
  std::printf("files=%zu bytes=%llu manifest=%s\n", m.size(), static_cast<unsigned long long>(total),
              mpath.c_str());
  return 0;
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string corpus, events, family, workload, mode = "none", work;
  std::uint64_t seed = 1;
  std::optional<double> rate_mib, duration, intensity, cap_s;
  std::optional<int> parallelism;
  std::int64_t phase_ms = 0;
  int window = 5;
};

int cmd_simulate(const SimulateArgs& a) {
  if (a.family.empty() == a.workload.empty()) throw UsageError("give exactly one of --family or --workload");
  adversary::SimOptions o;
  o.mode = defense::parse_defense_mode(a.mode, a.window);
  o.start = std::chrono::seconds(1700000000) + std::chrono::milliseconds(a.phase_ms);
  if (a.cap_s) o.cap = std::chrono::nanoseconds(static_cast<std::int64_t>(*a.cap_s * 1e9));

  const fs::path work = a.work.empty() ? fs::temp_directory_path() : fs::path(a.work);
  const fs::path underlay = work / ("guardfs-sim-" + std::to_string(::getpid()));
  fs::remove_all(underlay);
  fs::create_directories(work);
  fs::copy(a.corpus, underlay, fs::copy_options::recursive);
  adversary::SimResult r;
  try {
    if (!a.family.empty()) {
      r = adversary::simulate_ransomware(ransom_spec(a.family, a.rate_mib, a.parallelism, a.seed),
                                         underlay, o);
    } else {
      adversary::BenignSpec b;
      b.workload = adversary::parse_workload(a.workload);
      b.seed = a.seed;
      if (a.duration) b.duration_s = *a.duration;
      if (a.intensity) b.intensity = *a.intensity;
      if (a.parallelism) b.parallelism = *a.parallelism;
      r = adversary::simulate_benign(b, underlay, o);
    }
  } catch (...) {
    fs::remove_all(underlay);
    throw;
  }
  fs::remove_all(underlay);
  telemetry::EventLog::write(a.events, r.events);
  auto kv = r.stats.to_key_values();
  kv["events"] = std::to_string(r.events.size());
  std::string pids;
  for (Pid p : r.pids) pids += (pids.empty() ? "" : ",") + std::to_string(p);
  kv["pids"] = pids;
  print_kv(kv);
  return 0;
}

// ---------------------------------------------------------------- dataset / train / eval

int cmd_gen_dataset(const std::vector<std::string>& logs, int window, const std::string& out,
                    std::optional<double> lead_entropy) {
  std::vector<detector::LogSource> sources;
  for (const auto& spec : logs) {
    // path:label[:family]
    const auto parts = textio::split(spec, ':');
    if (parts.size() < 2 || parts.size() > 3) throw UsageError("--log expects path:label[:family]");
    detector::LogSource src;
    src.events = telemetry::EventLog::read(std::string(parts[0]));
    src.label = detector::parse_label(parts[1]);
    src.family = parts.size() == 3 ? std::string(parts[2]) : fs::path(std::string(parts[0])).stem().string();
    src.malicious_min_e_max = lead_entropy;
    sources.push_back(std::move(src));
  }
  const auto ds = detector::build_dataset(sources, window);
  detector::write_dataset_csv(out, ds);
  std::printf("rows=%zu malicious=%zu benign=%zu\n", ds.rows.size(),
              ds.count(detector::Label::Malicious), ds.count(detector::Label::Benign));
  return 0;
}

struct TrainArgs {
  std::string data, out, kind = "forest";
  int trees = 100, max_depth = 0, max_features = 0, min_split = 2, epochs = 1000;
  double lr = 0.1;
  std::uint64_t seed = 1;
  std::optional<double> split;
};

detector::Model train(const std::string& kind, const detector::Dataset& ds, const TrainArgs& a) {
  if (kind == "forest") {
    detector::ForestParams p;
    p.n_trees = a.trees;
    p.max_depth = a.max_depth;
    p.max_features = a.max_features;
    p.min_samples_split = a.min_split;
    p.seed = a.seed;
    return detector::train_forest(ds, p);
  }
  if (kind == "logistic") {
    detector::LogisticParams p;
    p.lr = a.lr;
    p.epochs = a.epochs;
    p.seed = a.seed;
    return detector::train_logistic(ds, p);
  }
  if (kind == "threshold") return detector::train_threshold_baseline(ds);
  throw UsageError("unknown model kind '" + kind + "' (forest, logistic, threshold)");
}

int cmd_train(const TrainArgs& a) {
  auto ds = detector::read_dataset_csv(a.data);
  detector::Dataset train_set = ds, test_set;
  if (a.split) std::tie(train_set, test_set) = detector::split(ds, *a.split, a.seed);
  const auto model = train(a.kind, train_set, a);
  detector::save_model(a.out, model);
  std::printf("model=%s kind=%s train_rows=%zu\n", a.out.c_str(),
              std::string(detector::model_kind(model)).c_str(), train_set.rows.size());
  if (a.split) std::printf("%s", detector::format_report(detector::evaluate(model, test_set)).c_str());
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data, double threshold,
             std::optional<double> split, std::uint64_t seed) {
  const auto model = load_model_or_throw(model_path);
  auto ds = detector::read_dataset_csv(data);
  if (split) ds = detector::split(ds, *split, seed).second;
  std::printf("%s", detector::format_report(detector::evaluate(*model, ds, threshold)).c_str());
  return 0;
}

// ---------------------------------------------------------------- attack / benign / bench

int wait_and_report(adversary::RunHandle h) {
  const int code = h.wait();
  auto kv = h.stats();
  kv["exit_code"] = std::to_string(code);
  kv["elapsed_ms"] = std::to_string(h.elapsed().count());
  print_kv(kv);
  return code == 0 ? 0 : 1;
}

int cmd_bench(const std::string& dir, double mib, std::optional<double> epsilon_mib,
              std::optional<double> beta_mib, double t) {
  const double delta = eval::calibrate_throughput(dir, static_cast<std::uint64_t>(mib * (1 << 20)));
  eval::ThroughputModel m{delta, epsilon_mib.value_or(0) * (1 << 20), beta_mib.value_or(0) * (1 << 20), t};
  const auto b = eval::buffer_bound(m);
  std::map<std::string, std::string> kv{
      {"delta_bytes_per_s", textio::format_double(delta)},
      {"buffer_bound_literal_bytes", textio::format_double(b.literal)},
      {"buffer_bound_product_bytes", textio::format_double(b.product)},
      {"expected_loss_bytes", textio::format_double(eval::expected_loss(m))},
  };
  print_kv(kv);
  return 0;
}

// ---------------------------------------------------------------- experiment / report

struct ExperimentArgs {
  std::string config, corpus, work_dir, out_dir, mode = "none", model, family, label;
  std::vector<std::string> benign;
  int window = 5;
  std::uint64_t seed = 1;
  std::optional<double> cap_s, rate_mib, threshold;
  std::optional<std::int64_t> phase_ms;
  bool stop_when_flagged = false, keep_underlay = false;
};

int cmd_experiment(const ExperimentArgs& a) {
  config::Config c;
  if (!a.config.empty()) c = config::load(a.config);
  eval::ExperimentPlan plan;
  plan.corpus = a.corpus.empty() ? c.corpus.value_or("") : fs::absolute(a.corpus);
  plan.work_dir = a.work_dir.empty() ? c.work_dir.value_or("") : fs::absolute(a.work_dir);
  if (plan.corpus.empty() || plan.work_dir.empty()) throw UsageError("experiment needs --corpus and --work-dir");
  plan.mode = defense::parse_defense_mode(a.mode, a.window);
  plan.window_seconds = plan.mode.gated() ? plan.mode.period_s : a.window;
  plan.threshold = pick(a.threshold, c.threshold, 0.5);
  const fs::path model = a.model.empty() ? c.model.value_or("") : fs::path(a.model);
  if (!model.empty()) plan.model = load_model_or_throw(model);
  if (!a.family.empty()) plan.sample = ransom_spec(a.family, a.rate_mib, std::nullopt, a.seed);
  for (const auto& w : a.benign) {
    adversary::BenignSpec b;
    b.workload = adversary::parse_workload(w);
    b.seed = a.seed;
    plan.benign.push_back(b);
  }
  plan.cap = std::chrono::milliseconds(static_cast<std::int64_t>(pick(a.cap_s, c.cap_s, 300.0) * 1000));
  plan.stop_when_flagged = a.stop_when_flagged;
  if (a.phase_ms) plan.launch_phase = std::chrono::milliseconds(*a.phase_ms);
  plan.remove_underlay = !a.keep_underlay;
  plan.label = a.label.empty() ? defense::to_string(plan.mode) + "-" + std::to_string(a.seed) : a.label;
  for (auto& ch : plan.label) {
    if (ch == ':' || ch == '/') ch = '_';
  }

  const auto r = eval::run_experiment(plan);
  const fs::path out = a.out_dir.empty() ? r.run_dir : fs::path(a.out_dir);
  fs::create_directories(out);
  textio::write_file_atomic(out / "loss.csv", eval::loss_table_csv({r}));
  textio::write_file_atomic(out / "timing.csv", eval::timing_table_csv({r}));
  print_kv(eval::summary(r));
  return 0;
}

/// Collects every summary.txt under `dir` into one loss table.
int cmd_report(const std::string& dir, const std::string& out) {
  std::vector<std::map<std::string, std::string>> rows;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "summary.txt") {
      rows.push_back(textio::read_key_values(e.path()));
    }
  }
  if (rows.empty()) throw UsageError("no summary.txt under " + dir);
  std::sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) {
    return std::tie(x.at("mode"), x.at("label")) < std::tie(y.at("mode"), y.at("label"));
  });
  const std::vector<std::string> cols{"label", "mode", "seed", "bytes_lost", "files_lost",
                                      "eligible_bytes", "detection_delay_ms", "partial"};
  std::string csv;
  for (std::size_t i = 0; i < cols.size(); ++i) csv += (i ? "," : "") + cols[i];
  csv += "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      auto it = r.find(cols[i]);
      csv += (i ? "," : "") + (it == r.end() ? std::string() : it->second);
    }
    csv += "\n";
  }
  if (out.empty()) std::printf("%s", csv.c_str());
  else textio::write_file_atomic(out, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  // Spawned workloads take this path before any other parsing.
  if (argc >= 2 && std::string(argv[1]) == "worker") {
    return adversary::worker_main(std::vector<std::string>(argv + 2, argv + argc));
  }

  CLI::App app{"guardfs: ransomware-mitigating overlay file system and its evaluation harness"};
  app.require_subcommand(1);
  std::function<int()> run;

  MountArgs ma;
  auto* mount = app.add_subcommand("mount", "Mount the overlay until SIGINT/SIGTERM");
  mount->add_option("--config", ma.config, "Key-value config file")->check(CLI::ExistingFile);
  mount->add_option("--overlay", ma.overlay, "Mountpoint");
  mount->add_option("--underlay", ma.underlay, "Backing directory");
  mount->add_option("--mode", ma.mode, "none, pkill, obf, delobf:T, trackobf:T");
  mount->add_option("--window", ma.window, "Telemetry window in seconds (default 5)");
  mount->add_option("--model", ma.model, "Model file for the embedded detector");
  mount->add_option("--threshold", ma.threshold, "Score above which a window is malicious");
  mount->add_option("--verdict-channel", ma.channel, "External verdict source (file:PATH or unix:PATH)");
  mount->add_option("--event-log", ma.event_log, "Per-call event log");
  mount->add_option("--audit-log", ma.audit_log, "Defense decision log");
  mount->add_option("--feature-csv", ma.feature_csv, "Per-window feature rows");
  mount->add_option("--verdict-log", ma.verdict_log, "Applied verdicts");
  mount->add_flag("--fail-closed", ma.fail_closed, "Fail calls with EIO while the engine is down");
  mount->callback([&] { run = [&] { return cmd_mount(ma); }; });

  std::string corpus_out, manifest;
  double corpus_mib = 16;
  std::size_t corpus_files = 200;
  std::uint64_t corpus_seed = 1;
  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic document corpus");
  gen->add_option("--out", corpus_out, "Empty or new directory")->required();
  gen->add_option("--size-mib", corpus_mib, "Total size in MiB")->capture_default_str();
  gen->add_option("--files", corpus_files, "Number of files")->capture_default_str();
  gen->add_option("--seed", corpus_seed, "Content seed")->capture_default_str();
  gen->add_option("--manifest", manifest, "Manifest path (default <out>.manifest)");
  gen->callback([&] {
    run = [&] { return cmd_gen_corpus(corpus_out, corpus_mib, corpus_files, corpus_seed, manifest); };
  });

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Run a workload in virtual time and write its event log");
  sim->add_option("--corpus", sa.corpus, "Pristine corpus (copied first)")->required()->check(CLI::ExistingDirectory);
  sim->add_option("--events", sa.events, "Event log to write")->required();
  sim->add_option("--family", sa.family, "Ransomware preset");
  sim->add_option("--workload", sa.workload, "Benign workload");
  sim->add_option("--mode", sa.mode, "Defense mode (no detector is involved)")->capture_default_str();
  sim->add_option("--window", sa.window, "T for bare delobf/trackobf")->capture_default_str();
  sim->add_option("--seed", sa.seed, "Workload seed")->capture_default_str();
  sim->add_option("--rate-mib", sa.rate_mib, "Override the preset's rate (MiB/s)");
  sim->add_option("--parallelism", sa.parallelism, "Override worker count");
  sim->add_option("--duration", sa.duration, "Benign duration in seconds");
  sim->add_option("--intensity", sa.intensity, "Benign intensity");
  sim->add_option("--cap", sa.cap_s, "Stop after this many simulated seconds");
  sim->add_option("--phase-ms", sa.phase_ms, "Start offset into the window")->capture_default_str();
  sim->add_option("--work-dir", sa.work, "Where the corpus copy lives");
  sim->callback([&] { run = [&] { return cmd_simulate(sa); }; });

  std::vector<std::string> logs;
  int ds_window = 5;
  std::string ds_out;
  std::optional<double> lead_entropy;
  auto* gds = app.add_subcommand("gen-dataset", "Window event logs into a labeled feature CSV");
  gds->add_option("--log", logs, "path:label[:family], repeatable")->required();
  gds->add_option("--window", ds_window, "Window length in seconds")->capture_default_str();
  gds->add_option("--out", ds_out, "CSV to write")->required();
  gds->add_option("--lead-entropy", lead_entropy,
                  "Label malicious windows whose max write entropy is below this as benign");
  gds->callback([&] { run = [&] { return cmd_gen_dataset(logs, ds_window, ds_out, lead_entropy); }; });

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a classifier on a feature CSV");
  tr->add_option("--data", ta.data, "Feature CSV")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", ta.out, "Model file to write")->required();
  tr->add_option("--kind", ta.kind, "forest, logistic or threshold")->capture_default_str();
  tr->add_option("--trees", ta.trees, "Forest size")->capture_default_str();
  tr->add_option("--max-depth", ta.max_depth, "0 for unlimited")->capture_default_str();
  tr->add_option("--max-features", ta.max_features, "0 for ceil(sqrt(8))")->capture_default_str();
  tr->add_option("--min-split", ta.min_split, "Minimum rows to split a node")->capture_default_str();
  tr->add_option("--lr", ta.lr, "Logistic learning rate")->capture_default_str();
  tr->add_option("--epochs", ta.epochs, "Logistic epochs")->capture_default_str();
  tr->add_option("--seed", ta.seed, "Training and split seed")->capture_default_str();
  tr->add_option("--split", ta.split, "Train on this stratified fraction and report on the rest");
  tr->callback([&] { run = [&] { return cmd_train(ta); }; });

  std::string ev_model, ev_data;
  double ev_threshold = 0.5;
  std::optional<double> ev_split;
  std::uint64_t ev_seed = 1;
  auto* ev = app.add_subcommand("eval", "Evaluate a model on a feature CSV");
  ev->add_option("--model", ev_model, "Model file")->required();
  ev->add_option("--data", ev_data, "Feature CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--threshold", ev_threshold, "Decision threshold")->capture_default_str();
  ev->add_option("--split", ev_split, "Evaluate only the held-out part of this split");
  ev->add_option("--seed", ev_seed, "Split seed")->capture_default_str();
  ev->callback([&] { run = [&] { return cmd_eval(ev_model, ev_data, ev_threshold, ev_split, ev_seed); }; });

  std::string at_target, at_family, at_stats;
  std::optional<double> at_rate;
  std::optional<int> at_par;
  std::uint64_t at_seed = 1;
  auto* atk = app.add_subcommand("attack", "Run a ransomware emulator against a directory");
  atk->add_option("--target", at_target, "Directory (normally a mountpoint)")->required()->check(CLI::ExistingDirectory);
  atk->add_option("--family", at_family, "aggressive-parallel, sequential-basic, stealth-throttled, phase-sleeper")->required();
  atk->add_option("--rate-mib", at_rate, "Override rate (MiB/s)");
  atk->add_option("--parallelism", at_par, "Override worker count");
  atk->add_option("--seed", at_seed, "Seed")->capture_default_str();
  atk->add_option("--stats", at_stats, "Stats file")->required();
  atk->callback([&] {
    run = [&] {
      return wait_and_report(adversary::run_ransomware(ransom_spec(at_family, at_rate, at_par, at_seed),
                                                       fs::absolute(at_target), fs::absolute(at_stats)));
    };
  });

  std::string bn_target, bn_workload, bn_stats;
  adversary::BenignSpec bn;
  auto* ben = app.add_subcommand("benign", "Run a benign workload against a directory");
  ben->add_option("--target", bn_target, "Directory (normally a mountpoint)")->required()->check(CLI::ExistingDirectory);
  ben->add_option("--workload", bn_workload, "reader-server, uploader, installer, sensor-logger, archiver")->required();
  ben->add_option("--duration", bn.duration_s, "Seconds")->capture_default_str();
  ben->add_option("--intensity", bn.intensity, "Rate/size scale")->capture_default_str();
  ben->add_option("--parallelism", bn.parallelism, "Writers (installer)")->capture_default_str();
  ben->add_option("--seed", bn.seed, "Seed")->capture_default_str();
  ben->add_option("--stats", bn_stats, "Stats file")->required();
  ben->callback([&] {
    run = [&] {
      bn.workload = adversary::parse_workload(bn_workload);
      return wait_and_report(adversary::run_benign_process(bn, fs::absolute(bn_target), fs::absolute(bn_stats)));
    };
  });

  std::string bench_dir;
  double bench_mib = 256, bench_t = 5;
  std::optional<double> bench_eps, bench_beta;
  auto* bench = app.add_subcommand("bench", "Calibrate underlay throughput and print the buffer bounds");
  bench->add_option("--dir", bench_dir, "Directory to write into (a mountpoint for δ through the overlay)")
      ->required()->check(CLI::ExistingDirectory);
  bench->add_option("--mib", bench_mib, "Bytes to write, MiB")->capture_default_str();
  bench->add_option("--epsilon-mib", bench_eps, "Encryption rate for the bounds, MiB/s");
  bench->add_option("--beta-mib", bench_beta, "Malicious throughput for the bounds, MiB/s");
  bench->add_option("--t", bench_t, "Gate period T, seconds")->capture_default_str();
  bench->callback([&] { run = [&] { return cmd_bench(bench_dir, bench_mib, bench_eps, bench_beta, bench_t); }; });

  ExperimentArgs xa;
  auto* exp = app.add_subcommand("experiment", "Mount a fresh corpus copy, run workloads, account the loss");
  exp->add_option("--config", xa.config, "Key-value config file")->check(CLI::ExistingFile);
  exp->add_option("--corpus", xa.corpus, "Pristine corpus");
  exp->add_option("--work-dir", xa.work_dir, "Run directories go here");
  exp->add_option("--out-dir", xa.out_dir, "Where loss.csv and timing.csv go (default: the run directory)");
  exp->add_option("--mode", xa.mode, "none, pkill, obf, delobf:T, trackobf:T")->capture_default_str();
  exp->add_option("--window", xa.window, "Window / default T")->capture_default_str();
  exp->add_option("--model", xa.model, "Model file");
  exp->add_option("--threshold", xa.threshold, "Decision threshold");
  exp->add_option("--family", xa.family, "Ransomware preset");
  exp->add_option("--rate-mib", xa.rate_mib, "Override the preset's rate (MiB/s)");
  exp->add_option("--benign", xa.benign, "Benign workload, repeatable");
  exp->add_option("--seed", xa.seed, "Seed for the sample and workloads")->capture_default_str();
  exp->add_option("--cap", xa.cap_s, "Duration cap in seconds (default 300)");
  exp->add_option("--phase-ms", xa.phase_ms, "Launch the sample this far into a window");
  exp->add_option("--label", xa.label, "Run directory name");
  exp->add_flag("--stop-when-flagged", xa.stop_when_flagged, "End the run at the first Malicious verdict");
  exp->add_flag("--keep-underlay", xa.keep_underlay, "Keep the mutated corpus copy");
  exp->callback([&] { run = [&] { return cmd_experiment(xa); }; });

  std::string rp_dir, rp_out;
  auto* rep = app.add_subcommand("report", "Collect run summaries into a loss table");
  rep->add_option("--runs", rp_dir, "Directory holding run directories")->required()->check(CLI::ExistingDirectory);
  rep->add_option("--out", rp_out, "CSV to write (default stdout)");
  rep->callback([&] { run = [&] { return cmd_report(rp_dir, rp_out); }; });

  app.add_subcommand("worker", "Internal: workload process entry point")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return run ? run() : 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
