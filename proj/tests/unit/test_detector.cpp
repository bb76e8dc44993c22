#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "guardfs/detector.hpp"

using namespace guardfs;
using namespace guardfs::detector;
namespace fs = std::filesystem;

namespace {

// Two noisy clusters: benign rows read a lot with low entropy writes,
// malicious rows write high-entropy data and rename.
Dataset synthetic(std::size_t n, std::uint64_t seed, double noise = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0, noise);
  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    bool mal = i % 3 == 0;
    LabeledVector r;
    r.label = mal ? Label::Malicious : Label::Benign;
    r.family = mal ? (i % 2 ? "fam-a" : "fam-b") : "benign";
    auto count = [&](double mean) { return std::max(0.0, std::round(mean + z(rng))); };
    r.x = {mal ? count(20) : count(5), mal ? count(20) : count(40), mal ? count(5) : 0.0,
           0, mal ? 0.0 : 2.0, mal ? 7.9 : 3 + z(rng) * 0.2, mal ? 7.95 : 4 + z(rng) * 0.2,
           mal ? 7.99 : 5 + z(rng) * 0.2};
    ds.rows.push_back(r);
  }
  return ds;
}

telemetry::FsEvent ev(UnixMillis ts, Pid pid, CallKind op, std::optional<double> e = std::nullopt) {
  return telemetry::FsEvent{ts, pid, op, "/f", e ? 100u : 0u, e};
}

}  // namespace

TEST(Logistic, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> z(0, 1);
  std::vector<Features> xs(50);
  std::vector<Label> ys(50);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (auto& v : xs[i]) v = z(rng);
    ys[i] = (xs[i][0] + 0.5 * z(rng)) > 0 ? Label::Malicious : Label::Benign;
  }
  for (int point = 0; point < 10; ++point) {
    Features w;
    for (auto& v : w) v = z(rng);
    double b = z(rng);
    auto g = logistic_loss_and_gradient(xs, ys, w, b);
    const double h = 1e-6;
    for (std::size_t j = 0; j <= kFeatureCount; ++j) {
      Features wp = w, wm = w;
      double bp = b, bm = b;
      if (j < kFeatureCount) {
        wp[j] += h;
        wm[j] -= h;
      } else {
        bp += h;
        bm -= h;
      }
      double fd = (logistic_loss_and_gradient(xs, ys, wp, bp).loss -
                   logistic_loss_and_gradient(xs, ys, wm, bm).loss) /
                  (2 * h);
      double an = j < kFeatureCount ? g.grad_w[j] : g.grad_b;
      double rel = std::abs(an - fd) / std::max(1e-8, std::max(std::abs(an), std::abs(fd)));
      EXPECT_LE(rel, 1e-5) << "point " << point << " coord " << j;
    }
  }
}

TEST(Logistic, LossDecreasesAndSeparates) {
  auto ds = synthetic(300, 1);
  auto m = train_logistic(ds);
  ASSERT_GE(m.loss_curve.size(), 2u);
  EXPECT_LT(m.loss_curve.back(), m.loss_curve.front());
  EXPECT_GE(evaluate(Model{m}, ds).accuracy, 0.99);
}

TEST(Forest, LearnsSeparableData) {
  auto train = synthetic(300, 2);
  auto test = synthetic(150, 3);
  ForestParams p;
  p.n_trees = 25;
  auto f = train_forest(train, p);
  EXPECT_EQ(f.trees.size(), 25u);
  auto r = evaluate(Model{f}, test);
  EXPECT_GE(r.accuracy, 0.99);
  EXPECT_EQ(r.total(), 150u);
  for (auto& row : test.rows) {
    double s = f.score(row.x);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Forest, DeterministicUnderSeed) {
  auto train = synthetic(120, 4, 3.0);
  ForestParams p;
  p.n_trees = 10;
  p.seed = 99;
  EXPECT_EQ(serialize_model(Model{train_forest(train, p)}), serialize_model(Model{train_forest(train, p)}));
}

TEST(Tree, OneSplitForOneSeparatingFeature) {
  Dataset ds;
  for (int i = 0; i < 10; ++i)
    ds.rows.push_back(LabeledVector{Features{double(i)}, i < 4 ? Label::Benign : Label::Malicious, "x"});
  ForestParams p;
  p.n_trees = 1;
  p.bootstrap = false;
  p.max_features = static_cast<int>(kFeatureCount);
  auto f = train_forest(ds, p);
  ASSERT_EQ(f.trees[0].nodes.size(), 3u);
  EXPECT_EQ(f.trees[0].nodes[0].feature, 0);
  EXPECT_GE(f.trees[0].nodes[0].threshold, 3.0);
  EXPECT_LT(f.trees[0].nodes[0].threshold, 4.0);
  EXPECT_EQ(f.score(Features{2.0}), 0.0);
  EXPECT_EQ(f.score(Features{7.0}), 1.0);

  Dataset one_class;
  for (int i = 0; i < 10; ++i) one_class.rows.push_back(LabeledVector{Features{double(i)}, Label::Malicious, "x"});
  EXPECT_THROW(train_forest(one_class, p), std::invalid_argument);
}

TEST(Split, StratifiedAndDisjoint) {
  auto ds = synthetic(200, 5);
  auto [train, test] = split(ds, 0.8, 7);
  EXPECT_EQ(train.rows.size() + test.rows.size(), ds.rows.size());
  double mal_all = double(ds.count(Label::Malicious)) / ds.rows.size();
  double mal_test = double(test.count(Label::Malicious)) / test.rows.size();
  EXPECT_NEAR(mal_test, mal_all, 0.03);
  auto [train2, test2] = split(ds, 0.8, 7);
  EXPECT_EQ(train2.rows.size(), train.rows.size());
  for (std::size_t i = 0; i < test.rows.size(); ++i) EXPECT_EQ(test.rows[i].x, test2.rows[i].x);

  Dataset tiny = synthetic(9, 1);
  EXPECT_THROW(split(tiny, 0.8, 1), std::invalid_argument);
}

TEST(Split, UnseenFamily) {
  auto ds = synthetic(90, 6);
  auto [train, test] = split_unseen_family(ds, "fam-a");
  for (auto& r : train.rows) EXPECT_NE(r.family, "fam-a");
  for (auto& r : test.rows) EXPECT_EQ(r.family, "fam-a");
  EXPECT_GT(train.count(Label::Benign), 0u);
}

TEST(Threshold, Baseline) {
  ThresholdModel t{10, 7};
  EXPECT_EQ(t.score(Features{10, 0, 0, 0, 0, 0, 7, 0}), 1.0);
  EXPECT_EQ(t.score(Features{9, 0, 0, 0, 0, 0, 7.5, 0}), 0.0);
  auto trained = train_threshold_baseline(synthetic(200, 8));
  EXPECT_GE(evaluate(Model{trained}, synthetic(100, 9)).accuracy, 0.95);
}

TEST(Serialization, RoundTripsEveryKind) {
  auto ds = synthetic(100, 10, 2.0);
  ForestParams p;
  p.n_trees = 5;
  std::vector<Model> models = {Model{train_forest(ds, p)}, Model{train_logistic(ds)},
                               Model{train_threshold_baseline(ds)}};
  auto path = fs::temp_directory_path() / "guardfs-unit.model";
  for (auto& m : models) {
    save_model(path, m);
    auto back = load_model(path);
    EXPECT_EQ(model_kind(back), model_kind(m));
    for (auto& r : ds.rows) {
      EXPECT_DOUBLE_EQ(predict(back, r.x).score, predict(m, r.x).score);
    }
  }
  fs::remove(path);
  EXPECT_THROW(deserialize_model("not a model"), FormatError);
}

TEST(Dataset, CsvRoundTrip) {
  auto ds = synthetic(20, 11);
  auto path = fs::temp_directory_path() / "guardfs-unit-ds.csv";
  write_dataset_csv(path, ds);
  auto back = read_dataset_csv(path);
  ASSERT_EQ(back.rows.size(), ds.rows.size());
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].x, ds.rows[i].x);
    EXPECT_EQ(back.rows[i].label, ds.rows[i].label);
    EXPECT_EQ(back.rows[i].family, ds.rows[i].family);
  }
  fs::remove(path);
}

TEST(Dataset, BuildLabelsAndDropsReadOnlyWindows) {
  LogSource mal;
  mal.label = Label::Malicious;
  mal.family = "f";
  mal.malicious_min_e_max = 7.0;
  mal.events = {ev(1000, 1, CallKind::Read), ev(6000, 1, CallKind::Write, 3.0),
                ev(11000, 1, CallKind::Write, 7.9), ev(11001, 2, CallKind::Write, 7.9)};
  mal.pids = std::set<Pid>{1};
  LogSource ben;
  ben.events = {ev(2000, 5, CallKind::Create)};
  std::vector<LogSource> logs = {mal, ben};
  auto ds = build_dataset(logs, 5);
  ASSERT_EQ(ds.rows.size(), 3u);  // read-only window and pid 2 dropped
  std::map<UnixMillis, Label> by_start;
  for (auto& r : ds.rows)
    if (r.pid == 1) by_start[r.window_start] = r.label;
  EXPECT_EQ(by_start.at(5000), Label::Benign);  // lead-in
  EXPECT_EQ(by_start.at(10000), Label::Malicious);
}

TEST(LiveDetector, OneVerdictOfEachKindPerPid) {
  Dataset ds = synthetic(120, 12);
  ForestParams p;
  p.n_trees = 10;
  auto model = std::make_shared<const Model>(train_forest(ds, p));
  LiveDetector d(model);
  telemetry::FeatureVector benign{0, 1, 1, 40, 0, 0, 2, 3, 4, 5};
  telemetry::FeatureVector mal{0, 2, 20, 20, 5, 0, 0, 7.9, 7.95, 7.99};
  telemetry::FeatureVector idle{0, 3, 0, 50, 0, 0, 0, 0, 0, 0};
  std::vector<telemetry::FeatureVector> vs = {benign, mal, idle};
  auto out = d.classify(vs, 100);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].pid, 1);
  EXPECT_EQ(out[0].state, defense::VerdictState::Benign);
  EXPECT_EQ(out[1].pid, 2);
  EXPECT_EQ(out[1].state, defense::VerdictState::Malicious);
  EXPECT_TRUE(d.classify(vs, 200).empty());
  // A benign PID can still be flagged later.
  std::vector<telemetry::FeatureVector> turned = {telemetry::FeatureVector{0, 1, 20, 20, 5, 0, 0, 7.9, 7.95, 7.99}};
  auto late = d.classify(turned, 300);
  ASSERT_EQ(late.size(), 1u);
  EXPECT_EQ(late[0].state, defense::VerdictState::Malicious);
}
