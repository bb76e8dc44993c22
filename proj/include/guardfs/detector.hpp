#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "guardfs/telemetry.hpp"
#include "guardfs/verdict_channel.hpp"

namespace guardfs::detector {

/// Classifier input order. Time, PID and path never enter the model.
inline constexpr std::size_t kFeatureCount = 8;
inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "writes", "reads", "renames", "unlinks", "creates", "e_min", "e_mean", "e_max"};

using Features = std::array<double, kFeatureCount>;
Features to_features(const telemetry::FeatureVector& v);

enum class Label : std::uint8_t { Benign = 0, Malicious = 1 };
std::string_view to_string(Label l);
Label parse_label(std::string_view text);

struct LabeledVector {
  Features x{};
  Label label = Label::Benign;
  std::string family;  // provenance tag, e.g. "aggressive-parallel"
  UnixMillis window_start = 0;
  Pid pid = 0;
};

struct Dataset {
  std::vector<LabeledVector> rows;

  std::size_t count(Label l) const;
  std::set<std::string> families() const;
  Dataset filter(const std::function<bool(const LabeledVector&)>& keep) const;
  void append(const Dataset& other);
};

struct LogSource {
  std::vector<telemetry::FsEvent> events;
  Label label = Label::Benign;
  std::string family;
  /// When set, only these PIDs are kept (others in a shared log are dropped).
  std::optional<std::set<Pid>> pids;
  /// Malicious sources only: windows whose highest write entropy stays below
  /// this are lead-in activity and labeled Benign.
  std::optional<double> malicious_min_e_max;
};

/// Windows every log, aggregates per PID and labels by source. Windows
/// without modifying calls are dropped; the live detector never scores them.
Dataset build_dataset(std::span<const LogSource> logs, int window_s);

/// CSV: the telemetry feature columns plus `label,family`.
void write_dataset_csv(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset_csv(const std::filesystem::path& path);

/// Stratified split, deterministic under `seed`. Throws when a class has
/// fewer than 5 rows.
std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed);

/// Train on every row whose family is not `holdout` (benign rows included),
/// test on the held-out family's rows.
std::pair<Dataset, Dataset> split_unseen_family(const Dataset& ds, const std::string& holdout);

struct ForestParams {
  int n_trees = 100;
  int max_features = 0;  // 0: ceil(sqrt(feature count))
  int max_depth = 0;     // 0: unlimited
  int min_samples_split = 2;
  bool bootstrap = true;
  std::uint64_t seed = 1;
};

/// Leaf when feature < 0. Rows with x[feature] <= threshold go left.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double p_malicious = 0.0;
};

struct Tree {
  std::vector<TreeNode> nodes;
  double predict(const Features& x) const;
};

struct ForestModel {
  std::vector<Tree> trees;
  ForestParams params;
  /// Mean of the trees' leaf probabilities.
  double score(const Features& x) const;
};

ForestModel train_forest(const Dataset& train, const ForestParams& params = {});

struct LogisticParams {
  double lr = 0.1;
  int epochs = 1000;
  std::uint64_t seed = 1;
};

struct LogisticModel {
  Features weights{};
  double bias = 0.0;
  Features mean{};
  Features stddev{};
  double final_loss = 0.0;
  std::vector<double> loss_curve;  // loss before each epoch, then after the last

  Features standardize(const Features& x) const;
  double score(const Features& x) const;
};

struct LossAndGradient {
  double loss = 0.0;
  Features grad_w{};
  double grad_b = 0.0;
};

/// Mean binary cross-entropy over already-standardized rows.
LossAndGradient logistic_loss_and_gradient(std::span<const Features> xs, std::span<const Label> ys,
                                           const Features& w, double b);

LogisticModel train_logistic(const Dataset& train, const LogisticParams& params = {});

/// (writes >= min_writes) and (e_mean >= min_e_mean).
struct ThresholdModel {
  double min_writes = 0.0;
  double min_e_mean = 0.0;
  double score(const Features& x) const;
};

ThresholdModel train_threshold_baseline(const Dataset& train);

using Model = std::variant<ForestModel, LogisticModel, ThresholdModel>;
std::string_view model_kind(const Model& m);

struct Prediction {
  Label label = Label::Benign;
  double score = 0.0;  // probability of Malicious
};

/// Label is Malicious when score > threshold.
Prediction predict(const Model& m, std::span<const double> x, double threshold = 0.5);

struct EvalReport {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  /// Recall restricted to each malicious family present in the test set.
  std::map<std::string, double> family_recall;

  std::uint64_t total() const { return tp + tn + fp + fn; }
};

EvalReport evaluate(const Model& m, const Dataset& test, double threshold = 0.5);
std::string format_report(const EvalReport& r);

/// Versioned flat text ("guardfs-model v1").
void save_model(const std::filesystem::path& path, const Model& m);
Model load_model(const std::filesystem::path& path);
std::string serialize_model(const Model& m);
Model deserialize_model(std::string_view text);

/// Turns closed-window vectors into verdict records. Only vectors with
/// modifying activity are scored; each PID yields at most one Malicious and
/// one Benign record.
class LiveDetector {
 public:
  explicit LiveDetector(std::shared_ptr<const Model> model, double threshold = 0.5);

  std::vector<channel::VerdictRecord> classify(std::span<const telemetry::FeatureVector> vectors,
                                               UnixMillis now);

 private:
  std::shared_ptr<const Model> model_;
  double threshold_;
  std::set<Pid> flagged_;
  std::set<Pid> cleared_;
};

}  // namespace guardfs::detector
