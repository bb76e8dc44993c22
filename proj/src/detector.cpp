#include "guardfs/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "guardfs/textio.hpp"

namespace guardfs::detector {

Features to_features(const telemetry::FeatureVector& v) {
  return {static_cast<double>(v.writes),  static_cast<double>(v.reads),
          static_cast<double>(v.renames), static_cast<double>(v.unlinks),
          static_cast<double>(v.creates), v.e_min,
          v.e_mean,                       v.e_max};
}

std::string_view to_string(Label l) { return l == Label::Malicious ? "malicious" : "benign"; }

Label parse_label(std::string_view text) {
  auto t = textio::trim(text);
  if (t == "malicious" || t == "1") return Label::Malicious;
  if (t == "benign" || t == "0") return Label::Benign;
  throw FormatError("bad label '" + std::string(text) + "'");
}

std::size_t Dataset::count(Label l) const {
  return static_cast<std::size_t>(
      std::count_if(rows.begin(), rows.end(), [l](const LabeledVector& r) { return r.label == l; }));
}

std::set<std::string> Dataset::families() const {
  std::set<std::string> out;
  for (const auto& r : rows) out.insert(r.family);
  return out;
}

Dataset Dataset::filter(const std::function<bool(const LabeledVector&)>& keep) const {
  Dataset out;
  std::copy_if(rows.begin(), rows.end(), std::back_inserter(out.rows), keep);
  return out;
}

void Dataset::append(const Dataset& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
}

Dataset build_dataset(std::span<const LogSource> logs, int window_s) {
  Dataset ds;
  for (const auto& log : logs) {
    std::vector<telemetry::FsEvent> events;
    if (log.pids) {
      std::copy_if(log.events.begin(), log.events.end(), std::back_inserter(events),
                   [&](const telemetry::FsEvent& e) { return log.pids->contains(e.pid); });
    } else {
      events = log.events;
    }
    for (const auto& w : telemetry::window_stream(events, window_s)) {
      for (const auto& v : telemetry::aggregate(w)) {
        if (v.modifying_ops() == 0) continue;
        Label label = log.label;
        if (label == Label::Malicious && log.malicious_min_e_max && v.e_max < *log.malicious_min_e_max) {
          label = Label::Benign;
        }
        ds.rows.push_back(LabeledVector{to_features(v), label, log.family, v.window_start, v.pid});
      }
    }
  }
  return ds;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& ds) {
  std::string out(telemetry::kFeatureCsvHeader);
  out += ",label,family\n";
  for (const auto& r : ds.rows) {
    telemetry::FeatureVector v;
    v.window_start = r.window_start;
    v.pid = r.pid;
    v.writes = static_cast<std::uint64_t>(r.x[0]);
    v.reads = static_cast<std::uint64_t>(r.x[1]);
    v.renames = static_cast<std::uint64_t>(r.x[2]);
    v.unlinks = static_cast<std::uint64_t>(r.x[3]);
    v.creates = static_cast<std::uint64_t>(r.x[4]);
    v.e_min = r.x[5];
    v.e_mean = r.x[6];
    v.e_max = r.x[7];
    out += telemetry::format_feature_row(v);
    out += ',';
    out += to_string(r.label);
    out += ',';
    out += r.family;
    out += '\n';
  }
  textio::write_file_atomic(path, out);
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read dataset " + path.string());
  std::string line;
  if (!std::getline(in, line) || !line.starts_with(telemetry::kFeatureCsvHeader)) {
    throw FormatError(path.string() + ": missing feature header");
  }
  Dataset ds;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (textio::trim(line).empty()) continue;
    auto cols = textio::split(line, ',');
    if (cols.size() != 12) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 12 columns");
    }
    auto v = telemetry::parse_feature_row(line);
    ds.rows.push_back(LabeledVector{to_features(v), parse_label(cols[10]),
                                    std::string(textio::trim(cols[11])), v.window_start, v.pid});
  }
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train fraction must be in (0, 1)");
  }
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    by_class[static_cast<int>(ds.rows[i].label)].push_back(i);
  }
  for (int c = 0; c < 2; ++c) {
    if (by_class[c].size() < 5) {
      throw std::invalid_argument("split needs at least 5 " +
                                  std::string(to_string(static_cast<Label>(c))) + " rows, have " +
                                  std::to_string(by_class[c].size()));
    }
  }
  // Largest-remainder allocation so the class quotas add up to round(f * N).
  const auto total = static_cast<std::size_t>(std::llround(train_fraction * double(ds.rows.size())));
  std::array<std::size_t, 2> quota{};
  std::array<double, 2> remainder{};
  std::size_t assigned = 0;
  for (int c = 0; c < 2; ++c) {
    const double exact = train_fraction * double(by_class[c].size());
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    remainder[c] = exact - double(quota[c]);
    assigned += quota[c];
  }
  while (assigned < total) {
    int c = remainder[0] >= remainder[1] ? 0 : 1;
    ++quota[c];
    remainder[c] = -1.0;
    ++assigned;
  }

  std::mt19937_64 rng(seed);
  Dataset train, test;
  for (int c = 0; c < 2; ++c) {
    auto idx = by_class[c];
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      (k < quota[c] ? train : test).rows.push_back(ds.rows[idx[k]]);
    }
  }
  return {std::move(train), std::move(test)};
}

std::pair<Dataset, Dataset> split_unseen_family(const Dataset& ds, const std::string& holdout) {
  Dataset train, test;
  for (const auto& r : ds.rows) {
    if (r.family == holdout) {
      test.rows.push_back(r);
    } else {
      train.rows.push_back(r);
    }
  }
  if (test.rows.empty()) throw std::invalid_argument("no rows for family '" + holdout + "'");
  return {std::move(train), std::move(test)};
}

namespace {

void require_both_classes(const Dataset& train) {
  if (train.count(Label::Malicious) == 0 || train.count(Label::Benign) == 0) {
    throw std::invalid_argument("training needs both benign and malicious rows");
  }
}

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<Features>& x, const std::vector<int>& y, const ForestParams& p,
              std::mt19937_64& rng)
      : x_(x), y_(y), p_(p), rng_(rng) {
    mtry_ = p.max_features > 0
                ? std::min<int>(p.max_features, kFeatureCount)
                : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(kFeatureCount))));
  }

  Tree build(std::vector<std::size_t> rows) {
    grow(rows, 0);
    return std::move(tree_);
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double impurity = std::numeric_limits<double>::infinity();
  };

  int grow(std::vector<std::size_t>& rows, int depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    std::size_t pos = 0;
    for (auto r : rows) pos += static_cast<std::size_t>(y_[r]);
    const double n = static_cast<double>(rows.size());
    tree_.nodes[id].p_malicious = n > 0 ? static_cast<double>(pos) / n : 0.0;

    const bool pure = pos == 0 || pos == rows.size();
    const bool too_small = rows.size() < static_cast<std::size_t>(std::max(2, p_.min_samples_split));
    const bool too_deep = p_.max_depth > 0 && depth >= p_.max_depth;
    if (pure || too_small || too_deep) return id;

    Split best = find_split(rows);
    if (best.feature < 0) return id;

    std::vector<std::size_t> left, right;
    for (auto r : rows) {
      (x_[r][best.feature] <= best.threshold ? left : right).push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    tree_.nodes[id].feature = best.feature;
    tree_.nodes[id].threshold = best.threshold;
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    tree_.nodes[id].left = l;
    tree_.nodes[id].right = r;
    return id;
  }

  Split find_split(const std::vector<std::size_t>& rows) {
    std::array<int, kFeatureCount> order{};
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);

    Split best;
    std::vector<std::pair<double, int>> col(rows.size());
    std::size_t total_pos = 0;
    for (auto r : rows) total_pos += static_cast<std::size_t>(y_[r]);
    const double n = static_cast<double>(rows.size());

    int tried = 0;
    for (int f : order) {
      // Keep drawing past mtry only while no valid split has been found.
      if (tried >= mtry_ && best.feature >= 0) break;
      ++tried;
      for (std::size_t i = 0; i < rows.size(); ++i) col[i] = {x_[rows[i]][f], y_[rows[i]]};
      std::sort(col.begin(), col.end());
      std::size_t left_pos = 0;
      for (std::size_t i = 0; i + 1 < col.size(); ++i) {
        left_pos += static_cast<std::size_t>(col[i].second);
        if (!(col[i].first < col[i + 1].first)) continue;
        const double nl = static_cast<double>(i + 1);
        const double nr = n - nl;
        const double pl = static_cast<double>(left_pos) / nl;
        const double pr = static_cast<double>(total_pos - left_pos) / nr;
        const double impurity = nl * 2.0 * pl * (1.0 - pl) + nr * 2.0 * pr * (1.0 - pr);
        if (impurity < best.impurity) {
          double mid = col[i].first + (col[i + 1].first - col[i].first) / 2.0;
          if (!(mid < col[i + 1].first)) mid = col[i].first;
          best = Split{f, mid, impurity};
        }
      }
    }
    return best;
  }

  const std::vector<Features>& x_;
  const std::vector<int>& y_;
  const ForestParams& p_;
  std::mt19937_64& rng_;
  int mtry_;
  Tree tree_;
};

}  // namespace

double Tree::predict(const Features& x) const {
  int i = 0;
  while (nodes[i].feature >= 0) {
    i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
  }
  return nodes[i].p_malicious;
}

double ForestModel::score(const Features& x) const {
  if (trees.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : trees) sum += t.predict(x);
  return sum / static_cast<double>(trees.size());
}

ForestModel train_forest(const Dataset& train, const ForestParams& params) {
  require_both_classes(train);
  if (params.n_trees <= 0) throw std::invalid_argument("n_trees must be positive");
  std::vector<Features> x;
  std::vector<int> y;
  x.reserve(train.rows.size());
  for (const auto& r : train.rows) {
    x.push_back(r.x);
    y.push_back(static_cast<int>(r.label));
  }
  ForestModel model;
  model.params = params;
  if (model.params.max_features <= 0) {
    model.params.max_features =
        static_cast<int>(std::ceil(std::sqrt(static_cast<double>(kFeatureCount))));
  }
  std::mt19937_64 rng(params.seed);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  for (int t = 0; t < params.n_trees; ++t) {
    std::vector<std::size_t> rows(x.size());
    if (params.bootstrap) {
      for (auto& r : rows) r = pick(rng);
    } else {
      std::iota(rows.begin(), rows.end(), 0);
    }
    TreeBuilder builder(x, y, model.params, rng);
    model.trees.push_back(builder.build(std::move(rows)));
  }
  return model;
}

Features LogisticModel::standardize(const Features& x) const {
  Features z{};
  for (std::size_t j = 0; j < kFeatureCount; ++j) z[j] = (x[j] - mean[j]) / stddev[j];
  return z;
}

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

double LogisticModel::score(const Features& x) const {
  const Features z = standardize(x);
  double s = bias;
  for (std::size_t j = 0; j < kFeatureCount; ++j) s += weights[j] * z[j];
  return sigmoid(s);
}

LossAndGradient logistic_loss_and_gradient(std::span<const Features> xs, std::span<const Label> ys,
                                           const Features& w, double b) {
  if (xs.size() != ys.size() || xs.empty()) {
    throw std::invalid_argument("loss needs matching, non-empty rows and labels");
  }
  LossAndGradient out;
  const double n = static_cast<double>(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double z = b;
    for (std::size_t j = 0; j < kFeatureCount; ++j) z += w[j] * xs[i][j];
    const double y = ys[i] == Label::Malicious ? 1.0 : 0.0;
    // -[y log s + (1-y) log(1-s)] = softplus(z) - y z
    out.loss += softplus(z) - y * z;
    const double residual = sigmoid(z) - y;
    for (std::size_t j = 0; j < kFeatureCount; ++j) out.grad_w[j] += residual * xs[i][j];
    out.grad_b += residual;
  }
  out.loss /= n;
  for (auto& g : out.grad_w) g /= n;
  out.grad_b /= n;
  return out;
}

LogisticModel train_logistic(const Dataset& train, const LogisticParams& params) {
  require_both_classes(train);
  if (params.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (!(params.lr > 0)) throw std::invalid_argument("learning rate must be positive");
  LogisticModel m;
  const double n = static_cast<double>(train.rows.size());
  for (const auto& r : train.rows) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) m.mean[j] += r.x[j];
  }
  for (auto& v : m.mean) v /= n;
  for (const auto& r : train.rows) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      m.stddev[j] += (r.x[j] - m.mean[j]) * (r.x[j] - m.mean[j]);
    }
  }
  for (auto& s : m.stddev) {
    s = std::sqrt(s / n);
    if (!(s > 1e-12)) s = 1.0;
  }

  std::vector<Features> xs;
  std::vector<Label> ys;
  xs.reserve(train.rows.size());
  for (const auto& r : train.rows) {
    xs.push_back(m.standardize(r.x));
    ys.push_back(r.label);
  }
  const double prior = static_cast<double>(train.count(Label::Malicious)) / n;
  m.bias = std::log(prior / (1.0 - prior));

  for (int epoch = 0; epoch <= params.epochs; ++epoch) {
    auto lg = logistic_loss_and_gradient(xs, ys, m.weights, m.bias);
    if (!std::isfinite(lg.loss)) {
      throw std::runtime_error("logistic regression diverged at epoch " + std::to_string(epoch) +
                               "; lower the learning rate");
    }
    m.loss_curve.push_back(lg.loss);
    m.final_loss = lg.loss;
    if (epoch == params.epochs) break;
    for (std::size_t j = 0; j < kFeatureCount; ++j) m.weights[j] -= params.lr * lg.grad_w[j];
    m.bias -= params.lr * lg.grad_b;
  }
  return m;
}

double ThresholdModel::score(const Features& x) const {
  return x[0] >= min_writes && x[6] >= min_e_mean ? 1.0 : 0.0;
}

namespace {

// Distinct sorted values, thinned to at most `cap` quantile points.
std::vector<double> candidates(std::vector<double> v, std::size_t cap) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  if (v.size() <= cap) return v;
  std::vector<double> out;
  for (std::size_t k = 0; k < cap; ++k) out.push_back(v[k * (v.size() - 1) / (cap - 1)]);
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

double f1_of(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  const double denom = 2.0 * double(tp) + double(fp) + double(fn);
  return denom == 0 ? 0.0 : 2.0 * double(tp) / denom;
}

}  // namespace

ThresholdModel train_threshold_baseline(const Dataset& train) {
  require_both_classes(train);
  std::vector<double> writes, emean;
  for (const auto& r : train.rows) {
    writes.push_back(r.x[0]);
    emean.push_back(r.x[6]);
  }
  const auto wc = candidates(writes, 256);
  const auto ec = candidates(emean, 256);
  ThresholdModel best;
  double best_f1 = -1.0;
  for (double w : wc) {
    for (double e : ec) {
      std::uint64_t tp = 0, fp = 0, fn = 0;
      for (const auto& r : train.rows) {
        const bool hit = r.x[0] >= w && r.x[6] >= e;
        const bool mal = r.label == Label::Malicious;
        tp += hit && mal;
        fp += hit && !mal;
        fn += !hit && mal;
      }
      const double f1 = f1_of(tp, fp, fn);
      if (f1 > best_f1) {
        best_f1 = f1;
        best = ThresholdModel{w, e};
      }
    }
  }
  return best;
}

std::string_view model_kind(const Model& m) {
  switch (m.index()) {
    case 0: return "forest";
    case 1: return "logistic";
    default: return "threshold";
  }
}

Prediction predict(const Model& m, std::span<const double> x, double threshold) {
  if (x.size() != kFeatureCount) {
    throw std::invalid_argument("expected " + std::to_string(kFeatureCount) + " features, got " +
                                std::to_string(x.size()));
  }
  Features f{};
  std::copy(x.begin(), x.end(), f.begin());
  const double s = std::visit([&](const auto& model) { return model.score(f); }, m);
  return Prediction{s > threshold ? Label::Malicious : Label::Benign, s};
}

EvalReport evaluate(const Model& m, const Dataset& test, double threshold) {
  if (test.rows.empty()) throw std::invalid_argument("empty test set");
  EvalReport r;
  std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> fam;  // hits, total
  for (const auto& row : test.rows) {
    const bool hit = predict(m, row.x, threshold).label == Label::Malicious;
    const bool mal = row.label == Label::Malicious;
    r.tp += hit && mal;
    r.tn += !hit && !mal;
    r.fp += hit && !mal;
    r.fn += !hit && mal;
    if (mal) {
      auto& [h, t] = fam[row.family];
      h += hit;
      ++t;
    }
  }
  const double total = static_cast<double>(r.total());
  r.accuracy = static_cast<double>(r.tp + r.tn) / total;
  r.precision = r.tp + r.fp == 0 ? 0.0 : double(r.tp) / double(r.tp + r.fp);
  r.recall = r.tp + r.fn == 0 ? 0.0 : double(r.tp) / double(r.tp + r.fn);
  r.f1 = f1_of(r.tp, r.fp, r.fn);
  for (const auto& [name, ht] : fam) r.family_recall[name] = double(ht.first) / double(ht.second);
  return r;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << "accuracy " << textio::format_double(r.accuracy) << "\n"
     << "precision " << textio::format_double(r.precision) << "\n"
     << "recall " << textio::format_double(r.recall) << "\n"
     << "f1 " << textio::format_double(r.f1) << "\n"
     << "tp " << r.tp << "\ntn " << r.tn << "\nfp " << r.fp << "\nfn " << r.fn << "\n";
  for (const auto& [fam, rec] : r.family_recall) {
    os << "family_recall " << fam << ' ' << textio::format_double(rec) << "\n";
  }
  return os.str();
}

namespace {

constexpr std::string_view kMagic = "guardfs-model v1";

std::string feature_line() {
  std::string s = "features";
  for (auto n : kFeatureNames) {
    s += ' ';
    s += n;
  }
  return s;
}

std::string join_doubles(const Features& f) {
  std::string s;
  for (std::size_t j = 0; j < f.size(); ++j) {
    if (j) s += ' ';
    s += textio::format_double(f[j]);
  }
  return s;
}

class LineReader {
 public:
  explicit LineReader(std::string_view text) : text_(text) {}

  std::string_view next() {
    while (pos_ <= text_.size()) {
      auto nl = text_.find('\n', pos_);
      if (nl == std::string_view::npos) nl = text_.size();
      auto line = textio::trim(text_.substr(pos_, nl - pos_));
      pos_ = nl + 1;
      ++lineno_;
      if (!line.empty() && line.front() != '#') return line;
    }
    throw FormatError("model file truncated");
  }

  // Reads `key v1 v2 ...` and returns the values.
  std::vector<std::string_view> expect(std::string_view key) {
    auto f = textio::split_ws(next());
    if (f.empty() || f[0] != key) {
      throw FormatError("model file line " + std::to_string(lineno_) + ": expected '" +
                        std::string(key) + "'");
    }
    f.erase(f.begin());
    return f;
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  int lineno_ = 0;
};

Features parse_features(const std::vector<std::string_view>& f) {
  if (f.size() != kFeatureCount) throw FormatError("expected 8 values");
  Features out{};
  for (std::size_t j = 0; j < kFeatureCount; ++j) out[j] = textio::parse_double(f[j]);
  return out;
}

}  // namespace

std::string serialize_model(const Model& m) {
  std::ostringstream os;
  os << kMagic << "\nkind " << model_kind(m) << "\n" << feature_line() << "\n";
  if (const auto* forest = std::get_if<ForestModel>(&m)) {
    const auto& p = forest->params;
    os << "n_trees " << forest->trees.size() << "\nmax_features " << p.max_features
       << "\nmax_depth " << p.max_depth << "\nmin_samples_split " << p.min_samples_split
       << "\nbootstrap " << (p.bootstrap ? 1 : 0) << "\nseed " << p.seed << "\n";
    for (const auto& t : forest->trees) {
      os << "tree " << t.nodes.size() << "\n";
      for (const auto& n : t.nodes) {
        os << n.feature << ' ' << textio::format_double(n.threshold) << ' ' << n.left << ' '
           << n.right << ' ' << textio::format_double(n.p_malicious) << "\n";
      }
    }
  } else if (const auto* lr = std::get_if<LogisticModel>(&m)) {
    os << "weights " << join_doubles(lr->weights) << "\nbias " << textio::format_double(lr->bias)
       << "\nmean " << join_doubles(lr->mean) << "\nstddev " << join_doubles(lr->stddev)
       << "\nfinal_loss " << textio::format_double(lr->final_loss) << "\n";
  } else {
    const auto& th = std::get<ThresholdModel>(m);
    os << "min_writes " << textio::format_double(th.min_writes) << "\nmin_e_mean "
       << textio::format_double(th.min_e_mean) << "\n";
  }
  os << "end\n";
  return os.str();
}

Model deserialize_model(std::string_view text) {
  LineReader in(text);
  if (in.next() != kMagic) throw FormatError("not a guardfs model (bad header)");
  auto kind = in.expect("kind");
  if (kind.size() != 1) throw FormatError("bad kind line");
  auto features = in.expect("features");
  if (features.size() != kFeatureCount ||
      !std::equal(features.begin(), features.end(), kFeatureNames.begin())) {
    throw FormatError("model feature schema does not match this build");
  }
  Model result;
  if (kind[0] == "forest") {
    ForestModel f;
    const auto n_trees = textio::parse_int<std::size_t>(in.expect("n_trees").at(0));
    f.params.n_trees = static_cast<int>(n_trees);
    f.params.max_features = textio::parse_int<int>(in.expect("max_features").at(0));
    f.params.max_depth = textio::parse_int<int>(in.expect("max_depth").at(0));
    f.params.min_samples_split = textio::parse_int<int>(in.expect("min_samples_split").at(0));
    f.params.bootstrap = textio::parse_int<int>(in.expect("bootstrap").at(0)) != 0;
    f.params.seed = textio::parse_int<std::uint64_t>(in.expect("seed").at(0));
    for (std::size_t t = 0; t < n_trees; ++t) {
      const auto n_nodes = textio::parse_int<std::size_t>(in.expect("tree").at(0));
      if (n_nodes == 0) throw FormatError("empty tree");
      Tree tree;
      tree.nodes.resize(n_nodes);
      for (auto& node : tree.nodes) {
        auto fields = textio::split_ws(in.next());
        if (fields.size() != 5) throw FormatError("tree node needs 5 fields");
        node.feature = textio::parse_int<int>(fields[0]);
        node.threshold = textio::parse_double(fields[1]);
        node.left = textio::parse_int<int>(fields[2]);
        node.right = textio::parse_int<int>(fields[3]);
        node.p_malicious = textio::parse_double(fields[4]);
        const auto n = static_cast<int>(n_nodes);
        if (node.feature >= static_cast<int>(kFeatureCount) ||
            (node.feature >= 0 && (node.left <= 0 || node.left >= n || node.right <= 0 ||
                                   node.right >= n)) ||
            !(node.p_malicious >= 0.0 && node.p_malicious <= 1.0)) {
          throw FormatError("invalid tree node");
        }
      }
      f.trees.push_back(std::move(tree));
    }
    result = std::move(f);
  } else if (kind[0] == "logistic") {
    LogisticModel lr;
    lr.weights = parse_features(in.expect("weights"));
    lr.bias = textio::parse_double(in.expect("bias").at(0));
    lr.mean = parse_features(in.expect("mean"));
    lr.stddev = parse_features(in.expect("stddev"));
    lr.final_loss = textio::parse_double(in.expect("final_loss").at(0));
    result = lr;
  } else if (kind[0] == "threshold") {
    ThresholdModel th;
    th.min_writes = textio::parse_double(in.expect("min_writes").at(0));
    th.min_e_mean = textio::parse_double(in.expect("min_e_mean").at(0));
    result = th;
  } else {
    throw FormatError("unknown model kind '" + std::string(kind[0]) + "'");
  }
  in.expect("end");
  return result;
}

void save_model(const std::filesystem::path& path, const Model& m) {
  textio::write_file_atomic(path, serialize_model(m));
}

Model load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("model file not found: " + path.string());
  }
  return deserialize_model(textio::read_file(path));
}

LiveDetector::LiveDetector(std::shared_ptr<const Model> model, double threshold)
    : model_(std::move(model)), threshold_(threshold) {
  if (!model_) throw std::invalid_argument("live detector needs a model");
}

std::vector<channel::VerdictRecord> LiveDetector::classify(
    std::span<const telemetry::FeatureVector> vectors, UnixMillis now) {
  std::vector<channel::VerdictRecord> out;
  for (const auto& v : vectors) {
    if (v.modifying_ops() == 0 || flagged_.contains(v.pid)) continue;
    const auto f = to_features(v);
    const auto p = predict(*model_, f, threshold_);
    if (p.label == Label::Malicious) {
      flagged_.insert(v.pid);
      out.push_back({v.pid, defense::VerdictState::Malicious, now});
    } else if (cleared_.insert(v.pid).second) {
      out.push_back({v.pid, defense::VerdictState::Benign, now});
    }
  }
  return out;
}

}  // namespace guardfs::detector
