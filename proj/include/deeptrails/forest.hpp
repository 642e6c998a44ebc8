#pragma once

// Random-forest language model. A prefix is summarized by a decayed
// multi-hot vector (weight gamma^distance from the last token), optionally
// followed by the raw feature values, and a bagged CART forest predicts the
// next token.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "deeptrails/dataset.hpp"
#include "deeptrails/errors.hpp"
#include "deeptrails/rng.hpp"
#include "deeptrails/sequence_model.hpp"

namespace deeptrails {

struct DecayConfig {
  double gamma = 0.8;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("forest.gamma must lie in (0, 1]");
  }
};

/// vector[v] = sum of gamma^d over occurrences of v at distance d from the last token.
inline std::vector<double> decay_encode_prefix(std::span<const int> prefix, int vocab_size, double gamma) {
  if (prefix.empty()) throw DomainError("cannot encode an empty prefix");
  std::vector<double> out(static_cast<std::size_t>(vocab_size), 0.0);
  double w = 1.0;
  for (std::size_t i = prefix.size(); i-- > 0;) {
    const int tok = prefix[i];
    if (tok < 0 || tok >= vocab_size) throw DomainError("token outside vocabulary");
    out[static_cast<std::size_t>(tok)] += w;
    w *= gamma;
  }
  return out;
}

/// Categorical features enter as integer level codes, numerical ones as is.
inline std::vector<double> forest_feature_block(const FeatureSchema& schema, const FeatureVector& values) {
  check_conforms(schema, values);
  return values;
}

struct DesignMatrix {
  std::size_t width = 0;
  std::vector<double> values;  // row-major
  std::vector<int> targets;

  std::size_t rows() const { return targets.size(); }
  const double* row(std::size_t r) const { return values.data() + r * width; }
};

/// One row per prediction position (prefix ending at t, target token t+1),
/// including the eos target.
inline DesignMatrix build_training_matrix(const SequenceDataset& data, const DecayConfig& decay) {
  decay.validate();
  if (data.records.empty()) throw DataError("cannot build a training matrix from an empty dataset");
  const auto v = static_cast<std::size_t>(data.vocab.size());
  DesignMatrix m;
  m.width = v + data.schema.size();
  std::size_t rows = 0;
  for (const auto& r : data.records) rows += r.tokens.size() - 1;
  m.values.reserve(rows * m.width);
  m.targets.reserve(rows);
  std::vector<double> enc(v);
  for (const auto& r : data.records) {
    std::fill(enc.begin(), enc.end(), 0.0);
    std::vector<double> feat;
    if (data.has_features()) feat = forest_feature_block(data.schema, *r.features);
    for (std::size_t t = 0; t + 1 < r.tokens.size(); ++t) {
      for (double& x : enc) x *= decay.gamma;
      enc[static_cast<std::size_t>(r.tokens[t])] += 1.0;
      m.values.insert(m.values.end(), enc.begin(), enc.end());
      m.values.insert(m.values.end(), feat.begin(), feat.end());
      m.targets.push_back(r.tokens[t + 1]);
    }
  }
  return m;
}

struct ForestConfig {
  int n_trees = 100;
  int max_depth = 0;  // 0 = unlimited
  int min_samples_split = 2;
  double features_per_split = 0.0;  // fraction of the row width; 0 = sqrt(width)
  bool bootstrap = true;
  std::size_t max_samples = 0;  // rows drawn per tree; 0 = all rows
  std::uint64_t seed = 0;

  void validate() const {
    if (n_trees < 1) throw ConfigError("forest.n_trees must be at least 1");
    if (max_depth < 0) throw ConfigError("forest.max_depth must be non-negative");
    if (min_samples_split < 2) throw ConfigError("forest.min_samples_split must be at least 2");
    if (features_per_split < 0.0 || features_per_split > 1.0) {
      throw ConfigError("forest.features_per_split must lie in [0, 1]");
    }
  }

  std::size_t features_for(std::size_t width) const {
    const double k = features_per_split > 0.0 ? features_per_split * static_cast<double>(width)
                                              : std::sqrt(static_cast<double>(width));
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(k)), 1, width);
  }
};

/// Flat CART tree; leaves store sparse class frequencies.
struct DecisionTree {
  std::vector<int> feature;  // -1 marks a leaf
  std::vector<double> threshold;
  std::vector<int> left;
  std::vector<int> right;
  std::vector<std::uint32_t> leaf_begin;  // into leaf_class/leaf_freq, valid for leaves
  std::vector<std::uint32_t> leaf_end;
  std::vector<int> leaf_class;
  std::vector<double> leaf_freq;

  std::size_t leaf_of(const double* x) const {
    std::size_t node = 0;
    while (feature[node] >= 0) {
      node = static_cast<std::size_t>(x[feature[node]] <= threshold[node] ? left[node] : right[node]);
    }
    return node;
  }

  std::size_t node_count() const { return feature.size(); }

  bool operator==(const DecisionTree&) const = default;
};

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(const DesignMatrix& data, int n_classes, const ForestConfig& config, Rng& rng)
      : data_(data), n_classes_(static_cast<std::size_t>(n_classes)), config_(config), rng_(rng),
        mtry_(config.features_for(data.width)), counts_(n_classes_), left_counts_(n_classes_) {}

  DecisionTree build(std::vector<std::size_t> samples) {
    samples_ = std::move(samples);
    tree_ = DecisionTree{};
    struct Job {
      std::size_t begin, end;
      int depth;
      int node;
    };
    std::vector<Job> stack;
    stack.push_back({0, samples_.size(), 0, new_node()});
    while (!stack.empty()) {
      const Job job = stack.back();
      stack.pop_back();
      const auto split = find_split(job.begin, job.end, job.depth);
      if (!split) {
        make_leaf(job.node, job.begin, job.end);
        continue;
      }
      // partition samples: x <= threshold first
      auto mid = std::stable_partition(
          samples_.begin() + static_cast<std::ptrdiff_t>(job.begin), samples_.begin() + static_cast<std::ptrdiff_t>(job.end),
          [&](std::size_t r) { return data_.row(r)[split->feature] <= split->threshold; });
      const auto m = static_cast<std::size_t>(mid - samples_.begin());
      const int l = new_node();
      const int r = new_node();
      const auto n = static_cast<std::size_t>(job.node);
      tree_.feature[n] = static_cast<int>(split->feature);
      tree_.threshold[n] = split->threshold;
      tree_.left[n] = l;
      tree_.right[n] = r;
      stack.push_back({m, job.end, job.depth + 1, r});
      stack.push_back({job.begin, m, job.depth + 1, l});
    }
    return std::move(tree_);
  }

 private:
  struct Split {
    std::size_t feature;
    double threshold;
    double score;  // sum over sides of (sum of squared counts) / size; larger is purer
  };

  int new_node() {
    tree_.feature.push_back(-1);
    tree_.threshold.push_back(0.0);
    tree_.left.push_back(-1);
    tree_.right.push_back(-1);
    tree_.leaf_begin.push_back(0);
    tree_.leaf_end.push_back(0);
    return static_cast<int>(tree_.feature.size() - 1);
  }

  void make_leaf(int node, std::size_t begin, std::size_t end) {
    std::fill(counts_.begin(), counts_.end(), 0.0);
    for (std::size_t i = begin; i < end; ++i) counts_[static_cast<std::size_t>(data_.targets[samples_[i]])] += 1.0;
    const auto n = static_cast<std::size_t>(node);
    tree_.leaf_begin[n] = static_cast<std::uint32_t>(tree_.leaf_class.size());
    const double inv = 1.0 / static_cast<double>(end - begin);
    for (std::size_t c = 0; c < n_classes_; ++c) {
      if (counts_[c] > 0) {
        tree_.leaf_class.push_back(static_cast<int>(c));
        tree_.leaf_freq.push_back(counts_[c] * inv);
      }
    }
    tree_.leaf_end[n] = static_cast<std::uint32_t>(tree_.leaf_class.size());
  }

  std::optional<Split> find_split(std::size_t begin, std::size_t end, int depth) {
    const std::size_t n = end - begin;
    if (n < static_cast<std::size_t>(config_.min_samples_split)) return std::nullopt;
    if (config_.max_depth > 0 && depth >= config_.max_depth) return std::nullopt;
    std::fill(counts_.begin(), counts_.end(), 0.0);
    std::size_t distinct = 0;
    for (std::size_t i = begin; i < end; ++i) {
      auto& c = counts_[static_cast<std::size_t>(data_.targets[samples_[i]])];
      distinct += c == 0.0;
      c += 1.0;
    }
    if (distinct <= 1) return std::nullopt;
    double total_sq = 0.0;
    for (double c : counts_) total_sq += c * c;

    // Candidate features in random order; keep looking past mtry until a valid split appears.
    std::vector<std::size_t> feats(data_.width);
    std::iota(feats.begin(), feats.end(), std::size_t{0});
    std::optional<Split> best;
    for (std::size_t k = 0; k < feats.size(); ++k) {
      const auto j = k + rng_.below(feats.size() - k);
      std::swap(feats[k], feats[j]);
      if (k >= mtry_ && best) break;
      evaluate_feature(feats[k], begin, end, total_sq, best);
    }
    return best;
  }

  void evaluate_feature(std::size_t f, std::size_t begin, std::size_t end, double total_sq, std::optional<Split>& best) {
    pairs_.clear();
    for (std::size_t i = begin; i < end; ++i) {
      const auto r = samples_[i];
      pairs_.emplace_back(data_.row(r)[f], data_.targets[r]);
    }
    // Decayed encodings are mostly zero: sort only the non-zero tail.
    auto zero_end = std::partition(pairs_.begin(), pairs_.end(), [](const auto& p) { return p.first <= 0.0; });
    auto neg_end = std::partition(pairs_.begin(), zero_end, [](const auto& p) { return p.first < 0.0; });
    std::sort(pairs_.begin(), neg_end);
    std::sort(zero_end, pairs_.end());
    if (pairs_.front().first == pairs_.back().first) return;

    const double n = static_cast<double>(pairs_.size());
    std::fill(left_counts_.begin(), left_counts_.end(), 0.0);
    double left_sq = 0.0, right_sq = total_sq;
    for (std::size_t i = 0; i + 1 < pairs_.size(); ++i) {
      const auto c = static_cast<std::size_t>(pairs_[i].second);
      const double lc = left_counts_[c];
      const double rc = counts_[c] - lc;
      left_sq += 2.0 * lc + 1.0;
      right_sq -= 2.0 * rc - 1.0;
      left_counts_[c] = lc + 1.0;
      if (pairs_[i].first == pairs_[i + 1].first) continue;
      const double nl = static_cast<double>(i + 1);
      const double score = left_sq / nl + right_sq / (n - nl);
      if (!best || score > best->score) {
        double thr = 0.5 * (pairs_[i].first + pairs_[i + 1].first);
        if (!(thr < pairs_[i + 1].first)) thr = pairs_[i].first;
        best = Split{f, thr, score};
      }
    }
  }

  const DesignMatrix& data_;
  std::size_t n_classes_;
  const ForestConfig& config_;
  Rng& rng_;
  std::size_t mtry_;
  std::vector<std::size_t> samples_;
  DecisionTree tree_;
  std::vector<double> counts_;
  std::vector<double> left_counts_;
  std::vector<std::pair<double, int>> pairs_;
};

}  // namespace detail

inline constexpr double kForestSmoothing = 1e-6;

class ForestModel : public SequenceModel {
 public:
  ForestModel() = default;
  ForestModel(int vocab_size, DecayConfig decay, FeatureSchema schema, ForestConfig config,
              std::vector<DecisionTree> trees)
      : vocab_size_(vocab_size), decay_(decay), schema_(std::move(schema)), config_(config), trees_(std::move(trees)) {}

  int vocab_size() const override { return vocab_size_; }
  bool frozen() const override { return true; }
  bool uses_features() const override { return !schema_.empty(); }
  const FeatureSchema& feature_schema() const override { return schema_; }
  std::size_t context_length() const override { return std::numeric_limits<std::size_t>::max(); }
  const DecayConfig& decay() const { return decay_; }
  const ForestConfig& config() const { return config_; }
  const std::vector<DecisionTree>& trees() const { return trees_; }
  std::size_t width() const { return static_cast<std::size_t>(vocab_size_) + schema_.size(); }

  std::uint64_t parameter_hash() const override {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : trees_) {
      h = hash_doubles(h, t.threshold);
      h = hash_doubles(h, t.leaf_freq);
      for (int f : t.feature) h = (h ^ static_cast<std::uint64_t>(f + 1)) * 0x100000001b3ULL;
    }
    return h;
  }

  /// Tree-averaged leaf frequencies with epsilon smoothing; `x` is a full design row.
  std::vector<double> predict_row(const double* x) const {
    std::vector<double> p(static_cast<std::size_t>(vocab_size_), 0.0);
    for (const auto& t : trees_) {
      const auto leaf = t.leaf_of(x);
      for (auto i = t.leaf_begin[leaf]; i < t.leaf_end[leaf]; ++i) {
        p[static_cast<std::size_t>(t.leaf_class[i])] += t.leaf_freq[i];
      }
    }
    const double inv_trees = 1.0 / static_cast<double>(trees_.size());
    double z = 0.0;
    for (double& x : p) {
      x = x * inv_trees + kForestSmoothing;
      z += x;
    }
    for (double& x : p) x /= z;
    return p;
  }

  ad::Tensor next_token_log_probs(std::span<const int> tokens, const FeatureVector* features) const override {
    if (tokens.empty()) throw DomainError("empty prefix");
    if (features && !uses_features()) throw UsageError("features supplied to a forest trained without features");
    if (!features && uses_features()) throw UsageError("feature-conditioned forest needs a feature vector");
    const auto v = static_cast<std::size_t>(vocab_size_);
    std::vector<double> row(width(), 0.0);
    if (features) {
      const auto block = forest_feature_block(schema_, *features);
      std::copy(block.begin(), block.end(), row.begin() + static_cast<std::ptrdiff_t>(v));
    }
    ad::Tensor out = ad::Tensor::matrix(tokens.size(), v);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= v) throw DomainError("token outside vocabulary");
      for (std::size_t j = 0; j < v; ++j) row[j] *= decay_.gamma;
      row[static_cast<std::size_t>(tokens[t])] += 1.0;
      const auto p = predict_row(row.data());
      for (std::size_t j = 0; j < v; ++j) out.at(t, j) = std::log(p[j]);
    }
    return out;
  }

 private:
  int vocab_size_ = 0;
  DecayConfig decay_;
  FeatureSchema schema_;
  ForestConfig config_;
  std::vector<DecisionTree> trees_;
};

/// Bagged CART trees with Gini splits and per-split feature subsampling.
inline std::vector<DecisionTree> fit_trees(const DesignMatrix& data, int n_classes, const ForestConfig& config) {
  config.validate();
  if (data.rows() == 0) throw DataError("cannot fit a forest on zero rows");
  std::vector<DecisionTree> trees;
  trees.reserve(static_cast<std::size_t>(config.n_trees));
  const std::size_t draw = config.max_samples > 0 ? std::min(config.max_samples, data.rows()) : data.rows();
  for (int t = 0; t < config.n_trees; ++t) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(t)));
    std::vector<std::size_t> samples(draw);
    if (config.bootstrap) {
      for (auto& s : samples) s = static_cast<std::size_t>(rng.below(data.rows()));
      std::sort(samples.begin(), samples.end());
    } else if (draw == data.rows()) {
      std::iota(samples.begin(), samples.end(), std::size_t{0});
    } else {
      std::vector<std::size_t> all(data.rows());
      std::iota(all.begin(), all.end(), std::size_t{0});
      rng.shuffle(all.begin(), all.end());
      std::copy(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(draw), samples.begin());
      std::sort(samples.begin(), samples.end());
    }
    detail::TreeBuilder builder(data, n_classes, config, rng);
    trees.push_back(builder.build(std::move(samples)));
  }
  return trees;
}

inline ForestModel fit_forest(const SequenceDataset& data, const DecayConfig& decay, const ForestConfig& config) {
  data.validate();
  const auto matrix = build_training_matrix(data, decay);
  return ForestModel(data.vocab.size(), decay, data.schema, config, fit_trees(matrix, data.vocab.size(), config));
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kForestCheckpointVersion = 1;

inline Json forest_to_json(const ForestModel& model) {
  const auto& c = model.config();
  Json j{{"format", "deeptrails-forest"},
         {"version", kForestCheckpointVersion},
         {"vocab_size", model.vocab_size()},
         {"gamma", model.decay().gamma},
         {"schema", detail::schema_to_json(model.feature_schema())},
         {"config",
          {{"n_trees", c.n_trees},
           {"max_depth", c.max_depth},
           {"min_samples_split", c.min_samples_split},
           {"features_per_split", c.features_per_split},
           {"bootstrap", c.bootstrap},
           {"max_samples", c.max_samples},
           {"seed", c.seed}}}};
  Json trees = Json::array();
  for (const auto& t : model.trees()) {
    trees.push_back({{"feature", t.feature},
                     {"threshold", t.threshold},
                     {"left", t.left},
                     {"right", t.right},
                     {"leaf_begin", t.leaf_begin},
                     {"leaf_end", t.leaf_end},
                     {"leaf_class", t.leaf_class},
                     {"leaf_freq", t.leaf_freq}});
  }
  j["trees"] = std::move(trees);
  return j;
}

inline ForestModel forest_from_json(const Json& j, int expected_vocab = 0) {
  try {
    if (j.at("format").get<std::string>() != "deeptrails-forest") throw FormatError("not a forest checkpoint");
    if (j.at("version").get<int>() != kForestCheckpointVersion) throw FormatError("unsupported forest checkpoint version");
    const int vocab = j.at("vocab_size").get<int>();
    if (expected_vocab > 0 && vocab != expected_vocab) throw FormatError("forest vocabulary does not match");
    const auto& jc = j.at("config");
    ForestConfig c;
    c.n_trees = jc.at("n_trees").get<int>();
    c.max_depth = jc.at("max_depth").get<int>();
    c.min_samples_split = jc.at("min_samples_split").get<int>();
    c.features_per_split = jc.at("features_per_split").get<double>();
    c.bootstrap = jc.at("bootstrap").get<bool>();
    c.max_samples = jc.at("max_samples").get<std::size_t>();
    c.seed = jc.at("seed").get<std::uint64_t>();
    std::vector<DecisionTree> trees;
    for (const auto& jt : j.at("trees")) {
      DecisionTree t;
      jt.at("feature").get_to(t.feature);
      jt.at("threshold").get_to(t.threshold);
      jt.at("left").get_to(t.left);
      jt.at("right").get_to(t.right);
      jt.at("leaf_begin").get_to(t.leaf_begin);
      jt.at("leaf_end").get_to(t.leaf_end);
      jt.at("leaf_class").get_to(t.leaf_class);
      jt.at("leaf_freq").get_to(t.leaf_freq);
      trees.push_back(std::move(t));
    }
    return ForestModel(vocab, DecayConfig{j.at("gamma").get<double>()}, detail::schema_from_json(j.at("schema")), c,
                       std::move(trees));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed forest checkpoint: ") + e.what());
  }
}

inline void save_forest(const std::string& path, const ForestModel& model) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << forest_to_json(model).dump() << '\n';
}

inline ForestModel load_forest(const std::string& path, int expected_vocab = 0) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open forest checkpoint " + path);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("forest checkpoint is not valid JSON: ") + e.what());
  }
  return forest_from_json(j, expected_vocab);
}

}  // namespace deeptrails
