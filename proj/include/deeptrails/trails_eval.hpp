#pragma once

// Frozen-model evaluation: per-position loss and target rank on hypothesis
// walks, hypothesis ranking, feature x sequence loss matrices, row clustering
// and the token-embedding parity probe.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "deeptrails/behavior.hpp"
#include "deeptrails/dataset.hpp"
#include "deeptrails/errors.hpp"
#include "deeptrails/rng.hpp"
#include "deeptrails/sequence_model.hpp"
#include "deeptrails/transformer.hpp"

namespace deeptrails {

/// 1-based rank of `target` when scores are sorted descending; ties go to the
/// smaller token id.
inline int rank_of_target(std::span<const double> scores, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= scores.size()) throw DomainError("rank target out of range");
  const double s = scores[static_cast<std::size_t>(target)];
  int rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > s || (scores[j] == s && static_cast<int>(j) < target)) ++rank;
  }
  return rank;
}

/// Means per decoding step. Step d scores the prediction of token d+1 of
/// [bos, s_1..s_T, eos]: step 0 is the start state, step T the eos.
struct PositionStats {
  std::vector<double> mean_loss;
  std::vector<double> mean_rank;
  std::vector<std::size_t> count;
  double overall_loss = 0.0;  // mean over every (walk, position)
  double overall_rank = 0.0;

  std::size_t steps() const { return mean_loss.size(); }

  /// Mean of the per-step mean ranks over steps [first, last].
  double mean_rank_between(std::size_t first, std::size_t last) const {
    double s = 0.0;
    for (std::size_t d = first; d <= last; ++d) s += mean_rank.at(d);
    return s / static_cast<double>(last - first + 1);
  }
};

struct WalkEvaluation {
  std::vector<std::vector<double>> loss;  // [walk][step]
  std::vector<std::vector<int>> rank;
  PositionStats stats;

  double walk_mean_loss(std::size_t w) const {
    const auto& l = loss.at(w);
    return std::accumulate(l.begin(), l.end(), 0.0) / static_cast<double>(l.size());
  }
};

struct EvalOptions {
  std::size_t batch_size = 256;
};

/// Scores every position of every walk under a frozen model. `features` is
/// empty or holds one vector per walk.
inline WalkEvaluation evaluate_walks(const SequenceModel& model, const std::vector<TokenWalk>& walks,
                                     const std::vector<FeatureVector>& features = {}, const EvalOptions& opt = {}) {
  if (!model.frozen()) throw UsageError("evaluation requires a frozen model");
  if (!features.empty() && features.size() != walks.size()) throw UsageError("one feature vector per walk required");
  if (features.empty() && model.uses_features()) throw UsageError("feature-conditioned model needs features");
  WalkEvaluation ev;
  ev.loss.resize(walks.size());
  ev.rank.resize(walks.size());
  std::vector<double> loss_sum, rank_sum;
  const std::size_t bs = std::max<std::size_t>(opt.batch_size, 1);
  for (std::size_t s = 0; s < walks.size(); s += bs) {
    const auto e = std::min(walks.size(), s + bs);
    std::vector<std::span<const int>> inputs;
    std::vector<const FeatureVector*> feats;
    for (std::size_t w = s; w < e; ++w) {
      if (walks[w].size() < 2) throw DomainError("token walk needs at least bos and eos");
      if (walks[w].size() - 1 > model.context_length()) throw DomainError("walk exceeds the model context");
      inputs.emplace_back(walks[w].data(), walks[w].size() - 1);
      feats.push_back(features.empty() ? nullptr : &features[w]);
    }
    const auto lps = model.batch_log_probs(inputs, feats);
    for (std::size_t w = s; w < e; ++w) {
      const auto& lp = lps[w - s];
      const std::size_t v = lp.cols(), steps = inputs[w - s].size();
      if (loss_sum.size() < steps) {
        loss_sum.resize(steps, 0.0);
        rank_sum.resize(steps, 0.0);
        ev.stats.count.resize(steps, 0);
      }
      auto& wl = ev.loss[w];
      auto& wr = ev.rank[w];
      wl.resize(steps);
      wr.resize(steps);
      for (std::size_t d = 0; d < steps; ++d) {
        const int target = walks[w][d + 1];
        std::span<const double> row(lp.data() + d * v, v);
        wl[d] = -row[static_cast<std::size_t>(target)];
        wr[d] = rank_of_target(row, target);
        loss_sum[d] += wl[d];
        rank_sum[d] += wr[d];
        ++ev.stats.count[d];
      }
    }
  }
  double total_loss = 0.0, total_rank = 0.0;
  std::size_t total = 0;
  for (std::size_t d = 0; d < loss_sum.size(); ++d) {
    const auto c = static_cast<double>(ev.stats.count[d]);
    ev.stats.mean_loss.push_back(loss_sum[d] / c);
    ev.stats.mean_rank.push_back(rank_sum[d] / c);
    total_loss += loss_sum[d];
    total_rank += rank_sum[d];
    total += ev.stats.count[d];
  }
  if (total > 0) {
    ev.stats.overall_loss = total_loss / static_cast<double>(total);
    ev.stats.overall_rank = total_rank / static_cast<double>(total);
  }
  return ev;
}

inline std::vector<TokenWalk> to_token_walks(const Vocabulary& vocab, const std::vector<std::vector<int>>& walks) {
  std::vector<TokenWalk> out;
  out.reserve(walks.size());
  for (const auto& w : walks) out.push_back(encode_walk(vocab, w));
  return out;
}

/// Walks sampled from `kernel`, `walks_per_node` from every start state.
inline std::vector<TokenWalk> generate_hypothesis_walks(const HypothesisKernel& kernel, int walks_per_node,
                                                        std::uint64_t seed) {
  return to_token_walks(build_vocabulary(kernel.states()), sample_walk_set(kernel, walks_per_node, seed).walks);
}

struct NamedHypothesis {
  std::string name;
  BehaviorSpec spec;
};

struct HypothesisEvalConfig {
  int walks_per_node = 100;
  int length = 20;
  std::uint64_t seed = 0;  // shared by all hypotheses
  std::size_t batch_size = 256;
};

struct HypothesisResult {
  std::string name;
  PositionStats stats;
};

struct HypTrailsReport {
  std::vector<HypothesisResult> results;  // input order
  std::vector<std::size_t> ranking;       // indices into results, ascending mean loss

  const HypothesisResult& operator[](const std::string& name) const {
    for (const auto& r : results) {
      if (r.name == name) return r;
    }
    throw UsageError("no hypothesis named " + name);
  }
};

inline HypTrailsReport run_deep_hyptrails(const SequenceModel& model, const StateGraph& graph,
                                          const std::vector<NamedHypothesis>& hypotheses,
                                          const HypothesisEvalConfig& config) {
  if (hypotheses.empty()) throw UsageError("no hypotheses to evaluate");
  if (!model.frozen()) throw UsageError("evaluation requires a frozen model");
  HypTrailsReport report;
  for (const auto& h : hypotheses) {
    const HypothesisKernel kernel(graph, h.spec, config.length);
    const auto walks = generate_hypothesis_walks(kernel, config.walks_per_node, config.seed);
    auto ev = evaluate_walks(model, walks, {}, EvalOptions{config.batch_size});
    report.results.push_back(HypothesisResult{h.name, std::move(ev.stats)});
  }
  report.ranking.resize(report.results.size());
  std::iota(report.ranking.begin(), report.ranking.end(), std::size_t{0});
  std::stable_sort(report.ranking.begin(), report.ranking.end(), [&](std::size_t a, std::size_t b) {
    return report.results[a].stats.overall_loss < report.results[b].stats.overall_loss;
  });
  return report;
}

// ---------------------------------------------------------------------------
// SubTrails

struct LossMatrix {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<double> values;  // row-major

  std::size_t rows() const { return row_labels.size(); }
  std::size_t cols() const { return col_labels.size(); }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  std::vector<double> row(std::size_t r) const {
    return {values.begin() + static_cast<std::ptrdiff_t>(r * cols()),
            values.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols())};
  }
};

struct LabeledFeatures {
  std::string label;
  FeatureVector values;
};

struct LabeledWalk {
  std::string label;
  TokenWalk tokens;
};

/// Cell (i, j): mean per-position loss of walk j conditioned on feature set i.
inline LossMatrix run_deep_subtrails(const SequenceModel& model, const std::vector<LabeledFeatures>& feature_sets,
                                     const std::vector<LabeledWalk>& walks) {
  if (!model.uses_features()) throw UsageError("subtrails needs a feature-conditioned model");
  LossMatrix m;
  for (const auto& f : feature_sets) {
    if (f.values.size() != model.feature_schema().size()) throw UsageError("feature set does not match model schema");
    try {
      check_conforms(model.feature_schema(), f.values);
    } catch (const DomainError& e) {
      throw UsageError(std::string("feature set does not match model schema: ") + e.what());
    }
    m.row_labels.push_back(f.label);
  }
  std::vector<TokenWalk> tokens;
  for (const auto& w : walks) {
    m.col_labels.push_back(w.label);
    tokens.push_back(w.tokens);
  }
  m.values.reserve(m.rows() * m.cols());
  for (const auto& f : feature_sets) {
    const std::vector<FeatureVector> feats(tokens.size(), f.values);
    const auto ev = evaluate_walks(model, tokens, feats);
    for (std::size_t j = 0; j < tokens.size(); ++j) m.values.push_back(ev.walk_mean_loss(j));
  }
  return m;
}

struct DistanceMatrix {
  std::size_t n = 0;
  std::vector<double> values;
  std::vector<std::size_t> zero_rows;  // rows whose norm needed the epsilon guard

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

inline constexpr double kCosineEps = 1e-12;

/// Pairwise cosine distance between row vectors.
inline DistanceMatrix cosine_distances(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 2) throw UsageError("need at least two rows");
  DistanceMatrix d;
  d.n = rows.size();
  d.values.assign(d.n * d.n, 0.0);
  std::vector<double> norms(d.n);
  for (std::size_t i = 0; i < d.n; ++i) {
    double s = 0.0;
    for (double x : rows[i]) s += x * x;
    norms[i] = std::sqrt(s);
    if (norms[i] < kCosineEps) {
      d.zero_rows.push_back(i);
      norms[i] = kCosineEps;
    }
  }
  for (std::size_t i = 0; i < d.n; ++i) {
    for (std::size_t j = i + 1; j < d.n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < rows[i].size(); ++k) dot += rows[i][k] * rows[j][k];
      const double dist = std::clamp(1.0 - dot / (norms[i] * norms[j]), 0.0, 2.0);
      d.values[i * d.n + j] = d.values[j * d.n + i] = dist;
    }
  }
  return d;
}

inline std::vector<std::vector<double>> matrix_rows(const LossMatrix& m) {
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(m.row(r));
  return rows;
}

/// Features are similar when the model assigns them similar losses on the same sequences.
inline DistanceMatrix feature_similarity(const LossMatrix& m) { return cosine_distances(matrix_rows(m)); }

struct ClusterResult {
  std::vector<int> cluster;  // contiguous ids from 0, in order of first row
  int n_clusters = 0;
  double threshold = 0.0;
  std::string linkage = "average";
  std::vector<std::array<double, 2>> coords;  // principal-component projection
};

inline constexpr double kDefaultClusterThreshold = 0.05;

/// Projects rows onto their first two principal components; each axis is
/// sign-normalized so its largest loading is positive.
inline std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<double>>& rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto p = rows.empty() ? Eigen::Index{0} : static_cast<Eigen::Index>(rows.front().size());
  std::vector<std::array<double, 2>> out(rows.size(), {0.0, 0.0});
  if (n == 0 || p == 0) return out;
  Eigen::MatrixXd X(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) X(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  X.rowwise() -= X.colwise().mean();
  const Eigen::MatrixXd cov = X.transpose() * X;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  for (int axis = 0; axis < 2 && axis < p; ++axis) {
    Eigen::VectorXd v = eig.eigenvectors().col(p - 1 - axis);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd proj = X * v;
    for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(axis)] = proj(i);
  }
  return out;
}

/// Average-linkage agglomerative clustering; clusters merge while their mean
/// pairwise distance is strictly below `threshold`.
inline ClusterResult cluster_rows(const DistanceMatrix& dist, double threshold,
                                  const std::vector<std::vector<double>>& rows = {}) {
  if (dist.n < 2) throw UsageError("clustering needs at least two rows");
  std::vector<std::vector<std::size_t>> members(dist.n);
  for (std::size_t i = 0; i < dist.n; ++i) members[i] = {i};
  auto linkage = [&](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    double s = 0.0;
    for (auto i : a)
      for (auto j : b) s += dist.at(i, j);
    return s / static_cast<double>(a.size() * b.size());
  };
  while (members.size() > 1) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = 0, bb = 0;
    for (std::size_t a = 0; a < members.size(); ++a) {
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        const double l = linkage(members[a], members[b]);
        if (l < best) {
          best = l;
          ba = a;
          bb = b;
        }
      }
    }
    if (!(best < threshold)) break;
    members[ba].insert(members[ba].end(), members[bb].begin(), members[bb].end());
    members.erase(members.begin() + static_cast<std::ptrdiff_t>(bb));
  }
  ClusterResult result;
  result.threshold = threshold;
  std::vector<int> raw(dist.n);
  for (std::size_t c = 0; c < members.size(); ++c)
    for (auto i : members[c]) raw[i] = static_cast<int>(c);
  std::vector<int> remap(members.size(), -1);
  result.cluster.resize(dist.n);
  for (std::size_t i = 0; i < dist.n; ++i) {
    if (remap[static_cast<std::size_t>(raw[i])] < 0) remap[static_cast<std::size_t>(raw[i])] = result.n_clusters++;
    result.cluster[i] = remap[static_cast<std::size_t>(raw[i])];
  }
  result.coords = rows.empty() ? std::vector<std::array<double, 2>>(dist.n, {0.0, 0.0}) : pca_2d(rows);
  return result;
}

// ---------------------------------------------------------------------------
// Embedding probe

struct ProbeConfig {
  int folds = 5;
  int iterations = 500;
  double learning_rate = 0.5;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

/// Cross-validated accuracy of a logistic-regression separator predicting
/// `labels` (0/1) from `points`. Features are standardized on each training fold.
inline double linear_probe_accuracy(const std::vector<std::vector<double>>& points, const std::vector<int>& labels,
                                    const ProbeConfig& cfg = {}) {
  const std::size_t n = points.size();
  if (n < 2 || labels.size() != n) throw UsageError("probe needs matching points and labels");
  const std::size_t p = points.front().size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(cfg.seed, 0x9b0be));
  rng.shuffle(order.begin(), order.end());
  const auto folds = static_cast<std::size_t>(std::clamp<int>(cfg.folds, 2, static_cast<int>(n)));
  std::size_t correct = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < n; ++i) (i % folds == f ? test : train).push_back(order[i]);
    std::vector<double> mu(p, 0.0), sd(p, 0.0);
    for (auto i : train)
      for (std::size_t k = 0; k < p; ++k) mu[k] += points[i][k];
    for (auto& x : mu) x /= static_cast<double>(train.size());
    for (auto i : train)
      for (std::size_t k = 0; k < p; ++k) sd[k] += (points[i][k] - mu[k]) * (points[i][k] - mu[k]);
    for (auto& x : sd) {
      x = std::sqrt(x / static_cast<double>(train.size()));
      if (x < 1e-12) x = 1.0;
    }
    auto standardized = [&](std::size_t i, std::size_t k) { return (points[i][k] - mu[k]) / sd[k]; };
    std::vector<double> w(p, 0.0);
    double b = 0.0;
    std::vector<double> gw(p);
    for (int it = 0; it < cfg.iterations; ++it) {
      std::fill(gw.begin(), gw.end(), 0.0);
      double gb = 0.0;
      for (auto i : train) {
        double z = b;
        for (std::size_t k = 0; k < p; ++k) z += w[k] * standardized(i, k);
        const double err = 1.0 / (1.0 + std::exp(-z)) - labels[i];
        for (std::size_t k = 0; k < p; ++k) gw[k] += err * standardized(i, k);
        gb += err;
      }
      const double inv = 1.0 / static_cast<double>(train.size());
      for (std::size_t k = 0; k < p; ++k) w[k] -= cfg.learning_rate * (gw[k] * inv + cfg.l2 * w[k]);
      b -= cfg.learning_rate * gb * inv;
    }
    for (auto i : test) {
      double z = b;
      for (std::size_t k = 0; k < p; ++k) z += w[k] * standardized(i, k);
      correct += static_cast<std::size_t>((z > 0.0 ? 1 : 0) == labels[i]);
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// State-token embedding rows (special tokens excluded).
inline std::vector<std::vector<double>> state_embeddings(const TransformerModel& model, int n_states) {
  const auto& wte = model.token_embeddings();
  std::vector<std::vector<double>> rows;
  for (int s = 0; s < n_states; ++s) {
    rows.emplace_back(wte.data() + static_cast<std::size_t>(s) * wte.cols(),
                      wte.data() + static_cast<std::size_t>(s + 1) * wte.cols());
  }
  return rows;
}

/// Held-out accuracy of a linear parity classifier on state-token embeddings.
inline double embedding_parity_probe(const TransformerModel& model, int n_states, const ProbeConfig& cfg = {}) {
  if (n_states + 2 != model.vocab_size()) throw UsageError("state count does not match the model vocabulary");
  std::vector<int> labels(static_cast<std::size_t>(n_states));
  for (int s = 0; s < n_states; ++s) labels[static_cast<std::size_t>(s)] = StateGraph::node_class(s) == NodeClass::Odd;
  return linear_probe_accuracy(state_embeddings(model, n_states), labels, cfg);
}

}  // namespace deeptrails
