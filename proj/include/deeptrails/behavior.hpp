#pragma once

// Synthetic behavior on a Barabasi-Albert state graph: graph generation,
// parity-based transition behaviors, and step-indexed hypothesis kernels.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "deeptrails/errors.hpp"
#include "deeptrails/rng.hpp"

namespace deeptrails {

struct GraphConfig {
  int n = 100;
  int m = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (n < 1) throw ConfigError("graph.n must be positive");
    if (m < 1) throw ConfigError("graph.m must be positive");
    if (m >= n) throw ConfigError("graph.m must be smaller than graph.n");
  }
};

enum class NodeClass { Even, Odd };

inline NodeClass opposite(NodeClass c) { return c == NodeClass::Even ? NodeClass::Odd : NodeClass::Even; }

class StateGraph {
 public:
  StateGraph() = default;
  StateGraph(int n, std::vector<std::vector<int>> adjacency) : n_(n), adjacency_(std::move(adjacency)) {
    for (auto& row : adjacency_) std::sort(row.begin(), row.end());
  }

  int size() const { return n_; }
  const std::vector<int>& neighbors(int v) const { return adjacency_.at(static_cast<std::size_t>(v)); }
  int degree(int v) const { return static_cast<int>(neighbors(v).size()); }

  static NodeClass node_class(int v) { return v % 2 == 0 ? NodeClass::Even : NodeClass::Odd; }

  std::size_t edge_count() const {
    std::size_t twice = 0;
    for (const auto& row : adjacency_) twice += row.size();
    return twice / 2;
  }

  bool has_edge(int u, int v) const {
    const auto& row = neighbors(u);
    return std::binary_search(row.begin(), row.end(), v);
  }

  bool operator==(const StateGraph&) const = default;

 private:
  int n_ = 0;
  std::vector<std::vector<int>> adjacency_;
};

/// Preferential attachment. Nodes 0..m-1 form an edgeless core; node m
/// attaches to all of them, and every later node picks m distinct existing
/// nodes with probability proportional to their degree. The result has
/// exactly (n - m) * m edges.
inline StateGraph generate_ba_graph(const GraphConfig& config) {
  config.validate();
  const auto n = static_cast<std::size_t>(config.n);
  const auto m = static_cast<std::size_t>(config.m);
  std::vector<std::vector<int>> adj(n);
  std::vector<double> weight(n, 0.0);
  Rng rng(derive_seed(config.seed, 0xba));

  auto connect = [&](std::size_t u, std::size_t v) {
    adj[u].push_back(static_cast<int>(v));
    adj[v].push_back(static_cast<int>(u));
    weight[u] += 1.0;
    weight[v] += 1.0;
  };

  for (std::size_t v = m; v < n; ++v) {
    std::vector<double> w(weight.begin(), weight.begin() + static_cast<std::ptrdiff_t>(v));
    double total = 0.0;
    for (double x : w) total += x;
    if (total == 0.0) {
      // edgeless core: the degree + epsilon weights are all equal
      std::fill(w.begin(), w.end(), 1.0);
      total = static_cast<double>(v);
    }
    std::vector<std::size_t> targets;
    targets.reserve(m);
    for (std::size_t k = 0; k < m; ++k) {
      double r = rng.uniform() * total;
      std::size_t pick = v;
      for (std::size_t u = 0; u < v; ++u) {
        if (w[u] <= 0.0) continue;
        pick = u;
        if (r < w[u]) break;
        r -= w[u];
      }
      targets.push_back(pick);
      total -= w[pick];
      w[pick] = 0.0;
    }
    for (auto u : targets) connect(v, u);
  }
  return StateGraph(config.n, std::move(adj));
}

// Edge-list text: header "n m seed", then one "u v" line per edge with u < v.
inline void write_graph(std::ostream& out, const StateGraph& graph, const GraphConfig& config) {
  out << config.n << ' ' << config.m << ' ' << config.seed << '\n';
  for (int u = 0; u < graph.size(); ++u) {
    for (int v : graph.neighbors(u)) {
      if (u < v) out << u << ' ' << v << '\n';
    }
  }
}

struct LoadedGraph {
  GraphConfig config;
  StateGraph graph;
};

inline LoadedGraph read_graph(std::istream& in) {
  LoadedGraph result;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("graph file: missing header line");
  {
    std::istringstream header(line);
    if (!(header >> result.config.n >> result.config.m >> result.config.seed)) {
      throw FormatError("graph file: header must be 'n m seed'");
    }
  }
  if (result.config.n < 1) throw FormatError("graph file: node count must be positive");
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(result.config.n));
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream row(line);
    int u = 0, v = 0;
    if (!(row >> u >> v) || u < 0 || v < 0 || u >= result.config.n || v >= result.config.n || u == v) {
      throw FormatError("graph file: bad edge on line " + std::to_string(line_no));
    }
    adj[static_cast<std::size_t>(u)].push_back(v);
    adj[static_cast<std::size_t>(v)].push_back(u);
  }
  result.graph = StateGraph(result.config.n, std::move(adj));
  return result;
}

inline void save_graph(const std::string& path, const StateGraph& graph, const GraphConfig& config) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_graph(out, graph, config);
}

inline LoadedGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open graph file " + path);
  return read_graph(in);
}

// ---------------------------------------------------------------------------
// Behaviors

enum class BehaviorKind { Even, Odd, Random, Teleport, FirstEven, FirstOdd, TwoOddTwoEven };

inline std::string_view to_string(BehaviorKind kind) {
  switch (kind) {
    case BehaviorKind::Even: return "even";
    case BehaviorKind::Odd: return "odd";
    case BehaviorKind::Random: return "random";
    case BehaviorKind::Teleport: return "teleport";
    case BehaviorKind::FirstEven: return "first-even";
    case BehaviorKind::FirstOdd: return "first-odd";
    case BehaviorKind::TwoOddTwoEven: return "two-odd-two-even";
  }
  return "?";
}

inline std::optional<BehaviorKind> parse_behavior_kind(std::string_view name) {
  if (name == "even") return BehaviorKind::Even;
  if (name == "odd") return BehaviorKind::Odd;
  if (name == "random" || name == "rand") return BehaviorKind::Random;
  if (name == "teleport" || name == "tele") return BehaviorKind::Teleport;
  if (name == "first-even") return BehaviorKind::FirstEven;
  if (name == "first-odd") return BehaviorKind::FirstOdd;
  if (name == "two-odd-two-even") return BehaviorKind::TwoOddTwoEven;
  return std::nullopt;
}

struct BehaviorSpec {
  BehaviorKind kind = BehaviorKind::Random;
  double bias = 1.0;  // probability of following the behavior; the rest goes to the opposite class

  void validate() const {
    if (!(bias > 0.0 && bias <= 1.0)) throw ConfigError("behavior bias must lie in (0, 1]");
  }
};

/// Transition index at which FirstEven/FirstOdd switch class, for walks of
/// `length` states (transitions are numbered 1..length-1).
inline int half_split_step(int length) { return length / 2; }  // == ceil((length - 1) / 2)

/// Class the behavior targets at transition `step`; nullopt for Random/Teleport.
inline std::optional<NodeClass> target_class(BehaviorKind kind, int step, int length) {
  switch (kind) {
    case BehaviorKind::Even: return NodeClass::Even;
    case BehaviorKind::Odd: return NodeClass::Odd;
    case BehaviorKind::FirstEven:
      return step < half_split_step(length) ? NodeClass::Even : NodeClass::Odd;
    case BehaviorKind::FirstOdd:
      return step < half_split_step(length) ? NodeClass::Odd : NodeClass::Even;
    case BehaviorKind::TwoOddTwoEven:
      return ((step - 1) % 4) < 2 ? NodeClass::Odd : NodeClass::Even;
    case BehaviorKind::Random:
    case BehaviorKind::Teleport:
      return std::nullopt;
  }
  return std::nullopt;
}

inline bool is_first_order(BehaviorKind kind) {
  return kind != BehaviorKind::FirstEven && kind != BehaviorKind::FirstOdd && kind != BehaviorKind::TwoOddTwoEven;
}

namespace detail {

// Uniform over neighbors of class `cls`; uniform over all neighbors when none
// qualifies; stays put on an isolated node.
inline void add_class_mass(const StateGraph& graph, int current, std::optional<NodeClass> cls, double mass,
                           std::vector<double>& out) {
  const auto& nbrs = graph.neighbors(current);
  if (nbrs.empty()) {
    out[static_cast<std::size_t>(current)] += mass;
    return;
  }
  std::size_t admissible = 0;
  if (cls) {
    for (int v : nbrs) admissible += StateGraph::node_class(v) == *cls;
  }
  if (admissible == 0) {
    const double share = mass / static_cast<double>(nbrs.size());
    for (int v : nbrs) out[static_cast<std::size_t>(v)] += share;
    return;
  }
  const double share = mass / static_cast<double>(admissible);
  for (int v : nbrs) {
    if (StateGraph::node_class(v) == *cls) out[static_cast<std::size_t>(v)] += share;
  }
}

}  // namespace detail

/// Next-state distribution (dense, length n) for the transition out of
/// `current` at transition index `step` of a walk with `length` states.
inline std::vector<double> transition_distribution(const StateGraph& graph, const BehaviorSpec& spec, int step,
                                                   int current, int length) {
  if (current < 0 || current >= graph.size()) {
    throw DomainError("state id " + std::to_string(current) + " outside graph");
  }
  if (step < 1 || step >= length) throw DomainError("transition step outside [1, length)");
  const auto n = static_cast<std::size_t>(graph.size());
  std::vector<double> dist(n, 0.0);
  if (spec.kind == BehaviorKind::Teleport) {
    std::fill(dist.begin(), dist.end(), 1.0 / static_cast<double>(n));
    return dist;
  }
  const auto cls = target_class(spec.kind, step, length);
  if (!cls) {
    detail::add_class_mass(graph, current, std::nullopt, 1.0, dist);
    return dist;
  }
  detail::add_class_mass(graph, current, cls, spec.bias, dist);
  if (spec.bias < 1.0) detail::add_class_mass(graph, current, opposite(*cls), 1.0 - spec.bias, dist);
  return dist;
}

/// Row-stochastic |S| x |S| matrix, row-major.
struct TransitionMatrix {
  int n = 0;
  std::vector<double> values;

  double at(int i, int j) const {
    return values[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
  }
  std::vector<double> row(int i) const {
    const auto b = values.begin() + static_cast<std::ptrdiff_t>(i) * n;
    return {b, b + n};
  }
};

inline TransitionMatrix kernel_matrix(const StateGraph& graph, const BehaviorSpec& spec, int step, int length) {
  TransitionMatrix mat{graph.size(), {}};
  mat.values.reserve(static_cast<std::size_t>(graph.size()) * static_cast<std::size_t>(graph.size()));
  for (int i = 0; i < graph.size(); ++i) {
    auto row = transition_distribution(graph, spec, step, i, length);
    mat.values.insert(mat.values.end(), row.begin(), row.end());
  }
  return mat;
}

/// Average of the per-step kernels over transitions 1..length-1; the
/// first-order summary of a (possibly step-dependent) behavior.
inline TransitionMatrix flatten_first_order(const StateGraph& graph, const BehaviorSpec& spec, int length) {
  if (length < 2) throw ConfigError("walk length must be at least 2");
  if (is_first_order(spec.kind)) return kernel_matrix(graph, spec, 1, length);
  TransitionMatrix acc{graph.size(), std::vector<double>(static_cast<std::size_t>(graph.size()) *
                                                             static_cast<std::size_t>(graph.size()),
                                                         0.0)};
  for (int t = 1; t < length; ++t) {
    const auto k = kernel_matrix(graph, spec, t, length);
    for (std::size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += k.values[i];
  }
  const double inv = 1.0 / static_cast<double>(length - 1);
  for (double& x : acc.values) x *= inv;
  return acc;
}

/// Step-indexed transition kernel for walks of a fixed length. First-order
/// behaviors keep a single matrix.
class HypothesisKernel {
 public:
  HypothesisKernel(const StateGraph& graph, const BehaviorSpec& spec, int length)
      : n_(graph.size()), length_(length), spec_(spec) {
    spec.validate();
    if (length < 2) throw ConfigError("walk length must be at least 2");
    const int distinct = is_first_order(spec.kind) ? 1 : length - 1;
    for (int t = 1; t <= distinct; ++t) matrices_.push_back(kernel_matrix(graph, spec, t, length));
  }

  int states() const { return n_; }
  int length() const { return length_; }
  const BehaviorSpec& spec() const { return spec_; }
  bool constant() const { return matrices_.size() == 1; }

  const TransitionMatrix& matrix(int step) const {
    if (step < 1 || step >= length_) throw DomainError("transition step outside [1, length)");
    return constant() ? matrices_.front() : matrices_[static_cast<std::size_t>(step - 1)];
  }

  double probability(int step, int from, int to) const { return matrix(step).at(from, to); }

  int sample(int step, int from, Rng& rng) const {
    const auto& mat = matrix(step);
    const double* row = mat.values.data() + static_cast<std::ptrdiff_t>(from) * n_;
    double r = rng.uniform();
    int last_positive = from;
    for (int j = 0; j < n_; ++j) {
      if (row[j] <= 0.0) continue;
      last_positive = j;
      if (r < row[j]) return j;
      r -= row[j];
    }
    return last_positive;  // rounding residue
  }

 private:
  int n_;
  int length_;
  BehaviorSpec spec_;
  std::vector<TransitionMatrix> matrices_;
};

struct WalkSet {
  std::vector<std::vector<int>> walks;
  BehaviorSpec behavior;
  int length = 0;
  int walks_per_node = 0;
};

/// One walk per entry of `starts`; walk w draws from seed stream w.
inline std::vector<std::vector<int>> sample_walks(const HypothesisKernel& kernel, const std::vector<int>& starts,
                                                  std::uint64_t seed) {
  std::vector<std::vector<int>> walks;
  walks.reserve(starts.size());
  for (std::size_t w = 0; w < starts.size(); ++w) {
    Rng rng(derive_seed(seed, w));
    std::vector<int> walk;
    walk.reserve(static_cast<std::size_t>(kernel.length()));
    int current = starts[w];
    if (current < 0 || current >= kernel.states()) throw DomainError("start state outside graph");
    walk.push_back(current);
    for (int t = 1; t < kernel.length(); ++t) {
      current = kernel.sample(t, current, rng);
      walk.push_back(current);
    }
    walks.push_back(std::move(walk));
  }
  return walks;
}

inline WalkSet sample_walk_set(const HypothesisKernel& kernel, int walks_per_node, std::uint64_t seed) {
  if (walks_per_node < 1) throw ConfigError("walks_per_node must be positive");
  std::vector<int> starts;
  starts.reserve(static_cast<std::size_t>(kernel.states()) * static_cast<std::size_t>(walks_per_node));
  for (int v = 0; v < kernel.states(); ++v) starts.insert(starts.end(), static_cast<std::size_t>(walks_per_node), v);
  return WalkSet{sample_walks(kernel, starts, seed), kernel.spec(), kernel.length(), walks_per_node};
}

inline WalkSet sample_walk_set(const StateGraph& graph, const BehaviorSpec& spec, int walks_per_node, int length,
                               std::uint64_t seed) {
  return sample_walk_set(HypothesisKernel(graph, spec, length), walks_per_node, seed);
}

}  // namespace deeptrails
