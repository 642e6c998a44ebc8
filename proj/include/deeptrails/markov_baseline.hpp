#pragma once

// Classical first-order hypothesis comparison: transition counts, Dirichlet
// priors elicited from hypothesis matrices, and closed-form log evidence.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "deeptrails/behavior.hpp"
#include "deeptrails/errors.hpp"

namespace deeptrails {

struct TransitionCounts {
  int n = 0;
  std::vector<std::int64_t> values;  // row-major n x n

  std::int64_t at(int i, int j) const { return values[index(i, j)]; }
  std::int64_t& at(int i, int j) { return values[index(i, j)]; }
  std::int64_t total() const {
    std::int64_t s = 0;
    for (auto v : values) s += v;
    return s;
  }

 private:
  std::size_t index(int i, int j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j);
  }
};

/// counts[i][j] = number of adjacent (i, j) pairs over all walks of states.
inline TransitionCounts count_transitions(const std::vector<std::vector<int>>& walks, int n_states) {
  if (n_states < 1) throw DomainError("state count must be positive");
  TransitionCounts c{n_states, std::vector<std::int64_t>(static_cast<std::size_t>(n_states) *
                                                          static_cast<std::size_t>(n_states), 0)};
  for (const auto& w : walks) {
    for (int s : w) {
      if (s < 0 || s >= n_states) throw DomainError("walk state " + std::to_string(s) + " out of range");
    }
    for (std::size_t t = 0; t + 1 < w.size(); ++t) ++c.at(w[t], w[t + 1]);
  }
  return c;
}

inline constexpr double kBasePseudoCount = 1.0;

struct PriorSpec {
  TransitionMatrix hypothesis;
  double kappa = 0.0;
  double alpha0 = kBasePseudoCount;
};

/// Dirichlet parameters, one row per source state.
struct DirichletPrior {
  int n = 0;
  std::vector<double> alpha;

  double at(int i, int j) const {
    return alpha[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
  }
};

/// alpha = alpha0 + kappa * H.
inline DirichletPrior elicit_prior(const PriorSpec& spec) {
  if (!(spec.kappa >= 0.0)) throw DomainError("concentration factor must be non-negative");
  const auto& h = spec.hypothesis;
  if (h.values.size() != static_cast<std::size_t>(h.n) * static_cast<std::size_t>(h.n)) {
    throw ShapeError("hypothesis matrix is not square");
  }
  for (int i = 0; i < h.n; ++i) {
    double s = 0.0;
    for (int j = 0; j < h.n; ++j) {
      if (h.at(i, j) < 0.0) throw DomainError("hypothesis matrix has a negative entry");
      s += h.at(i, j);
    }
    if (std::abs(s - 1.0) > 1e-9) throw DomainError("hypothesis row " + std::to_string(i) + " does not sum to 1");
  }
  DirichletPrior p{h.n, {}};
  p.alpha.reserve(h.values.size());
  for (double x : h.values) p.alpha.push_back(spec.alpha0 + spec.kappa * x);
  return p;
}

/// Dirichlet-multinomial log marginal likelihood, rows independent.
inline double log_evidence(const TransitionCounts& counts, const DirichletPrior& prior) {
  if (counts.n != prior.n || counts.values.size() != prior.alpha.size()) {
    throw ShapeError("counts and prior shapes differ");
  }
  for (auto v : counts.values) {
    if (v < 0) throw DomainError("transition counts must be non-negative");
  }
  double total = 0.0;
  for (int i = 0; i < counts.n; ++i) {
    double a_sum = 0.0, an_sum = 0.0, row = 0.0;
    std::int64_t n_row = 0;
    for (int j = 0; j < counts.n; ++j) {
      const auto n = counts.at(i, j);
      if (n == 0) continue;
      const double a = prior.at(i, j);
      row += std::lgamma(a + static_cast<double>(n)) - std::lgamma(a);
      n_row += n;
    }
    if (n_row == 0) continue;  // empty rows contribute exactly zero
    for (int j = 0; j < counts.n; ++j) a_sum += prior.at(i, j);
    an_sum = a_sum + static_cast<double>(n_row);
    total += std::lgamma(a_sum) - std::lgamma(an_sum) + row;
  }
  return total;
}

inline const std::vector<double>& default_kappa_grid() {
  static const std::vector<double> grid{0, 1, 2, 5, 10, 100, 1000};
  return grid;
}

struct EvidenceTable {
  std::vector<std::string> hypotheses;
  std::vector<double> kappas;
  std::vector<std::vector<double>> evidence;  // [hypothesis][kappa]

  double at(const std::string& name, double kappa) const {
    for (std::size_t h = 0; h < hypotheses.size(); ++h) {
      if (hypotheses[h] != name) continue;
      for (std::size_t k = 0; k < kappas.size(); ++k) {
        if (kappas[k] == kappa) return evidence[h][k];
      }
    }
    throw UsageError("no evidence entry for " + name);
  }
};

struct NamedMatrix {
  std::string name;
  TransitionMatrix matrix;
};

inline EvidenceTable kappa_sweep(const TransitionCounts& counts, const std::vector<NamedMatrix>& hypotheses,
                                 const std::vector<double>& kappas = default_kappa_grid()) {
  if (hypotheses.empty() || kappas.empty()) throw UsageError("kappa sweep needs hypotheses and kappas");
  EvidenceTable t;
  t.kappas = kappas;
  for (const auto& h : hypotheses) {
    if (h.matrix.n != counts.n) throw ShapeError("hypothesis " + h.name + " has the wrong size");
    t.hypotheses.push_back(h.name);
    auto& row = t.evidence.emplace_back();
    for (double k : kappas) row.push_back(log_evidence(counts, elicit_prior({h.matrix, k})));
  }
  return t;
}

/// First-order matrices for behavior hypotheses; step-dependent ones are flattened.
inline std::vector<NamedMatrix> first_order_hypotheses(const StateGraph& graph,
                                                       const std::vector<std::pair<std::string, BehaviorSpec>>& specs,
                                                       int length) {
  std::vector<NamedMatrix> out;
  for (const auto& [name, spec] : specs) out.push_back({name, flatten_first_order(graph, spec, length)});
  return out;
}

}  // namespace deeptrails
