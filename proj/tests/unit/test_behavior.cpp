#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "deeptrails/behavior.hpp"

using namespace deeptrails;

namespace {

StateGraph graph_from_edges(int n, const std::vector<std::pair<int, int>>& edges) {
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (auto [u, v] : edges) {
    adj[static_cast<std::size_t>(u)].push_back(v);
    adj[static_cast<std::size_t>(v)].push_back(u);
  }
  return StateGraph(n, std::move(adj));
}

std::map<int, double> support(const std::vector<double>& dist) {
  std::map<int, double> out;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] > 0) out[static_cast<int>(i)] = dist[i];
  }
  return out;
}

// Upper chi-square quantile via the Wilson-Hilferty approximation.
double chi2_critical(int df, double z) {
  const double k = df;
  const double a = 2.0 / (9.0 * k);
  return k * std::pow(1.0 - a + z * std::sqrt(a), 3.0);
}

constexpr double kZ99 = 2.3263478740408408;  // standard normal 0.99 quantile

}  // namespace

TEST(GraphConfig, RejectsMNotBelowN) {
  EXPECT_THROW((GraphConfig{10, 10, 0}.validate()), ConfigError);
  EXPECT_THROW((GraphConfig{10, 12, 0}.validate()), ConfigError);
  EXPECT_THROW(generate_ba_graph({5, 0, 0}), ConfigError);
  try {
    generate_ba_graph({10, 10, 0});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("graph.m"), std::string::npos);
  }
}

TEST(BaGraph, DefaultSizeHasExpectedEdgeCount) {
  const auto g = generate_ba_graph({100, 10, 7});
  EXPECT_EQ(g.size(), 100);
  std::size_t degree_sum = 0;
  for (int v = 0; v < g.size(); ++v) degree_sum += static_cast<std::size_t>(g.degree(v));
  EXPECT_EQ(degree_sum / 2, 900u);
  EXPECT_EQ(g.edge_count(), 900u);
}

TEST(BaGraph, SmallestGraphAttachesToWholeCore) {
  const auto g = generate_ba_graph({11, 10, 0});
  EXPECT_EQ(g.degree(10), 10);
  for (int v = 0; v < 10; ++v) {
    EXPECT_TRUE(g.has_edge(10, v));
    EXPECT_EQ(g.degree(v), 1);
  }
}

TEST(BaGraph, StructuralInvariantsAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const GraphConfig cfg{100, 10, seed};
    const auto g = generate_ba_graph(cfg);
    std::size_t degree_sum = 0;
    for (int v = 0; v < g.size(); ++v) {
      const auto& nb = g.neighbors(v);
      EXPECT_GE(nb.size(), 1u);
      EXPECT_TRUE(std::is_sorted(nb.begin(), nb.end()));
      EXPECT_EQ(std::adjacent_find(nb.begin(), nb.end()), nb.end()) << "duplicate edge";
      for (int u : nb) {
        EXPECT_NE(u, v) << "self-loop";
        EXPECT_TRUE(g.has_edge(u, v)) << "asymmetric edge";
      }
      degree_sum += nb.size();
    }
    EXPECT_EQ(degree_sum, 2 * g.edge_count());
    EXPECT_EQ(g.edge_count(), static_cast<std::size_t>((cfg.n - cfg.m) * cfg.m));
  }
}

TEST(BaGraph, DeterministicPerSeed) {
  EXPECT_EQ(generate_ba_graph({100, 10, 3}), generate_ba_graph({100, 10, 3}));
  EXPECT_FALSE(generate_ba_graph({100, 10, 3}) == generate_ba_graph({100, 10, 4}));
}

TEST(BaGraph, PreferentialAttachmentSkewsDegrees) {
  // Early nodes collect far more edges than late ones.
  const auto g = generate_ba_graph({100, 10, 11});
  double early = 0, late = 0;
  for (int v = 10; v < 20; ++v) early += g.degree(v);
  for (int v = 90; v < 100; ++v) late += g.degree(v);
  EXPECT_GT(early, 1.5 * late);
}

TEST(NodeClass, ParitySplitsEqually) {
  int even = 0;
  for (int v = 0; v < 100; ++v) even += StateGraph::node_class(v) == NodeClass::Even;
  EXPECT_EQ(even, 50);
  EXPECT_EQ(StateGraph::node_class(4), NodeClass::Even);
  EXPECT_EQ(StateGraph::node_class(7), NodeClass::Odd);
}

TEST(GraphIo, RoundTripAndHeader) {
  const GraphConfig cfg{30, 4, 99};
  const auto g = generate_ba_graph(cfg);
  std::stringstream ss;
  write_graph(ss, g, cfg);
  std::string header;
  std::getline(std::istringstream(ss.str()), header);
  EXPECT_EQ(header, "30 4 99");
  const auto loaded = read_graph(ss);
  EXPECT_EQ(loaded.graph, g);
  EXPECT_EQ(loaded.config.n, 30);
  EXPECT_EQ(loaded.config.m, 4);
  EXPECT_EQ(loaded.config.seed, 99u);
}

TEST(GraphIo, MalformedInputRaisesFormatError) {
  std::istringstream empty("");
  EXPECT_THROW(read_graph(empty), FormatError);
  std::istringstream bad_header("x y z\n");
  EXPECT_THROW(read_graph(bad_header), FormatError);
  std::istringstream bad_edge("5 1 0\n0 1\n2 9\n");
  try {
    read_graph(bad_edge);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(BehaviorKinds, ParseNamesAndAliases) {
  for (auto k : {BehaviorKind::Even, BehaviorKind::Odd, BehaviorKind::Random, BehaviorKind::Teleport,
                 BehaviorKind::FirstEven, BehaviorKind::FirstOdd, BehaviorKind::TwoOddTwoEven}) {
    EXPECT_EQ(parse_behavior_kind(to_string(k)), k);
  }
  EXPECT_EQ(parse_behavior_kind("rand"), BehaviorKind::Random);
  EXPECT_EQ(parse_behavior_kind("tele"), BehaviorKind::Teleport);
  EXPECT_FALSE(parse_behavior_kind("sideways").has_value());
  EXPECT_THROW((BehaviorSpec{BehaviorKind::Even, 0.0}.validate()), ConfigError);
  EXPECT_THROW((BehaviorSpec{BehaviorKind::Even, 1.5}.validate()), ConfigError);
}

TEST(TransitionDistribution, EvenIsUniformOverEvenNeighbors) {
  const auto g = graph_from_edges(6, {{0, 2}, {0, 3}, {0, 4}, {0, 5}});
  const auto d = transition_distribution(g, {BehaviorKind::Even, 1.0}, 1, 0, 20);
  EXPECT_EQ(support(d), (std::map<int, double>{{2, 0.5}, {4, 0.5}}));
}

TEST(TransitionDistribution, TeleportIsUniformOverAllNodes) {
  const auto g = generate_ba_graph({100, 10, 1});
  for (int current : {0, 17, 99}) {
    const auto d = transition_distribution(g, {BehaviorKind::Teleport, 1.0}, 5, current, 20);
    for (double p : d) EXPECT_DOUBLE_EQ(p, 0.01);
  }
}

TEST(TransitionDistribution, BiasSendsRemainderToOppositeClass) {
  const auto g = graph_from_edges(4, {{0, 2}, {0, 3}});
  const auto d = transition_distribution(g, {BehaviorKind::Even, 0.9}, 1, 0, 20);
  const auto s = support(d);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_NEAR(s.at(2), 0.9, 1e-15);
  EXPECT_NEAR(s.at(3), 0.1, 1e-15);
}

TEST(TransitionDistribution, FirstEvenSwitchesToOddInSecondHalf) {
  const auto g = graph_from_edges(4, {{0, 2}, {0, 3}});
  EXPECT_EQ(support(transition_distribution(g, {BehaviorKind::FirstEven, 1.0}, 12, 0, 20)),
            (std::map<int, double>{{3, 1.0}}));
  for (int t = 1; t < 20; ++t) {
    const auto even = support(transition_distribution(g, {BehaviorKind::FirstEven, 1.0}, t, 0, 20));
    const auto odd = support(transition_distribution(g, {BehaviorKind::FirstOdd, 1.0}, t, 0, 20));
    EXPECT_EQ(even.begin()->first, t <= 9 ? 2 : 3) << "step " << t;
    EXPECT_EQ(odd.begin()->first, t <= 9 ? 3 : 2) << "step " << t;
  }
  EXPECT_EQ(half_split_step(20), 10);
  EXPECT_EQ(half_split_step(20), static_cast<int>(std::ceil((20 - 1) / 2.0)));
}

TEST(TransitionDistribution, TwoOddTwoEvenHasPeriodFour) {
  const auto g = graph_from_edges(4, {{0, 2}, {0, 3}});
  const std::vector<int> expected{3, 3, 2, 2, 3, 3, 2, 2, 3};
  for (int t = 1; t <= 9; ++t) {
    const auto s = support(transition_distribution(g, {BehaviorKind::TwoOddTwoEven, 1.0}, t, 0, 20));
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s.begin()->first, expected[static_cast<std::size_t>(t - 1)]) << "step " << t;
  }
}

TEST(TransitionDistribution, DeadEndFallsBackToAllNeighbors) {
  const auto g = graph_from_edges(6, {{0, 3}, {0, 5}});
  const auto d = transition_distribution(g, {BehaviorKind::Even, 1.0}, 1, 0, 20);
  EXPECT_EQ(support(d), (std::map<int, double>{{3, 0.5}, {5, 0.5}}));
  // Biased variant: the opposite-class share already covers the whole row.
  const auto b = transition_distribution(g, {BehaviorKind::Even, 0.9}, 1, 0, 20);
  EXPECT_NEAR(b[3] + b[5], 1.0, 1e-12);
}

TEST(TransitionDistribution, IsolatedNodeStaysInPlace) {
  const auto g = graph_from_edges(3, {{1, 2}});
  const auto d = transition_distribution(g, {BehaviorKind::Random, 1.0}, 1, 0, 20);
  EXPECT_EQ(support(d), (std::map<int, double>{{0, 1.0}}));
  const auto t = transition_distribution(g, {BehaviorKind::Teleport, 1.0}, 1, 0, 20);
  for (double p : t) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(TransitionDistribution, InvalidStateIsDomainError) {
  const auto g = generate_ba_graph({20, 3, 0});
  EXPECT_THROW(transition_distribution(g, {BehaviorKind::Even, 1.0}, 1, 20, 20), DomainError);
  EXPECT_THROW(transition_distribution(g, {BehaviorKind::Even, 1.0}, 1, -1, 20), DomainError);
}

TEST(TransitionDistribution, AlwaysNormalizedOnValidStates) {
  const auto g = generate_ba_graph({60, 5, 2});
  for (auto k : {BehaviorKind::Even, BehaviorKind::Odd, BehaviorKind::Random, BehaviorKind::Teleport,
                 BehaviorKind::FirstEven, BehaviorKind::FirstOdd, BehaviorKind::TwoOddTwoEven}) {
    for (double p : {1.0, 0.9, 0.5}) {
      for (int t = 1; t < 20; t += 3) {
        for (int v = 0; v < g.size(); v += 7) {
          const auto d = transition_distribution(g, {k, p}, t, v, 20);
          ASSERT_EQ(d.size(), 60u);
          double s = 0;
          for (double x : d) {
            EXPECT_GE(x, 0.0);
            s += x;
          }
          EXPECT_NEAR(s, 1.0, 1e-9);
        }
      }
    }
  }
}

TEST(KernelMatrix, TeleportRandomAndEvenRows) {
  const auto g = generate_ba_graph({50, 4, 5});
  const auto tele = kernel_matrix(g, {BehaviorKind::Teleport, 1.0}, 1, 20);
  for (double x : tele.values) EXPECT_DOUBLE_EQ(x, 1.0 / 50.0);
  const auto rnd = kernel_matrix(g, {BehaviorKind::Random, 1.0}, 1, 20);
  const auto even = kernel_matrix(g, {BehaviorKind::Even, 1.0}, 1, 20);
  for (int i = 0; i < 50; ++i) {
    double rs = 0, es = 0;
    bool has_even = false;
    for (int u : g.neighbors(i)) has_even |= u % 2 == 0;
    for (int j = 0; j < 50; ++j) {
      const double expected = g.has_edge(i, j) ? 1.0 / g.degree(i) : 0.0;
      EXPECT_NEAR(rnd.at(i, j), expected, 1e-15);
      if (even.at(i, j) > 0 && has_even) {
        EXPECT_TRUE(g.has_edge(i, j) && j % 2 == 0);
      }
      rs += rnd.at(i, j);
      es += even.at(i, j);
    }
    EXPECT_NEAR(rs, 1.0, 1e-9);
    EXPECT_NEAR(es, 1.0, 1e-9);
  }
}

TEST(FlattenFirstOrder, ConstantKernelIsUnchanged) {
  const auto g = generate_ba_graph({40, 4, 8});
  for (auto k : {BehaviorKind::Even, BehaviorKind::Odd, BehaviorKind::Random, BehaviorKind::Teleport}) {
    const auto flat = flatten_first_order(g, {k, 1.0}, 20);
    const auto kern = kernel_matrix(g, {k, 1.0}, 1, 20);
    EXPECT_EQ(flat.values, kern.values);
  }
  EXPECT_THROW(flatten_first_order(g, {BehaviorKind::Even, 1.0}, 1), ConfigError);
}

TEST(FlattenFirstOrder, FirstEvenIsStepAverage) {
  const auto g = generate_ba_graph({40, 4, 8});
  const auto flat = flatten_first_order(g, {BehaviorKind::FirstEven, 1.0}, 20);
  const auto even = kernel_matrix(g, {BehaviorKind::Even, 1.0}, 1, 20);
  const auto odd = kernel_matrix(g, {BehaviorKind::Odd, 1.0}, 1, 20);
  for (std::size_t i = 0; i < flat.values.size(); ++i) {
    // transitions 1..9 follow even, 10..19 follow odd
    const double oracle = (9.0 * even.values[i] + 10.0 * odd.values[i]) / 19.0;
    EXPECT_NEAR(flat.values[i], oracle, 1e-12);
    EXPECT_NEAR(flat.values[i], 0.5 * even.values[i] + 0.5 * odd.values[i], 0.03);
  }
}

TEST(FlattenFirstOrder, TwoOddTwoEvenIsEqualMixture) {
  const auto g = generate_ba_graph({40, 4, 8});
  const auto flat = flatten_first_order(g, {BehaviorKind::TwoOddTwoEven, 1.0}, 17);
  const auto even = kernel_matrix(g, {BehaviorKind::Even, 1.0}, 1, 17);
  const auto odd = kernel_matrix(g, {BehaviorKind::Odd, 1.0}, 1, 17);
  for (std::size_t i = 0; i < flat.values.size(); ++i) {
    EXPECT_NEAR(flat.values[i], 0.5 * even.values[i] + 0.5 * odd.values[i], 1e-12);
  }
}

TEST(HypothesisKernel, MatchesTransitionDistribution) {
  const auto g = generate_ba_graph({30, 3, 4});
  const HypothesisKernel k(g, {BehaviorKind::FirstOdd, 0.9}, 20);
  EXPECT_FALSE(k.constant());
  for (int t = 1; t < 20; ++t) {
    const auto d = transition_distribution(g, {BehaviorKind::FirstOdd, 0.9}, t, 5, 20);
    for (int j = 0; j < 30; ++j) EXPECT_DOUBLE_EQ(k.probability(t, 5, j), d[static_cast<std::size_t>(j)]);
  }
  EXPECT_THROW(k.matrix(0), DomainError);
  EXPECT_THROW(k.matrix(20), DomainError);
  EXPECT_TRUE(HypothesisKernel(g, {BehaviorKind::Even, 1.0}, 20).constant());
}

TEST(SampleWalkSet, FullSizedEvenSet) {
  const auto g = generate_ba_graph({100, 10, 7});
  const auto ws = sample_walk_set(g, {BehaviorKind::Even, 1.0}, 1000, 20, 42);
  ASSERT_EQ(ws.walks.size(), 100000u);
  EXPECT_EQ(ws.length, 20);
  EXPECT_EQ(ws.walks_per_node, 1000);
  bool even_reachable = true;
  for (int v = 0; v < 100; ++v) {
    bool any = false;
    for (int u : g.neighbors(v)) any |= u % 2 == 0;
    even_reachable &= any;
  }
  for (std::size_t w = 0; w < ws.walks.size(); ++w) {
    const auto& walk = ws.walks[w];
    ASSERT_EQ(walk.size(), 20u);
    EXPECT_EQ(walk.front(), static_cast<int>(w / 1000));
    for (std::size_t t = 1; t < walk.size(); ++t) {
      ASSERT_TRUE(g.has_edge(walk[t - 1], walk[t]));
      if (even_reachable) {
        ASSERT_EQ(walk[t] % 2, 0);
      }
    }
  }
}

TEST(SampleWalkSet, OneShortWalkPerNode) {
  const auto g = generate_ba_graph({25, 3, 1});
  const auto ws = sample_walk_set(g, {BehaviorKind::Random, 1.0}, 1, 2, 0);
  ASSERT_EQ(ws.walks.size(), 25u);
  for (int v = 0; v < 25; ++v) {
    EXPECT_EQ(ws.walks[static_cast<std::size_t>(v)].size(), 2u);
    EXPECT_EQ(ws.walks[static_cast<std::size_t>(v)][0], v);
  }
}

TEST(SampleWalkSet, DeterministicPerSeed) {
  const auto g = generate_ba_graph({40, 4, 2});
  const BehaviorSpec spec{BehaviorKind::TwoOddTwoEven, 0.9};
  const auto a = sample_walk_set(g, spec, 5, 20, 77);
  const auto b = sample_walk_set(g, spec, 5, 20, 77);
  const auto c = sample_walk_set(g, spec, 5, 20, 78);
  EXPECT_EQ(a.walks, b.walks);
  EXPECT_NE(a.walks, c.walks);
  EXPECT_THROW(sample_walk_set(g, spec, 0, 20, 1), ConfigError);
  EXPECT_THROW(sample_walk_set(g, spec, 1, 1, 1), ConfigError);
}

TEST(SampleWalkSet, RandomBehaviorFrequenciesPassChiSquare) {
  const auto g = generate_ba_graph({100, 10, 7});
  const HypothesisKernel k(g, {BehaviorKind::Random, 1.0}, 2);
  for (int node : {0, 13, 50}) {
    const std::vector<int> starts(10000, node);
    const auto walks = sample_walks(k, starts, 1234 + static_cast<std::uint64_t>(node));
    std::map<int, int> counts;
    for (const auto& w : walks) ++counts[w[1]];
    const double expected = 10000.0 / g.degree(node);
    double chi2 = 0;
    for (int u : g.neighbors(node)) {
      const double o = counts.count(u) ? counts[u] : 0;
      chi2 += (o - expected) * (o - expected) / expected;
    }
    EXPECT_EQ(counts.size(), static_cast<std::size_t>(g.degree(node)));
    EXPECT_LT(chi2, chi2_critical(g.degree(node) - 1, kZ99)) << "node " << node;
  }
}

TEST(SampleWalkSet, BiasedWalksFollowBehaviorAtRateP) {
  const auto g = generate_ba_graph({100, 10, 7});
  const auto ws = sample_walk_set(g, {BehaviorKind::Even, 0.9}, 200, 20, 5);
  std::size_t follow = 0, total = 0;
  for (const auto& w : ws.walks) {
    for (std::size_t t = 1; t < w.size(); ++t) {
      bool has_both = false, e = false, o = false;
      for (int u : g.neighbors(w[t - 1])) (u % 2 ? o : e) = true;
      has_both = e && o;
      if (!has_both) continue;
      follow += w[t] % 2 == 0;
      ++total;
    }
  }
  const double rate = static_cast<double>(follow) / static_cast<double>(total);
  const double se = std::sqrt(0.9 * 0.1 / static_cast<double>(total));
  EXPECT_NEAR(rate, 0.9, 4 * se);
}
