#include "peap/circuit.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <random>
#include <set>

using namespace peap;

namespace {

std::vector<EdgeId> order_of(const Circuit& c) {
  std::vector<EdgeId> out;
  for (const auto& s : c.log.steps) out.push_back(s.edge);
  return out;
}

std::set<int> node_set(const Circuit& c) {
  std::set<int> out;
  for (std::size_t v = 0; v < c.nodes.size(); ++v)
    if (c.nodes[v]) out.insert(static_cast<int>(v));
  return out;
}

// Straightforward quadratic re-statement of the selection rule.
std::vector<EdgeId> naive_order(const ExplicitDag& dag, const std::vector<double>& scores, EdgeId n) {
  std::vector<bool> node_in(static_cast<std::size_t>(dag.num_nodes()), false), taken(scores.size(), false);
  node_in[static_cast<std::size_t>(dag.logits_node())] = true;
  std::vector<EdgeId> out;
  while (static_cast<EdgeId>(out.size()) < n) {
    EdgeId best = -1;
    for (EdgeId e = 0; e < dag.num_edges(); ++e) {
      if (taken[static_cast<std::size_t>(e)] || !node_in[static_cast<std::size_t>(dag.child(e))]) continue;
      if (best < 0 || std::abs(scores[static_cast<std::size_t>(e)]) > std::abs(scores[static_cast<std::size_t>(best)]))
        best = e;
    }
    if (best < 0) break;
    taken[static_cast<std::size_t>(best)] = true;
    node_in[static_cast<std::size_t>(dag.parent(best))] = true;
    out.push_back(best);
  }
  return out;
}

template <typename Dag>
bool reaches(const Dag& dag, const std::vector<bool>& edges, int from, bool toward_root) {
  std::vector<bool> seen(static_cast<std::size_t>(dag.num_nodes()), false);
  std::vector<int> stack{from};
  seen[static_cast<std::size_t>(from)] = true;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    if (toward_root ? v == dag.logits_node() : dag.is_embed(v)) return true;
    for (EdgeId e = 0; e < dag.num_edges(); ++e) {
      if (!edges[static_cast<std::size_t>(e)]) continue;
      const int a = toward_root ? dag.parent(e) : dag.child(e);
      const int b = toward_root ? dag.child(e) : dag.parent(e);
      if (a == v && !seen[static_cast<std::size_t>(b)]) {
        seen[static_cast<std::size_t>(b)] = true;
        stack.push_back(b);
      }
    }
  }
  return false;
}

template <typename Dag>
void expect_connected(const Dag& dag, const Circuit& c) {
  for (EdgeId e = 0; e < dag.num_edges(); ++e) {
    if (!c.contains(e)) continue;
    ASSERT_TRUE(reaches(dag, c.edges, dag.child(e), true)) << "edge " << e;
    ASSERT_TRUE(reaches(dag, c.edges, dag.parent(e), false)) << "edge " << e;
  }
  if (!c.empty()) EXPECT_TRUE(c.nodes[static_cast<std::size_t>(dag.logits_node())]);
  EXPECT_TRUE(connectivity_violations(dag, c).empty());
}

}  // namespace

TEST(Greedy, ChainSelectionAndPrune) {
  // Embed(0) -> A(1) -> B(2) -> Logits(3); edge ids: A->B, B->Logits, Embed->A.
  ExplicitDag dag(4, 3, {0}, {{1, 2}, {2, 3}, {0, 1}});
  const std::vector<double> scores{3, 5, 1};
  const auto full = greedy_build(dag, scores, 3);
  EXPECT_EQ(order_of(full), (std::vector<EdgeId>{1, 0, 2}));
  EXPECT_EQ(full.size, 3);
  EXPECT_EQ(node_set(full), (std::set<int>{0, 1, 2, 3}));
  const auto two = greedy_build(dag, scores, 2);
  EXPECT_EQ(order_of(two), (std::vector<EdgeId>{1, 0}));
  EXPECT_EQ(two.size, 0);
  EXPECT_TRUE(node_set(two).empty());
  EXPECT_EQ(two.log.pruned, 2);
  EXPECT_FALSE(two.log.notes.empty());
}

TEST(Greedy, TwoBranchFixture) {
  // 0,1 Embed; 2 A; 3 B; 4 C (no embedding above it); 5 Logits.
  ExplicitDag dag(6, 5, {0, 1}, {{2, 5}, {3, 5}, {0, 2}, {4, 2}, {1, 3}, {4, 3}});
  const std::vector<double> scores{4, 2, 1, 3, -0.5, -5};
  const auto c4 = greedy_build(dag, scores, 4);
  EXPECT_EQ(order_of(c4), (std::vector<EdgeId>{0, 3, 1, 5}));
  EXPECT_TRUE(c4.empty());
  const auto c5 = greedy_build(dag, scores, 5);
  EXPECT_EQ(c5.edge_list(), (std::vector<EdgeId>{0, 2}));
  EXPECT_EQ(node_set(c5), (std::set<int>{0, 2, 5}));
  const auto c6 = greedy_build(dag, scores, 6);
  EXPECT_EQ(order_of(c6), (std::vector<EdgeId>{0, 3, 1, 5, 2, 4}));
  EXPECT_EQ(c6.edge_list(), (std::vector<EdgeId>{0, 1, 2, 4}));
  EXPECT_EQ(node_set(c6), (std::set<int>{0, 1, 2, 3, 5}));
  expect_connected(dag, c6);
}

TEST(Greedy, TiesGoToTheLowerId) {
  ExplicitDag dag(4, 3, {0}, {{2, 3}, {1, 3}, {0, 1}, {0, 2}});
  const auto c = greedy_build(dag, {1, 1, 1, 1}, 2);
  EXPECT_EQ(order_of(c), (std::vector<EdgeId>{0, 1}));
  const auto d = greedy_build(dag, {-2, 2, 1, 1}, 3);
  EXPECT_EQ(order_of(d), (std::vector<EdgeId>{0, 1, 2}));
}

TEST(Greedy, BudgetIsClampedAndValidated) {
  ExplicitDag dag(3, 2, {0}, {{0, 1}, {1, 2}});
  const auto c = greedy_build(dag, {1, 1}, 10);
  EXPECT_TRUE(c.log.clamped);
  EXPECT_EQ(c.log.budget, 2);
  EXPECT_EQ(c.size, 2);
  EXPECT_THROW(greedy_build(dag, {1, 1}, 0), ConfigError);
  EXPECT_THROW(greedy_build(dag, {1}, 1), DataError);
}

TEST(Greedy, RandomDagProperties) {
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int m = 3 + static_cast<int>(rng() % 12);
    const int sources = 1 + static_cast<int>(rng() % 3);
    std::vector<std::pair<int, int>> edges;
    std::bernoulli_distribution take(0.35);
    for (int c = sources; c < m; ++c)
      for (int p = 0; p < c; ++p)
        if (take(rng)) edges.emplace_back(p, c);
    if (edges.empty()) edges.emplace_back(0, m - 1);
    std::vector<int> src(static_cast<std::size_t>(std::min(sources, m - 1)));
    std::iota(src.begin(), src.end(), 0);
    ExplicitDag dag(m, m - 1, src, edges);
    std::vector<double> scores;
    std::uniform_int_distribution<int> level(-4, 4);  // coarse values force ties
    for (std::size_t e = 0; e < edges.size(); ++e) scores.push_back(level(rng));
    const EdgeId n = 1 + static_cast<EdgeId>(rng() % (edges.size() + 2));
    const auto c = greedy_build(dag, scores, n);
    ASSERT_EQ(order_of(c), naive_order(dag, scores, n)) << "trial " << trial;
    expect_connected(dag, c);
    const auto more = greedy_build(dag, scores, n + 3);
    const auto a = order_of(c), b = order_of(more);
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << "trial " << trial;
  }
}

TEST(Greedy, HugeBudgetKeepsEveryEffectiveEdge) {
  const Graph g(testutil::toy_config(2, 2, 8), 3);
  AttributionTable t;
  for (EdgeId e = 0; e < g.num_edges(); ++e) t.scores.push_back(1.0 + static_cast<double>(e % 7));
  const auto c = greedy_build(t, g, g.num_edges() + 100);
  EXPECT_TRUE(c.log.clamped);
  std::vector<bool> all(static_cast<std::size_t>(g.num_edges()), true);
  for (EdgeId e = 0; e < g.num_edges(); ++e) {
    const bool effective = reaches(g, all, g.child(e), true);  // every parent reaches an Embed
    EXPECT_EQ(c.contains(e), effective) << to_string(g.edge(e));
  }
  expect_connected(g, c);
}

TEST(Greedy, CircuitJsonRoundTrip) {
  const Graph g(testutil::toy_config(1, 2, 8), 3);
  AttributionTable t;
  std::mt19937 rng(4);
  std::normal_distribution<double> nd;
  for (EdgeId e = 0; e < g.num_edges(); ++e) t.scores.push_back(nd(rng));
  const auto c = greedy_build(t, g, 25);
  const auto path = testutil::temp_dir("circuit") / "c.json";
  save_circuit(path, c, g, &t);
  const auto back = load_circuit(path, g);
  EXPECT_EQ(back.edges, c.edges);
  EXPECT_EQ(back.size, c.size);
  EXPECT_EQ(order_of(back), order_of(c));
  EXPECT_EQ(back.log.requested, 25);
  std::ifstream is(path);
  const auto j = nlohmann::json::parse(is);
  EXPECT_EQ(circuit_graph(j).num_edges(), g.num_edges());
  EXPECT_EQ(j["scores"].size(), static_cast<std::size_t>(c.size));
}
