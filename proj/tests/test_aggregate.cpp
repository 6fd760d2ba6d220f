#include "peap/aggregate.hpp"
#include "peap/diagnostics.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace peap;

namespace {

AttributionTable random_table(const Graph& g, unsigned seed) {
  AttributionTable t;
  std::mt19937 rng(seed);
  std::normal_distribution<double> nd;
  for (EdgeId e = 0; e < g.num_edges(); ++e) t.scores.push_back(nd(rng));
  return t;
}

}  // namespace

TEST(Aggregate, SingleExamplePositionalIsIdentity) {
  Graph g(testutil::toy_config(2, 2, 4), 3);
  const auto t = random_table(g, 1);
  EXPECT_EQ(aggregate({t}, g, AggregationMode::Positional).scores, t.scores);
}

TEST(Aggregate, CancellationScenario) {
  Graph g(testutil::toy_config(1, 1, 4), 2);
  AttributionTable t;
  t.scores.assign(static_cast<std::size_t>(g.num_edges()), 0.0);
  const double a = 0.75;
  const EdgeId e0 = g.edge_id({NodeRef::embed(0), NodeRef::mlp(0, 0), Channel::Direct});
  const EdgeId e1 = g.edge_id({NodeRef::embed(1), NodeRef::mlp(0, 1), Channel::Direct});
  t.scores[e0] = a;
  t.scores[e1] = -a;
  const Graph c = collapsed_graph(g, true);
  const EdgeId key = c.edge_id({NodeRef::embed(0), NodeRef::mlp(0, 0), Channel::Direct});
  EXPECT_EQ(aggregate({t}, g, AggregationMode::SumThenAbs)[key], 0.0);
  EXPECT_EQ(aggregate({t}, g, AggregationMode::AbsThenSum)[key], 2 * a);
  EXPECT_EQ(aggregate({t}, g, AggregationMode::MaxAbs)[key], a);
}

TEST(Aggregate, AbsThenSumDominatesSumThenAbs) {
  Graph g(testutil::toy_config(2, 2, 4), 5);
  std::vector<AttributionTable> tables{random_table(g, 2), random_table(g, 3), random_table(g, 4)};
  for (bool attention : {true, false}) {
    const auto a = aggregate(tables, g, AggregationMode::AbsThenSum, attention);
    const auto b = aggregate(tables, g, AggregationMode::SumThenAbs, attention);
    const auto m = aggregate(tables, g, AggregationMode::MaxAbs, attention);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_GE(a.scores[i] + 1e-12, b.scores[i]);
      EXPECT_GE(a.scores[i] + 1e-12, m.scores[i]);
    }
  }
}

TEST(Aggregate, KeyMismatchIsRejected) {
  Graph g(testutil::toy_config(1, 1, 4), 2), h(testutil::toy_config(1, 1, 4), 3);
  EXPECT_THROW(aggregate({random_table(g, 1), random_table(h, 1)}, g, AggregationMode::Positional), DataError);
}

TEST(Aggregate, MergeIsOrderIndependent) {
  Graph g(testutil::toy_config(1, 2, 4), 3);
  Aggregator a(g, AggregationMode::Positional), b(g, AggregationMode::Positional), all(g, AggregationMode::Positional);
  const auto t1 = random_table(g, 1), t2 = random_table(g, 2), t3 = random_table(g, 3);
  a.add(t1);
  b.add(t2);
  b.add(t3);
  all.add(t3);
  all.add(t1);
  all.add(t2);
  b.merge(a);
  const auto x = b.result(), y = all.result();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x.scores[i], y.scores[i], 1e-12);
  EXPECT_EQ(x.examples, 3);
}

TEST(Diagnostics, IdenticalTables) {
  Graph g(testutil::toy_config(1, 2, 4), 4);
  const auto t = random_table(g, 7);
  const auto r = ranking_diagnostics(t, t, {1, 5, 10, 100});
  for (const auto& lv : r.levels) {
    EXPECT_EQ(lv.diff, 0.0);
    EXPECT_NEAR(lv.rho, 1.0, 1e-12);
  }
}

TEST(Diagnostics, ReversedRanking) {
  AttributionTable a, b;
  for (int i = 0; i < 100; ++i) {
    a.scores.push_back(i + 1);
    b.scores.push_back(100 - i);
  }
  for (auto v : {RankVariant::AbsentLast, RankVariant::UnionScores}) {
    EXPECT_EQ(ranking_difference(a, b, 100), 0.0);
    EXPECT_NEAR(rank_correlation(a, b, 100, v), -1.0, 1e-12);
  }
}

TEST(Diagnostics, EmptyListIsAnError) {
  AttributionTable a;
  a.scores.assign(50, 1.0);
  EXPECT_THROW(top_k(a, 1.0), DataError);
  EXPECT_EQ(top_k(a, 2.0).size(), 1u);
}

TEST(Diagnostics, DiffCountsListOverlap) {
  AttributionTable a, b;
  for (int i = 0; i < 10; ++i) {
    a.scores.push_back(10 - i);
    b.scores.push_back(10 - i);
  }
  std::swap(b.scores[1], b.scores[9]);  // second-best edge drops out of b's top 2
  EXPECT_DOUBLE_EQ(ranking_difference(a, b, 20), 0.5);
  const double rho = rank_correlation(a, b, 20);
  EXPECT_GE(rho, -1.0);
  EXPECT_LE(rho, 1.0);
}

TEST(Diagnostics, ControlsAverageAllPairs) {
  Graph g(testutil::toy_config(1, 2, 4), 4);
  std::vector<AttributionTable> subsets{random_table(g, 1), random_table(g, 2), random_table(g, 3)};
  auto report = ranking_diagnostics(subsets[0], subsets[1], {10});
  add_controls(report, subsets);
  double expect = (ranking_difference(subsets[0], subsets[1], 10) + ranking_difference(subsets[0], subsets[2], 10) +
                   ranking_difference(subsets[1], subsets[2], 10)) /
                  3;
  EXPECT_NEAR(report.levels[0].diff_control, expect, 1e-12);
  EXPECT_THROW(add_controls(report, {subsets[0]}), DataError);
}
