#include "peap/schema.hpp"
#include "peap/tokenizer.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>
#include <sstream>

using namespace peap;
using testutil::slurp;
using testutil::token_strings;
using testutil::trim;

namespace {

Schema numbered_schema(int k) {
  Schema s;
  for (int i = 0; i < k; ++i) s.spans.push_back({"s" + std::to_string(i), "span " + std::to_string(i)});
  return s;
}

bool has_reason(const Verdict& v, const std::string& needle) {
  for (const auto& r : v.reasons)
    if (r.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(Schema, RejectsDuplicateTitles) {
  Schema s{{{"a", ""}, {"a", ""}}};
  EXPECT_THROW(s.validate(), DataError);
  EXPECT_THROW(Schema{}.validate(), DataError);
}

TEST(Schema, JsonKeepsOrder) {
  const auto j = nlohmann::ordered_json::parse(R"({"zeta": "z", "alpha": "a", "mid": "m"})");
  const auto s = Schema::from_json(j);
  EXPECT_EQ(s.titles(), (std::vector<std::string>{"zeta", "alpha", "mid"}));
  EXPECT_EQ(s.to_json().dump(), j.dump());
}

TEST(Validate, OneTokenPerSpanIsValid) {
  const auto v = validate_application(numbered_schema(5), 5, SpanMap::one_token_per_span(5));
  EXPECT_TRUE(v.valid) << v.summary();
}

TEST(Validate, StructuralFailuresAreNamed) {
  const auto schema = numbered_schema(4);
  auto v = validate_application(schema, 4, SpanMap::from_lengths({1, 1, 2}), {.strict_final = false});
  EXPECT_TRUE(has_reason(v, "missing span")) << v.summary();
  v = validate_application(schema, 5, SpanMap{"", {{0, 1}, {2, 3}, {3, 4}, {4, 5}}});
  EXPECT_TRUE(has_reason(v, "not assigned")) << v.summary();
  v = validate_application(schema, 5, SpanMap{"", {{0, 2}, {1, 3}, {3, 4}, {4, 5}}});
  EXPECT_TRUE(has_reason(v, "more than one span")) << v.summary();
  v = validate_application(schema, 5, SpanMap::from_lengths({1, 1, 1, 2}));
  EXPECT_TRUE(has_reason(v, "final token")) << v.summary();
  EXPECT_TRUE(validate_application(schema, 5, SpanMap::from_lengths({1, 1, 1, 2}), {.strict_final = false}).valid);
  v = validate_application(schema, 4, SpanMap::from_lengths({3, 0, 0, 1}));
  EXPECT_TRUE(v.valid) << v.summary();
  v = validate_application(schema, 4, SpanMap::from_lengths({3, 0, 0, 1}), {.allow_empty = false});
  EXPECT_TRUE(has_reason(v, "is empty")) << v.summary();
}

TEST(Resolve, TranscriptApplicationIsValid) {
  const auto dir = testutil::fixtures() / "transcripts";
  const auto schema = Schema::from_json(nlohmann::ordered_json::parse(slurp(dir / "application_schema.json")));
  const auto seq = Tokenizer::gpt2().encode(trim(slurp(dir / "application_prompt.txt")));
  const auto text = slurp(dir / "application_response.txt");
  const auto app = Application::from_json(nlohmann::ordered_json::parse(text.substr(text.find('{'))));
  const auto res = resolve_application(schema, token_strings(seq), app);
  ASSERT_TRUE(res.verdict.valid) << res.verdict.summary();
  EXPECT_EQ(res.map->ranges, (SpanMap::from_lengths({1, 3, 5, 1, 1, 1, 2, 1}).ranges));
}

TEST(Resolve, NamesEachViolation) {
  const auto schema = numbered_schema(3);
  const std::vector<std::string> toks{"A", " b", " c", " d"};
  auto app = Application::from_json(nlohmann::ordered_json::parse(R"({"s0": ["A", " b"], "s2": [" d"]})"));
  auto r = resolve_application(schema, toks, app);
  EXPECT_TRUE(has_reason(r.verdict, "missing span 's1'")) << r.verdict.summary();
  EXPECT_FALSE(r.map.has_value());

  app = Application::from_json(nlohmann::ordered_json::parse(R"({"s0": ["A"], "s1": [" b", " c"], "s2": [" d"], "s9": []})"));
  r = resolve_application(schema, toks, app);
  EXPECT_TRUE(has_reason(r.verdict, "extra span 's9'")) << r.verdict.summary();

  app = Application::from_json(nlohmann::ordered_json::parse(R"({"s1": [" b", " c"], "s0": ["A"], "s2": [" d"]})"));
  r = resolve_application(schema, toks, app);
  EXPECT_TRUE(has_reason(r.verdict, "schema order")) << r.verdict.summary();

  app = Application::from_json(nlohmann::ordered_json::parse(R"({"s0": ["A"], "s1": [" c"], "s2": [" d"]})"));
  r = resolve_application(schema, toks, app);
  EXPECT_TRUE(has_reason(r.verdict, "skipped")) << r.verdict.summary();

  app = Application::from_json(nlohmann::ordered_json::parse(R"({"s0": ["A", " b"], "s1": [" b", " c"], "s2": [" d"]})"));
  r = resolve_application(schema, toks, app);
  EXPECT_TRUE(has_reason(r.verdict, "already assigned")) << r.verdict.summary();

  app = Application::from_json(nlohmann::ordered_json::parse(R"({"s0": ["A"], "s1": [" b"], "s2": [" c", " d"]})"));
  r = resolve_application(schema, toks, app);
  EXPECT_TRUE(has_reason(r.verdict, "final token")) << r.verdict.summary();

  app = Application::from_json(nlohmann::ordered_json::parse(R"({"s0": ["A"], "s1": ["b", "c"], "s2": [" d"]})"));
  r = resolve_application(schema, toks, app);
  EXPECT_TRUE(has_reason(r.verdict, "do not appear")) << r.verdict.summary();
}

TEST(MapEdge, SingletonSpansGiveIdentity) {
  const auto cfg = testutil::toy_config(2, 2, 4);
  Graph concrete(cfg, 4), abstract(cfg, 4);
  const auto map = SpanMap::one_token_per_span(4);
  for (EdgeId e = 0; e < abstract.num_edges(); ++e) EXPECT_EQ(map_edge(abstract, e, map, concrete), std::vector<EdgeId>{e});
}

TEST(MapEdge, TwoTokenSpan) {
  const auto cfg = testutil::toy_config(1, 1, 4);
  Graph concrete(cfg, 3), abstract(cfg, 2);
  const auto map = SpanMap::from_lengths({2, 1});
  const EdgeId within = abstract.edge_id({NodeRef::embed(0), NodeRef::mlp(0, 0), Channel::Direct});
  const auto w = map_edge(abstract, within, map, concrete);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_EQ(concrete.edge(w[0]), (EdgeRef{NodeRef::embed(0), NodeRef::mlp(0, 0), Channel::Direct}));
  EXPECT_EQ(concrete.edge(w[1]), (EdgeRef{NodeRef::embed(1), NodeRef::mlp(0, 1), Channel::Direct}));
  const EdgeId self = abstract.attention_edge(0, 0, 0, 0, Channel::K);
  const auto a = map_edge(abstract, self, map, concrete);
  std::set<std::pair<int, int>> pairs;
  for (auto id : a) {
    const auto e = concrete.edge(id);
    EXPECT_EQ(e.channel, Channel::K);
    pairs.emplace(e.parent.position, e.child.position);
  }
  EXPECT_EQ(pairs, (std::set<std::pair<int, int>>{{0, 0}, {0, 1}, {1, 1}}));
  EXPECT_EQ(mapped_count(abstract, self, map), 3);
}

TEST(MapEdge, PartitionProperty) {
  std::mt19937 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto cfg = testutil::toy_config(1 + trial % 2, 1 + trial % 3, 6);
    const int k = 1 + static_cast<int>(rng() % 4);
    std::vector<int> lengths(k);
    for (auto& l : lengths) l = static_cast<int>(rng() % 3);
    lengths.back() = 1;
    const auto map = SpanMap::from_lengths(lengths);
    if (map.length() == 0) continue;
    Graph concrete(cfg, map.length()), abstract(cfg, k);
    std::vector<int> hits(static_cast<std::size_t>(concrete.num_edges()), 0);
    for (EdgeId e = 0; e < abstract.num_edges(); ++e) {
      const auto images = map_edge(abstract, e, map, concrete);
      EXPECT_EQ(static_cast<std::int64_t>(images.size()), mapped_count(abstract, e, map));
      const auto ae = abstract.edge(e);
      for (auto c : images) {
        ++hits[static_cast<std::size_t>(c)];
        const auto ce = concrete.edge(c);
        EXPECT_EQ(ce.channel, ae.channel);
        EXPECT_EQ(ce.child.kind, ae.child.kind);
        EXPECT_EQ(ce.parent.layer, ae.parent.layer);
        EXPECT_EQ(ce.parent.head, ae.parent.head);
      }
    }
    for (int h : hits) ASSERT_EQ(h, 1);
  }
}

TEST(AggregateAbstract, SingletonSpansReproduceTheTable) {
  const auto cfg = testutil::toy_config(1, 2, 4);
  Graph g(cfg, 3);
  AttributionTable t;
  std::mt19937 rng(1);
  std::normal_distribution<double> nd;
  for (EdgeId e = 0; e < g.num_edges(); ++e) t.scores.push_back(nd(rng));
  const auto out = aggregate_abstract({t}, {g}, {SpanMap::one_token_per_span(3)}, Graph(cfg, 3));
  EXPECT_EQ(out.scores, t.scores);
}

TEST(AggregateAbstract, MatchesBruteForceAcrossLengths) {
  const auto cfg = testutil::toy_config(1, 1, 4);
  const Graph abstract(cfg, 1);
  std::vector<Graph> graphs{Graph(cfg, 1), Graph(cfg, 2)};
  const std::vector<SpanMap> maps{SpanMap::from_lengths({1}), SpanMap::from_lengths({2})};
  std::vector<AttributionTable> tables(2);
  std::mt19937 rng(5);
  std::normal_distribution<double> nd;
  for (int x = 0; x < 2; ++x)
    for (EdgeId e = 0; e < graphs[x].num_edges(); ++e) tables[x].scores.push_back(nd(rng));
  const auto out = aggregate_abstract(tables, graphs, maps, abstract);
  for (EdgeId a = 0; a < abstract.num_edges(); ++a) {
    double expect = 0;
    for (int x = 0; x < 2; ++x)
      for (auto c : map_edge(abstract, a, maps[x], graphs[x])) expect += tables[x][c];
    EXPECT_NEAR(out[a], expect / 2, 1e-12);
  }
  EXPECT_THROW(aggregate_abstract(tables, graphs, {maps[0]}, abstract), DataError);
}

TEST(AggregateAbstract, OneTokenPerSpanEqualsPositionalAggregate) {
  const auto cfg = testutil::toy_config(2, 2, 4);
  Graph g(cfg, 4);
  std::vector<AttributionTable> tables(3);
  std::mt19937 rng(9);
  std::normal_distribution<double> nd;
  for (auto& t : tables)
    for (EdgeId e = 0; e < g.num_edges(); ++e) t.scores.push_back(nd(rng));
  const auto a = aggregate_abstract(tables, {g, g, g}, std::vector<SpanMap>(3, SpanMap::one_token_per_span(4)), g);
  const auto b = aggregate(tables, g, AggregationMode::Positional);
  for (EdgeId e = 0; e < g.num_edges(); ++e) EXPECT_NEAR(a[e], b[e], 1e-6 * std::max(1.0, std::abs(b[e])));
}

TEST(Ground, FullAndEmptyCircuits) {
  const auto cfg = testutil::toy_config(1, 2, 4);
  Graph abstract(cfg, 3), concrete(cfg, 6);
  const auto map = SpanMap::from_lengths({2, 1, 3});
  std::vector<EdgeId> all(static_cast<std::size_t>(abstract.num_edges()));
  std::iota(all.begin(), all.end(), EdgeId{0});
  const auto full = ground_circuit(all, abstract, map, concrete);
  EXPECT_EQ(full.size, concrete.num_edges());
  const auto none = ground_circuit({}, abstract, map, concrete);
  EXPECT_EQ(none.size, 0);
}

TEST(Ground, SizeMatchesBruteForceExpansion) {
  const auto cfg = testutil::toy_config(1, 2, 4);
  Graph abstract(cfg, 3), concrete(cfg, 6);
  const auto map = SpanMap::from_lengths({2, 1, 3});
  std::mt19937 rng(3);
  std::vector<EdgeId> circuit;
  std::set<EdgeId> chosen;
  while (chosen.size() < 10) chosen.insert(static_cast<EdgeId>(rng() % abstract.num_edges()));
  circuit.assign(chosen.begin(), chosen.end());
  const auto g = ground_circuit(circuit, abstract, map, concrete);
  // Brute force: a concrete edge is in C_x iff its span-level image is in C_S.
  const auto pm = map.position_map();
  std::int64_t expect = 0, additive = 0;
  for (EdgeId c = 0; c < concrete.num_edges(); ++c) {
    auto e = concrete.edge(c);
    e.parent.position = pm[e.parent.position];
    e.child.position = pm[e.child.position];
    const bool in = chosen.count(abstract.edge_id(e)) > 0;
    expect += in;
    EXPECT_EQ(g.contains(c), in);
  }
  for (auto a : circuit) additive += mapped_count(abstract, a, map);
  EXPECT_EQ(g.size, expect);
  EXPECT_EQ(g.size, additive);
}
