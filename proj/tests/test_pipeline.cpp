#include "peap/model.hpp"
#include "peap/pipeline.hpp"
#include "test_util.hpp"

#include <fmt/format.h>
#include <gtest/gtest.h>

#include <cmath>
#include <map>

using namespace peap;
using nlohmann::ordered_json;

namespace {

// Length-6 prompts over a toy vocabulary, split 2/3/1 by a three-span schema.
TaskDataset toy_dataset(int count, int references, unsigned seed, bool ragged = false) {
  TaskDataset ds;
  ds.task = TaskId::parse("ioi-abba");
  ds.schema.spans = {{"head", ""}, {"body", ""}, {"end", ""}};
  auto make = [&](int x, const char* role) {
    TaskExample ex;
    ex.id = fmt::format("{}{}", role, x);
    const int body = ragged ? 2 + x % 3 : 3;
    const int n = 3 + body;
    ex.tokens = testutil::random_tokens(n, 64, seed + static_cast<unsigned>(x));
    ex.counter_tokens = testutil::random_tokens(n, 64, seed + 1000 + static_cast<unsigned>(x));
    ex.metric = {MetricKind::LogitDifference, {x % 64}, {(x + 7) % 64}};
    ex.reference = SpanMap::from_lengths({2, body, 1});
    return ex;
  };
  for (int x = 0; x < count; ++x) ds.examples.push_back(make(x, "x"));
  for (int r = 0; r < references; ++r) ds.references.push_back(make(r + 500, "r"));
  return ds;
}

struct Toy {
  ModelWeights<double> w = random_weights(testutil::toy_config(2, 2, 8), 11).cast<double>();
};

// Oracle: one attribution table per example on its own positional graph.
std::vector<AttributionTable> per_example(const ModelWeights<double>& w, const TaskDataset& ds,
                                          bool attention = true) {
  std::vector<AttributionTable> out;
  for (const auto& ex : ds.examples) {
    const auto clean = forward(w, ex.tokens);
    const auto counter = forward(w, ex.counter_tokens);
    const auto grads = backward(w, clean, ex.metric);
    const Graph g(w.config, static_cast<int>(ex.tokens.size()), attention);
    out.push_back(attention ? attribute(w, clean, counter, grads, g) : eap_within_position(clean, counter, grads, g));
  }
  return out;
}

void expect_tables_near(const AttributionTable& a, const AttributionTable& b, double rel = 1e-9) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t e = 0; e < a.size(); ++e)
    ASSERT_NEAR(a.scores[e], b.scores[e], rel * std::max(1.0, std::abs(b.scores[e]))) << e;
}

}  // namespace

TEST(Pipeline, ModeNames) {
  for (auto m : {PipelineMode::Positional, PipelineMode::SchemaHuman, PipelineMode::SchemaLlm,
                 PipelineMode::SchemaLlmMask, PipelineMode::NonPositional})
    EXPECT_EQ(pipeline_mode_from_string(to_string(m)), m);
  EXPECT_EQ(file_tag(PipelineMode::SchemaLlmMask), "schema-llm-mask");
  EXPECT_THROW(pipeline_mode_from_string("schema"), ConfigError);
  EXPECT_TRUE(needs_endpoint(PipelineMode::SchemaLlm));
  EXPECT_FALSE(needs_endpoint(PipelineMode::SchemaHuman));
}

TEST(Pipeline, PositionalIsTheMeanOfExampleTables) {
  Toy t;
  const auto ds = toy_dataset(5, 0, 40);
  const auto abs = positional_abstraction(ds, t.w.config);
  const SourceProvider<double> src(t.w, ds, abs, AblationMode::Counterfactual);
  const auto table = attribute_abstraction(t.w, ds, abs, src);
  const auto oracle = per_example(t.w, ds);
  AttributionTable mean = oracle.front();
  for (auto& s : mean.scores) s = 0;
  for (const auto& o : oracle)
    for (std::size_t e = 0; e < o.size(); ++e) mean.scores[e] += o.scores[e] / 5.0;
  expect_tables_near(table, mean);
  EXPECT_EQ(table.examples, 5);
  EXPECT_EQ(table.mode, "positional");
  EXPECT_EQ(table.dataset_hash, ds.hash());
}

TEST(Pipeline, PositionalNeedsEqualLengths) {
  Toy t;
  EXPECT_THROW(positional_abstraction(toy_dataset(4, 0, 1, true), t.w.config), ConfigError);
}

TEST(Pipeline, ResultDoesNotDependOnJobs) {
  Toy t;
  const auto ds = toy_dataset(7, 0, 50, true);
  const auto abs = human_abstraction(ds, t.w.config);
  const SourceProvider<double> src(t.w, ds, abs, AblationMode::Counterfactual);
  const auto a = attribute_abstraction(t.w, ds, abs, src, 1);
  const auto b = attribute_abstraction(t.w, ds, abs, src, 3);
  EXPECT_EQ(a.scores, b.scores);
}

TEST(Pipeline, OneTokenSchemaEqualsPositional) {
  Toy t;
  auto ds = toy_dataset(4, 0, 60);
  ds.schema.spans.clear();
  for (int k = 0; k < 6; ++k) ds.schema.spans.push_back({fmt::format("s{}", k), ""});
  for (auto& ex : ds.examples) ex.reference = SpanMap::one_token_per_span(6);
  const auto pos = positional_abstraction(ds, t.w.config);
  const auto sch = human_abstraction(ds, t.w.config);
  ASSERT_EQ(pos.abstract.num_edges(), sch.abstract.num_edges());
  const SourceProvider<double> sp(t.w, ds, pos, AblationMode::Counterfactual);
  const SourceProvider<double> ss(t.w, ds, sch, AblationMode::Counterfactual);
  const auto a = attribute_abstraction(t.w, ds, pos, sp);
  const auto b = attribute_abstraction(t.w, ds, sch, ss);
  expect_tables_near(a, b, 1e-12);
  const auto ea = make_evaluator(t.w, ds, pos, sp);
  const auto eb = make_evaluator(t.w, ds, sch, ss);
  const auto grid = geometric_grid(1, pos.abstract.num_edges(), 6);
  const auto ca = faithfulness_curve(ea, a, pos.abstract, grid);
  const auto cb = faithfulness_curve(eb, b, sch.abstract, grid);
  ASSERT_EQ(ca.points.size(), cb.points.size());
  for (std::size_t k = 0; k < ca.points.size(); ++k) {
    EXPECT_EQ(ca.points[k].mean_size, cb.points[k].mean_size);
    EXPECT_NEAR(ca.points[k].soft, cb.points[k].soft, 1e-12);
    EXPECT_EQ(ca.points[k].hard, cb.points[k].hard);
  }
}

TEST(Pipeline, SchemaTableSumsMappedEdges) {
  Toy t;
  const auto ds = toy_dataset(4, 0, 70, true);
  const auto abs = human_abstraction(ds, t.w.config);
  const SourceProvider<double> src(t.w, ds, abs, AblationMode::Counterfactual);
  const auto table = attribute_abstraction(t.w, ds, abs, src);
  const auto tables = per_example(t.w, ds);
  std::vector<Graph> graphs;
  for (const auto& ex : ds.examples) graphs.emplace_back(t.w.config, static_cast<int>(ex.tokens.size()));
  // brute force through the edge map
  for (EdgeId e = 0; e < abs.abstract.num_edges(); e += 37) {
    double want = 0;
    for (std::size_t x = 0; x < tables.size(); ++x)
      for (EdgeId c : map_edge(abs.abstract, e, abs.maps[x], graphs[x])) want += tables[x][c] / 4.0;
    ASSERT_NEAR(table[e], want, 1e-9 * std::max(1.0, std::abs(want))) << e;
  }
}

TEST(Pipeline, NonPositionalSumsThenTakesMagnitude) {
  Toy t;
  const auto ds = toy_dataset(3, 0, 80, true);
  const auto abs = nonpositional_abstraction(ds, t.w.config);
  const SourceProvider<double> src(t.w, ds, abs, AblationMode::Counterfactual);
  const auto table = attribute_abstraction(t.w, ds, abs, src);
  EXPECT_EQ(abs.abstract.length(), 1);
  const auto tables = per_example(t.w, ds);
  std::vector<double> want(table.size(), 0.0);
  for (std::size_t x = 0; x < tables.size(); ++x) {
    const Graph g(t.w.config, static_cast<int>(ds.examples[x].tokens.size()));
    std::vector<double> sum(table.size(), 0.0);
    for_each_mapped_edge(g, abs.abstract, collapse_position_map(g.length()),
                         [&](EdgeId s, EdgeId d) { sum[static_cast<std::size_t>(d)] += tables[x][s]; });
    for (std::size_t e = 0; e < sum.size(); ++e) want[e] += std::abs(sum[e]) / 3.0;
  }
  for (std::size_t e = 0; e < want.size(); ++e) ASSERT_NEAR(table.scores[e], want[e], 1e-9 * std::max(1.0, want[e]));
}

TEST(Pipeline, NonPositionalOnLengthOneEqualsPositional) {
  Toy t;
  TaskDataset ds = toy_dataset(1, 0, 90);
  for (auto& ex : ds.examples) {
    ex.tokens.resize(1);
    ex.counter_tokens.resize(1);
  }
  const auto pos = positional_abstraction(ds, t.w.config);
  const auto np = nonpositional_abstraction(ds, t.w.config);
  const SourceProvider<double> sp(t.w, ds, pos, AblationMode::Counterfactual);
  const SourceProvider<double> sn(t.w, ds, np, AblationMode::Counterfactual);
  const auto a = attribute_abstraction(t.w, ds, pos, sp);
  const auto b = attribute_abstraction(t.w, ds, np, sn);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t e = 0; e < a.size(); ++e) ASSERT_NEAR(b.scores[e], std::abs(a.scores[e]), 1e-12);
  const auto grid = geometric_grid(1, pos.abstract.num_edges(), 5);
  const auto ca = faithfulness_curve(make_evaluator(t.w, ds, pos, sp), a, pos.abstract, grid);
  const auto cb = faithfulness_curve(make_evaluator(t.w, ds, np, sn), b, np.abstract, grid);
  ASSERT_EQ(ca.points.size(), cb.points.size());
  for (std::size_t k = 0; k < ca.points.size(); ++k) {
    EXPECT_EQ(ca.points[k].mean_size, cb.points[k].mean_size);
    EXPECT_NEAR(ca.points[k].soft, cb.points[k].soft, 1e-12);
  }
}

TEST(Pipeline, MeanSourcesAlignBySchema) {
  Toy t;
  auto ds = toy_dataset(3, 4, 100, true);
  const auto abs = human_abstraction(ds, t.w.config);
  ASSERT_EQ(abs.references.size(), 4u);
  const SourceProvider<double> src(t.w, ds, abs, AblationMode::Mean);
  std::vector<ForwardTrace<double>> traces;
  std::vector<SpanMap> maps;
  for (const auto& r : ds.references) {
    traces.push_back(forward(t.w, r.tokens));
    maps.push_back(r.reference);
  }
  const MeanReference<double> ref(traces, maps);
  for (int k = 0; k < abs.size(); ++k) {
    const auto a = src(k), b = ref.source_for(abs.maps[static_cast<std::size_t>(k)]);
    ASSERT_EQ(a.length(), static_cast<int>(ds.examples[static_cast<std::size_t>(k)].tokens.size()));
    EXPECT_TRUE(a.embed.isApprox(b.embed));
    EXPECT_TRUE(a.mlp_out[1].isApprox(b.mlp_out[1]));
  }
  EXPECT_EQ(src.fallbacks(), 0);
  ds.references.clear();
  const auto bare = human_abstraction(toy_dataset(3, 0, 100), t.w.config);
  EXPECT_THROW(SourceProvider<double>(t.w, ds, bare, AblationMode::Mean), DataError);
}

TEST(Pipeline, DiagnosticsMatchDirectAggregation) {
  Toy t;
  const auto ds = toy_dataset(9, 0, 110, true);
  DiagnosticsOptions opt;
  opt.k_percent = {5, 10, 20};
  const auto bundle = diagnose_dataset(t.w, ds, AblationMode::Counterfactual, opt, 2);
  EXPECT_EQ(bundle.examples, 9);
  EXPECT_EQ(bundle.subset_size, 3);
  const auto tables = per_example(t.w, ds, false);
  const Graph target(t.w.config, 1, false);
  auto collapse = [&](AggregationMode mode, int lo, int hi) {
    Aggregator agg(target, mode);
    for (int x = lo; x < hi; ++x) {
      const Graph g(t.w.config, static_cast<int>(ds.examples[static_cast<std::size_t>(x)].tokens.size()), false);
      agg.add(tables[static_cast<std::size_t>(x)], g, collapse_position_map(g.length()));
    }
    return agg.result();
  };
  const auto a = collapse(AggregationMode::AbsThenSum, 0, 9);
  auto want = ranking_diagnostics(a, collapse(AggregationMode::SumThenAbs, 0, 9), opt.k_percent);
  add_controls(want, {collapse(AggregationMode::AbsThenSum, 0, 3), collapse(AggregationMode::AbsThenSum, 3, 6),
                      collapse(AggregationMode::AbsThenSum, 6, 9)});
  ASSERT_EQ(bundle.cancellation.levels.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(bundle.cancellation.levels[k].diff, want.levels[k].diff, 1e-12);
    EXPECT_NEAR(bundle.cancellation.levels[k].rho, want.levels[k].rho, 1e-12);
    EXPECT_NEAR(bundle.cancellation.levels[k].diff_control, want.levels[k].diff_control, 1e-12);
  }
  const auto over = ranking_diagnostics(a, collapse(AggregationMode::MaxAbs, 0, 9), opt.k_percent);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(bundle.overestimation.levels[k].diff, over.levels[k].diff, 1e-12);
  opt.subsets = 10;
  EXPECT_THROW(diagnose_dataset(t.w, ds, AblationMode::Counterfactual, opt), DataError);
}

namespace {

// Labels requests with the dataset's own rule-based maps and offers the human schema.
struct ReferenceLabeller {
  Schema schema;
  std::map<std::vector<std::string>, SpanMap> maps;

  ReferenceLabeller(const TaskDataset& ds, const Tokenizer& tok) : schema(ds.schema) {
    for (const auto& ex : ds.examples) maps[token_strings(tok, ex.tokens)] = ex.reference;
    for (const auto& r : ds.references) maps[token_strings(tok, r.tokens)] = r.reference;
  }

  std::optional<std::string> operator()(const std::vector<ChatMessage>& m) const {
    if (m.front().content != kApplySystemPrompt) return "```json\n" + schema.to_json().dump() + "\n```";
    const auto& p = m.at(1).content;
    const auto at = p.find("Tokens:\n");
    const auto end = p.find('\n', at + 8);
    const auto toks = ordered_json::parse(p.substr(at + 8, end - at - 8)).get<std::vector<std::string>>();
    return Application::from_span_map(schema, toks, maps.at(toks)).to_json().dump();
  }
};

}  // namespace

TEST(Pipeline, LlmSchemaWithFaithfulLabellerEqualsHuman) {
  const auto& tok = Tokenizer::gpt2();
  const auto w = random_weights(testutil::toy_config(1, 2, 8, tok.vocab_size()), 5).cast<double>();
  const auto ds = gen_ioi(16, "abba", 3, tok);
  for (bool masks : {false, true}) {
    MockChatEndpoint mock;
    ReferenceLabeller labeller(ds, tok);
    mock.set_responder([&](const auto& m) { return labeller(m); });
    LlmSchemaOptions opt;
    opt.masks = masks;
    opt.seed = 9;
    const auto llm = llm_abstraction(ds, w, tok, mock, opt);
    EXPECT_EQ(llm.mode, masks ? PipelineMode::SchemaLlmMask : PipelineMode::SchemaLlm);
    EXPECT_EQ(llm.schema.titles(), ds.schema.titles());
    ASSERT_EQ(llm.size(), ds.size());
    ASSERT_TRUE(llm.generation && llm.application);
    EXPECT_TRUE(llm.application->accepted);
    // 3 candidates + unification + 15 validations + 16 applications
    EXPECT_EQ(mock.calls(), 35);
    if (masks) EXPECT_NE(mock.requests().front()[1].content.find("Mask:"), std::string::npos);
    const auto human = human_abstraction(ds, w.config);
    const SourceProvider<double> sl(w, ds, llm, AblationMode::Counterfactual);
    const SourceProvider<double> sh(w, ds, human, AblationMode::Counterfactual);
    EXPECT_EQ(attribute_abstraction(w, ds, llm, sl).scores, attribute_abstraction(w, ds, human, sh).scores);
  }
}

TEST(Pipeline, TooFewExamplesForGeneration) {
  const auto& tok = Tokenizer::gpt2();
  const auto w = random_weights(testutil::toy_config(1, 2, 8, tok.vocab_size()), 5);
  const auto ds = gen_ioi(10, "abba", 3, tok);
  MockChatEndpoint mock;
  EXPECT_THROW(llm_abstraction(ds, w, tok, mock, {}), DataError);
  EXPECT_EQ(mock.calls(), 0);
}
