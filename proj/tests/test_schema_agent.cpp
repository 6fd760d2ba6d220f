#include "peap/schema_agent.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <set>

using namespace peap;
using nlohmann::ordered_json;
using testutil::slurp;
using testutil::token_strings;
using testutil::trim;

namespace {

const std::filesystem::path transcripts() { return testutil::fixtures() / "transcripts"; }

std::vector<std::string> tokens_of(const std::string& text) { return token_strings(Tokenizer::gpt2().encode(text)); }

// Pulls the token list back out of an application request.
std::vector<std::string> request_tokens(const std::vector<ChatMessage>& messages) {
  const auto& p = messages.at(1).content;
  const auto at = p.find("Tokens:\n");
  const auto end = p.find('\n', at + 8);
  return ordered_json::parse(p.substr(at + 8, end - at - 8)).get<std::vector<std::string>>();
}

bool is_apply(const std::vector<ChatMessage>& m) { return m.front().content == kApplySystemPrompt; }

// IOI prompts in the shapes shown to the schema writer: "Then, A and B <event><punct>
// [transition] A <action> to".
std::vector<std::vector<std::string>> ioi_sample() {
  const std::vector<std::string> names{"Michael", "Matthew", "Jennifer", "John", "William", "Jessica",
                                       "Elizabeth", "Kimberly", "Michelle", "Sarah", "David", "Laura",
                                       "James", "Emily", "Robert", "Anna"};
  const std::vector<std::string> shapes{"Then, {A} and {B} had a long argument, and afterwards {A} said to",
                                        "Then, {A} and {B} went to the office. {A} gave a drink to",
                                        "Then, {A} and {B} had a long argument. Afterwards {A} said to"};
  std::vector<std::vector<std::string>> out;
  for (int x = 0; x < 15; ++x) {
    std::string s = shapes[static_cast<std::size_t>(x % 3)];
    const auto& a = names[static_cast<std::size_t>(x)];
    const auto& b = names[static_cast<std::size_t>(x + 1)];
    for (std::size_t p; (p = s.find("{A}")) != std::string::npos;) s.replace(p, 3, a);
    s.replace(s.find("{B}"), 3, b);
    out.push_back(tokens_of(s));
  }
  return out;
}

// Hand labelling of the ten-span schema on ioi_sample() prompts.
std::vector<int> ioi_lengths(const std::vector<std::string>& t) {
  const int n = static_cast<int>(t.size());
  int punct = 5;
  while (t[static_cast<std::size_t>(punct)] != "," && t[static_cast<std::size_t>(punct)] != ".") ++punct;
  int active = punct + 1;
  while (t[static_cast<std::size_t>(active)] != t[2]) ++active;
  return {2, 1, 1, 1, punct - 5, 1, active - punct - 1, 1, n - 1 - active - 1, 1};
}

std::string answer_for(const Schema& schema, const std::vector<std::string>& tokens, const std::vector<int>& lengths) {
  return "Here you go:\n```json\n" +
         Application::from_span_map(schema, tokens, SpanMap::from_lengths(lengths)).to_json().dump(2) + "\n```\n";
}

Schema transcript_schema() {
  return Schema::from_json(extract_json(slurp(transcripts() / "generation_response.txt")));
}

}  // namespace

TEST(ExtractJson, PrefersFencedBlock) {
  const auto j = extract_json("Sure.\n```json\n{\"a\": 1}\n```\nor maybe {\"b\": 2}");
  EXPECT_EQ(j.dump(), R"({"a":1})");
}

TEST(ExtractJson, FallsBackToBalancedBraces) {
  const auto j = extract_json("x {\"a\": \"}{\", \"b\": {\"c\": [1]}} trailing }");
  EXPECT_EQ(j.dump(), R"({"a":"}{","b":{"c":[1]}})");
  // keys keep the writer's order
  EXPECT_EQ(extract_json("{\"z\": 1, \"a\": 2}").begin().key(), "z");
  EXPECT_THROW(extract_json("no json here"), DataError);
  EXPECT_THROW(extract_json("{\"unterminated\": "), DataError);
  // a broken fenced block does not hide a valid object later on
  EXPECT_EQ(extract_json("```json\n{oops\n```\n{\"k\": 0}").dump(), R"({"k":0})");
}

TEST(ExtractJson, ReadsTranscriptResponses) {
  const auto s = transcript_schema();
  ASSERT_EQ(s.size(), 10);
  EXPECT_EQ(s.spans.front().title, "Initial Time Marker");
  EXPECT_EQ(s.spans.back().title, "Final Preposition");
}

TEST(SchemaAgent, PromptsCarryTokensVerbatim) {
  const std::vector<std::string> toks{"While", " Jason", " \"quoted\"", "\\", " to"};
  const Schema s = transcript_schema();
  const auto p = application_prompt(s, toks);
  EXPECT_EQ(request_tokens({{"system", kApplySystemPrompt}, {"user", p}}), toks);
  std::vector<std::vector<bool>> masks{{true, false, false, true, false}};
  const auto g = generation_prompt({toks}, &masks);
  EXPECT_NE(g.find(render_tokens(toks)), std::string::npos);
  EXPECT_NE(g.find(R"([["While",1],[" Jason",0])"), std::string::npos);
  EXPECT_EQ(generation_prompt({toks}, nullptr).find("Mask:"), std::string::npos);
}

TEST(SchemaAgent, TranscriptGenerationYieldsTenSpanSchema) {
  MockChatEndpoint mock;
  const auto reply = slurp(transcripts() / "generation_response.txt");
  mock.add_match(kGenerateSystemPrompt, reply);
  mock.add_match(kUnifySystemPrompt, reply);
  const auto schema = transcript_schema();
  mock.set_responder([&](const std::vector<ChatMessage>& m) -> std::optional<std::string> {
    if (!is_apply(m)) return std::nullopt;
    const auto t = request_tokens(m);
    return answer_for(schema, t, ioi_lengths(t));
  });
  const auto sample = ioi_sample();
  const auto res = generate_schema(sample, nullptr, mock);
  EXPECT_EQ(res.schema.titles(), schema.titles());
  EXPECT_TRUE(res.report.accepted);
  EXPECT_EQ(res.report.runs, 1);
  EXPECT_EQ(res.report.candidates.size(), 3u);
  EXPECT_EQ(res.report.valid, 15);
  for (std::size_t x = 0; x < sample.size(); ++x) {
    ASSERT_TRUE(res.report.outcomes[x].map) << x;
    EXPECT_EQ(res.report.outcomes[x].map->ranges, SpanMap::from_lengths(ioi_lengths(sample[x])).ranges);
  }
  // 3 candidate calls + 1 unification + 15 applications
  EXPECT_EQ(mock.calls(), 19);
  // the three groups are disjoint
  const auto reqs = mock.requests();
  for (int g = 0; g < 3; ++g)
    for (int x = 0; x < 15; ++x) {
      const bool inside = reqs[static_cast<std::size_t>(g)][1].content.find(render_tokens(sample[static_cast<std::size_t>(x)])) !=
                          std::string::npos;
      EXPECT_EQ(inside, x / 5 == g) << g << " " << x;
    }
}

TEST(SchemaAgent, MasksAppearInGenerationPrompts) {
  MockChatEndpoint mock;
  const auto reply = slurp(transcripts() / "generation_response.txt");
  mock.add_match(kGenerateSystemPrompt, reply);
  mock.add_match(kUnifySystemPrompt, reply);
  const auto schema = transcript_schema();
  mock.set_responder([&](const std::vector<ChatMessage>& m) -> std::optional<std::string> {
    const auto t = request_tokens(m);
    return answer_for(schema, t, ioi_lengths(t));
  });
  const auto sample = ioi_sample();
  std::vector<SaliencyMask> masks;
  for (const auto& t : sample) {
    std::vector<double> s(t.size(), 0.0);
    s[2] = 5.0;
    masks.push_back(SaliencyMask::from_scores(s));
  }
  generate_schema(sample, &masks, mock);
  const auto first = mock.requests().front()[1].content;
  EXPECT_NE(first.find("Mask: "), std::string::npos);
  EXPECT_NE(first.find("[\" Michael\",1]"), std::string::npos);
}

TEST(SchemaAgent, MalformedJsonIsReportedWithAttempts) {
  MockChatEndpoint mock;
  mock.add_match(kGenerateSystemPrompt, "I think the spans are: first, middle and end.");
  try {
    generate_schema(ioi_sample(), nullptr, mock);
    FAIL() << "expected an error";
  } catch (const EndpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("attempt 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("attempt 3"), std::string::npos) << msg;
  }
  EXPECT_EQ(mock.calls(), 3);
  // the retries tell the writer what went wrong
  EXPECT_EQ(mock.requests().back().size(), 6u);
}

namespace {

// Application of run `bad_run` fails on `bad` examples (missing a span every time).
struct ScriptedRuns {
  Schema schema = transcript_schema();
  std::string reply = slurp(transcripts() / "generation_response.txt");
  std::atomic<int> run{0};
  int bad_run = 1;
  int bad = 0;

  std::optional<std::string> operator()(const std::vector<ChatMessage>& m) {
    if (m.front().content == kGenerateSystemPrompt) return reply;
    if (m.front().content == kUnifySystemPrompt) {
      ++run;
      return reply;
    }
    const auto t = request_tokens(m);
    const auto sample = ioi_sample();
    const auto x = std::find(sample.begin(), sample.end(), t) - sample.begin();
    if (run == bad_run && x < bad) return R"({"Initial Time Marker": ["Then", ","]})";
    return answer_for(schema, t, ioi_lengths(t));
  }
};

}  // namespace

TEST(SchemaAgent, ElevenOfFifteenTriggersRegeneration) {
  ScriptedRuns script;
  script.bad = 4;  // 11/15 = 73% < 80%
  MockChatEndpoint mock;
  mock.set_responder([&](const auto& m) { return script(m); });
  const auto res = generate_schema(ioi_sample(), nullptr, mock);
  EXPECT_EQ(res.report.runs, 2);
  EXPECT_TRUE(res.report.accepted);
  ASSERT_GE(res.report.log.size(), 2u);
  EXPECT_NE(res.report.log[0].find("11 of 15"), std::string::npos) << res.report.log[0];
  EXPECT_NE(res.report.log[0].find("rejected"), std::string::npos);
  // each failing example used every attempt
  EXPECT_EQ(mock.calls(), 4 + 11 + 4 * 3 + 4 + 15);
}

TEST(SchemaAgent, TwelveOfFifteenIsEnough) {
  ScriptedRuns script;
  script.bad = 3;  // exactly 80%
  MockChatEndpoint mock;
  mock.set_responder([&](const auto& m) { return script(m); });
  const auto res = generate_schema(ioi_sample(), nullptr, mock);
  EXPECT_EQ(res.report.runs, 1);
  EXPECT_EQ(res.report.valid, 12);
  EXPECT_DOUBLE_EQ(res.report.validity_rate(), 0.8);
}

TEST(SchemaAgent, RestartBudgetIsBounded) {
  ScriptedRuns script;
  script.bad_run = -1;
  MockChatEndpoint mock;
  mock.set_responder([&](const std::vector<ChatMessage>& m) -> std::optional<std::string> {
    if (is_apply(m)) return R"({"Initial Time Marker": []})";
    return script(m);
  });
  EXPECT_THROW(generate_schema(ioi_sample(), nullptr, mock), DataError);
  EXPECT_EQ(script.run.load(), 3);
  EXPECT_THROW(generate_schema(std::vector<std::vector<std::string>>(14, {"a"}), nullptr, mock), DataError);
}

TEST(SchemaAgent, TranscriptApplicationResolves) {
  const auto schema = Schema::from_json(ordered_json::parse(slurp(transcripts() / "application_schema.json")));
  const auto toks = tokens_of(trim(slurp(transcripts() / "application_prompt.txt")));
  MockChatEndpoint mock;
  mock.add_match(kApplySystemPrompt, slurp(transcripts() / "application_response.txt"));
  const auto res = apply_schema(schema, {toks}, mock);
  ASSERT_TRUE(res.maps[0]);
  EXPECT_EQ(res.maps[0]->ranges, SpanMap::from_lengths({1, 3, 5, 1, 1, 1, 2, 1}).ranges);
  EXPECT_TRUE(res.report.accepted);
  EXPECT_EQ(res.report.outcomes[0].attempts, 1);
}

TEST(SchemaAgent, RetryCitesFailures) {
  const auto schema = Schema::from_json(ordered_json::parse(slurp(transcripts() / "application_schema.json")));
  const auto toks = tokens_of(trim(slurp(transcripts() / "application_prompt.txt")));
  MockChatEndpoint mock;
  mock.add_sequential(R"({"Temporal Context": ["While"], "Final Preposition": [" to"]})");
  mock.add_sequential(slurp(transcripts() / "application_response.txt"));
  const auto res = apply_schema(schema, {toks}, mock);
  ASSERT_TRUE(res.maps[0]);
  EXPECT_EQ(res.report.outcomes[0].attempts, 2);
  const auto second = mock.requests()[1];
  ASSERT_EQ(second.size(), 4u);
  EXPECT_EQ(second[2].role, "assistant");
  EXPECT_NE(second[3].content.find("missing span 'Primary Subjects'"), std::string::npos) << second[3].content;
}

namespace {

ApplicationResult synthetic_run(int total, int valid, int jobs) {
  Schema schema;
  schema.spans = {{"Body", "everything but the last token"}, {"End", "last token"}};
  std::vector<std::vector<std::string>> ex;
  for (int x = 0; x < total; ++x) ex.push_back({"t" + std::to_string(x), " u", " v"});
  MockChatEndpoint mock;
  mock.set_responder([&](const std::vector<ChatMessage>& m) -> std::optional<std::string> {
    const auto t = request_tokens(m);
    const int x = std::stoi(t[0].substr(1));
    if (x < valid) return ordered_json{{"Body", {t[0], t[1]}}, {"End", {t[2]}}}.dump();
    return ordered_json{{"Body", {t[0]}}, {"End", {t[1], t[2]}}}.dump();
  });
  AgentOptions opt;
  opt.jobs = jobs;
  return apply_schema(schema, ex, mock, opt);
}

}  // namespace

TEST(SchemaAgent, ApplicationThresholdGatesRun) {
  const auto ok = synthetic_run(500, 460, 4);
  EXPECT_TRUE(ok.report.accepted);
  EXPECT_EQ(ok.report.valid, 460);
  EXPECT_EQ(std::count(ok.maps.begin(), ok.maps.end(), std::nullopt), 40);
  const auto no = synthetic_run(500, 440, 4);
  EXPECT_FALSE(no.report.accepted);
  EXPECT_EQ(no.report.valid, 440);
  EXPECT_TRUE(synthetic_run(500, 450, 1).report.accepted);  // 90% exactly
  EXPECT_FALSE(synthetic_run(500, 449, 1).report.accepted);
}

TEST(SchemaAgent, ConcurrentApplicationIsReproducible) {
  EXPECT_EQ(synthetic_run(60, 50, 4).report.to_json().dump(), synthetic_run(60, 50, 1).report.to_json().dump());
}

TEST(SchemaAgent, TranscriptReplaysExactly) {
  const auto dir = testutil::temp_dir("agent");
  const auto path = dir / "transcript.jsonl";
  const auto schema = Schema::from_json(ordered_json::parse(slurp(transcripts() / "application_schema.json")));
  const auto toks = tokens_of(trim(slurp(transcripts() / "application_prompt.txt")));
  {
    auto mock = std::make_unique<MockChatEndpoint>();
    mock->add_match(kApplySystemPrompt, slurp(transcripts() / "application_response.txt"));
    LoggingChatEndpoint logged(std::move(mock), path);
    apply_schema(schema, {toks}, logged);
  }
  ChatEndpointConfig cfg;
  cfg.base_url = "mock:" + path.string();
  auto replay = make_endpoint(cfg);
  const auto res = apply_schema(schema, {toks}, *replay);
  ASSERT_TRUE(res.maps[0]);
  EXPECT_EQ(res.maps[0]->ranges, SpanMap::from_lengths({1, 3, 5, 1, 1, 1, 2, 1}).ranges);
  // exact lines are single use
  EXPECT_THROW(apply_schema(schema, {toks}, *replay), EndpointError);
}

TEST(SchemaAgent, EndpointConfigValidation) {
  ChatEndpointConfig cfg;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.base_url = "ftp://x";
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.base_url = "https://example.invalid";
  EXPECT_THROW(cfg.validate(), ConfigError);  // no model
  cfg.model = "m";
  cfg.credential_env = "PEAP_SURELY_UNSET_VARIABLE";
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.credential_env.clear();
  cfg.attempts = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.attempts = 3;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_FALSE(cfg.to_json().dump().empty());
}

TEST(Correctness, IdenticalAndOneOffMaps) {
  const auto ref = SpanMap::from_lengths({2, 1, 1, 1, 3, 1, 2, 1, 1, 1});
  auto r = correctness_harness({ref}, {ref});
  EXPECT_DOUBLE_EQ(r.mean, 1.0);
  // moving one boundary changes both neighbouring spans
  const auto moved = SpanMap::from_lengths({2, 1, 1, 1, 3, 1, 2, 2, 0, 1});
  r = correctness_harness({moved}, {ref});
  EXPECT_NEAR(r.per_example[0], 0.8, 1e-12);
  auto single = ref;
  single.ranges[9] = {single.ranges[9].first, single.ranges[9].second + 1};
  r = correctness_harness({single}, {ref});
  EXPECT_NEAR(r.mean, 0.9, 1e-12);
  r = correctness_harness({ref, std::nullopt}, {ref, ref});
  EXPECT_EQ(r.compared, 1);
  EXPECT_TRUE(std::isnan(r.per_example[1]));
  EXPECT_THROW(correctness_harness({SpanMap::from_lengths({1, 1})}, {ref}), DataError);
}

TEST(Sampling, IndicesAreDistinctAndSeeded) {
  const auto a = sample_indices(100, 15, 3);
  EXPECT_EQ(a, sample_indices(100, 15, 3));
  EXPECT_NE(a, sample_indices(100, 15, 4));
  EXPECT_EQ(std::set<int>(a.begin(), a.end()).size(), 15u);
  EXPECT_THROW(sample_indices(3, 4, 0), DataError);
}
