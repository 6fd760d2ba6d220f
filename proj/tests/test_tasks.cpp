#include "peap/tasks.hpp"
#include "peap/model.hpp"
#include "peap/weights.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <map>
#include <regex>
#include <set>

using namespace peap;

namespace {

const Tokenizer& tok() { return Tokenizer::gpt2(); }
const Lexicon& lex() { return Lexicon::shipped(); }

std::vector<std::string> words(const std::string& s) {
  std::vector<std::string> out;
  std::regex re("[A-Za-z]+");
  for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it)
    out.push_back(it->str());
  return out;
}

void expect_valid(const TaskDataset& ds) {
  for (const auto* set : {&ds.examples, &ds.references})
    for (const auto& ex : *set) {
      const auto v = validate_application(ds.schema, static_cast<int>(ex.tokens.size()), ex.reference);
      EXPECT_TRUE(v.valid) << ex.id << ": " << v.summary();
      EXPECT_EQ(tok().encode(ex.text).ids, ex.tokens);
      if (!ex.counter_tokens.empty()) {
        EXPECT_EQ(ex.counter_tokens.size(), ex.tokens.size()) << ex.id;
        EXPECT_EQ(tok().encode(ex.counterfactual).ids, ex.counter_tokens);
      }
    }
}

}  // namespace

TEST(Tasks, ParseNames) {
  for (std::string s : {"ioi-abba", "ioi-baba", "greater-than", "winobias-anti-female-i", "winobias-pro-male-ii"})
    EXPECT_EQ(TaskId::parse(s).name(), s);
  EXPECT_THROW(TaskId::parse("ioi-abab"), ConfigError);
  EXPECT_THROW(TaskId::parse("winobias-anti-female-iii"), ConfigError);
}

TEST(Tasks, GreaterThanSpansAndAnswers) {
  const auto ds = gen_greater_than(200, 7, tok(), lex());
  ASSERT_EQ(ds.size(), 200);
  expect_valid(ds);
  std::regex re("^The (\\w+) lasted from the year (\\d\\d)(\\d\\d) to the year (\\d\\d)$");
  for (const auto& ex : ds.examples) {
    std::smatch m;
    ASSERT_TRUE(std::regex_match(ex.text, m, re)) << ex.text;
    EXPECT_EQ(m[2].str(), m[4].str());
    const int yy = std::stoi(m[3].str());
    EXPECT_GE(yy, 2);
    EXPECT_LE(yy, 98);
    EXPECT_EQ(ex.counterfactual, ex.text.substr(0, m.position(3)) + "01" + ex.text.substr(m.position(3) + 2));
    std::set<std::string> pos, neg;
    for (int id : ex.metric.positive) pos.insert(tok().token_bytes(id));
    for (int id : ex.metric.negative) neg.insert(tok().token_bytes(id));
    EXPECT_EQ(pos.size() + neg.size(), 100u);
    for (int k = 0; k < 100; ++k) {
      char buf[3];
      std::snprintf(buf, sizeof buf, "%02d", k);
      EXPECT_EQ(pos.count(buf), k > yy ? 1u : 0u);
      EXPECT_EQ(neg.count(buf), k > yy ? 0u : 1u);
    }
    // YY is exactly one token and sits in its own span
    EXPECT_EQ(ex.reference.span_length(7), 1);
    EXPECT_EQ(tok().token_bytes(ex.tokens[static_cast<std::size_t>(ex.reference.ranges[7].first)]), m[3].str());
  }
}

TEST(Tasks, GreaterThanWarExample) {
  // The canonical prompt should split so that each schema span is non-empty and the
  // answer set for 41 is 42..99.
  const auto seq = tok().encode("The war lasted from the year 1741 to the year 17");
  EXPECT_EQ(seq.size(), 12u);
  Lexicon l = lex();
  l.gt_nouns = {"war"};
  const auto ds = gen_greater_than(5000, 1, tok(), l);
  bool seen = false;
  for (const auto& ex : ds.examples)
    if (ex.text == "The war lasted from the year 1741 to the year 17") {
      seen = true;
      EXPECT_EQ(ex.tokens, seq.ids);
      EXPECT_EQ(ex.metric.positive.size(), 58u);
      EXPECT_EQ(ex.reference, SpanMap::one_token_per_span(12));
    }
  EXPECT_TRUE(seen);
}

TEST(Tasks, IoiAnswersFollowNameCounts) {
  for (std::string variant : {"abba", "baba"}) {
    const auto ds = gen_ioi(150, variant, 11, tok(), lex());
    expect_valid(ds);
    std::set<int> templates;
    for (const auto& ex : ds.examples) {
      templates.insert(ex.template_id);
      std::map<std::string, int> count;
      std::set<std::string> lexnames(lex().names.begin(), lex().names.end());
      std::vector<std::string> order;
      for (const auto& w : words(ex.text))
        if (lexnames.count(w)) {
          if (!count[w]++) order.push_back(w);
        }
      ASSERT_EQ(count.size(), 2u) << ex.text;
      std::string io, s;
      for (auto& [n, c] : count) (c == 1 ? io : s) = n;
      EXPECT_EQ(count[s], 2) << ex.text;
      EXPECT_EQ(ex.correct, " " + io);
      EXPECT_EQ(ex.incorrect, " " + s);
      EXPECT_EQ(order.front(), variant == "abba" ? io : s) << ex.text;
      // counterfactual uses three names absent from the clean prompt
      std::set<std::string> cf;
      for (const auto& w : words(ex.counterfactual))
        if (lexnames.count(w)) cf.insert(w);
      EXPECT_EQ(cf.size(), 3u) << ex.counterfactual;
      for (const auto& n : cf) EXPECT_EQ(count.count(n), 0u);
      // the schema's name spans hold exactly the names
      const auto& sc = ds.schema;
      for (int j = 0; j < sc.size(); ++j) {
        const auto& title = sc.spans[static_cast<std::size_t>(j)].title;
        const auto [lo, hi] = ex.reference.ranges[static_cast<std::size_t>(j)];
        std::string text;
        for (int k = lo; k < hi; ++k) text += tok().token_bytes(ex.tokens[static_cast<std::size_t>(k)]);
        if (title == "IO") EXPECT_EQ(text, " " + io);
        if (title == "S1" || title == "S2") EXPECT_EQ(text, " " + s);
        if (title == "to") EXPECT_EQ(text, " to");
      }
    }
    EXPECT_GT(templates.size(), 10u);
  }
}

TEST(Tasks, WinobiasTableExample) {
  Lexicon l = lex();
  l.winobias_templates = {{"offered apples to", "had too many of them", "might like them"}};
  l.female_professions = {"nurse"};
  l.male_professions = {"doctor"};
  auto i = enumerate_winobias("anti-female-i", tok(), l);
  ASSERT_EQ(i.size(), 1u);
  EXPECT_EQ(i[0].text, "The doctor offered apples to the nurse because she had too many of them. The pronoun she refers to the");
  EXPECT_EQ(i[0].correct, " doctor");
  EXPECT_EQ(i[0].incorrect, " nurse");
  auto ii = enumerate_winobias("anti-female-ii", tok(), l);
  EXPECT_EQ(ii[0].text, "The nurse offered apples to the doctor because she might like them. The pronoun she refers to the");
  EXPECT_EQ(ii[0].correct, " doctor");
  auto pro = enumerate_winobias("pro-male-i", tok(), l);
  EXPECT_EQ(pro[0].text, "The doctor offered apples to the nurse because he had too many of them. The pronoun he refers to the");
  EXPECT_EQ(pro[0].correct, " doctor");
  EXPECT_EQ(human_schema(TaskId::parse("winobias-anti-female-ii")).spans[0].title, "wrong answer");
  EXPECT_EQ(human_schema(TaskId::parse("winobias-anti-female-i")).spans[0].title, "correct answer");
}

TEST(Tasks, WinobiasAllVariantsAndTemplatesTokenize) {
  for (std::string v : {"anti-female-i", "anti-female-ii", "pro-female-i", "pro-female-ii", "anti-male-i",
                        "anti-male-ii", "pro-male-i", "pro-male-ii"}) {
    const auto all = enumerate_winobias(v, tok(), lex());
    EXPECT_EQ(all.size(), lex().winobias_templates.size());
    const auto schema = human_schema(TaskId::parse("winobias-" + v));
    for (const auto& ex : all) EXPECT_TRUE(validate_application(schema, static_cast<int>(ex.tokens.size()), ex.reference).valid);
    const auto ds = gen_winobias(40, v, 5, tok(), lex());
    expect_valid(ds);
    ASSERT_EQ(ds.references.size(), 16u);
    std::map<std::string, int> kinds;
    for (const auto& r : ds.references) ++kinds[r.variant];
    EXPECT_EQ(kinds.size(), 4u);
    for (auto& [k, c] : kinds) {
      EXPECT_EQ(c, 4);
      EXPECT_EQ(k.substr(k.rfind('-')), v.substr(v.rfind('-')));
    }
    std::set<std::string> texts;
    for (const auto& ex : ds.examples) texts.insert(ex.text);
    EXPECT_EQ(texts.size(), ds.examples.size());
    EXPECT_EQ(default_policy(ds.task), v.rfind("anti", 0) == 0 ? FilterPolicy::BiasedWrong : FilterPolicy::Correct);
  }
}

TEST(Tasks, GenerationIsSeeded) {
  EXPECT_EQ(gen_ioi(30, "abba", 3, tok(), lex()).hash(), gen_ioi(30, "abba", 3, tok(), lex()).hash());
  EXPECT_NE(gen_ioi(30, "abba", 3, tok(), lex()).hash(), gen_ioi(30, "abba", 4, tok(), lex()).hash());
  EXPECT_EQ(gen_greater_than(0, 3, tok(), lex()).size(), 0);
}

TEST(Tasks, MetricIsAntisymmetric) {
  const auto ds = gen_ioi(5, "baba", 2, tok(), lex());
  std::mt19937 rng(1);
  std::normal_distribution<double> d;
  RowVector<double> logits(tok().vocab_size());
  for (auto& x : logits) x = d(rng);
  for (const auto& ex : ds.examples) {
    MetricSpec swapped = ex.metric;
    std::swap(swapped.positive, swapped.negative);
    EXPECT_NEAR(ex.metric.evaluate(logits), -swapped.evaluate(logits), 1e-12);
  }
}

TEST(Tasks, DatasetRoundTrip) {
  const auto ds = gen_winobias(6, "pro-female-ii", 9, tok(), lex());
  const auto path = testutil::temp_dir("tasks") / "wino.jsonl";
  save_dataset(path, ds);
  const auto back = load_dataset(path);
  EXPECT_EQ(back.hash(), ds.hash());
  ASSERT_EQ(back.examples.size(), ds.examples.size());
  ASSERT_EQ(back.references.size(), ds.references.size());
  EXPECT_EQ(back.examples[3].reference, ds.examples[3].reference);
  EXPECT_EQ(back.examples[3].metric.positive, ds.examples[3].metric.positive);
}

TEST(Tasks, FilterKeepsMatchingPredictions) {
  auto w = random_weights(testutil::toy_config(1, 2, 8, 16), 5).cast<double>();
  TaskDataset empty;
  empty.task = TaskId::parse("ioi-abba");
  EXPECT_EQ(filter_by_model(empty, w, FilterPolicy::Correct, PredictionRule::Pairwise, 1).kept, 0);
  TaskDataset ds = empty;
  for (int i = 0; i < 20; ++i) {
    TaskExample ex;
    ex.id = std::to_string(i);
    ex.tokens = testutil::random_tokens(5, 16, static_cast<unsigned>(i));
    ex.metric = {MetricKind::LogitDifference, {i % 16}, {(i + 3) % 16}};
    ds.examples.push_back(ex);
  }
  const auto good = filter_by_model(ds, w, FilterPolicy::Correct, PredictionRule::Pairwise, 2);
  const auto bad = filter_by_model(ds, w, FilterPolicy::BiasedWrong, PredictionRule::Pairwise, 2);
  EXPECT_EQ(good.total, 20);
  EXPECT_EQ(good.kept + bad.kept, 20);  // generic logits never tie exactly
  for (const auto& ex : good.dataset.examples)
    EXPECT_GT(ex.metric.evaluate(forward(w, ex.tokens).final_logits()), 0);
  const auto top = filter_by_model(ds, w, FilterPolicy::Correct, PredictionRule::Unrestricted, 1);
  for (const auto& ex : top.dataset.examples)
    EXPECT_EQ(argmax(forward(w, ex.tokens).final_logits()), ex.metric.positive[0]);
}
