#include "peap/tasks.hpp"

#include "peap/model.hpp"
#include "peap/parallel.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

namespace peap {

namespace {

struct Segment {
  std::string title, text;
};

struct Built {
  TokenSeq seq;
  SpanMap map;
};

// Tokenizes the concatenated segments and assigns each token to the segment holding
// its first byte. A token that straddles two segments means the segmentation does not
// respect token boundaries, which the generators treat as a bug.
Built build(const std::vector<Segment>& segs, const Tokenizer& tok) {
  std::string text;
  std::vector<std::size_t> ends;
  for (const auto& s : segs) {
    text += s.text;
    ends.push_back(text.size());
  }
  Built b;
  b.seq = tok.encode(text);
  std::size_t seg = 0, begin = 0;
  for (std::size_t k = 0; k < b.seq.size(); ++k) {
    const auto [lo, hi] = b.seq.offsets[k];
    while (seg < ends.size() && lo >= ends[seg]) {
      b.map.ranges.emplace_back(static_cast<int>(begin), static_cast<int>(k));
      begin = k;
      ++seg;
    }
    if (seg == ends.size() || hi > ends[seg])
      throw DataError(fmt::format("token '{}' of \"{}\" crosses the boundary of span '{}'", tok.token_bytes(b.seq.ids[k]),
                                  text, seg < segs.size() ? segs[seg].title : "?"));
  }
  for (; seg < ends.size(); ++seg) {
    b.map.ranges.emplace_back(static_cast<int>(begin), static_cast<int>(b.seq.size()));
    begin = b.seq.size();
  }
  for (std::size_t j = 0; j < segs.size(); ++j)
    if (b.map.ranges[j].first == b.map.ranges[j].second)
      throw DataError(fmt::format("span '{}' of \"{}\" has no tokens", segs[j].title, text));
  return b;
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t p = 0; (p = s.find(from, p)) != std::string::npos; p += to.size()) s.replace(p, from.size(), to);
  return s;
}

int single(const Tokenizer& tok, const std::string& text, const char* what) {
  const auto id = tok.single_token(text);
  if (!id) throw DataError(fmt::format("{} '{}' is not a single token under the active tokenizer", what, text));
  return *id;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw DataError(fmt::format("cannot open lexicon file {}", p.string()));
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  if (out.empty()) throw DataError(fmt::format("lexicon file {} is empty", p.string()));
  return out;
}

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::string join_schema_check(const Schema& schema, const std::vector<Segment>& segs) {
  if (static_cast<int>(segs.size()) != schema.size()) return "segment count";
  for (int j = 0; j < schema.size(); ++j)
    if (schema.spans[static_cast<std::size_t>(j)].title != segs[static_cast<std::size_t>(j)].title)
      return segs[static_cast<std::size_t>(j)].title;
  return {};
}

void finish(TaskExample& ex, const Schema& schema, const std::vector<Segment>& segs, const Tokenizer& tok) {
  if (auto bad = join_schema_check(schema, segs); !bad.empty())
    throw DataError(fmt::format("generator segments disagree with the human schema at '{}'", bad));
  auto b = build(segs, tok);
  ex.text = b.seq.text;
  ex.tokens = b.seq.ids;
  ex.reference = std::move(b.map);
  ex.reference.example_id = ex.id;
  const auto v = validate_application(schema, static_cast<int>(ex.tokens.size()), ex.reference);
  if (!v.valid) throw DataError(fmt::format("reference application of {} is invalid: {}", ex.id, v.summary()));
}

struct WinoVariant {
  bool anti;
  bool female;
  bool second;  // the pronoun refers to the second profession
};

WinoVariant parse_wino(const std::string& v) {
  static const std::vector<std::string> all{"anti-female-i", "anti-female-ii", "pro-female-i", "pro-female-ii",
                                            "anti-male-i",   "anti-male-ii",   "pro-male-i",   "pro-male-ii"};
  if (std::find(all.begin(), all.end(), v) == all.end())
    throw ConfigError(fmt::format("unknown Winobias variant '{}'", v));
  return {v.rfind("anti", 0) == 0, v.find("female") != std::string::npos, v.size() > 3 && v.substr(v.size() - 3) == "-ii"};
}

std::string wino_name(const WinoVariant& w) {
  return fmt::format("{}-{}-{}", w.anti ? "anti" : "pro", w.female ? "female" : "male", w.second ? "ii" : "i");
}

TaskExample wino_example(const WinoVariant& w, int tid, const std::string& female_prof, const std::string& male_prof,
                         const Schema& schema, const Tokenizer& tok, const Lexicon& lex) {
  const auto& t = lex.winobias_templates[static_cast<std::size_t>(tid)];
  // The correct profession matches the pronoun's stereotype in Pro variants.
  const bool correct_is_female = w.anti ? !w.female : w.female;
  const std::string& correct = correct_is_female ? female_prof : male_prof;
  const std::string& wrong = correct_is_female ? male_prof : female_prof;
  const std::string pron = w.female ? " she" : " he";
  const std::string& p1 = w.second ? wrong : correct;
  const std::string& p2 = w.second ? correct : wrong;
  TaskExample ex;
  ex.template_id = tid;
  ex.variant = wino_name(w);
  ex.correct = " " + correct;
  ex.incorrect = " " + wrong;
  std::vector<Segment> segs{{w.second ? "wrong answer" : "correct answer", "The " + p1},
                            {"interacts with", " " + t.interaction},
                            {w.second ? "correct answer" : "wrong answer", " the " + p2},
                            {"conjunction", " because"},
                            {"pronoun1", pron},
                            {"circumstances", " " + (w.second ? t.second : t.first)},
                            {"dot", "."},
                            {"The", " The"},
                            {"pronoun", " pronoun"},
                            {"pronoun2", pron},
                            {"refers", " refers"},
                            {"to", " to"},
                            {"the", " the"}};
  finish(ex, schema, segs, tok);
  ex.metric = {MetricKind::LogitDifference, {single(tok, ex.correct, "profession")},
               {single(tok, ex.incorrect, "profession")}};
  return ex;
}

}  // namespace

std::string TaskId::name() const {
  switch (kind) {
    case TaskKind::IOI:
      return "ioi-" + variant;
    case TaskKind::GreaterThan:
      return "greater-than";
    case TaskKind::Winobias:
      return "winobias-" + variant;
  }
  return "?";
}

TaskId TaskId::parse(const std::string& s) {
  if (s == "greater-than" || s == "gt") return {TaskKind::GreaterThan, ""};
  if (s == "ioi-abba" || s == "ioi-baba") return {TaskKind::IOI, s.substr(4)};
  if (s.rfind("winobias-", 0) == 0) {
    TaskId t{TaskKind::Winobias, s.substr(9)};
    parse_wino(t.variant);
    return t;
  }
  throw ConfigError(fmt::format("unknown task '{}' (expected ioi-abba, ioi-baba, greater-than or winobias-<variant>)", s));
}

std::uint64_t TaskDataset::hash() const {
  std::uint64_t h = fnv1a(task.name());
  for (const auto* set : {&examples, &references})
    for (const auto& ex : *set) {
      h = fnv1a(ex.text, h);
      h = fnv1a("\x1f", h);
      h = fnv1a(ex.counterfactual, h);
      h = fnv1a("\x1e", h);
    }
  return h;
}

Lexicon Lexicon::load(const std::filesystem::path& dir) {
  Lexicon lex;
  lex.names = read_lines(dir / "names.txt");
  lex.places = read_lines(dir / "places.txt");
  lex.objects = read_lines(dir / "objects.txt");
  lex.gt_nouns = read_lines(dir / "gt_nouns.txt");
  lex.female_professions = read_lines(dir / "professions_female.txt");
  lex.male_professions = read_lines(dir / "professions_male.txt");
  lex.ioi_templates = read_lines(dir / "ioi_templates.txt");
  int no = 0;
  for (const auto& line : read_lines(dir / "winobias_templates.tsv")) {
    ++no;
    const auto a = line.find('\t'), b = line.find('\t', a + 1);
    if (a == std::string::npos || b == std::string::npos || line.find('\t', b + 1) != std::string::npos)
      throw DataError(fmt::format("{}: template {} needs three tab-separated fields",
                                  (dir / "winobias_templates.tsv").string(), no));
    lex.winobias_templates.push_back({line.substr(0, a), line.substr(a + 1, b - a - 1), line.substr(b + 1)});
  }
  for (const auto& t : lex.ioi_templates)
    if (t.find("[B] and [A]") == std::string::npos || t.size() < 7 || t.substr(t.size() - 7) != " to [A]")
      throw DataError(fmt::format("IOI template does not have the expected shape: {}", t));
  return lex;
}

const Lexicon& Lexicon::shipped() {
  static const Lexicon lex = load(std::filesystem::path(data_dir()) / "lexicon");
  return lex;
}

Schema human_schema(const TaskId& task) {
  auto make = [](std::vector<std::pair<std::string, std::string>> spans) {
    Schema s;
    for (auto& [t, d] : spans) s.spans.push_back({t, d});
    s.validate();
    return s;
  };
  switch (task.kind) {
    case TaskKind::GreaterThan:
      return make({{"The", "opening article"},
                   {"Noun", "the event"},
                   {"lasted", "verb"},
                   {"from", "preposition"},
                   {"the", "article before the first year"},
                   {"year", "the word year, first time"},
                   {"XX1", "century digits of the start year"},
                   {"YY", "last two digits of the start year"},
                   {"to", "preposition"},
                   {"the2", "article before the second year"},
                   {"year2", "the word year, second time"},
                   {"XX2", "century digits of the end year"}});
    case TaskKind::IOI:
      if (task.variant == "abba")
        return make({{"Prefix", "words before the first name"},
                     {"IO", "the indirect object"},
                     {"and", "conjunction between the names"},
                     {"S1", "first mention of the subject"},
                     {"S1+1", "token after the first subject mention"},
                     {"action1", "rest of the opening clause"},
                     {"S2", "second mention of the subject"},
                     {"action2", "the giving action"},
                     {"to", "final preposition"}});
      if (task.variant == "baba")
        return make({{"Prefix", "words before the first name"},
                     {"S1", "first mention of the subject"},
                     {"S1+1", "conjunction after the subject"},
                     {"IO", "the indirect object"},
                     {"IO+1", "token after the indirect object"},
                     {"action1", "rest of the opening clause"},
                     {"S2", "second mention of the subject"},
                     {"action2", "the giving action"},
                     {"to", "final preposition"}});
      break;
    case TaskKind::Winobias: {
      const auto w = parse_wino(task.variant);
      const std::string first = w.second ? "wrong answer" : "correct answer";
      const std::string third = w.second ? "correct answer" : "wrong answer";
      return make({{first, "first profession with its article"},
                   {"interacts with", "what the first person does to the second"},
                   {third, "second profession with its article"},
                   {"conjunction", "because"},
                   {"pronoun1", "pronoun in the sentence"},
                   {"circumstances", "reason clause that resolves the pronoun"},
                   {"dot", "sentence end"},
                   {"The", "start of the question"},
                   {"pronoun", "the word pronoun"},
                   {"pronoun2", "pronoun repeated in the question"},
                   {"refers", "verb"},
                   {"to", "preposition"},
                   {"the", "final article"}});
    }
  }
  throw ConfigError(fmt::format("no human schema for task '{}'", task.name()));
}

TaskDataset gen_greater_than(int count, std::uint64_t seed, const Tokenizer& tok, const Lexicon& lex) {
  if (count < 0) throw ConfigError("example count must be non-negative");
  TaskDataset ds;
  ds.task = {TaskKind::GreaterThan, ""};
  ds.schema = human_schema(ds.task);
  // Start years whose last two digits are their own token, as is the "01" counterfactual.
  std::vector<std::pair<int, int>> years;
  for (int xx = 11; xx <= 17; ++xx) {
    auto splits = [&](int yy) {
      const auto s = tok.encode(fmt::format(" {}{:02d}", xx, yy));
      return s.size() == 2 && tok.token_bytes(s.ids[0]) == fmt::format(" {}", xx);
    };
    if (!splits(1)) continue;
    for (int yy = 2; yy <= 98; ++yy)
      if (splits(yy)) years.emplace_back(xx, yy);
  }
  std::vector<int> two_digit(100);
  for (int k = 0; k < 100; ++k) two_digit[static_cast<std::size_t>(k)] = single(tok, fmt::format("{:02d}", k), "year token");
  std::vector<std::string> nouns;
  for (const auto& n : lex.gt_nouns)
    if (tok.single_token(" " + n)) nouns.push_back(n);
  if (years.empty() || nouns.empty()) throw DataError("greater-than: lexicon yields no usable prompts");

  std::mt19937_64 rng(seed);
  auto segments = [](const std::string& noun, int xx, int yy) {
    return std::vector<Segment>{{"The", "The"},        {"Noun", " " + noun},
                                {"lasted", " lasted"}, {"from", " from"},
                                {"the", " the"},       {"year", " year"},
                                {"XX1", fmt::format(" {}", xx)}, {"YY", fmt::format("{:02d}", yy)},
                                {"to", " to"},         {"the2", " the"},
                                {"year2", " year"},    {"XX2", fmt::format(" {}", xx)}};
  };
  for (int i = 0; i < count; ++i) {
    const auto& noun = pick(nouns, rng);
    const auto [xx, yy] = pick(years, rng);
    TaskExample ex;
    ex.id = fmt::format("greater-than-{}", i);
    ex.variant = "";
    finish(ex, ds.schema, segments(noun, xx, yy), tok);
    const auto cf = build(segments(noun, xx, 1), tok);
    ex.counterfactual = cf.seq.text;
    ex.counter_tokens = cf.seq.ids;
    ex.metric.kind = MetricKind::ProbabilityDifference;
    for (int k = 0; k < 100; ++k)
      (k > yy ? ex.metric.positive : ex.metric.negative).push_back(two_digit[static_cast<std::size_t>(k)]);
    ex.correct = fmt::format("{:02d}..99", yy + 1);
    ex.incorrect = fmt::format("00..{:02d}", yy);
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

TaskDataset gen_ioi(int count, const std::string& variant, std::uint64_t seed, const Tokenizer& tok,
                    const Lexicon& lex) {
  if (variant != "abba" && variant != "baba") throw ConfigError(fmt::format("unknown IOI variant '{}'", variant));
  if (count < 0) throw ConfigError("example count must be non-negative");
  TaskDataset ds;
  ds.task = {TaskKind::IOI, variant};
  ds.schema = human_schema(ds.task);
  std::vector<std::string> names;
  for (const auto& n : lex.names)
    if (tok.single_token(" " + n)) names.push_back(n);
  if (names.size() < 5) throw DataError("ioi: need at least five single-token names to sample without collision");
  const bool abba = variant == "abba";
  std::mt19937_64 rng(seed);

  for (int i = 0; i < count; ++i) {
    const int tid = std::uniform_int_distribution<int>(0, static_cast<int>(lex.ioi_templates.size()) - 1)(rng);
    const auto& tpl = lex.ioi_templates[static_cast<std::size_t>(tid)];
    const auto& place = pick(lex.places, rng);
    const auto& object = pick(lex.objects, rng);
    std::vector<std::string> chosen;
    while (chosen.size() < 5) {
      const auto& n = pick(names, rng);
      if (std::find(chosen.begin(), chosen.end(), n) == chosen.end()) chosen.push_back(n);
    }
    const auto at = tpl.find("[B] and [A]");
    std::string prefix = tpl.substr(0, at);
    while (!prefix.empty() && prefix.back() == ' ') prefix.pop_back();
    const std::string rest = tpl.substr(at + 11);
    const auto sp = rest.find(' ', 1);
    const std::string next = rest.substr(0, sp), after = rest.substr(sp);
    const auto s2 = after.find(" [B]");
    if (s2 == std::string::npos) throw DataError(fmt::format("IOI template lacks a second subject mention: {}", tpl));
    const std::string action1 = after.substr(0, s2);
    const std::string tail = after.substr(s2 + 4);
    const std::string action2 = tail.substr(0, tail.size() - 7);
    auto fill = [&](const std::string& s) { return replace_all(replace_all(s, "[PLACE]", place), "[OBJECT]", object); };
    auto segments = [&](const std::string& io, const std::string& s1, const std::string& s2name) {
      std::vector<Segment> segs{{"Prefix", fill(prefix)}};
      if (abba) {
        segs.push_back({"IO", " " + io});
        segs.push_back({"and", " and"});
        segs.push_back({"S1", " " + s1});
        segs.push_back({"S1+1", next});
      } else {
        segs.push_back({"S1", " " + s1});
        segs.push_back({"S1+1", " and"});
        segs.push_back({"IO", " " + io});
        segs.push_back({"IO+1", next});
      }
      segs.push_back({"action1", fill(action1)});
      segs.push_back({"S2", " " + s2name});
      segs.push_back({"action2", fill(action2)});
      segs.push_back({"to", " to"});
      return segs;
    };
    TaskExample ex;
    ex.id = fmt::format("ioi-{}-{}", variant, i);
    ex.template_id = tid;
    ex.variant = abba ? "ABBA" : "BABA";
    const auto &io = chosen[0], &s = chosen[1];
    finish(ex, ds.schema, segments(io, s, s), tok);
    const auto cf = build(segments(chosen[2], chosen[3], chosen[4]), tok);
    if (cf.seq.size() != ex.tokens.size()) throw DataError(fmt::format("{}: counterfactual length differs", ex.id));
    ex.counterfactual = cf.seq.text;
    ex.counter_tokens = cf.seq.ids;
    ex.correct = " " + io;
    ex.incorrect = " " + s;
    ex.metric = {MetricKind::LogitDifference, {single(tok, ex.correct, "name")}, {single(tok, ex.incorrect, "name")}};
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

TaskDataset gen_winobias(int count, const std::string& variant, std::uint64_t seed, const Tokenizer& tok,
                         const Lexicon& lex) {
  const auto w = parse_wino(variant);
  if (count < 0) throw ConfigError("example count must be non-negative");
  TaskDataset ds;
  ds.task = {TaskKind::Winobias, variant};
  ds.schema = human_schema(ds.task);
  const auto nt = static_cast<int>(lex.winobias_templates.size());
  const auto nf = lex.female_professions.size(), nm = lex.male_professions.size();
  const auto space = static_cast<std::size_t>(nt) * nf * nm;
  if (static_cast<std::size_t>(count) > space)
    throw ConfigError(fmt::format("winobias: {} examples requested, only {} distinct prompts exist", count, space));
  std::mt19937_64 rng(seed);
  std::set<std::size_t> used;
  auto draw = [&](const WinoVariant& v, std::mt19937_64& r, const std::string& id) {
    for (;;) {
      const std::size_t key = std::uniform_int_distribution<std::size_t>(0, space - 1)(r);
      if (!used.insert(key).second) continue;
      const int tid = static_cast<int>(key / (nf * nm));
      const auto& f = lex.female_professions[(key / nm) % nf];
      const auto& m = lex.male_professions[key % nm];
      auto ex = wino_example(v, tid, f, m, human_schema({TaskKind::Winobias, wino_name(v)}), tok, lex);
      ex.id = id;
      ex.reference.example_id = id;
      return ex;
    }
  };
  for (int i = 0; i < count; ++i) ds.examples.push_back(draw(w, rng, fmt::format("winobias-{}-{}", variant, i)));
  // Reference set: four of each bias type with the same pronoun-resolution direction,
  // so all of them share this variant's span layout.
  std::mt19937_64 ref_rng(seed ^ 0x9e3779b97f4a7c15ull);
  used.clear();
  int r = 0;
  for (bool anti : {true, false})
    for (bool female : {true, false})
      for (int k = 0; k < 4 && used.size() < space; ++k) {
        auto ex = draw({anti, female, w.second}, ref_rng, fmt::format("winobias-{}-ref-{}", variant, r++));
        // reference prompts keep the variant's schema titles even though their bias type differs
        ds.references.push_back(std::move(ex));
      }
  return ds;
}

std::vector<TaskExample> enumerate_winobias(const std::string& variant, const Tokenizer& tok, const Lexicon& lex) {
  const auto w = parse_wino(variant);
  const auto schema = human_schema({TaskKind::Winobias, variant});
  std::vector<TaskExample> out;
  for (int t = 0; t < static_cast<int>(lex.winobias_templates.size()); ++t) {
    const auto& f = lex.female_professions[static_cast<std::size_t>(t) % lex.female_professions.size()];
    const auto& m = lex.male_professions[static_cast<std::size_t>(t) % lex.male_professions.size()];
    auto ex = wino_example(w, t, f, m, schema, tok, lex);
    ex.id = fmt::format("winobias-{}-t{}", variant, t);
    out.push_back(std::move(ex));
  }
  return out;
}

TaskDataset generate_task(const TaskId& task, int count, std::uint64_t seed, const Tokenizer& tok, const Lexicon& lex) {
  switch (task.kind) {
    case TaskKind::GreaterThan:
      return gen_greater_than(count, seed, tok, lex);
    case TaskKind::IOI:
      return gen_ioi(count, task.variant, seed, tok, lex);
    case TaskKind::Winobias:
      return gen_winobias(count, task.variant, seed, tok, lex);
  }
  throw ConfigError("unknown task");
}

FilterPolicy default_policy(const TaskId& task) {
  if (task.kind == TaskKind::Winobias && parse_wino(task.variant).anti) return FilterPolicy::BiasedWrong;
  return FilterPolicy::Correct;
}

std::string to_string(FilterPolicy p) { return p == FilterPolicy::Correct ? "correct" : "biased-wrong"; }
std::string to_string(PredictionRule r) { return r == PredictionRule::Pairwise ? "pairwise" : "unrestricted"; }

FilterPolicy filter_policy_from_string(const std::string& s) {
  if (s == "correct") return FilterPolicy::Correct;
  if (s == "biased-wrong") return FilterPolicy::BiasedWrong;
  throw ConfigError(fmt::format("unknown filter policy '{}' (expected correct or biased-wrong)", s));
}

PredictionRule prediction_rule_from_string(const std::string& s) {
  if (s == "pairwise") return PredictionRule::Pairwise;
  if (s == "unrestricted") return PredictionRule::Unrestricted;
  throw ConfigError(fmt::format("unknown prediction rule '{}' (expected pairwise or unrestricted)", s));
}

template <typename Scalar>
bool prediction_matches(const ModelWeights<Scalar>& weights, const TaskExample& ex, FilterPolicy policy,
                        PredictionRule rule) {
  const RowVector<Scalar> logits = forward(weights, ex.tokens).final_logits();
  if (rule == PredictionRule::Pairwise) {
    const double m = static_cast<double>(ex.metric.evaluate(logits));
    return policy == FilterPolicy::Correct ? m > 0 : m < 0;
  }
  const int top = static_cast<int>(argmax(logits));
  const auto& set = policy == FilterPolicy::Correct ? ex.metric.positive : ex.metric.negative;
  return std::find(set.begin(), set.end(), top) != set.end();
}

template <typename Scalar>
FilterResult filter_by_model(const TaskDataset& ds, const ModelWeights<Scalar>& weights, FilterPolicy policy,
                             PredictionRule rule, int jobs) {
  std::vector<char> keep(ds.examples.size(), 0);
  parallel_for(ds.size(), jobs, [&](int x) {
    keep[static_cast<std::size_t>(x)] = prediction_matches(weights, ds.examples[static_cast<std::size_t>(x)], policy, rule);
  });
  FilterResult r;
  r.dataset = ds;
  r.dataset.examples.clear();
  r.total = ds.size();
  for (std::size_t x = 0; x < keep.size(); ++x)
    if (keep[x]) r.dataset.examples.push_back(ds.examples[x]);
  r.kept = r.dataset.size();
  return r;
}

namespace {

nlohmann::json example_json(const TaskDataset& ds, const TaskExample& ex, const char* role) {
  return {{"id", ex.id},
          {"role", role},
          {"task", ds.task.name()},
          {"text", ex.text},
          {"counterfactual", ex.counterfactual},
          {"tokens", ex.tokens},
          {"counterfactual_tokens", ex.counter_tokens},
          {"answers", {{"metric", ex.metric.to_json()}, {"correct", ex.correct}, {"incorrect", ex.incorrect}}},
          {"template_id", ex.template_id},
          {"variant", ex.variant},
          {"spans", ex.reference.to_json()}};
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const TaskDataset& ds) {
  std::ofstream os(path);
  if (!os) throw DataError(fmt::format("cannot write {}", path.string()));
  for (const auto& ex : ds.examples) os << example_json(ds, ex, "example").dump() << '\n';
  for (const auto& ex : ds.references) os << example_json(ds, ex, "reference").dump() << '\n';
}

TaskDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError(fmt::format("cannot open {}", path.string()));
  TaskDataset ds;
  bool have_task = false;
  int no = 0;
  for (std::string line; std::getline(is, line);) {
    ++no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto task = TaskId::parse(j.at("task").get<std::string>());
      if (!have_task) {
        ds.task = task;
        ds.schema = human_schema(task);
        have_task = true;
      } else if (!(task == ds.task)) {
        throw DataError(fmt::format("mixes tasks {} and {}", ds.task.name(), task.name()));
      }
      TaskExample ex;
      ex.id = j.at("id").get<std::string>();
      ex.text = j.at("text").get<std::string>();
      ex.counterfactual = j.value("counterfactual", "");
      ex.tokens = j.at("tokens").get<std::vector<int>>();
      ex.counter_tokens = j.value("counterfactual_tokens", std::vector<int>{});
      const auto& a = j.at("answers");
      ex.metric = MetricSpec::from_json(a.at("metric"));
      ex.correct = a.value("correct", "");
      ex.incorrect = a.value("incorrect", "");
      ex.template_id = j.value("template_id", 0);
      ex.variant = j.value("variant", "");
      ex.reference = SpanMap::from_json(j.at("spans"));
      if (!ex.counter_tokens.empty() && ex.counter_tokens.size() != ex.tokens.size())
        throw DataError(fmt::format("{}: counterfactual length differs from the prompt", ex.id));
      (j.value("role", "example") == "reference" ? ds.references : ds.examples).push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), no, e.what()));
    } catch (const Error& e) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), no, e.what()));
    }
  }
  if (!have_task) throw DataError(fmt::format("{}: empty dataset file", path.string()));
  return ds;
}

template bool prediction_matches(const ModelWeights<float>&, const TaskExample&, FilterPolicy, PredictionRule);
template bool prediction_matches(const ModelWeights<double>&, const TaskExample&, FilterPolicy, PredictionRule);
template FilterResult filter_by_model(const TaskDataset&, const ModelWeights<float>&, FilterPolicy, PredictionRule,
                                      int);
template FilterResult filter_by_model(const TaskDataset&, const ModelWeights<double>&, FilterPolicy, PredictionRule,
                                      int);

}  // namespace peap
