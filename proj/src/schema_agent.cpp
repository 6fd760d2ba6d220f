#include "peap/schema_agent.hpp"

#include "peap/parallel.hpp"

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <thread>

namespace peap {

using ojson = nlohmann::ordered_json;

namespace {

std::string dump(const ojson& j, int indent = -1) {
  return j.dump(indent, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

ojson messages_json(const std::vector<ChatMessage>& messages) {
  ojson a = ojson::array();
  for (const auto& m : messages) a.push_back({{"role", m.role}, {"content", m.content}});
  return a;
}

std::vector<ChatMessage> messages_from(const ojson& a) {
  std::vector<ChatMessage> out;
  for (const auto& m : a) out.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
  return out;
}

bool same(const std::vector<ChatMessage>& a, const std::vector<ChatMessage>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].role != b[i].role || a[i].content != b[i].content) return false;
  return true;
}

}  // namespace

void ChatEndpointConfig::validate() const {
  if (base_url.empty()) throw ConfigError("endpoint.base_url: required for LLM schema modes");
  const bool mock = base_url.rfind("mock:", 0) == 0;
  if (!mock && base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0)
    throw ConfigError(fmt::format("endpoint.base_url: '{}' is neither http(s):// nor mock:", base_url));
  if (!mock && model.empty()) throw ConfigError("endpoint.model: required for a live endpoint");
  if (attempts < 1) throw ConfigError("endpoint.attempts: must be at least 1");
  if (max_concurrent < 1) throw ConfigError("endpoint.max_concurrent: must be at least 1");
  if (temperature < 0) throw ConfigError("endpoint.temperature: must be non-negative");
  if (!credential_env.empty() && !mock && !std::getenv(credential_env.c_str()))
    throw ConfigError(fmt::format("endpoint.credential_env: variable {} is not set", credential_env));
}

nlohmann::json ChatEndpointConfig::to_json() const {
  return {{"base_url", base_url},       {"path", path},         {"model", model},
          {"credential_env", credential_env}, {"temperature", temperature}, {"max_tokens", max_tokens},
          {"attempts", attempts},       {"max_concurrent", max_concurrent}};
}

HttpChatEndpoint::HttpChatEndpoint(ChatEndpointConfig config) : config_(std::move(config)) {
  config_.validate();
  if (!config_.credential_env.empty()) token_ = std::getenv(config_.credential_env.c_str());
}

std::string HttpChatEndpoint::complete(const std::vector<ChatMessage>& messages) {
  const ojson body = {{"model", config_.model},
                      {"temperature", config_.temperature},
                      {"max_tokens", config_.max_tokens},
                      {"messages", messages_json(messages)}};
  httplib::Client cli(config_.base_url);
  cli.set_read_timeout(config_.timeout_s, 0);
  cli.set_write_timeout(config_.timeout_s, 0);
  cli.set_connection_timeout(30, 0);
  httplib::Headers headers;
  if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
  const std::string payload = dump(body);
  for (int attempt = 0;; ++attempt) {
    auto res = cli.Post(config_.path, headers, payload, "application/json");
    // rate limits and server hiccups get two more tries with backoff
    const bool transient = !res || res->status == 429 || res->status >= 500;
    if (transient && attempt < 2) {
      std::this_thread::sleep_for(std::chrono::seconds(2 << attempt));
      continue;
    }
    if (!res) throw EndpointError(fmt::format("{}{}: {}", config_.base_url, config_.path, httplib::to_string(res.error())));
    if (res->status != 200)
      throw EndpointError(fmt::format("{}{}: HTTP {}: {}", config_.base_url, config_.path, res->status,
                                      res->body.substr(0, 400)));
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw EndpointError(fmt::format("unexpected completion payload ({}): {}", e.what(), res->body.substr(0, 400)));
    }
  }
}

std::unique_ptr<MockChatEndpoint> MockChatEndpoint::from_script(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(fmt::format("mock endpoint: cannot open script {}", path.string()));
  auto mock = std::make_unique<MockChatEndpoint>();
  int no = 0;
  for (std::string line; std::getline(is, line);) {
    ++no;
    if (line.empty() || line[0] == '#') continue;
    try {
      const auto j = ojson::parse(line);
      auto response = j.at("response").get<std::string>();
      if (j.contains("messages"))
        mock->add_exact(messages_from(j["messages"]), std::move(response), j.value("times", 1));
      else if (j.contains("match"))
        mock->add_match(j["match"].get<std::string>(), std::move(response), j.value("times", -1));
      else
        mock->entries_.push_back({Entry::Sequential, {}, {}, std::move(response), j.value("times", 1)});
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("{}:{}: {}", path.string(), no, e.what()));
    }
  }
  return mock;
}

void MockChatEndpoint::add_exact(std::vector<ChatMessage> messages, std::string response, int times) {
  std::lock_guard lock(mu_);
  entries_.push_back({Entry::Exact, std::move(messages), {}, std::move(response), times});
}

void MockChatEndpoint::add_match(std::string needle, std::string response, int times) {
  std::lock_guard lock(mu_);
  entries_.push_back({Entry::Match, {}, std::move(needle), std::move(response), times});
}

void MockChatEndpoint::add_sequential(std::string response) {
  std::lock_guard lock(mu_);
  entries_.push_back({Entry::Sequential, {}, {}, std::move(response), 1});
}

std::string MockChatEndpoint::complete(const std::vector<ChatMessage>& messages) {
  std::unique_lock lock(mu_);
  requests_.push_back(messages);
  auto take = [](Entry& e) {
    if (e.remaining > 0) --e.remaining;
    return e.response;
  };
  for (auto kind : {Entry::Exact, Entry::Match, Entry::Sequential})
    for (auto& e : entries_) {
      if (e.kind != kind || e.remaining == 0) continue;
      if (kind == Entry::Exact && !same(e.messages, messages)) continue;
      if (kind == Entry::Match &&
          std::none_of(messages.begin(), messages.end(),
                       [&](const ChatMessage& m) { return m.content.find(e.needle) != std::string::npos; }))
        continue;
      return take(e);
    }
  auto responder = responder_;
  const auto index = requests_.size();
  lock.unlock();
  if (responder)
    if (auto r = responder(messages)) return *r;
  throw EndpointError(fmt::format("mock endpoint: no scripted response for request {}", index));
}

int MockChatEndpoint::calls() const {
  std::lock_guard lock(mu_);
  return static_cast<int>(requests_.size());
}

std::vector<std::vector<ChatMessage>> MockChatEndpoint::requests() const {
  std::lock_guard lock(mu_);
  return requests_;
}

LoggingChatEndpoint::LoggingChatEndpoint(std::unique_ptr<ChatEndpoint> inner, std::filesystem::path path)
    : inner_(std::move(inner)), path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

std::string LoggingChatEndpoint::complete(const std::vector<ChatMessage>& messages) {
  auto response = inner_->complete(messages);
  std::lock_guard lock(mu_);
  std::ofstream os(path_, std::ios::app);
  os << dump({{"messages", messages_json(messages)}, {"response", response}}) << '\n';
  return response;
}

std::unique_ptr<ChatEndpoint> make_endpoint(const ChatEndpointConfig& config) {
  config.validate();
  std::unique_ptr<ChatEndpoint> ep;
  if (config.base_url.rfind("mock:", 0) == 0)
    ep = MockChatEndpoint::from_script(config.base_url.substr(5));
  else
    ep = std::make_unique<HttpChatEndpoint>(config);
  if (!config.transcript.empty()) ep = std::make_unique<LoggingChatEndpoint>(std::move(ep), config.transcript);
  return ep;
}

namespace {

// End of the balanced object starting at `open`, honouring string literals.
std::size_t matching_brace(const std::string& s, std::size_t open) {
  int depth = 0;
  bool in_str = false, esc = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_str) {
      if (esc) esc = false;
      else if (c == '\\') esc = true;
      else if (c == '"') in_str = false;
      continue;
    }
    if (c == '"') in_str = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i;
  }
  return std::string::npos;
}

}  // namespace

ojson extract_json(const std::string& text) {
  for (std::size_t p = text.find("```"); p != std::string::npos;) {
    const auto body = text.find('\n', p);
    const auto close = body == std::string::npos ? std::string::npos : text.find("```", body);
    if (close == std::string::npos) break;
    try {
      auto j = ojson::parse(text.substr(body, close - body));
      if (j.is_object()) return j;
    } catch (const nlohmann::json::exception&) {
    }
    p = text.find("```", close + 3);
  }
  for (std::size_t open = text.find('{'); open != std::string::npos; open = text.find('{', open + 1)) {
    const auto close = matching_brace(text, open);
    if (close == std::string::npos) continue;
    try {
      auto j = ojson::parse(text.substr(open, close - open + 1));
      if (j.is_object()) return j;
    } catch (const nlohmann::json::exception&) {
    }
  }
  throw DataError("response did not contain a parsable JSON object");
}

const char* const kGenerateSystemPrompt =
    "You help analyse how a language model reads a family of prompts that share one structure. "
    "You design schemas: ordered lists of named spans that cut every prompt of the family into the same "
    "sequence of meaningful pieces.";
const char* const kUnifySystemPrompt =
    "You consolidate several draft schemas for the same prompt family into one schema that fits every "
    "example. A schema is an ordered list of named spans.";
const char* const kApplySystemPrompt =
    "You label prompt tokens with the spans of a given schema. You copy tokens exactly, including their "
    "leading spaces, and you answer with JSON only.";

std::string render_tokens(const std::vector<std::string>& tokens) { return dump(ojson(tokens)); }

namespace {

std::string render_mask(const std::vector<std::string>& tokens, const std::vector<bool>& mask) {
  ojson a = ojson::array();
  for (std::size_t i = 0; i < tokens.size(); ++i) a.push_back({tokens[i], mask[i] ? 1 : 0});
  return dump(a);
}

const char* const kSchemaRules =
    "Requirements for the schema:\n"
    "- Spans are listed in the order in which they occur in the prompts.\n"
    "- Every token of every example belongs to exactly one span, and each span is a contiguous run of tokens.\n"
    "- The last token of a prompt always forms the last span on its own.\n"
    "- The structure must be general: describe roles, not the particular words of one example.\n"
    "- Tokens whose role the model likely depends on (names, numbers, key verbs) deserve a span of their own.\n"
    "- Titles are short (one to three words) and unique.\n";

const char* const kMaskRules =
    "Each example also comes with a saliency mask: a list of [token, flag] pairs where flag 1 means the "
    "token mattered a lot to the model's answer. If tokens playing the same role are flagged in many "
    "examples, give that role its own single-token span. Do not mention the mask in titles or "
    "descriptions.\n";

const char* const kSchemaFormat =
    "Answer with one JSON object inside a ```json fenced block. Keys are span titles in prompt order, "
    "values are one-sentence descriptions of what the span holds, with an example or two.\n";

}  // namespace

std::string generation_prompt(const std::vector<std::vector<std::string>>& group,
                              const std::vector<std::vector<bool>>* masks) {
  std::string p = "Below are tokenized prompts from one dataset. Propose a schema that splits all of them, and "
                  "other prompts of the same kind, into the same ordered spans.\n\n";
  p += kSchemaRules;
  if (masks) p += kMaskRules;
  p += "\n";
  for (std::size_t x = 0; x < group.size(); ++x) {
    p += fmt::format("Example {}\nTokens: {}\n", x + 1, render_tokens(group[x]));
    if (masks) p += fmt::format("Mask: {}\n", render_mask(group[x], (*masks)[x]));
    p += "\n";
  }
  p += kSchemaFormat;
  return p;
}

std::string unification_prompt(const std::vector<Schema>& candidates, const std::vector<std::vector<std::string>>& all,
                               const std::vector<std::vector<bool>>* masks) {
  std::string p = "Several draft schemas were written for the same dataset, each from a different handful of "
                  "examples. Combine them into one schema that works for all examples listed afterwards.\n\n";
  p += kSchemaRules;
  if (masks) p += kMaskRules;
  p += "\n";
  for (std::size_t c = 0; c < candidates.size(); ++c)
    p += fmt::format("Draft {}:\n{}\n\n", c + 1, dump(candidates[c].to_json(), 2));
  for (std::size_t x = 0; x < all.size(); ++x) {
    p += fmt::format("Example {}\nTokens: {}\n", x + 1, render_tokens(all[x]));
    if (masks) p += fmt::format("Mask: {}\n", render_mask(all[x], (*masks)[x]));
  }
  p += "\n";
  p += kSchemaFormat;
  return p;
}

std::string application_prompt(const Schema& schema, const std::vector<std::string>& tokens) {
  return fmt::format(
      "Schema (span title: description), in order:\n{}\n\n"
      "Tokens:\n{}\n\n"
      "Assign the tokens to the spans of the schema. Answer with a JSON object mapping every span title, in "
      "schema order, to the list of tokens it covers, like {{\"title\": [\"tok\", ...]}}.\n"
      "Rules:\n"
      "- Use every title of the schema and no other titles.\n"
      "- Each token goes to exactly one span, and the spans read left to right reproduce the token list.\n"
      "- A span covers consecutive tokens only.\n"
      "- Punctuation without a span of its own joins the span of the token before it.\n"
      "- The last token goes alone into the last span.\n"
      "- Copy tokens character for character, keeping leading spaces.\n"
      "- A span that has no tokens in this prompt gets an empty list.\n",
      dump(schema.to_json(), 2), render_tokens(tokens));
}

std::string application_retry_prompt(const Verdict& verdict) {
  std::string p = "That assignment is not usable:\n";
  for (const auto& r : verdict.reasons) p += "- " + r + "\n";
  p += "Please answer again with a corrected JSON object that follows all of the rules.";
  return p;
}

ojson PipelineReport::to_json() const {
  ojson j;
  j["stage"] = stage;
  j["threshold"] = threshold;
  j["valid"] = valid;
  j["total"] = total;
  j["validity_rate"] = validity_rate();
  j["accepted"] = accepted;
  if (stage == "generate") j["runs"] = runs;
  if (unified) j["schema"] = unified->to_json();
  ojson cands = ojson::array();
  for (const auto& c : candidates) cands.push_back(c.to_json());
  if (!candidates.empty()) j["candidates"] = cands;
  ojson ex = ojson::array();
  for (const auto& o : outcomes)
    ex.push_back({{"valid", o.verdict.valid}, {"attempts", o.attempts}, {"reasons", o.verdict.reasons}});
  j["examples"] = ex;
  j["log"] = log;
  return j;
}

ExampleOutcome apply_one(const Schema& schema, const std::vector<std::string>& tokens, ChatEndpoint& endpoint,
                         const AgentOptions& options) {
  ExampleOutcome out;
  std::vector<ChatMessage> conv{{"system", kApplySystemPrompt}, {"user", application_prompt(schema, tokens)}};
  for (out.attempts = 1;; ++out.attempts) {
    const auto reply = endpoint.complete(conv);
    Verdict v;
    try {
      const auto res = resolve_application(schema, tokens, Application::from_json(extract_json(reply)),
                                           options.validation);
      v = res.verdict;
      if (res.map) {
        out.verdict = v;
        out.map = res.map;
        return out;
      }
    } catch (const DataError& e) {
      v.fail(e.what());
    }
    out.verdict = v;
    if (out.attempts >= options.attempts) return out;
    conv.push_back({"assistant", reply});
    conv.push_back({"user", application_retry_prompt(v)});
  }
}

namespace {

std::vector<ExampleOutcome> apply_all(const Schema& schema, const std::vector<std::vector<std::string>>& examples,
                                      ChatEndpoint& endpoint, const AgentOptions& options) {
  std::vector<ExampleOutcome> out(examples.size());
  parallel_for(static_cast<int>(examples.size()), options.jobs, [&](int x) {
    out[static_cast<std::size_t>(x)] = apply_one(schema, examples[static_cast<std::size_t>(x)], endpoint, options);
  });
  return out;
}

void tally(PipelineReport& r) {
  r.total = static_cast<int>(r.outcomes.size());
  r.valid = static_cast<int>(std::count_if(r.outcomes.begin(), r.outcomes.end(),
                                           [](const ExampleOutcome& o) { return o.map.has_value(); }));
  r.accepted = r.total > 0 && r.validity_rate() >= r.threshold;
}

Schema ask_schema(ChatEndpoint& endpoint, const char* system, const std::string& prompt, int attempts,
                  std::vector<std::string>& log, const std::string& what) {
  std::vector<ChatMessage> conv{{"system", system}, {"user", prompt}};
  std::vector<std::string> errors;
  for (int a = 1; a <= attempts; ++a) {
    const auto reply = endpoint.complete(conv);
    try {
      auto s = Schema::from_json(extract_json(reply));
      s.validate();
      return s;
    } catch (const Error& e) {
      errors.push_back(fmt::format("attempt {}: {}", a, e.what()));
      log.push_back(fmt::format("{}: {}", what, errors.back()));
      conv.push_back({"assistant", reply});
      conv.push_back({"user", fmt::format("I could not read a schema from that answer ({}). Reply with only the JSON "
                                          "object of span titles and descriptions in a ```json block.",
                                          e.what())});
    }
  }
  std::string msg = fmt::format("{}: no usable schema after {} attempts", what, attempts);
  for (const auto& e : errors) msg += "\n  " + e;
  throw EndpointError(msg);
}

}  // namespace

ApplicationResult apply_schema(const Schema& schema, const std::vector<std::vector<std::string>>& examples,
                               ChatEndpoint& endpoint, const AgentOptions& options) {
  schema.validate();
  ApplicationResult res;
  auto& r = res.report;
  r.stage = "apply";
  r.threshold = options.application_threshold;
  r.unified = schema;
  r.outcomes = apply_all(schema, examples, endpoint, options);
  tally(r);
  for (const auto& o : r.outcomes) res.maps.push_back(o.map);
  r.log.push_back(fmt::format("{} of {} examples valid ({:.1f}%), threshold {:.0f}%: run {}", r.valid, r.total,
                              100.0 * r.validity_rate(), 100.0 * r.threshold, r.accepted ? "accepted" : "rejected"));
  if (r.valid < r.total) r.log.push_back(fmt::format("{} invalid examples excluded downstream", r.total - r.valid));
  spdlog::info("schema application: {}", r.log.front());
  return res;
}

GenerationResult generate_schema(const std::vector<std::vector<std::string>>& sample,
                                 const std::vector<SaliencyMask>* masks, ChatEndpoint& endpoint,
                                 const AgentOptions& options) {
  const int need = options.groups * options.group_size;
  if (static_cast<int>(sample.size()) < need)
    throw DataError(fmt::format("schema generation needs {} examples, got {}", need, sample.size()));
  if (masks && masks->size() < static_cast<std::size_t>(need))
    throw DataError("schema generation: one saliency mask per sampled example is required");
  std::vector<std::vector<std::string>> all(sample.begin(), sample.begin() + need);
  std::vector<std::vector<bool>> mask_bits;
  if (masks)
    for (int x = 0; x < need; ++x) {
      const auto& m = (*masks)[static_cast<std::size_t>(x)].mask;
      if (m.size() != all[static_cast<std::size_t>(x)].size())
        throw DataError(fmt::format("schema generation: mask {} has {} entries for {} tokens", x, m.size(),
                                    all[static_cast<std::size_t>(x)].size()));
      mask_bits.push_back(m);
    }
  const auto* bits = masks ? &mask_bits : nullptr;

  GenerationResult res;
  auto& r = res.report;
  r.stage = "generate";
  r.threshold = options.generation_threshold;
  for (r.runs = 1; r.runs <= options.runs; ++r.runs) {
    r.candidates.clear();
    for (int g = 0; g < options.groups; ++g) {
      const auto lo = static_cast<std::size_t>(g * options.group_size);
      const std::vector<std::vector<std::string>> group(all.begin() + lo, all.begin() + lo + options.group_size);
      std::vector<std::vector<bool>> gbits;
      if (bits) gbits.assign(bits->begin() + lo, bits->begin() + lo + options.group_size);
      r.candidates.push_back(ask_schema(endpoint, kGenerateSystemPrompt, generation_prompt(group, bits ? &gbits : nullptr),
                                        options.attempts, r.log, fmt::format("run {} group {}", r.runs, g + 1)));
    }
    r.unified = ask_schema(endpoint, kUnifySystemPrompt, unification_prompt(r.candidates, all, bits),
                           options.attempts, r.log, fmt::format("run {} unification", r.runs));
    r.outcomes = apply_all(*r.unified, all, endpoint, options);
    tally(r);
    r.log.push_back(fmt::format("run {}: {} spans, {} of {} examples valid ({:.1f}%), threshold {:.0f}%: {}", r.runs,
                                r.unified->size(), r.valid, r.total, 100.0 * r.validity_rate(), 100.0 * r.threshold,
                                r.accepted ? "accepted" : "rejected"));
    spdlog::info("schema generation {}", r.log.back());
    if (r.accepted) {
      res.schema = *r.unified;
      return res;
    }
  }
  r.runs = options.runs;
  std::string msg = fmt::format("schema generation rejected in all {} runs", options.runs);
  for (const auto& l : r.log) msg += "\n  " + l;
  throw DataError(msg);
}

std::vector<int> sample_indices(int n, int k, std::uint64_t seed) {
  if (k > n) throw DataError(fmt::format("cannot sample {} of {} examples", k, n));
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < k; ++i) {
    const int j = std::uniform_int_distribution<int>(i, n - 1)(rng);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

CorrectnessReport correctness_harness(const std::vector<std::optional<SpanMap>>& labelled,
                                      const std::vector<SpanMap>& reference) {
  if (labelled.size() != reference.size())
    throw DataError(fmt::format("correctness: {} labelled maps for {} references", labelled.size(), reference.size()));
  CorrectnessReport r;
  double sum = 0;
  for (std::size_t x = 0; x < labelled.size(); ++x) {
    if (!labelled[x]) {
      r.per_example.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const auto& a = labelled[x]->ranges;
    const auto& b = reference[x].ranges;
    if (a.size() != b.size() || a.empty())
      throw DataError(fmt::format("correctness: example {} has {} spans against {} in the reference", x, a.size(),
                                  b.size()));
    int same = 0;
    for (std::size_t k = 0; k < a.size(); ++k) same += a[k] == b[k];
    r.per_example.push_back(static_cast<double>(same) / static_cast<double>(a.size()));
    sum += r.per_example.back();
    ++r.compared;
  }
  r.mean = r.compared ? sum / r.compared : 0.0;
  return r;
}

}  // namespace peap
