#ifndef PEAP_SCHEMA_AGENT_HPP
#define PEAP_SCHEMA_AGENT_HPP

#include "peap/attribution.hpp"
#include "peap/schema.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace peap {

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatEndpointConfig {
  // http(s)://host[:port] for a live service, mock:<transcript.jsonl> for replay.
  std::string base_url;
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string credential_env;  // name of the variable holding the bearer token; empty sends none
  double temperature = 0.0;
  int max_tokens = 2048;
  int attempts = 3;  // per example, and per generation call
  int timeout_s = 120;
  int max_concurrent = 4;
  std::filesystem::path transcript;  // request/response log; empty disables

  void validate() const;
  nlohmann::json to_json() const;  // never includes the credential itself
};

class ChatEndpoint {
 public:
  virtual ~ChatEndpoint() = default;
  // Returns the assistant text. Implementations must be safe to call concurrently.
  virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
};

// OpenAI-style chat completion over HTTP(S).
class HttpChatEndpoint : public ChatEndpoint {
 public:
  explicit HttpChatEndpoint(ChatEndpointConfig config);
  std::string complete(const std::vector<ChatMessage>& messages) override;

 private:
  ChatEndpointConfig config_;
  std::string token_;
};

// Deterministic replay. Script lines are JSON objects with a "response" and one of
//   "messages": exact request to answer (as written by the transcript logger),
//   "match":    substring that must occur in some message of the request,
//   neither:    answered in file order to requests nothing else claims.
// "times" limits how often a line may be used (default: once for exact and
// sequential lines, unlimited for match lines).
class MockChatEndpoint : public ChatEndpoint {
 public:
  using Responder = std::function<std::optional<std::string>(const std::vector<ChatMessage>&)>;

  MockChatEndpoint() = default;
  static std::unique_ptr<MockChatEndpoint> from_script(const std::filesystem::path& path);

  void add_exact(std::vector<ChatMessage> messages, std::string response, int times = 1);
  void add_match(std::string needle, std::string response, int times = -1);
  void add_sequential(std::string response);
  // Consulted after the script; lets tests compute replies from the request.
  void set_responder(Responder r) { responder_ = std::move(r); }

  std::string complete(const std::vector<ChatMessage>& messages) override;
  int calls() const;
  std::vector<std::vector<ChatMessage>> requests() const;

 private:
  struct Entry {
    enum Kind { Exact, Match, Sequential } kind;
    std::vector<ChatMessage> messages;
    std::string needle, response;
    int remaining;  // -1 = unlimited
  };
  mutable std::mutex mu_;
  std::vector<Entry> entries_;
  Responder responder_;
  std::vector<std::vector<ChatMessage>> requests_;
};

// Appends {"messages": [...], "response": "..."} lines to a JSONL file; the output is a
// valid mock script.
class LoggingChatEndpoint : public ChatEndpoint {
 public:
  LoggingChatEndpoint(std::unique_ptr<ChatEndpoint> inner, std::filesystem::path path);
  std::string complete(const std::vector<ChatMessage>& messages) override;

 private:
  std::unique_ptr<ChatEndpoint> inner_;
  std::filesystem::path path_;
  std::mutex mu_;
};

// HTTP or mock endpoint per config.base_url, wrapped in a logger when a transcript is set.
std::unique_ptr<ChatEndpoint> make_endpoint(const ChatEndpointConfig& config);

// First ```-fenced block that parses as JSON, else the first balanced {...} object in
// the text. Throws DataError when neither yields an object.
nlohmann::ordered_json extract_json(const std::string& text);

// System prompts; also handy as match keys for scripted mocks.
extern const char* const kGenerateSystemPrompt;
extern const char* const kUnifySystemPrompt;
extern const char* const kApplySystemPrompt;

std::string render_tokens(const std::vector<std::string>& tokens);
std::string generation_prompt(const std::vector<std::vector<std::string>>& group,
                              const std::vector<std::vector<bool>>* masks);
std::string unification_prompt(const std::vector<Schema>& candidates, const std::vector<std::vector<std::string>>& all,
                               const std::vector<std::vector<bool>>* masks);
std::string application_prompt(const Schema& schema, const std::vector<std::string>& tokens);
std::string application_retry_prompt(const Verdict& verdict);

struct ExampleOutcome {
  Verdict verdict;
  std::optional<SpanMap> map;
  int attempts = 0;
};

struct PipelineReport {
  std::string stage;  // "generate" or "apply"
  double threshold = 0;
  std::vector<ExampleOutcome> outcomes;
  std::vector<Schema> candidates;
  std::optional<Schema> unified;
  int valid = 0;
  int total = 0;
  bool accepted = false;
  int runs = 0;                  // full generation runs used
  std::vector<std::string> log;  // one line per notable event, including rejected runs

  double validity_rate() const { return total == 0 ? 0.0 : static_cast<double>(valid) / total; }
  nlohmann::ordered_json to_json() const;
};

struct AgentOptions {
  int group_size = 5;
  int groups = 3;
  double generation_threshold = 0.8;
  double application_threshold = 0.9;
  int runs = 3;  // generation runs before giving up
  int attempts = 3;
  int jobs = 1;
  ValidationOptions validation;
};

// Applies one schema to one example with up to `attempts` calls; retries carry the
// previous failures back to the labeller.
ExampleOutcome apply_one(const Schema& schema, const std::vector<std::string>& tokens, ChatEndpoint& endpoint,
                         const AgentOptions& options);

struct ApplicationResult {
  std::vector<std::optional<SpanMap>> maps;  // nullopt for examples that never validated
  PipelineReport report;
};

// Run-level success needs at least application_threshold of the examples valid.
// Throws EndpointError on transport failures.
ApplicationResult apply_schema(const Schema& schema, const std::vector<std::vector<std::string>>& examples,
                               ChatEndpoint& endpoint, const AgentOptions& options = {});

struct GenerationResult {
  Schema schema;  // the accepted unified schema
  PipelineReport report;
};

// Uses the first groups*group_size examples: one candidate per disjoint group, one
// unification call over all of them, then validation by application. Throws DataError
// when every run is rejected and EndpointError when a call keeps returning unusable JSON.
GenerationResult generate_schema(const std::vector<std::vector<std::string>>& sample,
                                 const std::vector<SaliencyMask>* masks, ChatEndpoint& endpoint,
                                 const AgentOptions& options = {});

// Seeded choice of k distinct indices out of n, in increasing order.
std::vector<int> sample_indices(int n, int k, std::uint64_t seed);

struct CorrectnessReport {
  std::vector<double> per_example;  // NaN where the labelled map is missing
  double mean = 0;                  // over examples with a map
  int compared = 0;
};

// Fraction of spans whose token range matches the reference exactly.
CorrectnessReport correctness_harness(const std::vector<std::optional<SpanMap>>& labelled,
                                      const std::vector<SpanMap>& reference);

}  // namespace peap

#endif  // PEAP_SCHEMA_AGENT_HPP
