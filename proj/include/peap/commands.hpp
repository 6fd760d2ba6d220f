#ifndef PEAP_COMMANDS_HPP
#define PEAP_COMMANDS_HPP

#include "peap/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace peap {

struct GridSpec {
  std::vector<EdgeId> budgets;  // explicit list; overrides the geometric range when set
  EdgeId lo = 1, hi = 10000;
  int points = 16;

  std::vector<EdgeId> resolve(EdgeId max_edges) const;
};

// Everything one subcommand needs. Loaded from TOML, then overridden by flags.
struct RunConfig {
  std::string command;
  // Directory with config.json and model.safetensors. "gpt2-small" reads $PEAP_GPT2_DIR
  // and, for graph-stats only, falls back to the architecture alone.
  std::string model = "gpt2-small";
  std::filesystem::path vocab, merges;  // both empty: the shipped GPT-2 tokenizer
  std::string task = "greater-than";
  int count = 500;
  std::filesystem::path dataset;  // JSONL written by an earlier run; replaces generation
  bool filter = true;             // keep only prompts the model gets right (or biased-wrong)
  std::vector<PipelineMode> modes{PipelineMode::Positional};
  GridSpec grid;
  std::string ablation = "auto";  // counterfactual | mean | auto (the task's own)
  std::optional<ChatEndpointConfig> endpoint;
  AgentOptions agent;
  DiagnosticsOptions diagnostics;
  EdgeId budget = 1000;  // build-circuit / eval-circuit
  std::filesystem::path schema, applications, table, circuit;  // optional inputs
  std::filesystem::path out = "out";
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string precision = "float";  // float | double

  // Throws ConfigError naming the offending field.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static RunConfig from_toml(const std::filesystem::path& path);
  static RunConfig from_toml_string(const std::string& text, const std::string& source = "<string>");

  PipelineMode mode() const { return modes.front(); }
};

std::vector<std::string> command_names();

// Runs cfg.command and records its outputs in <out>/manifest.json. Errors surface as
// ConfigError, DataError or EndpointError.
void run_command(const RunConfig& cfg);

// Random GPT-2-shaped checkpoint (config.json + model.safetensors) for smoke runs.
void write_toy_model(const std::filesystem::path& dir, const ModelConfig& config, std::uint64_t seed);

int exit_code(ErrorKind kind);

}  // namespace peap

#endif  // PEAP_COMMANDS_HPP
