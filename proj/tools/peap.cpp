#include "peap/commands.hpp"
#include "peap/common.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <optional>

namespace {

using peap::RunConfig;

// Flag values; anything left unset keeps the TOML (or default) value.
struct Flags {
  std::string config;
  std::optional<std::string> model, vocab, merges, task, dataset, ablation, out, precision;
  std::optional<std::string> schema, applications, table, circuit;
  std::optional<std::string> endpoint_url, endpoint_model, credential_env, transcript;
  std::optional<int> count, jobs, subsets, attempts, max_concurrent;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> budget;
  std::vector<std::string> modes;
  std::vector<std::int64_t> grid;
  std::optional<std::string> grid_range;
  std::vector<double> k_percent;
  bool no_filter = false, attention_edges = false, verbose = false, quiet = false;
};

void add_common(CLI::App& app, Flags& f) {
  app.add_option("--config", f.config, "TOML run configuration");
  app.add_option("--model", f.model, "checkpoint directory (config.json + model.safetensors) or gpt2-small");
  app.add_option("--vocab", f.vocab, "tokenizer vocab.json");
  app.add_option("--merges", f.merges, "tokenizer merges.txt");
  app.add_option("--task", f.task, "ioi-abba, ioi-baba, greater-than, winobias-<anti|pro>-<female|male>-<i|ii>");
  app.add_option("--count", f.count, "prompts to generate");
  app.add_option("--dataset", f.dataset, "JSONL dataset from an earlier run");
  app.add_flag("--no-filter", f.no_filter, "keep prompts the model gets wrong");
  app.add_option("--mode", f.modes, "pipeline mode(s): positional, schema:human, schema:llm, schema:llm+mask, nonpositional")
      ->delimiter(',');
  app.add_option("--grid", f.grid, "edge budgets, comma separated")->delimiter(',');
  app.add_option("--grid-range", f.grid_range, "geometric budgets lo:hi:points");
  app.add_option("--ablation", f.ablation, "counterfactual, mean or auto");
  app.add_option("--budget", f.budget, "edge budget for build-circuit / eval-circuit");
  app.add_option("--schema", f.schema, "schema JSON");
  app.add_option("--applications", f.applications, "span maps written by schema-apply");
  app.add_option("--table", f.table, "attribution table CSV");
  app.add_option("--circuit", f.circuit, "circuit JSON");
  app.add_option("--endpoint-url", f.endpoint_url, "chat endpoint base URL, or mock:<script.jsonl>");
  app.add_option("--endpoint-model", f.endpoint_model, "model name sent to the endpoint");
  app.add_option("--credential-env", f.credential_env, "environment variable holding the API token");
  app.add_option("--transcript", f.transcript, "append every chat exchange to this JSONL file");
  app.add_option("--attempts", f.attempts, "calls per example before giving up");
  app.add_option("--max-concurrent", f.max_concurrent, "parallel endpoint calls");
  app.add_option("--k", f.k_percent, "diagnostic K% levels, comma separated")->delimiter(',');
  app.add_option("--subsets", f.subsets, "control subsets for diagnostics");
  app.add_flag("--attention-edges", f.attention_edges, "include attention edges in diagnostics");
  app.add_option("--out", f.out, "output directory");
  app.add_option("--seed", f.seed, "seed for every sampling step");
  app.add_option("--jobs", f.jobs, "example-level parallelism");
  app.add_option("--precision", f.precision, "float or double");
  app.add_flag("-v,--verbose", f.verbose, "debug logging");
  app.add_flag("-q,--quiet", f.quiet, "warnings and errors only");
}

RunConfig resolve(const std::string& command, const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : RunConfig::from_toml(f.config);
  c.command = command;
  if (f.model) c.model = *f.model;
  if (f.vocab) c.vocab = *f.vocab;
  if (f.merges) c.merges = *f.merges;
  if (f.task) c.task = *f.task;
  if (f.count) c.count = *f.count;
  if (f.dataset) c.dataset = *f.dataset;
  if (f.no_filter) c.filter = false;
  if (!f.modes.empty()) {
    c.modes.clear();
    for (const auto& m : f.modes) c.modes.push_back(peap::pipeline_mode_from_string(m));
  }
  if (!f.grid.empty()) c.grid.budgets = f.grid;
  if (f.grid_range) {
    long long lo = 0, hi = 0;
    int points = 0;
    if (std::sscanf(f.grid_range->c_str(), "%lld:%lld:%d", &lo, &hi, &points) != 3)
      throw peap::ConfigError(fmt::format("grid-range: expected lo:hi:points, got '{}'", *f.grid_range));
    c.grid.budgets.clear();
    c.grid.lo = lo;
    c.grid.hi = hi;
    c.grid.points = points;
  }
  if (f.ablation) c.ablation = *f.ablation;
  if (f.budget) c.budget = *f.budget;
  if (f.schema) c.schema = *f.schema;
  if (f.applications) c.applications = *f.applications;
  if (f.table) c.table = *f.table;
  if (f.circuit) c.circuit = *f.circuit;
  if (f.endpoint_url || f.endpoint_model || f.credential_env || f.transcript || f.attempts || f.max_concurrent) {
    auto e = c.endpoint.value_or(peap::ChatEndpointConfig{});
    if (f.endpoint_url) e.base_url = *f.endpoint_url;
    if (f.endpoint_model) e.model = *f.endpoint_model;
    if (f.credential_env) e.credential_env = *f.credential_env;
    if (f.transcript) e.transcript = *f.transcript;
    if (f.attempts) e.attempts = *f.attempts;
    if (f.max_concurrent) e.max_concurrent = *f.max_concurrent;
    c.endpoint = e;
  }
  if (!f.k_percent.empty()) c.diagnostics.k_percent = f.k_percent;
  if (f.subsets) c.diagnostics.subsets = *f.subsets;
  if (f.attention_edges) c.diagnostics.attention_edges = true;
  if (f.out) c.out = *f.out;
  if (f.seed) c.seed = *f.seed;
  if (f.jobs) c.jobs = *f.jobs;
  if (f.precision) c.precision = *f.precision;
  return c;
}

struct ToyFlags {
  std::string out;
  int layers = 2, heads = 2, d_model = 16, vocab = 50257, positions = 64;
  std::uint64_t seed = 0;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Position-aware edge attribution patching and circuit discovery"};
  app.require_subcommand(1);
  Flags flags;
  std::string chosen;
  for (const auto& name : peap::command_names()) {
    auto* sub = app.add_subcommand(name);
    add_common(*sub, flags);
    sub->callback([&chosen, name] { chosen = name; });
  }
  ToyFlags toy;
  auto* toy_cmd = app.add_subcommand("toy-model", "write a random GPT-2-shaped checkpoint");
  toy_cmd->add_option("--out", toy.out, "output directory")->required();
  toy_cmd->add_option("--layers", toy.layers);
  toy_cmd->add_option("--heads", toy.heads);
  toy_cmd->add_option("--d-model", toy.d_model);
  toy_cmd->add_option("--vocab-size", toy.vocab);
  toy_cmd->add_option("--positions", toy.positions);
  toy_cmd->add_option("--seed", toy.seed)->required();
  toy_cmd->callback([&chosen] { chosen = "toy-model"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  spdlog::set_level(flags.verbose ? spdlog::level::debug : flags.quiet ? spdlog::level::warn : spdlog::level::info);
  try {
    if (chosen == "toy-model") {
      peap::ModelConfig c;
      c.n_layers = toy.layers;
      c.n_heads = toy.heads;
      c.d_model = toy.d_model;
      c.d_head = toy.heads > 0 ? toy.d_model / toy.heads : 0;
      c.d_mlp = 4 * toy.d_model;
      c.vocab_size = toy.vocab;
      c.max_positions = toy.positions;
      peap::write_toy_model(toy.out, c, toy.seed);
      fmt::print("wrote {}/config.json and {}/model.safetensors\n", toy.out, toy.out);
      return 0;
    }
    peap::run_command(resolve(chosen, flags));
  } catch (const peap::Error& e) {
    spdlog::error("{}", e.what());
    return peap::exit_code(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
