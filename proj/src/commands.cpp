#include "peap/commands.hpp"

#include "peap/common.hpp"
#include "peap/model.hpp"
#include "peap/parallel.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>
#include <tomlplusplus/toml.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace peap {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::vector<EdgeId> GridSpec::resolve(EdgeId max_edges) const {
  if (!budgets.empty()) return budgets;
  return geometric_grid(std::min(lo, max_edges), std::min(hi, max_edges), points);
}

std::vector<std::string> command_names() {
  return {"graph-stats", "attribute",     "diagnose",     "schema-gen", "schema-apply",
          "schema-validate", "build-circuit", "eval-circuit", "curve",      "run-task"};
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Endpoint: return 4;
  }
  return 1;
}

namespace {

std::string to_string(RankVariant v) { return v == RankVariant::AbsentLast ? "absent-last" : "union-scores"; }

RankVariant rank_variant_from_string(const std::string& s) {
  if (s == "absent-last") return RankVariant::AbsentLast;
  if (s == "union-scores") return RankVariant::UnionScores;
  throw ConfigError(fmt::format("diagnostics.variant: unknown value '{}' (absent-last or union-scores)", s));
}

// Typed access to a TOML table that rejects unknown keys.
class TomlReader {
 public:
  TomlReader(const toml::table& t, std::string prefix) : t_(t), prefix_(std::move(prefix)) {}

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto* node = t_.get(key);
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      out = require(node->value<bool>(), key, "a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      out = static_cast<T>(require(node->value<std::int64_t>(), key, "an integer"));
    } else if constexpr (std::is_floating_point_v<T>) {
      out = static_cast<T>(require(node->value<double>(), key, "a number"));
    } else if constexpr (std::is_same_v<T, fs::path>) {
      out = require(node->value<std::string>(), key, "a string");
    } else {
      out = require(node->value<std::string>(), key, "a string");
    }
  }

  template <typename T>
  void get_list(const char* key, std::vector<T>& out) {
    seen_.insert(key);
    const auto* node = t_.get(key);
    if (!node) return;
    const auto* arr = node->as_array();
    if (!arr) throw ConfigError(fmt::format("{}: expected an array", name(key)));
    out.clear();
    for (const auto& v : *arr) {
      if constexpr (std::is_same_v<T, std::string>)
        out.push_back(require(v.value<std::string>(), key, "an array of strings"));
      else if constexpr (std::is_integral_v<T>)
        out.push_back(static_cast<T>(require(v.value<std::int64_t>(), key, "an array of integers")));
      else
        out.push_back(static_cast<T>(require(v.value<double>(), key, "an array of numbers")));
    }
  }

  const toml::table* sub(const char* key) {
    seen_.insert(key);
    const auto* node = t_.get(key);
    if (!node) return nullptr;
    if (!node->is_table()) throw ConfigError(fmt::format("{}: expected a table", name(key)));
    return node->as_table();
  }

  void finish() const {
    for (const auto& [k, v] : t_)
      if (!seen_.count(std::string(k.str()))) throw ConfigError(fmt::format("{}: unknown field", name(k.str())));
  }

 private:
  template <typename T>
  T require(std::optional<T> v, std::string_view key, const char* what) const {
    if (!v) throw ConfigError(fmt::format("{}: expected {}", name(key), what));
    return *v;
  }
  std::string name(std::string_view key) const { return prefix_.empty() ? std::string(key) : prefix_ + "." + std::string(key); }

  const toml::table& t_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace

RunConfig RunConfig::from_toml_string(const std::string& text, const std::string& source) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    const auto& b = e.source().begin;
    throw ConfigError(fmt::format("{}:{}:{}: {}", source, b.line, b.column, e.description()));
  }
  RunConfig c;
  TomlReader r(root, "");
  r.get("model", c.model);
  r.get("task", c.task);
  r.get("count", c.count);
  r.get("dataset", c.dataset);
  r.get("filter", c.filter);
  std::vector<std::string> modes;
  std::string mode;
  r.get("mode", mode);
  r.get_list("modes", modes);
  if (!mode.empty() && !modes.empty()) throw ConfigError("mode: give either mode or modes, not both");
  if (!mode.empty()) modes = {mode};
  if (!modes.empty()) {
    c.modes.clear();
    for (const auto& m : modes) c.modes.push_back(pipeline_mode_from_string(m));
  }
  r.get("ablation", c.ablation);
  r.get("budget", c.budget);
  r.get("schema", c.schema);
  r.get("applications", c.applications);
  r.get("table", c.table);
  r.get("circuit", c.circuit);
  r.get("out", c.out);
  std::int64_t seed = -1;
  r.get("seed", seed);
  if (root.get("seed")) {
    if (seed < 0) throw ConfigError("seed: must be non-negative");
    c.seed = static_cast<std::uint64_t>(seed);
  }
  r.get("jobs", c.jobs);
  r.get("precision", c.precision);
  if (const auto* t = r.sub("tokenizer")) {
    TomlReader s(*t, "tokenizer");
    s.get("vocab", c.vocab);
    s.get("merges", c.merges);
    s.finish();
  }
  if (const auto* t = r.sub("grid")) {
    TomlReader s(*t, "grid");
    s.get_list("budgets", c.grid.budgets);
    s.get("lo", c.grid.lo);
    s.get("hi", c.grid.hi);
    s.get("points", c.grid.points);
    s.finish();
  }
  if (const auto* t = r.sub("endpoint")) {
    TomlReader s(*t, "endpoint");
    ChatEndpointConfig e;
    s.get("base_url", e.base_url);
    s.get("path", e.path);
    s.get("model", e.model);
    s.get("credential_env", e.credential_env);
    s.get("temperature", e.temperature);
    s.get("max_tokens", e.max_tokens);
    s.get("attempts", e.attempts);
    s.get("timeout_s", e.timeout_s);
    s.get("max_concurrent", e.max_concurrent);
    s.get("transcript", e.transcript);
    s.finish();
    c.endpoint = e;
  }
  if (const auto* t = r.sub("agent")) {
    TomlReader s(*t, "agent");
    s.get("group_size", c.agent.group_size);
    s.get("groups", c.agent.groups);
    s.get("generation_threshold", c.agent.generation_threshold);
    s.get("application_threshold", c.agent.application_threshold);
    s.get("runs", c.agent.runs);
    s.get("strict_final", c.agent.validation.strict_final);
    s.get("allow_empty", c.agent.validation.allow_empty);
    s.finish();
  }
  if (const auto* t = r.sub("diagnostics")) {
    TomlReader s(*t, "diagnostics");
    s.get_list("k_percent", c.diagnostics.k_percent);
    s.get("subsets", c.diagnostics.subsets);
    s.get("attention_edges", c.diagnostics.attention_edges);
    std::string variant;
    s.get("variant", variant);
    if (!variant.empty()) c.diagnostics.variant = rank_variant_from_string(variant);
    s.finish();
  }
  r.finish();
  return c;
}

RunConfig RunConfig::from_toml(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(fmt::format("config: cannot open {}", path.string()));
  std::stringstream ss;
  ss << is.rdbuf();
  return from_toml_string(ss.str(), path.string());
}

void RunConfig::validate() const {
  const auto names = command_names();
  if (!command.empty() && std::find(names.begin(), names.end(), command) == names.end())
    throw ConfigError(fmt::format("command: unknown subcommand '{}'", command));
  if (model.empty()) throw ConfigError("model: must not be empty");
  if (vocab.empty() != merges.empty()) throw ConfigError("tokenizer: give both vocab and merges, or neither");
  TaskId::parse(task);
  if (count < 1) throw ConfigError(fmt::format("count: must be positive, got {}", count));
  if (modes.empty()) throw ConfigError("modes: at least one pipeline mode is required");
  if (ablation != "auto") ablation_mode_from_string(ablation);
  if (grid.budgets.empty()) {
    if (grid.lo < 1 || grid.hi < grid.lo) throw ConfigError(fmt::format("grid: need 1 <= lo <= hi, got {}..{}", grid.lo, grid.hi));
    if (grid.points < 1) throw ConfigError("grid.points: must be positive");
  }
  for (auto b : grid.budgets)
    if (b < 1) throw ConfigError(fmt::format("grid.budgets: every budget must be positive, got {}", b));
  if (budget < 1) throw ConfigError("budget: must be positive");
  if (jobs < 1) throw ConfigError("jobs: must be at least 1");
  if (precision != "float" && precision != "double")
    throw ConfigError(fmt::format("precision: expected float or double, got '{}'", precision));
  if (out.empty()) throw ConfigError("out: output directory must be set");
  if (endpoint) endpoint->validate();
  const bool llm = std::any_of(modes.begin(), modes.end(), needs_endpoint);
  if (llm && !endpoint && applications.empty())
    throw ConfigError(fmt::format("endpoint: mode {} needs an [endpoint] section (or an applications file)",
                                  to_string(*std::find_if(modes.begin(), modes.end(), needs_endpoint))));
  if (!seed && (dataset.empty() || llm)) throw ConfigError("seed: required for dataset generation and schema sampling");
  if (agent.generation_threshold <= 0 || agent.generation_threshold > 1)
    throw ConfigError("agent.generation_threshold: must lie in (0, 1]");
  if (agent.application_threshold <= 0 || agent.application_threshold > 1)
    throw ConfigError("agent.application_threshold: must lie in (0, 1]");
  if (agent.group_size < 1 || agent.groups < 1 || agent.runs < 1)
    throw ConfigError("agent: group_size, groups and runs must be positive");
  if (diagnostics.k_percent.empty()) throw ConfigError("diagnostics.k_percent: must not be empty");
  for (double k : diagnostics.k_percent)
    if (k <= 0 || k > 100) throw ConfigError(fmt::format("diagnostics.k_percent: {} is outside (0, 100]", k));
  if (diagnostics.subsets < 2) throw ConfigError("diagnostics.subsets: need at least 2");
  if ((command == "build-circuit" || command == "eval-circuit" || command == "schema-gen" ||
       command == "schema-apply") &&
      modes.size() != 1)
    throw ConfigError(fmt::format("modes: {} takes a single mode", command));
  if ((command == "schema-gen" || command == "schema-apply") && !needs_endpoint(mode()))
    throw ConfigError(fmt::format("mode: {} needs schema:llm or schema:llm+mask", command));
  if (!table.empty() && modes.size() != 1) throw ConfigError("table: an input table fixes a single mode");
  if (!applications.empty() && modes.size() != 1) throw ConfigError("applications: an input file fixes a single mode");
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["command"] = command;
  j["model"] = model;
  j["tokenizer"] = {{"vocab", vocab.string()}, {"merges", merges.string()}};
  j["task"] = task;
  j["count"] = count;
  j["dataset"] = dataset.string();
  j["filter"] = filter;
  std::vector<std::string> m;
  for (auto x : modes) m.push_back(to_string(x));
  j["modes"] = m;
  j["grid"] = {{"budgets", grid.budgets}, {"lo", grid.lo}, {"hi", grid.hi}, {"points", grid.points}};
  j["ablation"] = ablation;
  j["endpoint"] = endpoint ? ordered_json(endpoint->to_json()) : ordered_json(nullptr);
  j["agent"] = {{"group_size", agent.group_size},
                {"groups", agent.groups},
                {"generation_threshold", agent.generation_threshold},
                {"application_threshold", agent.application_threshold},
                {"runs", agent.runs},
                {"strict_final", agent.validation.strict_final},
                {"allow_empty", agent.validation.allow_empty}};
  j["diagnostics"] = {{"k_percent", diagnostics.k_percent},
                      {"subsets", diagnostics.subsets},
                      {"attention_edges", diagnostics.attention_edges},
                      {"variant", to_string(diagnostics.variant)}};
  j["budget"] = budget;
  j["inputs"] = {{"schema", schema.string()},
                 {"applications", applications.string()},
                 {"table", table.string()},
                 {"circuit", circuit.string()}};
  j["out"] = out.string();
  j["seed"] = seed ? ordered_json(*seed) : ordered_json(nullptr);
  j["jobs"] = jobs;
  j["precision"] = precision;
  return j;
}

void write_toy_model(const fs::path& dir, const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << config.to_json().dump(2) << '\n';
  save_weights(dir / "model.safetensors", random_weights(config, seed));
}

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError(fmt::format("cannot open {}", p.string()));
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ordered_json read_json(const fs::path& p) {
  try {
    return ordered_json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: {}", p.string(), e.what()));
  }
}

void write_json(const fs::path& p, const ordered_json& j) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError(fmt::format("cannot write {}", p.string()));
  os << j.dump(2) << '\n';
}

std::string hex(std::uint64_t h) { return fmt::format("{:016x}", h); }

// Files written by one command, recorded under its name in <out>/manifest.json.
class Manifest {
 public:
  explicit Manifest(const RunConfig& cfg) : cfg_(cfg) {}

  fs::path path(const std::string& name) {
    files_.insert(name);
    return cfg_.out / name;
  }
  void note(const std::string& key, ordered_json v) { notes_[key] = std::move(v); }

  void write() const {
    const auto file = cfg_.out / "manifest.json";
    ordered_json m = fs::exists(file) ? read_json(file) : ordered_json::object();
    if (!m.contains("commands")) m["commands"] = ordered_json::object();
    ordered_json entry;
    entry["config"] = cfg_.to_json();
    ordered_json outputs = ordered_json::array();
    for (const auto& f : files_) {
      const auto p = cfg_.out / f;
      if (!fs::exists(p)) continue;
      const auto bytes = read_file(p);
      outputs.push_back({{"file", f}, {"bytes", bytes.size()}, {"fnv1a", hex(fnv1a(bytes))}});
    }
    entry["outputs"] = outputs;
    if (!notes_.empty()) entry["notes"] = notes_;
    m["commands"][cfg_.command] = entry;
    write_json(file, m);
  }

 private:
  const RunConfig& cfg_;
  std::set<std::string> files_;
  ordered_json notes_ = ordered_json::object();
};

std::optional<fs::path> model_dir(const RunConfig& cfg) {
  if (cfg.model != "gpt2-small") return fs::path(cfg.model);
  if (const char* env = std::getenv("PEAP_GPT2_DIR"); env && *env) return fs::path(env);
  return std::nullopt;
}

ordered_json map_json(const std::optional<SpanMap>& m) { return m ? ordered_json(m->to_json()) : ordered_json(nullptr); }

template <typename Scalar>
class Session {
 public:
  Session(const RunConfig& cfg, Manifest& manifest) : cfg_(cfg), manifest_(manifest) {
    if (!cfg.vocab.empty()) {
      own_tok_ = std::make_unique<Tokenizer>(Tokenizer::load(cfg.vocab, cfg.merges));
      tok_ = own_tok_.get();
    } else {
      tok_ = &Tokenizer::gpt2();
    }
  }

  const Tokenizer& tok() const { return *tok_; }

  // Reads the model; when `needed` is false a missing gpt2-small checkpoint leaves only
  // the architecture.
  void load_model(bool needed) {
    if (weights_ || (!needed && config_)) return;
    const auto dir = model_dir(cfg_);
    if (!dir) {
      if (needed)
        throw ConfigError("model: gpt2-small weights not found; set PEAP_GPT2_DIR or pass a checkpoint directory");
      config_ = ModelConfig::gpt2_small();
      spdlog::warn("model: no gpt2-small checkpoint; using the architecture only, dataset left unfiltered");
      return;
    }
    if (!fs::exists(*dir / "config.json") || !fs::exists(*dir / "model.safetensors"))
      throw ConfigError(fmt::format("model: {} must hold config.json and model.safetensors", dir->string()));
    config_ = ModelConfig::from_json(nlohmann::json::parse(read_file(*dir / "config.json")));
    if (tok_->vocab_size() > config_->vocab_size)
      throw ConfigError(fmt::format("tokenizer: {} tokens but the model has only {}", tok_->vocab_size(),
                                    config_->vocab_size));
    auto w = load_weights(*dir / "model.safetensors", *config_);
    if constexpr (std::is_same_v<Scalar, float>)
      weights_ = std::move(w);
    else
      weights_ = w.template cast<Scalar>();
  }

  const ModelConfig& config() {
    load_model(false);
    return *config_;
  }
  const ModelWeights<Scalar>& weights() {
    load_model(true);
    return *weights_;
  }

  const TaskDataset& dataset() {
    if (ds_) return *ds_;
    if (!cfg_.dataset.empty()) {
      ds_ = load_dataset(cfg_.dataset);
      manifest_.note("dataset", {{"source", cfg_.dataset.string()}, {"examples", ds_->size()}});
    } else {
      ds_ = generate_task(TaskId::parse(cfg_.task), cfg_.count, *cfg_.seed, *tok_);
      ordered_json note = {{"task", cfg_.task}, {"generated", ds_->size()}};
      if (cfg_.filter && weights_) {
        const auto policy = default_policy(ds_->task);
        auto f = filter_by_model(*ds_, *weights_, policy, PredictionRule::Pairwise, cfg_.jobs);
        spdlog::info("filter ({}): kept {} of {} prompts ({:.1f}%)", to_string(policy), f.kept, f.total,
                     100 * f.rate());
        note["filter"] = {{"policy", to_string(policy)}, {"kept", f.kept}, {"total", f.total}};
        if (f.kept == 0) throw DataError("no prompt survives the model filter");
        ds_ = std::move(f.dataset);
      }
      manifest_.note("dataset", note);
    }
    manifest_.note("dataset_hash", hex(ds_->hash()));
    save_dataset(manifest_.path("dataset.jsonl"), *ds_);
    return *ds_;
  }

  AblationMode ablation() {
    if (cfg_.ablation != "auto") return ablation_mode_from_string(cfg_.ablation);
    return dataset().mean_ablation() ? AblationMode::Mean : AblationMode::Counterfactual;
  }

  ChatEndpoint& chat() {
    if (!endpoint_) {
      if (!cfg_.endpoint) throw ConfigError("endpoint: this step calls the schema agent; add an [endpoint] section");
      endpoint_ = make_endpoint(*cfg_.endpoint);
    }
    return *endpoint_;
  }

  AgentOptions agent() const {
    AgentOptions a = cfg_.agent;
    a.jobs = cfg_.jobs;
    if (cfg_.endpoint) {
      a.attempts = cfg_.endpoint->attempts;
      a.jobs = std::min(a.jobs, cfg_.endpoint->max_concurrent);
    }
    return a;
  }

  fs::path schema_file(PipelineMode m) const { return cfg_.out / fmt::format("schema-{}.json", file_tag(m)); }
  fs::path applications_file(PipelineMode m) const {
    return cfg_.applications.empty() ? cfg_.out / fmt::format("applications-{}.json", file_tag(m)) : cfg_.applications;
  }

  Schema generate(PipelineMode m) {
    const auto& ds = dataset();
    const auto opt = agent();
    const int want = opt.groups * opt.group_size;
    if (ds.size() < want)
      throw DataError(fmt::format("schema generation needs {} examples, dataset has {}", want, ds.size()));
    const auto picked = sample_indices(ds.size(), want, *cfg_.seed);
    std::vector<std::vector<std::string>> sample;
    for (int i : picked) sample.push_back(token_strings(*tok_, ds.examples[static_cast<std::size_t>(i)].tokens));
    std::vector<SaliencyMask> masks;
    if (m == PipelineMode::SchemaLlmMask) {
      const auto& w = weights();
      masks.resize(picked.size());
      parallel_for(static_cast<int>(picked.size()), cfg_.jobs, [&](int k) {
        const auto& ex = ds.examples[static_cast<std::size_t>(picked[static_cast<std::size_t>(k)])];
        const auto trace = forward(w, ex.tokens);
        masks[static_cast<std::size_t>(k)] = saliency_mask(trace, backward(w, trace, ex.metric));
      });
    }
    auto gen = generate_schema(sample, masks.empty() ? nullptr : &masks, chat(), opt);
    write_json(manifest_.path(fmt::format("schema-{}.json", file_tag(m))), gen.schema.to_json());
    ordered_json report = gen.report.to_json();
    report["sample"] = picked;
    write_json(manifest_.path(fmt::format("schema-generation-{}.json", file_tag(m))), report);
    fmt::print("schema ({} spans, {} run(s)): {}\n", gen.schema.size(), gen.report.runs,
               fmt::join(gen.schema.titles(), " | "));
    return gen.schema;
  }

  void apply(PipelineMode m) {
    const auto& ds = dataset();
    fs::path sf = cfg_.schema.empty() ? schema_file(m) : cfg_.schema;
    Schema schema;
    if (fs::exists(sf)) {
      schema = Schema::from_json(read_json(sf));
    } else if (cfg_.schema.empty()) {
      schema = generate(m);
    } else {
      throw ConfigError(fmt::format("schema: cannot open {}", sf.string()));
    }
    std::vector<std::vector<std::string>> all, refs;
    for (const auto& ex : ds.examples) all.push_back(token_strings(*tok_, ex.tokens));
    for (const auto& r : ds.references) refs.push_back(token_strings(*tok_, r.tokens));
    const auto opt = agent();
    auto app = apply_schema(schema, all, chat(), opt);
    ordered_json j;
    j["mode"] = to_string(m);
    j["dataset_hash"] = hex(ds.hash());
    j["schema"] = schema.to_json();
    ordered_json ex = ordered_json::array(), rs = ordered_json::array();
    for (std::size_t i = 0; i < all.size(); ++i)
      ex.push_back({{"id", ds.examples[i].id}, {"map", map_json(app.maps[i])}});
    ordered_json ref_report = nullptr;
    if (!refs.empty()) {
      auto ra = apply_schema(schema, refs, chat(), opt);
      for (std::size_t i = 0; i < refs.size(); ++i)
        rs.push_back({{"id", ds.references[i].id}, {"map", map_json(ra.maps[i])}});
      ref_report = ra.report.to_json();
    }
    j["examples"] = ex;
    j["references"] = rs;
    j["report"] = app.report.to_json();
    j["reference_report"] = ref_report;
    const auto name = fmt::format("applications-{}.json", file_tag(m));
    write_json(manifest_.path(name), j);
    fmt::print("applied schema: {}/{} valid ({:.1f}%), {}\n", app.report.valid, app.report.total,
               100 * app.report.validity_rate(), app.report.accepted ? "accepted" : "below threshold");
  }

  struct LoadedApplications {
    Schema schema;
    std::vector<std::optional<SpanMap>> maps, refs;
  };

  LoadedApplications load_applications(PipelineMode m, bool generate_if_missing) {
    auto file = applications_file(m);
    if (!fs::exists(file)) {
      if (!generate_if_missing || !cfg_.applications.empty())
        throw ConfigError(fmt::format("applications: cannot open {}; run schema-apply first", file.string()));
      apply(m);
    }
    const auto j = read_json(file);
    const auto& ds = dataset();
    LoadedApplications out;
    try {
      if (j.at("dataset_hash").template get<std::string>() != hex(ds.hash()))
        throw DataError(fmt::format("{}: written for a different dataset", file.string()));
      out.schema = Schema::from_json(j.at("schema"));
      auto read = [&](const ordered_json& arr, std::size_t n, const char* what) {
        if (arr.size() != n) throw DataError(fmt::format("{}: {} {} maps for {} prompts", file.string(), arr.size(), what, n));
        std::vector<std::optional<SpanMap>> v;
        for (const auto& e : arr)
          v.push_back(e.at("map").is_null() ? std::nullopt
                                             : std::optional<SpanMap>(SpanMap::from_json(nlohmann::json(e.at("map")))));
        return v;
      };
      out.maps = read(j.at("examples"), ds.examples.size(), "example");
      out.refs = read(j.at("references"), j.at("references").empty() ? 0 : ds.references.size(), "reference");
    } catch (const nlohmann::json::exception& e) {
      throw DataError(fmt::format("{}: {}", file.string(), e.what()));
    }
    return out;
  }

  const Abstraction& abstraction(PipelineMode m) {
    if (auto it = abstractions_.find(m); it != abstractions_.end()) return it->second;
    const auto& ds = dataset();
    const auto& cfg = config();
    auto make = [&]() {
      switch (m) {
        case PipelineMode::Positional: return positional_abstraction(ds, cfg);
        case PipelineMode::NonPositional: return nonpositional_abstraction(ds, cfg);
        case PipelineMode::SchemaHuman: return human_abstraction(ds, cfg);
        default: {
          auto la = load_applications(m, true);
          return schema_abstraction(ds, cfg, m, la.schema, la.maps, la.refs);
        }
      }
    };
    auto a = make();
    if (a.size() < ds.size())
      spdlog::warn("{}: {} of {} examples have a valid span map; the rest are left out", to_string(m), a.size(),
                   ds.size());
    return abstractions_.emplace(m, std::move(a)).first->second;
  }

  const SourceProvider<Scalar>& sources(PipelineMode m) {
    if (auto it = sources_.find(m); it != sources_.end()) return it->second;
    const auto& a = abstraction(m);
    return sources_.emplace(m, SourceProvider<Scalar>(weights(), dataset(), a, ablation(), cfg_.jobs)).first->second;
  }

  std::string table_name(PipelineMode m) const { return fmt::format("attribution-{}.csv", file_tag(m)); }

  AttributionTable compute_table(PipelineMode m) {
    const auto& a = abstraction(m);
    auto table = attribute_abstraction(weights(), dataset(), a, sources(m), cfg_.jobs);
    table.model_id = cfg_.model;
    const auto path = manifest_.path(table_name(m));
    save_table(path, table, a.abstract);
    manifest_.path(table_name(m) + ".json");
    fmt::print("{}: attribution over {} examples on {} abstract edges -> {}\n", to_string(m), table.examples,
               a.abstract.num_edges(), path.string());
    return load_table(path, a.abstract);
  }

  // An input table, else a matching one already under --out, else a fresh one.
  AttributionTable table(PipelineMode m) {
    const auto& a = abstraction(m);
    if (!cfg_.table.empty()) return load_table(cfg_.table, a.abstract);
    const auto path = cfg_.out / table_name(m);
    if (fs::exists(path)) {
      auto t = load_table(path, a.abstract);
      if (t.dataset_hash == dataset().hash() && t.model_id == cfg_.model && t.mode == to_string(m)) return t;
    }
    return compute_table(m);
  }

  FaithfulnessEvaluator<Scalar>& evaluator(PipelineMode m) {
    if (auto it = evaluators_.find(m); it != evaluators_.end()) return it->second;
    return evaluators_
        .emplace(m, make_evaluator(weights(), dataset(), abstraction(m), sources(m), cfg_.jobs))
        .first->second;
  }

  Manifest& manifest() { return manifest_; }

 private:
  const RunConfig& cfg_;
  Manifest& manifest_;
  std::unique_ptr<Tokenizer> own_tok_;
  const Tokenizer* tok_ = nullptr;
  std::optional<ModelConfig> config_;
  std::optional<ModelWeights<Scalar>> weights_;
  std::optional<TaskDataset> ds_;
  std::unique_ptr<ChatEndpoint> endpoint_;
  std::map<PipelineMode, Abstraction> abstractions_;
  std::map<PipelineMode, SourceProvider<Scalar>> sources_;
  std::map<PipelineMode, FaithfulnessEvaluator<Scalar>> evaluators_;
};

template <typename Scalar>
void graph_stats(const RunConfig&, Session<Scalar>& s) {
  const auto& ds = s.dataset();
  const auto& mc = s.config();
  std::ofstream os(s.manifest().path("graph_stats.csv"), std::ios::binary);
  os << "id,tokens,edges\n";
  double total = 0, tokens = 0;
  EdgeId lo = 0, hi = 0;
  for (const auto& ex : ds.examples) {
    const int n = static_cast<int>(ex.tokens.size());
    const EdgeId e = Graph::count_edges(mc, n, true);
    os << ex.id << ',' << n << ',' << e << '\n';
    total += static_cast<double>(e);
    tokens += n;
    lo = lo == 0 ? e : std::min(lo, e);
    hi = std::max(hi, e);
  }
  const double n = std::max(1, ds.size());
  ordered_json j = {{"examples", ds.size()},
                    {"mean_tokens", tokens / n},
                    {"mean_edges", total / n},
                    {"min_edges", lo},
                    {"max_edges", hi}};
  write_json(s.manifest().path("graph_stats.json"), j);
  fmt::print("{} examples, mean {:.2f} tokens, mean {:.2f} edges (min {}, max {})\n", ds.size(), tokens / n,
             total / n, lo, hi);
}

template <typename Scalar>
void diagnose(const RunConfig& cfg, Session<Scalar>& s) {
  const auto& w = s.weights();
  const auto& ds = s.dataset();
  const auto b = diagnose_dataset(w, ds, s.ablation(), cfg.diagnostics, cfg.jobs);
  std::ofstream os(s.manifest().path("diagnostics.csv"), std::ios::binary);
  os << "comparison,k_percent,list_length,diff,diff_control,rho,rho_control\n";
  auto rows = [&](const char* name, const DiagnosticsReport& r) {
    for (const auto& l : r.levels) {
      os << fmt::format("{},{},{},{},{},{},{}\n", name, l.k_percent, l.list_length, l.diff, l.diff_control, l.rho,
                        l.rho_control);
      fmt::print("{:<15} K={:>4}% L={:<6} Diff {:6.2f}% (control {:6.2f}%)  rho {:.3f} (control {:.3f})\n", name,
                 l.k_percent, l.list_length, 100 * l.diff, 100 * l.diff_control, l.rho, l.rho_control);
    }
  };
  rows("cancellation", b.cancellation);
  rows("overestimation", b.overestimation);
  s.manifest().note("diagnostics", {{"examples", b.examples}, {"subset_size", b.subset_size}});
}

template <typename Scalar>
void schema_validate(const RunConfig& cfg, Session<Scalar>& s) {
  const auto& ds = s.dataset();
  for (auto m : cfg.modes) {
    Schema schema = ds.schema;
    std::vector<std::optional<SpanMap>> maps;
    if (needs_endpoint(m)) {
      auto la = s.load_applications(m, false);
      schema = la.schema;
      maps = std::move(la.maps);
    } else if (m == PipelineMode::SchemaHuman) {
      for (const auto& ex : ds.examples) maps.emplace_back(ex.reference);
    } else {
      throw ConfigError(fmt::format("mode: schema-validate checks schema modes, not {}", to_string(m)));
    }
    ordered_json rows = ordered_json::array();
    int valid = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      Verdict v;
      if (!maps[i])
        v.fail("no application");
      else
        v = validate_application(schema, static_cast<int>(ds.examples[i].tokens.size()), *maps[i],
                                 cfg.agent.validation);
      valid += v.valid;
      rows.push_back({{"id", ds.examples[i].id}, {"valid", v.valid}, {"reasons", v.reasons}});
    }
    const double rate = maps.empty() ? 0.0 : static_cast<double>(valid) / static_cast<double>(maps.size());
    ordered_json j;
    j["mode"] = to_string(m);
    j["valid"] = valid;
    j["total"] = maps.size();
    j["rate"] = rate;
    j["threshold"] = cfg.agent.application_threshold;
    j["accepted"] = rate >= cfg.agent.application_threshold;
    if (schema.size() == ds.schema.size()) {
      std::vector<SpanMap> ref;
      for (const auto& ex : ds.examples) ref.push_back(ex.reference);
      const auto c = correctness_harness(maps, ref);
      j["correctness"] = {{"mean", c.mean}, {"compared", c.compared}};
    } else {
      j["correctness"] = nullptr;
    }
    j["examples"] = rows;
    write_json(s.manifest().path(fmt::format("validation-{}.json", file_tag(m))), j);
    fmt::print("{}: {}/{} valid ({:.1f}%), {}\n", to_string(m), valid, maps.size(), 100 * rate,
               rate >= cfg.agent.application_threshold ? "accepted" : "rejected");
  }
}

std::string circuit_name(PipelineMode m, EdgeId n) {
  return fmt::format("circuit-{}-{}.json", file_tag(m), n);
}

template <typename Scalar>
void build_circuit(const RunConfig& cfg, Session<Scalar>& s) {
  const auto m = cfg.mode();
  const auto table = s.table(m);
  const auto& a = s.abstraction(m);
  auto c = greedy_build(table, a.abstract, cfg.budget);
  c.mode = to_string(m);
  const auto path = s.manifest().path(circuit_name(m, cfg.budget));
  save_circuit(path, c, a.abstract, &table);
  fmt::print("{}: circuit with {} edges (budget {}) -> {}\n", to_string(m), c.size, cfg.budget, path.string());
}

ordered_json point_json(const FaithfulnessPoint& p) {
  return {{"budget", p.budget},   {"abstract_size", p.abstract_size}, {"mean_size", p.mean_size},
          {"soft", p.soft},       {"hard", p.hard},                   {"correct_rate", p.correct_rate},
          {"examples", p.examples}, {"excluded", p.excluded}};
}

template <typename Scalar>
void eval_circuit(const RunConfig& cfg, Session<Scalar>& s) {
  const auto m = cfg.mode();
  const auto& a = s.abstraction(m);
  const auto path = cfg.circuit.empty() ? cfg.out / circuit_name(m, cfg.budget) : cfg.circuit;
  if (!fs::exists(path)) throw ConfigError(fmt::format("circuit: cannot open {}; run build-circuit first", path.string()));
  const auto c = load_circuit(path, a.abstract);
  auto p = s.evaluator(m).evaluate(c, a.abstract);
  p.budget = c.log.requested;
  write_json(s.manifest().path(fmt::format("eval-{}-{}.json", file_tag(m), c.log.requested)), point_json(p));
  fmt::print("{}: {} abstract edges, mean {:.1f} grounded edges, F_S {:.4f}, F_H {:.4f}\n", to_string(m),
             p.abstract_size, p.mean_size, p.soft, p.hard);
}

template <typename Scalar>
FaithfulnessReport curve_for(const RunConfig& cfg, Session<Scalar>& s, PipelineMode m) {
  const auto table = s.table(m);
  const auto& a = s.abstraction(m);
  auto r = faithfulness_curve(s.evaluator(m), table, a.abstract, cfg.grid.resolve(a.abstract.num_edges()));
  r.mode = to_string(m);
  r.with_correct_rate = s.dataset().mean_ablation();
  save_report_csv(s.manifest().path(fmt::format("curve-{}.csv", file_tag(m))), r);
  save_report_svg(s.manifest().path(fmt::format("curve-{}.svg", file_tag(m))), {r},
                  fmt::format("{} ({})", s.dataset().task.name(), to_string(m)));
  fmt::print("{}: {} curve points\n", to_string(m), r.points.size());
  return r;
}

template <typename Scalar>
void run(const RunConfig& cfg, Manifest& manifest) {
  Session<Scalar> s(cfg, manifest);
  const auto& c = cfg.command;
  // Every command filters the same way when weights exist, so they all see one dataset.
  const bool computes = c != "graph-stats" && c != "schema-apply" && c != "schema-validate" &&
                        (c != "schema-gen" || cfg.mode() == PipelineMode::SchemaLlmMask);
  s.load_model(computes || (c != "graph-stats" && cfg.filter && cfg.dataset.empty()));
  if (c == "graph-stats") return graph_stats(cfg, s);
  if (c == "diagnose") return diagnose(cfg, s);
  if (c == "schema-gen") {
    s.generate(cfg.mode());
    return;
  }
  if (c == "schema-apply") return s.apply(cfg.mode());
  if (c == "schema-validate") return schema_validate(cfg, s);
  if (c == "attribute") {
    for (auto m : cfg.modes) s.compute_table(m);
    return;
  }
  if (c == "build-circuit") return build_circuit(cfg, s);
  if (c == "eval-circuit") return eval_circuit(cfg, s);
  if (c == "curve") {
    for (auto m : cfg.modes) curve_for(cfg, s, m);
    return;
  }
  if (c == "run-task") {
    std::vector<FaithfulnessReport> reports;
    for (auto m : cfg.modes) {
      if (needs_endpoint(m)) s.abstraction(m);
      s.compute_table(m);
      reports.push_back(curve_for(cfg, s, m));
    }
    save_report_svg(manifest.path("curves.svg"), reports, s.dataset().task.name());
    return;
  }
  throw ConfigError(fmt::format("command: unknown subcommand '{}'", c));
}

}  // namespace

void run_command(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.command.empty()) throw ConfigError("command: no subcommand given");
  fs::create_directories(cfg.out);
  Manifest manifest(cfg);
  if (cfg.precision == "double")
    run<double>(cfg, manifest);
  else
    run<float>(cfg, manifest);
  manifest.write();
}

}  // namespace peap
