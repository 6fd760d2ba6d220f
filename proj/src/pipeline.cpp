#include "peap/pipeline.hpp"

#include "peap/common.hpp"
#include "peap/model.hpp"
#include "peap/parallel.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include <algorithm>

namespace peap {

std::string to_string(PipelineMode m) {
  switch (m) {
    case PipelineMode::Positional: return "positional";
    case PipelineMode::SchemaHuman: return "schema:human";
    case PipelineMode::SchemaLlm: return "schema:llm";
    case PipelineMode::SchemaLlmMask: return "schema:llm+mask";
    case PipelineMode::NonPositional: return "nonpositional";
  }
  return "?";
}

PipelineMode pipeline_mode_from_string(const std::string& s) {
  for (auto m : {PipelineMode::Positional, PipelineMode::SchemaHuman, PipelineMode::SchemaLlm,
                 PipelineMode::SchemaLlmMask, PipelineMode::NonPositional})
    if (to_string(m) == s) return m;
  if (s == "non-positional") return PipelineMode::NonPositional;
  throw ConfigError(fmt::format("unknown mode '{}' (positional, schema:human, schema:llm, schema:llm+mask, "
                                "nonpositional)",
                                s));
}

bool needs_endpoint(PipelineMode m) { return m == PipelineMode::SchemaLlm || m == PipelineMode::SchemaLlmMask; }

std::string file_tag(PipelineMode m) {
  std::string s = to_string(m);
  for (auto& c : s)
    if (c == ':' || c == '+') c = '-';
  return s;
}

namespace {

std::vector<int> iota_n(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

Schema synthetic_schema(int n, const char* prefix) {
  Schema s;
  for (int t = 0; t < n; ++t) s.spans.push_back({fmt::format("{}{}", prefix, t), ""});
  return s;
}

int prompt_length(const TaskExample& ex) { return static_cast<int>(ex.tokens.size()); }

}  // namespace

Abstraction positional_abstraction(const TaskDataset& ds, const ModelConfig& config) {
  if (ds.examples.empty()) throw DataError("dataset has no examples");
  const int n = prompt_length(ds.examples.front());
  for (const auto& ex : ds.examples)
    if (prompt_length(ex) != n)
      throw ConfigError(fmt::format("positional mode needs equal prompt lengths: {} has {} tokens, {} has {}",
                                    ds.examples.front().id, n, ex.id, prompt_length(ex)));
  Abstraction a(Graph(config, n));
  a.mode = PipelineMode::Positional;
  a.schema = synthetic_schema(n, "p");
  a.aggregation = AggregationMode::Positional;
  a.examples = iota_n(ds.size());
  a.maps.assign(ds.examples.size(), SpanMap::one_token_per_span(n));
  a.references = iota_n(static_cast<int>(ds.references.size()));
  for (const auto& r : ds.references) a.reference_maps.push_back(SpanMap::one_token_per_span(prompt_length(r)));
  return a;
}

Abstraction nonpositional_abstraction(const TaskDataset& ds, const ModelConfig& config) {
  if (ds.examples.empty()) throw DataError("dataset has no examples");
  Abstraction a(Graph(config, 1, true));
  a.mode = PipelineMode::NonPositional;
  a.schema.spans.push_back({"all", "every token of the prompt"});
  a.aggregation = AggregationMode::SumThenAbs;
  a.examples = iota_n(ds.size());
  for (const auto& ex : ds.examples) a.maps.push_back(SpanMap::from_lengths({prompt_length(ex)}));
  a.references = iota_n(static_cast<int>(ds.references.size()));
  for (const auto& r : ds.references) a.reference_maps.push_back(SpanMap::from_lengths({prompt_length(r)}));
  return a;
}

Abstraction human_abstraction(const TaskDataset& ds, const ModelConfig& config) {
  std::vector<std::optional<SpanMap>> maps, refs;
  for (const auto& ex : ds.examples) maps.emplace_back(ex.reference);
  for (const auto& r : ds.references) refs.emplace_back(r.reference);
  return schema_abstraction(ds, config, PipelineMode::SchemaHuman, ds.schema, maps, refs);
}

Abstraction schema_abstraction(const TaskDataset& ds, const ModelConfig& config, PipelineMode mode,
                               const Schema& schema, const std::vector<std::optional<SpanMap>>& maps,
                               const std::vector<std::optional<SpanMap>>& reference_maps) {
  if (maps.size() != ds.examples.size())
    throw DataError(fmt::format("{} span maps for {} examples", maps.size(), ds.examples.size()));
  if (!reference_maps.empty() && reference_maps.size() != ds.references.size())
    throw DataError(fmt::format("{} reference maps for {} references", reference_maps.size(), ds.references.size()));
  schema.validate();
  Abstraction a(abstract_graph(config, schema));
  a.mode = mode;
  a.schema = schema;
  a.aggregation = AggregationMode::Positional;
  auto keep = [&](const std::optional<SpanMap>& m, const TaskExample& ex) {
    return m && validate_application(schema, prompt_length(ex), *m).valid;
  };
  for (std::size_t i = 0; i < maps.size(); ++i)
    if (keep(maps[i], ds.examples[i])) {
      a.examples.push_back(static_cast<int>(i));
      a.maps.push_back(*maps[i]);
    }
  for (std::size_t i = 0; i < reference_maps.size(); ++i)
    if (keep(reference_maps[i], ds.references[i])) {
      a.references.push_back(static_cast<int>(i));
      a.reference_maps.push_back(*reference_maps[i]);
    }
  if (a.examples.empty()) throw DataError("no example has a valid application of the schema");
  if (ds.mean_ablation() && a.references.empty())
    throw DataError("no reference prompt has a valid application of the schema");
  return a;
}

std::vector<std::string> token_strings(const Tokenizer& tok, const std::vector<int>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(tok.token_bytes(id));
  return out;
}

template <typename Scalar>
Abstraction llm_abstraction(const TaskDataset& ds, const ModelWeights<Scalar>& weights, const Tokenizer& tok,
                            ChatEndpoint& endpoint, const LlmSchemaOptions& options) {
  const int want = options.agent.groups * options.agent.group_size;
  if (ds.size() < want)
    throw DataError(fmt::format("schema generation needs {} examples, dataset has {}", want, ds.size()));
  const auto picked = sample_indices(ds.size(), want, options.seed);
  std::vector<std::vector<std::string>> sample;
  for (int i : picked) sample.push_back(token_strings(tok, ds.examples[static_cast<std::size_t>(i)].tokens));

  std::vector<SaliencyMask> masks;
  if (options.masks) {
    masks.resize(picked.size());
    parallel_for(static_cast<int>(picked.size()), options.agent.jobs, [&](int k) {
      const auto& ex = ds.examples[static_cast<std::size_t>(picked[static_cast<std::size_t>(k)])];
      const auto trace = forward(weights, ex.tokens);
      masks[static_cast<std::size_t>(k)] = saliency_mask(trace, backward(weights, trace, ex.metric));
    });
  }
  auto gen = generate_schema(sample, options.masks ? &masks : nullptr, endpoint, options.agent);
  spdlog::info("schema accepted after {} run(s): {}", gen.report.runs, fmt::join(gen.schema.titles(), " | "));

  std::vector<std::vector<std::string>> all, refs;
  for (const auto& ex : ds.examples) all.push_back(token_strings(tok, ex.tokens));
  for (const auto& r : ds.references) refs.push_back(token_strings(tok, r.tokens));
  auto app = apply_schema(gen.schema, all, endpoint, options.agent);
  if (!app.report.accepted)
    spdlog::warn("schema applied to {}/{} examples, below the {:.0f}% threshold; continuing with the valid ones",
                 app.report.valid, app.report.total, 100 * options.agent.application_threshold);
  std::vector<std::optional<SpanMap>> ref_maps;
  if (!refs.empty()) {
    auto ref_app = apply_schema(gen.schema, refs, endpoint, options.agent);
    ref_maps = std::move(ref_app.maps);
    app.report.log.push_back(
        fmt::format("references: {}/{} valid applications", ref_app.report.valid, ref_app.report.total));
  }
  auto a = schema_abstraction(ds, weights.config, options.masks ? PipelineMode::SchemaLlmMask : PipelineMode::SchemaLlm,
                              gen.schema, app.maps, ref_maps);
  a.generation = std::move(gen.report);
  a.application = std::move(app.report);
  return a;
}

template <typename Scalar>
SourceProvider<Scalar>::SourceProvider(const ModelWeights<Scalar>& weights, const TaskDataset& ds,
                                       const Abstraction& abstraction, AblationMode mode, int jobs)
    : weights_(&weights), ds_(&ds), abstraction_(&abstraction), mode_(mode), shared_(std::make_shared<Shared>()) {
  if (mode != AblationMode::Mean) return;
  if (abstraction.references.empty()) throw DataError("mean ablation needs a reference set");
  std::vector<ForwardTrace<Scalar>> traces(abstraction.references.size());
  parallel_for(static_cast<int>(traces.size()), jobs, [&](int k) {
    const auto& r = ds.references[static_cast<std::size_t>(abstraction.references[static_cast<std::size_t>(k)])];
    traces[static_cast<std::size_t>(k)] = forward(weights, r.tokens);
  });
  shared_->mean.emplace(traces, abstraction.reference_maps);
}

template <typename Scalar>
AblationSource<Scalar> SourceProvider<Scalar>::operator()(int k) const {
  const auto& ex = ds_->examples[static_cast<std::size_t>(abstraction_->examples[static_cast<std::size_t>(k)])];
  if (mode_ == AblationMode::Counterfactual) {
    if (ex.counter_tokens.size() != ex.tokens.size())
      throw DataError(fmt::format("example {} has no counterfactual of matching length", ex.id));
    return AblationSource<Scalar>::from_trace(forward(*weights_, ex.counter_tokens));
  }
  std::lock_guard lock(shared_->mu);
  auto src = shared_->mean->source_for(abstraction_->maps[static_cast<std::size_t>(k)]);
  shared_->fallbacks += shared_->mean->fallbacks();
  return src;
}

template <typename Scalar>
int SourceProvider<Scalar>::fallbacks() const {
  std::lock_guard lock(shared_->mu);
  return shared_->fallbacks;
}

namespace {

std::vector<int> position_map_for(const Abstraction& a, int k) {
  const auto& map = a.maps[static_cast<std::size_t>(k)];
  if (a.mode == PipelineMode::NonPositional) return collapse_position_map(map.length());
  return map.position_map();
}

// Runs f(k) for every k in [0, n) in batches of `jobs`, then g(k) in order.
template <typename T, typename F, typename G>
void ordered_batches(int n, int jobs, F&& make, G&& consume) {
  jobs = std::max(1, jobs);
  for (int lo = 0; lo < n; lo += jobs) {
    const int hi = std::min(n, lo + jobs);
    std::vector<T> batch(static_cast<std::size_t>(hi - lo));
    parallel_for(hi - lo, jobs, [&](int j) { batch[static_cast<std::size_t>(j)] = make(lo + j); });
    for (int j = 0; j < hi - lo; ++j) consume(lo + j, batch[static_cast<std::size_t>(j)]);
  }
}

}  // namespace

template <typename Scalar>
AttributionTable attribute_abstraction(const ModelWeights<Scalar>& weights, const TaskDataset& ds,
                                       const Abstraction& abstraction, const SourceProvider<Scalar>& sources,
                                       int jobs) {
  const auto& cfg = weights.config;
  Aggregator agg(abstraction.abstract, abstraction.aggregation);
  ordered_batches<AttributionTable>(
      abstraction.size(), jobs,
      [&](int k) {
        const auto& ex = ds.examples[static_cast<std::size_t>(abstraction.examples[static_cast<std::size_t>(k)])];
        const auto clean = forward(weights, ex.tokens);
        const auto grads = backward(weights, clean, ex.metric);
        const auto counter = sources(k).to_trace();
        return attribute(weights, clean, counter, grads, Graph(cfg, prompt_length(ex)));
      },
      [&](int k, const AttributionTable& table) {
        const auto& ex = ds.examples[static_cast<std::size_t>(abstraction.examples[static_cast<std::size_t>(k)])];
        agg.add(table, Graph(cfg, prompt_length(ex)), position_map_for(abstraction, k));
      });
  auto out = agg.result();
  out.mode = to_string(abstraction.mode);
  out.dataset_hash = ds.hash();
  return out;
}

std::vector<EvalExample> eval_examples(const TaskDataset& ds, const Abstraction& abstraction) {
  std::vector<EvalExample> out;
  out.reserve(static_cast<std::size_t>(abstraction.size()));
  for (int k = 0; k < abstraction.size(); ++k) {
    const auto& ex = ds.examples[static_cast<std::size_t>(abstraction.examples[static_cast<std::size_t>(k)])];
    out.push_back({ex.tokens, ex.metric, abstraction.maps[static_cast<std::size_t>(k)]});
  }
  return out;
}

template <typename Scalar>
FaithfulnessEvaluator<Scalar> make_evaluator(const ModelWeights<Scalar>& weights, const TaskDataset& ds,
                                             const Abstraction& abstraction, const SourceProvider<Scalar>& sources,
                                             int jobs) {
  return FaithfulnessEvaluator<Scalar>(weights, eval_examples(ds, abstraction),
                                       typename FaithfulnessEvaluator<Scalar>::SourceFn(sources), jobs);
}

template <typename Scalar>
DiagnosticsBundle diagnose_dataset(const ModelWeights<Scalar>& weights, const TaskDataset& ds, AblationMode mode,
                                   const DiagnosticsOptions& options, int jobs) {
  if (options.subsets < 2) throw ConfigError("diagnostics need at least two control subsets");
  const auto& cfg = weights.config;
  const Abstraction human = human_abstraction(ds, cfg);
  const SourceProvider<Scalar> sources(weights, ds, human, mode, jobs);
  const int n = human.size();
  DiagnosticsBundle out;
  out.examples = n;
  out.subset_size = n / options.subsets;
  if (out.subset_size < 1)
    throw DataError(fmt::format("{} examples cannot fill {} control subsets", n, options.subsets));

  const Graph target(cfg, 1, options.attention_edges);
  Aggregator abs_sum(target, AggregationMode::AbsThenSum), sum_abs(target, AggregationMode::SumThenAbs),
      max_abs(target, AggregationMode::MaxAbs);
  std::vector<Aggregator> subsets(static_cast<std::size_t>(options.subsets),
                                  Aggregator(target, AggregationMode::AbsThenSum));
  auto source_graph = [&](int k) {
    const auto& ex = ds.examples[static_cast<std::size_t>(human.examples[static_cast<std::size_t>(k)])];
    return Graph(cfg, prompt_length(ex), options.attention_edges);
  };
  ordered_batches<AttributionTable>(
      n, jobs,
      [&](int k) {
        const auto& ex = ds.examples[static_cast<std::size_t>(human.examples[static_cast<std::size_t>(k)])];
        const auto clean = forward(weights, ex.tokens);
        const auto grads = backward(weights, clean, ex.metric);
        const auto counter = sources(k).to_trace();
        const Graph g = source_graph(k);
        if (options.attention_edges) return attribute(weights, clean, counter, grads, g);
        return eap_within_position(clean, counter, grads, g);
      },
      [&](int k, const AttributionTable& table) {
        const Graph g = source_graph(k);
        const auto pm = collapse_position_map(g.length());
        abs_sum.add(table, g, pm);
        sum_abs.add(table, g, pm);
        max_abs.add(table, g, pm);
        const int s = k / out.subset_size;
        if (s < options.subsets) subsets[static_cast<std::size_t>(s)].add(table, g, pm);
      });

  const auto a = abs_sum.result();
  std::vector<AttributionTable> controls;
  for (const auto& s : subsets) controls.push_back(s.result());
  out.cancellation = ranking_diagnostics(a, sum_abs.result(), options.k_percent, options.variant);
  out.overestimation = ranking_diagnostics(a, max_abs.result(), options.k_percent, options.variant);
  add_controls(out.cancellation, controls, options.variant);
  add_controls(out.overestimation, controls, options.variant);
  return out;
}

#define PEAP_PIPELINE_INSTANTIATE(S)                                                                               \
  template Abstraction llm_abstraction(const TaskDataset&, const ModelWeights<S>&, const Tokenizer&, ChatEndpoint&, \
                                       const LlmSchemaOptions&);                                                    \
  template class SourceProvider<S>;                                                                                 \
  template AttributionTable attribute_abstraction(const ModelWeights<S>&, const TaskDataset&, const Abstraction&,  \
                                                  const SourceProvider<S>&, int);                                   \
  template FaithfulnessEvaluator<S> make_evaluator(const ModelWeights<S>&, const TaskDataset&, const Abstraction&, \
                                                   const SourceProvider<S>&, int);                                  \
  template DiagnosticsBundle diagnose_dataset(const ModelWeights<S>&, const TaskDataset&, AblationMode,            \
                                              const DiagnosticsOptions&, int);
PEAP_PIPELINE_INSTANTIATE(float)
PEAP_PIPELINE_INSTANTIATE(double)

}  // namespace peap
