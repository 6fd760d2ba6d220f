#ifndef PEAP_PIPELINE_HPP
#define PEAP_PIPELINE_HPP

#include "peap/ablation.hpp"
#include "peap/aggregate.hpp"
#include "peap/diagnostics.hpp"
#include "peap/faithfulness.hpp"
#include "peap/schema_agent.hpp"
#include "peap/tasks.hpp"

#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace peap {

enum class PipelineMode { Positional, SchemaHuman, SchemaLlm, SchemaLlmMask, NonPositional };

std::string to_string(PipelineMode m);  // positional, schema:human, schema:llm, schema:llm+mask, nonpositional
PipelineMode pipeline_mode_from_string(const std::string& s);
bool needs_endpoint(PipelineMode m);
// File-name friendly form: schema:llm+mask -> schema-llm-mask.
std::string file_tag(PipelineMode m);

// How the examples of a dataset are indexed for one pipeline mode: the graph that
// scores are aggregated onto and circuits are built on, plus one span map per example.
struct Abstraction {
  explicit Abstraction(Graph graph) : abstract(std::move(graph)) {}

  PipelineMode mode = PipelineMode::Positional;
  Graph abstract;
  Schema schema;  // spans of the abstract graph; synthetic for positional and nonpositional
  AggregationMode aggregation = AggregationMode::Positional;
  std::vector<int> examples;            // dataset indices covered, in order
  std::vector<SpanMap> maps;            // parallel to `examples`
  std::vector<int> references;          // dataset reference indices covered
  std::vector<SpanMap> reference_maps;  // parallel to `references`, for mean ablation
  std::optional<PipelineReport> generation, application;

  int size() const { return static_cast<int>(examples.size()); }
};

// Every prompt must have the same length.
Abstraction positional_abstraction(const TaskDataset& ds, const ModelConfig& config);
// One span covering the whole prompt; positions collapse by sum-then-abs.
Abstraction nonpositional_abstraction(const TaskDataset& ds, const ModelConfig& config);
// The task's hand-written schema with its rule-based applications.
Abstraction human_abstraction(const TaskDataset& ds, const ModelConfig& config);
// Examples (and references) whose map is missing are dropped.
Abstraction schema_abstraction(const TaskDataset& ds, const ModelConfig& config, PipelineMode mode,
                               const Schema& schema, const std::vector<std::optional<SpanMap>>& maps,
                               const std::vector<std::optional<SpanMap>>& reference_maps);

std::vector<std::string> token_strings(const Tokenizer& tok, const std::vector<int>& ids);

struct LlmSchemaOptions {
  AgentOptions agent;
  std::uint64_t seed = 0;
  bool masks = false;
};

// Generates a schema on a seeded sample, with saliency masks from `weights` when
// requested, then applies it to every example and reference.
template <typename Scalar>
Abstraction llm_abstraction(const TaskDataset& ds, const ModelWeights<Scalar>& weights, const Tokenizer& tok,
                            ChatEndpoint& endpoint, const LlmSchemaOptions& options);

// Counterfactual runs or schema-aligned means of the dataset's references, indexed by
// position in Abstraction::examples.
template <typename Scalar>
class SourceProvider {
 public:
  SourceProvider(const ModelWeights<Scalar>& weights, const TaskDataset& ds, const Abstraction& abstraction,
                 AblationMode mode, int jobs = 1);
  AblationSource<Scalar> operator()(int k) const;
  AblationMode mode() const { return mode_; }
  // Positions that fell back to a span or global mean, summed over all sources made.
  int fallbacks() const;

 private:
  const ModelWeights<Scalar>* weights_;
  const TaskDataset* ds_;
  const Abstraction* abstraction_;
  AblationMode mode_;
  struct Shared {
    std::optional<MeanReference<Scalar>> mean;
    std::mutex mu;
    int fallbacks = 0;
  };
  std::shared_ptr<Shared> shared_;
};

// Per-example PEAP tables aggregated onto the abstract graph. Example tables are
// merged in dataset order, so the result does not depend on `jobs`.
template <typename Scalar>
AttributionTable attribute_abstraction(const ModelWeights<Scalar>& weights, const TaskDataset& ds,
                                       const Abstraction& abstraction, const SourceProvider<Scalar>& sources,
                                       int jobs = 1);

std::vector<EvalExample> eval_examples(const TaskDataset& ds, const Abstraction& abstraction);

template <typename Scalar>
FaithfulnessEvaluator<Scalar> make_evaluator(const ModelWeights<Scalar>& weights, const TaskDataset& ds,
                                             const Abstraction& abstraction, const SourceProvider<Scalar>& sources,
                                             int jobs = 1);

struct DiagnosticsOptions {
  std::vector<double> k_percent{1, 5, 10};
  int subsets = 3;
  bool attention_edges = false;  // rank within-position edges only by default
  RankVariant variant = RankVariant::AbsentLast;
};

struct DiagnosticsBundle {
  DiagnosticsReport cancellation;    // abs-then-sum vs sum-then-abs
  DiagnosticsReport overestimation;  // abs-then-sum vs max-abs
  int examples = 0;
  int subset_size = 0;
};

// Position-collapsed rankings under the three aggregation rules, with controls from
// disjoint subsets aggregated abs-then-sum.
template <typename Scalar>
DiagnosticsBundle diagnose_dataset(const ModelWeights<Scalar>& weights, const TaskDataset& ds, AblationMode mode,
                                   const DiagnosticsOptions& options = {}, int jobs = 1);

#define PEAP_PIPELINE_EXTERN(S)                                                                                     \
  extern template Abstraction llm_abstraction(const TaskDataset&, const ModelWeights<S>&, const Tokenizer&,       \
                                              ChatEndpoint&, const LlmSchemaOptions&);                             \
  extern template class SourceProvider<S>;                                                                       \
  extern template AttributionTable attribute_abstraction(const ModelWeights<S>&, const TaskDataset&,             \
                                                         const Abstraction&, const SourceProvider<S>&, int);       \
  extern template FaithfulnessEvaluator<S> make_evaluator(const ModelWeights<S>&, const TaskDataset&,            \
                                                          const Abstraction&, const SourceProvider<S>&, int);      \
  extern template DiagnosticsBundle diagnose_dataset(const ModelWeights<S>&, const TaskDataset&, AblationMode,   \
                                                     const DiagnosticsOptions&, int);
PEAP_PIPELINE_EXTERN(float)
PEAP_PIPELINE_EXTERN(double)
#undef PEAP_PIPELINE_EXTERN

}  // namespace peap

#endif  // PEAP_PIPELINE_HPP
