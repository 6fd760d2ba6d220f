#include "peap/faithfulness.hpp"

#include "peap/model.hpp"
#include "peap/parallel.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <set>

namespace peap {

std::string to_string(AblationMode m) { return m == AblationMode::Counterfactual ? "counterfactual" : "mean"; }

AblationMode ablation_mode_from_string(const std::string& s) {
  if (s == "counterfactual") return AblationMode::Counterfactual;
  if (s == "mean") return AblationMode::Mean;
  throw ConfigError(fmt::format("unknown ablation mode '{}' (expected counterfactual or mean)", s));
}

namespace {

int top_token(const RowVector<double>& logits) {
  Eigen::Index best;
  logits.maxCoeff(&best);
  return static_cast<int>(best);
}

bool is_identity(const Graph& abstract, const Graph& concrete, const SpanMap& map) {
  if (abstract.length() != concrete.length() || !abstract.has_attention_edges()) return false;
  for (std::size_t j = 0; j < map.ranges.size(); ++j)
    if (map.ranges[j] != std::pair<int, int>(static_cast<int>(j), static_cast<int>(j) + 1)) return false;
  return true;
}

}  // namespace

template <typename Scalar>
FaithfulnessEvaluator<Scalar>::FaithfulnessEvaluator(const ModelWeights<Scalar>& weights,
                                                     std::vector<EvalExample> examples,
                                                     std::vector<AblationSource<Scalar>> sources, int jobs)
    : weights_(weights), examples_(std::move(examples)), sources_(std::move(sources)), jobs_(jobs) {
  if (sources_.size() != examples_.size()) throw DataError("faithfulness: one ablation source per example is required");
  for (std::size_t x = 0; x < sources_.size(); ++x)
    if (sources_[x].length() != static_cast<int>(examples_[x].tokens.size()))
      throw DataError(fmt::format("faithfulness: example {}: ablation source length {} differs from input length {}",
                                  x, sources_[x].length(), examples_[x].tokens.size()));
  init();
}

template <typename Scalar>
FaithfulnessEvaluator<Scalar>::FaithfulnessEvaluator(const ModelWeights<Scalar>& weights,
                                                     std::vector<EvalExample> examples, SourceFn source, int jobs)
    : weights_(weights), examples_(std::move(examples)), source_fn_(std::move(source)), jobs_(jobs) {
  if (!source_fn_) throw DataError("faithfulness: no ablation source");
  init();
}

template <typename Scalar>
void FaithfulnessEvaluator<Scalar>::init() {
  if (examples_.empty()) throw DataError("faithfulness: no examples");
  const auto n = examples_.size();
  full_metric_.resize(n);
  full_top_.resize(n);
  for (std::size_t x = 0; x < n; ++x) {
    const auto& ex = examples_[x];
    if (ex.map.length() != static_cast<int>(ex.tokens.size()))
      throw DataError(fmt::format("faithfulness: example {} has {} tokens but its span map covers {}", x,
                                  ex.tokens.size(), ex.map.length()));
    graphs_.emplace_back(weights_.config, static_cast<int>(ex.tokens.size()));
  }
  parallel_for(static_cast<int>(n), jobs_, [&](int x) {
    const auto& ex = examples_[static_cast<std::size_t>(x)];
    const RowVector<double> logits = forward(weights_, ex.tokens).final_logits().template cast<double>();
    full_metric_[static_cast<std::size_t>(x)] = ex.metric.evaluate(logits);
    full_top_[static_cast<std::size_t>(x)] = top_token(logits);
  });
}

template <typename Scalar>
std::vector<typename FaithfulnessEvaluator<Scalar>::Outcome> FaithfulnessEvaluator<Scalar>::run(
    const Circuit& circuit, const Graph& abstract) const {
  if (circuit.edges.size() != static_cast<std::size_t>(abstract.num_edges()))
    throw DataError("faithfulness: circuit was built on a different graph");
  const auto abstract_edges = circuit.edge_list();
  std::vector<Outcome> out(examples_.size());
  parallel_for(size(), jobs_, [&](int x) {
    const auto i = static_cast<std::size_t>(x);
    const auto& ex = examples_[i];
    const auto& g = graphs_[i];
    GroundedCircuit grounded;
    if (is_identity(abstract, g, ex.map)) {
      grounded.edges = circuit.edges;
      grounded.size = circuit.size;
    } else {
      grounded = ground_circuit(abstract_edges, abstract, ex.map, g);
    }
    AblationSource<Scalar> made;
    if (sources_.empty()) {
      made = source_fn_(x);
      if (made.length() != static_cast<int>(ex.tokens.size()))
        throw DataError(fmt::format("faithfulness: example {}: ablation source length {} differs from input length {}",
                                    x, made.length(), ex.tokens.size()));
    }
    const auto& src = sources_.empty() ? made : sources_[i];
    const auto tr = ablated_forward(weights_, ex.tokens, g, grounded.edges, src);
    const RowVector<double> logits = tr.final_logits().template cast<double>();
    out[i] = {ex.metric.evaluate(logits), top_token(logits) == full_top_[i], grounded.size};
  });
  return out;
}

template <typename Scalar>
std::vector<double> FaithfulnessEvaluator<Scalar>::ablated_metrics(const Circuit& circuit,
                                                                   const Graph& abstract) const {
  std::vector<double> m;
  for (const auto& o : run(circuit, abstract)) m.push_back(o.metric);
  return m;
}

template <typename Scalar>
FaithfulnessPoint FaithfulnessEvaluator<Scalar>::evaluate(const Circuit& circuit, const Graph& abstract) const {
  const auto outcomes = run(circuit, abstract);
  FaithfulnessPoint p;
  p.budget = circuit.log.requested;
  p.abstract_size = circuit.size;
  p.examples = size();
  double soft = 0, hard = 0, correct = 0, sz = 0;
  for (std::size_t x = 0; x < outcomes.size(); ++x) {
    const auto& o = outcomes[x];
    sz += static_cast<double>(o.size);
    hard += o.same_top;
    correct += o.metric > 0;
    if (full_metric_[x] == 0) {
      ++p.excluded;
      continue;
    }
    soft += o.metric / full_metric_[x];
  }
  if (p.excluded) spdlog::warn("faithfulness: {} example(s) with zero full-model metric left out of F_S", p.excluded);
  const double n = static_cast<double>(outcomes.size());
  p.mean_size = sz / n;
  p.soft = p.excluded == p.examples ? std::nan("") : soft / (n - p.excluded);
  p.hard = hard / n;
  p.correct_rate = correct / n;
  return p;
}

std::vector<EdgeId> geometric_grid(EdgeId lo, EdgeId hi, int points) {
  if (lo < 1 || hi < lo || points < 1) throw ConfigError("geometric grid needs 1 <= lo <= hi and points >= 1");
  if (points == 1) return {hi};
  std::set<EdgeId> out{lo, hi};
  {
    const double step = std::log(static_cast<double>(hi) / static_cast<double>(lo)) / (points - 1);
    for (int k = 0; k < points; ++k)
      out.insert(static_cast<EdgeId>(std::llround(static_cast<double>(lo) * std::exp(step * k))));
  }
  return {out.begin(), out.end()};
}

template <typename Scalar>
FaithfulnessReport faithfulness_curve(const FaithfulnessEvaluator<Scalar>& evaluator, const AttributionTable& table,
                                      const Graph& abstract, const std::vector<EdgeId>& grid) {
  FaithfulnessReport r;
  r.mode = table.mode;
  for (EdgeId n : grid) {
    const auto c = greedy_build(table, abstract, n);
    auto p = evaluator.evaluate(c, abstract);
    // Budgets that prune to an already reported size add no new point.
    if (!r.points.empty() && p.mean_size <= r.points.back().mean_size) {
      spdlog::info("curve: budget {} gives mean size {}, not above the previous point; skipped", n, p.mean_size);
      continue;
    }
    r.points.push_back(p);
  }
  return r;
}

template class FaithfulnessEvaluator<float>;
template class FaithfulnessEvaluator<double>;
template FaithfulnessReport faithfulness_curve(const FaithfulnessEvaluator<float>&, const AttributionTable&,
                                               const Graph&, const std::vector<EdgeId>&);
template FaithfulnessReport faithfulness_curve(const FaithfulnessEvaluator<double>&, const AttributionTable&,
                                               const Graph&, const std::vector<EdgeId>&);

}  // namespace peap
