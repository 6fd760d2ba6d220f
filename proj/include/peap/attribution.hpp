#ifndef PEAP_ATTRIBUTION_HPP
#define PEAP_ATTRIBUTION_HPP

#include "peap/graph.hpp"
#include "peap/trace.hpp"
#include "peap/weights.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace peap {

// One score per edge of the governing graph, indexed by EdgeId.
struct AttributionTable {
  std::vector<double> scores;
  std::string mode = "positional";  // aggregation tag
  int examples = 1;                 // number of examples merged into the table
  std::string model_id;
  std::uint64_t dataset_hash = 0;

  std::size_t size() const { return scores.size(); }
  double operator[](EdgeId id) const { return scores[static_cast<std::size_t>(id)]; }
};

// Linear estimate (z*_u - z_u) . grad_{v input} M of patching each within-position edge.
// `counter` is a counterfactual trace or a mean-reference trace of the same length.
// Attention edges are left at zero.
template <typename Scalar>
AttributionTable eap_within_position(const ForwardTrace<Scalar>& clean, const ForwardTrace<Scalar>& counter,
                                     const GradientTrace<Scalar>& grads, const Graph& graph);

// Scores for the attention edges Head(l,i,s) -> Head(l,i,t): the substituted head output
// z* (v*_s, k*_s, or q*_t in the s-th slot only) dotted with grad_z M. The softmax row is
// updated incrementally for K and Q; V needs no softmax change.
template <typename Scalar>
void peap_attention_scores(const ModelWeights<Scalar>& weights, const ForwardTrace<Scalar>& clean,
                           const ForwardTrace<Scalar>& counter, const GradientTrace<Scalar>& grads,
                           const Graph& graph, AttributionTable& table);

// Both passes into one table.
template <typename Scalar>
AttributionTable attribute(const ModelWeights<Scalar>& weights, const ForwardTrace<Scalar>& clean,
                           const ForwardTrace<Scalar>& counter, const GradientTrace<Scalar>& grads,
                           const Graph& graph);

// Node-level estimate (z*_u - z_u) . grad_{z_u} M, indexed by node id (Logits scores 0).
template <typename Scalar>
std::vector<double> node_attribution(const ForwardTrace<Scalar>& clean, const ForwardTrace<Scalar>& counter,
                                     const GradientTrace<Scalar>& grads, const Graph& graph);
std::vector<double> position_importance(const std::vector<double>& node_scores, const Graph& graph);

struct SaliencyMask {
  std::vector<double> saliency;  // s(t)
  std::vector<bool> mask;        // m(t) = softmax(s)(t) > 1/n
  static SaliencyMask from_scores(std::vector<double> s);
};

// inputXgradient: s(t) = || e_t * grad_{e_t} M ||_2 on the token embedding.
template <typename Scalar>
SaliencyMask saliency_mask(const ForwardTrace<Scalar>& trace, const GradientTrace<Scalar>& grads);

// CSV `edge_id,score` (edge_id is the edge descriptor) plus a JSON sidecar next to it.
void save_table(const std::filesystem::path& csv_path, const AttributionTable& table, const Graph& graph);
AttributionTable load_table(const std::filesystem::path& csv_path, const Graph& graph);

}  // namespace peap

#endif  // PEAP_ATTRIBUTION_HPP
