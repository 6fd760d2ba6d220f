#ifndef PEAP_ABLATION_HPP
#define PEAP_ABLATION_HPP

#include "peap/graph.hpp"
#include "peap/schema.hpp"
#include "peap/trace.hpp"
#include "peap/weights.hpp"

#include <vector>

namespace peap {

// Corrupted activations substituted for edges outside a circuit: every component
// output plus the q/k/v vectors used by attention slots.
template <typename Scalar>
struct AblationSource {
  Matrix<Scalar> embed;
  std::vector<std::vector<Matrix<Scalar>>> head_out;  // [layer][head]
  std::vector<Matrix<Scalar>> mlp_out;
  std::vector<Matrix<Scalar>> q, k, v;  // [layer], n x d_model

  int length() const { return static_cast<int>(embed.rows()); }
  static AblationSource from_trace(const ForwardTrace<Scalar>& trace);
  // Trace holding only the tensors attribution reads from a counterfactual run, so a
  // mean source can stand in for a corrupted prompt. Tokens are placeholders.
  ForwardTrace<Scalar> to_trace() const;

  // Visits every tensor in a fixed order; works on const and mutable sources alike.
  template <typename Self, typename F>
  static void for_each_tensor(Self& self, F&& f) {
    f(self.embed);
    for (auto& layer : self.head_out)
      for (auto& m : layer) f(m);
    for (auto& m : self.mlp_out) f(m);
    for (auto& m : self.q) f(m);
    for (auto& m : self.k) f(m);
    for (auto& m : self.v) f(m);
  }
};

// Mean activations of a reference set, aligned by schema span and offset inside the
// span. A target position whose (span, offset) never occurs in the references takes
// the span mean; a span that is empty in every reference takes the global mean.
template <typename Scalar>
class MeanReference {
 public:
  MeanReference(const std::vector<ForwardTrace<Scalar>>& references, const std::vector<SpanMap>& maps);

  AblationSource<Scalar> source_for(const SpanMap& target) const;
  int spans() const { return static_cast<int>(offset_rows_.size()); }
  // Positions of the last source_for call that fell back to a span or global mean.
  int fallbacks() const { return fallbacks_; }

 private:
  AblationSource<Scalar> means_;  // one row per key: (span, offset) rows, then span rows, then global
  std::vector<std::vector<int>> offset_rows_;  // [span][offset] -> row in means_
  std::vector<int> span_rows_;                 // -1 when the span never holds tokens
  int global_row_ = 0;
  mutable int fallbacks_ = 0;
};

// Forward pass in which each reader's input is assembled edge by edge: edges in the
// circuit carry the parent's output from this run, the others the source's corrupted
// output. Attention slots (target t, source s) take q_t, k_s and v_s from this run only
// when the matching attention edge is kept, else the source's vectors. Layer-norm
// statistics are not recorded; head_inputs holds every assembled q/k/v input.
template <typename Scalar>
ForwardTrace<Scalar> ablated_forward(const ModelWeights<Scalar>& weights, const std::vector<int>& tokens,
                                     const Graph& graph, const std::vector<bool>& circuit,
                                     const AblationSource<Scalar>& source);

extern template struct AblationSource<float>;
extern template struct AblationSource<double>;
extern template class MeanReference<float>;
extern template class MeanReference<double>;
extern template ForwardTrace<float> ablated_forward(const ModelWeights<float>&, const std::vector<int>&, const Graph&,
                                                    const std::vector<bool>&, const AblationSource<float>&);
extern template ForwardTrace<double> ablated_forward(const ModelWeights<double>&, const std::vector<int>&,
                                                     const Graph&, const std::vector<bool>&,
                                                     const AblationSource<double>&);

}  // namespace peap

#endif  // PEAP_ABLATION_HPP
