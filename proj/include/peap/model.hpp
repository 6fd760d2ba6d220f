#ifndef PEAP_MODEL_HPP
#define PEAP_MODEL_HPP

#include "peap/metric.hpp"
#include "peap/trace.hpp"
#include "peap/weights.hpp"

#include <vector>

namespace peap {

struct ForwardOptions {
  bool all_logits = false;  // unembed every position rather than only the last
};

// Pre-LN GPT-2 forward pass that records each head's additive contribution to the
// residual stream separately. Throws DataError on empty, over-length or
// out-of-vocabulary input.
template <typename Scalar>
ForwardTrace<Scalar> forward(const ModelWeights<Scalar>& weights, const std::vector<int>& tokens,
                             const ForwardOptions& options = {});

// Reverse-mode gradients of `metric` (a function of the final-position logits) at
// every hook point of a clean trace. Layer norms belong to the node that reads them,
// so head-input gradients are taken before each head's own layer norm.
template <typename Scalar>
GradientTrace<Scalar> backward(const ModelWeights<Scalar>& weights, const ForwardTrace<Scalar>& trace,
                               const MetricSpec& metric);

// Recomposes the residual stream at the attention read point of `layer` (or the
// final read point when layer == n_layers) from recorded contributions.
template <typename Scalar>
Matrix<Scalar> recompose_residual(const ModelWeights<Scalar>& weights, const ForwardTrace<Scalar>& trace,
                                  int layer);

void check_tokens(const ModelConfig& config, const std::vector<int>& tokens);

extern template ForwardTrace<float> forward(const ModelWeights<float>&, const std::vector<int>&,
                                            const ForwardOptions&);
extern template ForwardTrace<double> forward(const ModelWeights<double>&, const std::vector<int>&,
                                             const ForwardOptions&);
extern template GradientTrace<float> backward(const ModelWeights<float>&, const ForwardTrace<float>&,
                                              const MetricSpec&);
extern template GradientTrace<double> backward(const ModelWeights<double>&, const ForwardTrace<double>&,
                                               const MetricSpec&);
extern template Matrix<float> recompose_residual(const ModelWeights<float>&, const ForwardTrace<float>&, int);
extern template Matrix<double> recompose_residual(const ModelWeights<double>&, const ForwardTrace<double>&, int);

}  // namespace peap

#endif  // PEAP_MODEL_HPP
