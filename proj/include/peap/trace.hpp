#ifndef PEAP_TRACE_HPP
#define PEAP_TRACE_HPP

#include "peap/common.hpp"

#include <vector>

namespace peap {

// Column block of head `head` inside an n x d_model q/k/v matrix.
template <typename Derived>
auto head_block(Eigen::MatrixBase<Derived>& m, int head, int d_head) {
  return m.middleCols(static_cast<Eigen::Index>(head) * d_head, d_head);
}
template <typename Derived>
auto head_block(const Eigen::MatrixBase<Derived>& m, int head, int d_head) {
  return m.middleCols(static_cast<Eigen::Index>(head) * d_head, d_head);
}

enum class Channel { Q = 0, K = 1, V = 2, Direct = 3 };

template <typename Scalar>
struct LayerTrace {
  Matrix<Scalar> resid_pre;  // attention read point (shared q/k/v input in a clean run)
  Matrix<Scalar> ln1_norm;   // (x - mean) * rstd of resid_pre
  Vector<Scalar> ln1_rstd;
  Matrix<Scalar> q, k, v;    // n x d_model, head i in columns [i d_head, (i+1) d_head)
  std::vector<Matrix<Scalar>> pattern;   // per head, n x n lower-triangular softmax rows
  std::vector<Matrix<Scalar>> head_out;  // per head, n x d_model contribution z
  Matrix<Scalar> resid_mid;  // MLP read point
  Matrix<Scalar> ln2_norm;
  Vector<Scalar> ln2_rstd;
  Matrix<Scalar> mlp_hidden;  // pre-activation, n x d_mlp
  Matrix<Scalar> mlp_out;     // n x d_model, includes the output bias

  // Ablated runs assemble a private input per head and channel (index head * 3 + channel);
  // empty for clean runs, where every head reads resid_pre.
  std::vector<Matrix<Scalar>> head_inputs;
};

// Every activation needed for attribution, from one forward pass.
template <typename Scalar>
struct ForwardTrace {
  std::vector<int> tokens;
  Matrix<Scalar> token_embed;  // e_t
  Matrix<Scalar> embed;        // Embed node output: token + positional embedding
  std::vector<LayerTrace<Scalar>> layers;
  Matrix<Scalar> resid_final;  // Logits node input (pre final layer norm)
  Matrix<Scalar> lnf_norm;
  Vector<Scalar> lnf_rstd;
  // Logits; a single row for the final position unless all positions were requested.
  Matrix<Scalar> logits;

  int length() const { return static_cast<int>(tokens.size()); }
  RowVector<Scalar> final_logits() const { return logits.row(logits.rows() - 1); }
};

template <typename Scalar>
struct LayerGradient {
  Matrix<Scalar> resid_pre;   // total gradient at the attention read point
  Matrix<Scalar> resid_mid;   // gradient w.r.t. every head output of this layer
  Matrix<Scalar> resid_post;  // gradient w.r.t. this layer's MLP output
  Matrix<Scalar> q, k, v;     // gradient w.r.t. the q/k/v vectors
  // Gradient w.r.t. each head's q/k/v input (pre-layer-norm), through that path only.
  // Index head * 3 + channel.
  std::vector<Matrix<Scalar>> head_inputs;
  Matrix<Scalar> mlp_in;  // gradient w.r.t. the MLP input through the MLP only
};

template <typename Scalar>
struct GradientTrace {
  Scalar metric = 0;
  Matrix<Scalar> embed;  // gradient w.r.t. the Embed output, equal to the gradient w.r.t. e_t
  std::vector<LayerGradient<Scalar>> layers;
  Matrix<Scalar> logits_in;  // gradient w.r.t. the Logits node input; non-zero in the final row only
  RowVector<Scalar> logits;  // gradient w.r.t. final-position logits

  const Matrix<Scalar>& head_out(int layer) const { return layers[layer].resid_mid; }
  const Matrix<Scalar>& head_input(int layer, int head, Channel c) const {
    return layers[layer].head_inputs[static_cast<std::size_t>(head * 3 + static_cast<int>(c))];
  }
};

}  // namespace peap

#endif  // PEAP_TRACE_HPP
