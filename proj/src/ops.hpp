// Shared numerical kernels for the forward, backward and ablated passes.
#ifndef PEAP_SRC_OPS_HPP
#define PEAP_SRC_OPS_HPP

#include "peap/common.hpp"

#include <cmath>

namespace peap::ops {

template <typename Scalar>
struct LayerNormOut {
  Matrix<Scalar> y;
  Matrix<Scalar> norm;
  Vector<Scalar> rstd;
};

template <typename Scalar>
LayerNormOut<Scalar> layer_norm(const Matrix<Scalar>& x, const RowVector<Scalar>& gain,
                                const RowVector<Scalar>& bias, double eps) {
  const auto n = x.rows();
  LayerNormOut<Scalar> out;
  out.norm.resize(n, x.cols());
  out.rstd.resize(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Scalar mean = x.row(t).mean();
    const RowVector<Scalar> c = x.row(t).array() - mean;
    const Scalar var = c.squaredNorm() / static_cast<Scalar>(x.cols());
    const Scalar rstd = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
    out.rstd[t] = rstd;
    out.norm.row(t) = c * rstd;
  }
  out.y = (out.norm.array().rowwise() * gain.array()).rowwise() + bias.array();
  return out;
}

// Gradient w.r.t. the layer-norm input given the gradient w.r.t. its output.
template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& gy, const Matrix<Scalar>& norm,
                                   const Vector<Scalar>& rstd, const RowVector<Scalar>& gain) {
  const auto d = static_cast<Scalar>(gy.cols());
  Matrix<Scalar> gn = gy.array().rowwise() * gain.array();
  Matrix<Scalar> gx(gy.rows(), gy.cols());
  for (Eigen::Index t = 0; t < gy.rows(); ++t) {
    const Scalar mg = gn.row(t).sum() / d;
    const Scalar mgn = gn.row(t).dot(norm.row(t)) / d;
    gx.row(t) = rstd[t] * (gn.row(t).array() - mg - norm.row(t).array() * mgn).matrix();
  }
  return gx;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2 / pi)
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + Scalar(0.044715) * x * x * x)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);
  const Scalar u = c * (x + Scalar(0.044715) * x * x * x);
  const Scalar th = std::tanh(u);
  const Scalar du = c * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
  return Scalar(0.5) * (Scalar(1) + th) + Scalar(0.5) * x * (Scalar(1) - th * th) * du;
}

// Causal softmax of a score matrix; entries above the diagonal are zero.
template <typename Scalar>
Matrix<Scalar> causal_softmax(const Matrix<Scalar>& scores) {
  const auto n = scores.rows();
  Matrix<Scalar> p = Matrix<Scalar>::Zero(n, scores.cols());
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto row = scores.row(t).head(t + 1);
    const Scalar m = row.maxCoeff();
    auto e = (row.array() - m).exp();
    p.row(t).head(t + 1) = (e / e.sum()).matrix();
  }
  return p;
}

template <typename Scalar>
Matrix<Scalar> mlp(const Matrix<Scalar>& y, const Matrix<Scalar>& fc, const RowVector<Scalar>& fc_bias,
                   const Matrix<Scalar>& proj, const RowVector<Scalar>& proj_bias, Matrix<Scalar>* hidden) {
  Matrix<Scalar> h = (y * fc).rowwise() + fc_bias;
  Matrix<Scalar> a = h.unaryExpr([](Scalar v) { return gelu(v); });
  Matrix<Scalar> out = (a * proj).rowwise() + proj_bias;
  if (hidden) *hidden = std::move(h);
  return out;
}

}  // namespace peap::ops

#endif  // PEAP_SRC_OPS_HPP
