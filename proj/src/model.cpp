#include "peap/model.hpp"

#include "ops.hpp"

#include <fmt/format.h>

#include <cmath>

namespace peap {

void check_tokens(const ModelConfig& config, const std::vector<int>& tokens) {
  if (tokens.empty()) throw DataError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_positions)
    throw DataError(fmt::format("forward: input of {} tokens exceeds max_positions {}", tokens.size(),
                                config.max_positions));
  for (int id : tokens)
    if (id < 0 || id >= config.vocab_size)
      throw DataError(fmt::format("forward: token id {} outside vocabulary of size {}", id, config.vocab_size));
}

template <typename Scalar>
ForwardTrace<Scalar> forward(const ModelWeights<Scalar>& w, const std::vector<int>& tokens,
                             const ForwardOptions& options) {
  const auto& cfg = w.config;
  check_tokens(cfg, tokens);
  const int n = static_cast<int>(tokens.size());
  const int d = cfg.d_model, dh = cfg.d_head;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  ForwardTrace<Scalar> tr;
  tr.tokens = tokens;
  tr.token_embed.resize(n, d);
  for (int t = 0; t < n; ++t) tr.token_embed.row(t) = w.token_embedding.row(tokens[t]);
  tr.embed = tr.token_embed + w.position_embedding.topRows(n);

  Matrix<Scalar> x = tr.embed;
  tr.layers.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    auto& lt = tr.layers[l];
    lt.resid_pre = x;
    auto ln1 = ops::layer_norm(x, lw.ln1_gain, lw.ln1_bias, cfg.layernorm_epsilon);
    lt.ln1_norm = std::move(ln1.norm);
    lt.ln1_rstd = std::move(ln1.rstd);
    Matrix<Scalar> qkv = (ln1.y * lw.qkv).rowwise() + lw.qkv_bias;
    lt.q = qkv.leftCols(d);
    lt.k = qkv.middleCols(d, d);
    lt.v = qkv.rightCols(d);

    Matrix<Scalar> mid = x.rowwise() + lw.out_bias;
    lt.pattern.resize(cfg.n_heads);
    lt.head_out.resize(cfg.n_heads);
    for (int i = 0; i < cfg.n_heads; ++i) {
      Matrix<Scalar> scores = head_block(lt.q, i, dh) * head_block(lt.k, i, dh).transpose() * inv_sqrt;
      lt.pattern[i] = ops::causal_softmax(scores);
      lt.head_out[i] = lt.pattern[i] * head_block(lt.v, i, dh) * w.head_out(l, i);
      mid += lt.head_out[i];
    }
    lt.resid_mid = mid;
    auto ln2 = ops::layer_norm(mid, lw.ln2_gain, lw.ln2_bias, cfg.layernorm_epsilon);
    lt.ln2_norm = std::move(ln2.norm);
    lt.ln2_rstd = std::move(ln2.rstd);
    lt.mlp_out = ops::mlp(ln2.y, lw.fc, lw.fc_bias, lw.proj, lw.proj_bias, &lt.mlp_hidden);
    x = mid + lt.mlp_out;
  }
  tr.resid_final = x;
  auto lnf = ops::layer_norm(x, w.lnf_gain, w.lnf_bias, cfg.layernorm_epsilon);
  tr.lnf_norm = std::move(lnf.norm);
  tr.lnf_rstd = std::move(lnf.rstd);
  if (options.all_logits)
    tr.logits = lnf.y * w.token_embedding.transpose();
  else
    tr.logits = lnf.y.bottomRows(1) * w.token_embedding.transpose();
  return tr;
}

template <typename Scalar>
GradientTrace<Scalar> backward(const ModelWeights<Scalar>& w, const ForwardTrace<Scalar>& tr,
                               const MetricSpec& metric) {
  const auto& cfg = w.config;
  const int n = tr.length();
  const int d = cfg.d_model, dh = cfg.d_head;
  if (static_cast<int>(tr.layers.size()) != cfg.n_layers) throw DataError("backward: trace does not match weights");
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  GradientTrace<Scalar> g;
  const RowVector<Scalar> logits = tr.final_logits();
  g.metric = metric.evaluate(logits);
  g.logits = metric.gradient(logits);

  Matrix<Scalar> gy = Matrix<Scalar>::Zero(n, d);
  gy.row(n - 1) = g.logits * w.token_embedding;
  g.logits_in = Matrix<Scalar>::Zero(n, d);
  {
    Matrix<Scalar> last = ops::layer_norm_backward<Scalar>(gy.bottomRows(1), tr.lnf_norm.bottomRows(1),
                                                           tr.lnf_rstd.tail(1), w.lnf_gain);
    g.logits_in.row(n - 1) = last.row(0);
  }

  Matrix<Scalar> grad = g.logits_in;
  g.layers.resize(cfg.n_layers);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& lw = w.layers[l];
    const auto& lt = tr.layers[l];
    auto& lg = g.layers[l];
    lg.resid_post = grad;

    Matrix<Scalar> g_act = grad * lw.proj.transpose();
    Matrix<Scalar> g_h = g_act.array() * lt.mlp_hidden.unaryExpr([](Scalar v) { return ops::gelu_grad(v); }).array();
    Matrix<Scalar> g_y2 = g_h * lw.fc.transpose();
    lg.mlp_in = ops::layer_norm_backward(g_y2, lt.ln2_norm, lt.ln2_rstd, lw.ln2_gain);
    lg.resid_mid = grad + lg.mlp_in;

    lg.q.resize(n, d);
    lg.k.resize(n, d);
    lg.v.resize(n, d);
    for (int i = 0; i < cfg.n_heads; ++i) {
      const auto& p = lt.pattern[i];
      Matrix<Scalar> g_o = lg.resid_mid * w.head_out(l, i).transpose();  // n x dh
      Matrix<Scalar> g_p = g_o * head_block(lt.v, i, dh).transpose();
      head_block(lg.v, i, dh) = p.transpose() * g_o;
      Matrix<Scalar> g_s(n, n);
      for (int t = 0; t < n; ++t) {
        const Scalar dot = p.row(t).dot(g_p.row(t));
        g_s.row(t) = (p.row(t).array() * (g_p.row(t).array() - dot)).matrix() * inv_sqrt;
      }
      head_block(lg.q, i, dh) = g_s * head_block(lt.k, i, dh);
      head_block(lg.k, i, dh) = g_s.transpose() * head_block(lt.q, i, dh);
    }

    lg.head_inputs.resize(static_cast<std::size_t>(3 * cfg.n_heads));
    Matrix<Scalar> g_pre = lg.resid_mid;
    const Matrix<Scalar>* chan[3] = {&lg.q, &lg.k, &lg.v};
    for (int i = 0; i < cfg.n_heads; ++i) {
      for (int c = 0; c < 3; ++c) {
        const auto wslice = lw.qkv.middleCols(static_cast<Eigen::Index>(c) * d + i * dh, dh);
        Matrix<Scalar> g_y1 = head_block(*chan[c], i, dh) * wslice.transpose();
        auto& hi = lg.head_inputs[static_cast<std::size_t>(3 * i + c)];
        hi = ops::layer_norm_backward(g_y1, lt.ln1_norm, lt.ln1_rstd, lw.ln1_gain);
        g_pre += hi;
      }
    }
    lg.resid_pre = g_pre;
    grad = std::move(g_pre);
  }
  g.embed = std::move(grad);
  return g;
}

template <typename Scalar>
Matrix<Scalar> recompose_residual(const ModelWeights<Scalar>& w, const ForwardTrace<Scalar>& tr, int layer) {
  Matrix<Scalar> x = tr.token_embed + w.position_embedding.topRows(tr.length());
  for (int l = 0; l < layer; ++l) {
    const auto& lt = tr.layers[l];
    for (const auto& z : lt.head_out) x += z;
    x.rowwise() += w.layers[l].out_bias;
    x += lt.mlp_out;
  }
  return x;
}

template ForwardTrace<float> forward(const ModelWeights<float>&, const std::vector<int>&, const ForwardOptions&);
template ForwardTrace<double> forward(const ModelWeights<double>&, const std::vector<int>&, const ForwardOptions&);
template GradientTrace<float> backward(const ModelWeights<float>&, const ForwardTrace<float>&, const MetricSpec&);
template GradientTrace<double> backward(const ModelWeights<double>&, const ForwardTrace<double>&, const MetricSpec&);
template Matrix<float> recompose_residual(const ModelWeights<float>&, const ForwardTrace<float>&, int);
template Matrix<double> recompose_residual(const ModelWeights<double>&, const ForwardTrace<double>&, int);

}  // namespace peap
