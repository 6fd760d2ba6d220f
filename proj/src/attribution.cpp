#include "peap/attribution.hpp"

#include "peap/common.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace peap {

namespace {

template <typename Scalar>
void check_pair(const ForwardTrace<Scalar>& clean, const ForwardTrace<Scalar>& counter, const Graph& graph) {
  if (clean.length() != counter.length())
    throw DataError(fmt::format("attribution: clean length {} != counterfactual length {}", clean.length(),
                                counter.length()));
  if (clean.length() != graph.length())
    throw DataError(fmt::format("attribution: trace length {} != graph length {}", clean.length(), graph.length()));
}

// Output of a residual writer, all positions.
template <typename Scalar>
const Matrix<Scalar>& writer_output(const ForwardTrace<Scalar>& tr, const Graph& g, int comp) {
  if (comp == 0) return tr.embed;
  const NodeRef n = g.component_ref(comp, 0);
  if (n.kind == NodeKind::Head) return tr.layers[n.layer].head_out[n.head];
  return tr.layers[n.layer].mlp_out;
}

// Gradient w.r.t. a writer's output, all positions.
template <typename Scalar>
const Matrix<Scalar>& writer_gradient(const GradientTrace<Scalar>& gr, const Graph& g, int comp) {
  if (comp == 0) return gr.embed;
  const NodeRef n = g.component_ref(comp, 0);
  if (n.kind == NodeKind::Head) return gr.layers[n.layer].resid_mid;
  return gr.layers[n.layer].resid_post;
}

template <typename Scalar>
const Matrix<Scalar>& reader_gradient(const GradientTrace<Scalar>& gr, const Graph& g, int reader) {
  const int per_layer = 3 * g.config().n_heads + 1;
  const int l = reader / per_layer, j = reader % per_layer;
  if (j == 3 * g.config().n_heads) return gr.layers[l].mlp_in;
  return gr.layers[l].head_inputs[static_cast<std::size_t>(j)];
}

}  // namespace

template <typename Scalar>
AttributionTable eap_within_position(const ForwardTrace<Scalar>& clean, const ForwardTrace<Scalar>& counter,
                                     const GradientTrace<Scalar>& grads, const Graph& graph) {
  check_pair(clean, counter, graph);
  const int n = graph.length(), U = graph.components(), R = graph.num_readers();
  const int d = graph.config().d_model;
  AttributionTable table;
  table.scores.assign(static_cast<std::size_t>(graph.num_edges()), 0.0);

  std::vector<Matrix<Scalar>> delta(static_cast<std::size_t>(U));
  for (int c = 0; c < U; ++c) delta[c] = writer_output(counter, graph, c) - writer_output(clean, graph, c);

  Matrix<Scalar> D(U, d), G(R, d);
  for (int t = 0; t < n; ++t) {
    for (int c = 0; c < U; ++c) D.row(c) = delta[c].row(t);
    for (int r = 0; r < R; ++r) G.row(r) = reader_gradient(grads, graph, r).row(t);
    const Matrix<Scalar> S = G * D.transpose();  // readers x writers
    for (int r = 0; r < R; ++r) {
      const EdgeId base = graph.within_edge(t, r, 0);
      for (int w = 0; w < graph.reader_parent_count(r); ++w)
        table.scores[static_cast<std::size_t>(base + w)] = static_cast<double>(S(r, w));
    }
  }
  const RowVector<Scalar> g_logits = grads.logits_in.row(n - 1);
  for (int w = 0; w < U; ++w)
    table.scores[static_cast<std::size_t>(graph.logits_edge(w))] =
        static_cast<double>(delta[w].row(n - 1).dot(g_logits));
  return table;
}

template <typename Scalar>
void peap_attention_scores(const ModelWeights<Scalar>& weights, const ForwardTrace<Scalar>& clean,
                           const ForwardTrace<Scalar>& counter, const GradientTrace<Scalar>& grads,
                           const Graph& graph, AttributionTable& table) {
  check_pair(clean, counter, graph);
  if (!graph.has_attention_edges()) return;
  if (table.scores.size() != static_cast<std::size_t>(graph.num_edges()))
    table.scores.assign(static_cast<std::size_t>(graph.num_edges()), 0.0);
  const auto& cfg = graph.config();
  const int n = graph.length(), dh = cfg.d_head;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  using MatD = Matrix<double>;

  std::vector<double> ell(n), e(n), w(n), pre_e(n + 1), pre_ew(n + 1);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lc = clean.layers[l];
    const auto& lx = counter.layers[l];
    for (int i = 0; i < cfg.n_heads; ++i) {
      const MatD q = head_block(lc.q, i, dh).template cast<double>();
      const MatD k = head_block(lc.k, i, dh).template cast<double>();
      const MatD v = head_block(lc.v, i, dh).template cast<double>();
      const MatD qx = head_block(lx.q, i, dh).template cast<double>();
      const MatD kx = head_block(lx.k, i, dh).template cast<double>();
      const MatD vx = head_block(lx.v, i, dh).template cast<double>();
      const MatD go_all = (grads.layers[l].resid_mid * weights.head_out(l, i).transpose()).template cast<double>();
      const auto& pattern = lc.pattern[i];

      for (int t = 0; t < n; ++t) {
        const auto go = go_all.row(t);
        double m = -std::numeric_limits<double>::infinity();
        for (int s = 0; s <= t; ++s) {
          ell[s] = q.row(t).dot(k.row(s)) * inv_sqrt;
          w[s] = v.row(s).dot(go);
          m = std::max(m, ell[s]);
        }
        pre_e[0] = pre_ew[0] = 0.0;
        for (int s = 0; s <= t; ++s) {
          e[s] = std::exp(ell[s] - m);
          pre_e[s + 1] = pre_e[s] + e[s];
          pre_ew[s + 1] = pre_ew[s] + e[s] * w[s];
        }
        const double z = pre_e[t + 1];
        const double old = pre_ew[t + 1] / z;
        // Weighted value sum after replacing slot s's pre-softmax score with `ell_new`.
        auto patched = [&](int s, double ell_new) {
          const double rest_e = pre_e[s] + (pre_e[t + 1] - pre_e[s + 1]);
          const double rest_ew = pre_ew[s] + (pre_ew[t + 1] - pre_ew[s + 1]);
          const double m2 = std::max(m, ell_new);
          const double scale = std::exp(m - m2), e_new = std::exp(ell_new - m2);
          return (rest_ew * scale + e_new * w[s]) / (rest_e * scale + e_new);
        };
        for (int s = 0; s <= t; ++s) {
          const double a = static_cast<double>(pattern(t, s));
          auto& sv = table.scores[static_cast<std::size_t>(graph.attention_edge(l, i, s, t, Channel::V))];
          sv = a * (vx.row(s) - v.row(s)).dot(go);

          const double ell_k = q.row(t).dot(kx.row(s)) * inv_sqrt;
          auto& sk = table.scores[static_cast<std::size_t>(graph.attention_edge(l, i, s, t, Channel::K))];
          sk = ell_k == ell[s] ? 0.0 : patched(s, ell_k) - old;

          const double ell_q = qx.row(t).dot(k.row(s)) * inv_sqrt;
          auto& sq = table.scores[static_cast<std::size_t>(graph.attention_edge(l, i, s, t, Channel::Q))];
          sq = ell_q == ell[s] ? 0.0 : patched(s, ell_q) - old;
        }
      }
    }
  }
}

template <typename Scalar>
AttributionTable attribute(const ModelWeights<Scalar>& weights, const ForwardTrace<Scalar>& clean,
                           const ForwardTrace<Scalar>& counter, const GradientTrace<Scalar>& grads,
                           const Graph& graph) {
  AttributionTable table = eap_within_position(clean, counter, grads, graph);
  peap_attention_scores(weights, clean, counter, grads, graph, table);
  return table;
}

template <typename Scalar>
std::vector<double> node_attribution(const ForwardTrace<Scalar>& clean, const ForwardTrace<Scalar>& counter,
                                     const GradientTrace<Scalar>& grads, const Graph& graph) {
  check_pair(clean, counter, graph);
  std::vector<double> out(static_cast<std::size_t>(graph.num_nodes()), 0.0);
  for (int c = 0; c < graph.components(); ++c) {
    const Matrix<Scalar> delta = writer_output(counter, graph, c) - writer_output(clean, graph, c);
    const auto& g = writer_gradient(grads, graph, c);
    for (int t = 0; t < graph.length(); ++t)
      out[static_cast<std::size_t>(t * graph.components() + c)] = static_cast<double>(delta.row(t).dot(g.row(t)));
  }
  return out;
}

std::vector<double> position_importance(const std::vector<double>& node_scores, const Graph& graph) {
  std::vector<double> out(static_cast<std::size_t>(graph.length()), 0.0);
  for (int t = 0; t < graph.length(); ++t)
    for (int c = 0; c < graph.components(); ++c)
      out[static_cast<std::size_t>(t)] += node_scores[static_cast<std::size_t>(t * graph.components() + c)];
  return out;
}

SaliencyMask SaliencyMask::from_scores(std::vector<double> s) {
  if (s.empty()) throw DataError("saliency mask of an empty sequence");
  SaliencyMask out;
  const double m = *std::max_element(s.begin(), s.end());
  double z = 0;
  for (double v : s) z += std::exp(v - m);
  const double threshold = 1.0 / static_cast<double>(s.size());
  for (double v : s) out.mask.push_back(std::exp(v - m) / z > threshold);
  out.saliency = std::move(s);
  return out;
}

template <typename Scalar>
SaliencyMask saliency_mask(const ForwardTrace<Scalar>& trace, const GradientTrace<Scalar>& grads) {
  if (trace.length() == 0) throw DataError("saliency mask of an empty sequence");
  std::vector<double> s(static_cast<std::size_t>(trace.length()));
  for (int t = 0; t < trace.length(); ++t)
    s[static_cast<std::size_t>(t)] =
        (trace.token_embed.row(t).array() * grads.embed.row(t).array()).template cast<double>().matrix().norm();
  return SaliencyMask::from_scores(std::move(s));
}

#define PEAP_INSTANTIATE(S)                                                                                    \
  template AttributionTable eap_within_position(const ForwardTrace<S>&, const ForwardTrace<S>&,              \
                                                const GradientTrace<S>&, const Graph&);                      \
  template void peap_attention_scores(const ModelWeights<S>&, const ForwardTrace<S>&, const ForwardTrace<S>&, \
                                      const GradientTrace<S>&, const Graph&, AttributionTable&);             \
  template AttributionTable attribute(const ModelWeights<S>&, const ForwardTrace<S>&, const ForwardTrace<S>&, \
                                      const GradientTrace<S>&, const Graph&);                                \
  template std::vector<double> node_attribution(const ForwardTrace<S>&, const ForwardTrace<S>&,              \
                                                const GradientTrace<S>&, const Graph&);                      \
  template SaliencyMask saliency_mask(const ForwardTrace<S>&, const GradientTrace<S>&);
PEAP_INSTANTIATE(float)
PEAP_INSTANTIATE(double)
#undef PEAP_INSTANTIATE

}  // namespace peap
