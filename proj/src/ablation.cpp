#include "peap/ablation.hpp"

#include "ops.hpp"
#include "peap/model.hpp"

#include <fmt/format.h>

#include <cmath>

namespace peap {

template <typename Scalar>
AblationSource<Scalar> AblationSource<Scalar>::from_trace(const ForwardTrace<Scalar>& tr) {
  AblationSource s;
  s.embed = tr.embed;
  for (const auto& lt : tr.layers) {
    s.head_out.push_back(lt.head_out);
    s.mlp_out.push_back(lt.mlp_out);
    s.q.push_back(lt.q);
    s.k.push_back(lt.k);
    s.v.push_back(lt.v);
  }
  return s;
}

template <typename Scalar>
ForwardTrace<Scalar> AblationSource<Scalar>::to_trace() const {
  ForwardTrace<Scalar> tr;
  tr.tokens.assign(static_cast<std::size_t>(length()), 0);
  tr.embed = embed;
  tr.layers.resize(head_out.size());
  for (std::size_t l = 0; l < head_out.size(); ++l) {
    auto& lt = tr.layers[l];
    lt.head_out = head_out[l];
    lt.mlp_out = mlp_out[l];
    lt.q = q[l];
    lt.k = k[l];
    lt.v = v[l];
  }
  return tr;
}

template <typename Scalar>
MeanReference<Scalar>::MeanReference(const std::vector<ForwardTrace<Scalar>>& refs, const std::vector<SpanMap>& maps) {
  if (refs.empty()) throw DataError("mean reference: empty reference set");
  if (refs.size() != maps.size()) throw DataError("mean reference: one span map per reference is required");
  const std::size_t k = maps[0].ranges.size();
  std::vector<int> max_len(k, 0);
  for (std::size_t x = 0; x < refs.size(); ++x) {
    if (maps[x].ranges.size() != k) throw DataError("mean reference: span maps disagree on the schema size");
    if (maps[x].length() != refs[x].length())
      throw DataError(fmt::format("mean reference: example {} has {} tokens but its map covers {}", x,
                                  refs[x].length(), maps[x].length()));
    for (std::size_t j = 0; j < k; ++j) max_len[j] = std::max(max_len[j], maps[x].span_length(static_cast<int>(j)));
  }
  int rows = 0;
  offset_rows_.resize(k);
  for (std::size_t j = 0; j < k; ++j)
    for (int o = 0; o < max_len[j]; ++o) offset_rows_[j].push_back(rows++);
  span_rows_.assign(k, -1);
  for (std::size_t j = 0; j < k; ++j)
    if (max_len[j] > 0) span_rows_[j] = rows++;
  global_row_ = rows++;

  means_ = AblationSource<Scalar>::from_trace(refs[0]);
  std::vector<Matrix<Scalar>*> dst;
  AblationSource<Scalar>::for_each_tensor(means_, [&](Matrix<Scalar>& m) {
    m = Matrix<Scalar>::Zero(rows, m.cols());
    dst.push_back(&m);
  });
  std::vector<double> count(static_cast<std::size_t>(rows), 0.0);
  for (std::size_t x = 0; x < refs.size(); ++x) {
    const auto src = AblationSource<Scalar>::from_trace(refs[x]);
    const auto pm = maps[x].position_map();
    std::vector<std::array<int, 3>> keys;  // per position: offset row, span row, global row
    for (int t = 0; t < refs[x].length(); ++t) {
      const int j = pm[static_cast<std::size_t>(t)];
      const int o = t - maps[x].ranges[static_cast<std::size_t>(j)].first;
      keys.push_back({offset_rows_[static_cast<std::size_t>(j)][static_cast<std::size_t>(o)],
                      span_rows_[static_cast<std::size_t>(j)], global_row_});
    }
    for (const auto& key : keys)
      for (int r : key) count[static_cast<std::size_t>(r)] += 1;
    std::size_t m = 0;
    AblationSource<Scalar>::for_each_tensor(src, [&](const Matrix<Scalar>& a) {
      auto& out = *dst[m++];
      if (a.cols() != out.cols()) throw DataError("mean reference: traces come from different models");
      for (std::size_t t = 0; t < keys.size(); ++t)
        for (int r : keys[t]) out.row(r) += a.row(static_cast<Eigen::Index>(t));
    });
  }
  for (auto* m : dst)
    for (int r = 0; r < rows; ++r) m->row(r) /= static_cast<Scalar>(count[static_cast<std::size_t>(r)]);
}

template <typename Scalar>
AblationSource<Scalar> MeanReference<Scalar>::source_for(const SpanMap& target) const {
  if (target.ranges.size() != offset_rows_.size())
    throw DataError(fmt::format("mean reference: target map has {} spans, references have {}", target.ranges.size(),
                                offset_rows_.size()));
  const int n = target.length();
  std::vector<int> rows(static_cast<std::size_t>(n));
  fallbacks_ = 0;
  for (std::size_t j = 0; j < target.ranges.size(); ++j) {
    const auto [b, e] = target.ranges[j];
    for (int t = b; t < e; ++t) {
      const auto o = static_cast<std::size_t>(t - b);
      if (o < offset_rows_[j].size()) {
        rows[static_cast<std::size_t>(t)] = offset_rows_[j][o];
      } else {
        ++fallbacks_;
        rows[static_cast<std::size_t>(t)] = span_rows_[j] >= 0 ? span_rows_[j] : global_row_;
      }
    }
  }
  AblationSource<Scalar> out = means_;
  std::size_t m = 0;
  std::vector<const Matrix<Scalar>*> src;
  AblationSource<Scalar>::for_each_tensor(means_, [&](const Matrix<Scalar>& a) { src.push_back(&a); });
  AblationSource<Scalar>::for_each_tensor(out, [&](Matrix<Scalar>& a) {
    const auto& in = *src[m++];
    a.resize(n, in.cols());
    for (int t = 0; t < n; ++t) a.row(t) = in.row(rows[static_cast<std::size_t>(t)]);
  });
  return out;
}

namespace {

// Sum of writer outputs as seen by one reader at position t. `ablated` and `corrupt`
// are the running totals over all writers (including constant biases); whichever side
// needs fewer corrections is used.
template <typename Scalar>
RowVector<Scalar> assemble(const std::vector<bool>& circuit, const Graph& g, int t, int reader,
                           const Matrix<Scalar>& ablated, const Matrix<Scalar>& corrupt,
                           const std::vector<Matrix<Scalar>>& delta) {
  const int p = g.reader_parent_count(reader);
  const EdgeId base = g.within_edge(t, reader, 0);
  int kept = 0;
  for (int w = 0; w < p; ++w) kept += circuit[static_cast<std::size_t>(base + w)];
  if (kept == p) return ablated.row(t);
  if (kept == 0) return corrupt.row(t);
  if (2 * kept <= p) {
    RowVector<Scalar> x = corrupt.row(t);
    for (int w = 0; w < p; ++w)
      if (circuit[static_cast<std::size_t>(base + w)]) x += delta[static_cast<std::size_t>(w)].row(t);
    return x;
  }
  RowVector<Scalar> x = ablated.row(t);
  for (int w = 0; w < p; ++w)
    if (!circuit[static_cast<std::size_t>(base + w)]) x -= delta[static_cast<std::size_t>(w)].row(t);
  return x;
}

}  // namespace

template <typename Scalar>
ForwardTrace<Scalar> ablated_forward(const ModelWeights<Scalar>& w, const std::vector<int>& tokens, const Graph& g,
                                     const std::vector<bool>& circuit, const AblationSource<Scalar>& src) {
  const auto& cfg = w.config;
  check_tokens(cfg, tokens);
  const int n = static_cast<int>(tokens.size());
  const int d = cfg.d_model, dh = cfg.d_head, H = cfg.n_heads;
  if (!(g.config() == cfg) || g.length() != n)
    throw DataError(fmt::format("ablated_forward: graph of length {} does not match the {}-token input", g.length(), n));
  if (circuit.size() != static_cast<std::size_t>(g.num_edges()))
    throw DataError("ablated_forward: circuit mask does not match the graph");
  if (src.length() != n)
    throw DataError(fmt::format("ablated_forward: ablation source has length {}, input has {}", src.length(), n));
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  ForwardTrace<Scalar> tr;
  tr.tokens = tokens;
  tr.token_embed.resize(n, d);
  for (int t = 0; t < n; ++t) tr.token_embed.row(t) = w.token_embedding.row(tokens[t]);
  tr.embed = tr.token_embed + w.position_embedding.topRows(n);

  // Writer deltas (this run minus source), in component order.
  std::vector<Matrix<Scalar>> delta;
  delta.reserve(static_cast<std::size_t>(g.components()));
  delta.push_back(tr.embed - src.embed);
  Matrix<Scalar> ablated = tr.embed, corrupt = src.embed;

  auto kept = [&](EdgeId e) { return !g.has_attention_edges() || circuit[static_cast<std::size_t>(e)]; };
  tr.layers.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    auto& lt = tr.layers[l];
    lt.resid_pre = ablated;
    lt.q.resize(n, d);
    lt.k.resize(n, d);
    lt.v.resize(n, d);
    lt.head_inputs.resize(static_cast<std::size_t>(3 * H));
    Matrix<Scalar>* chan[3] = {&lt.q, &lt.k, &lt.v};
    for (int i = 0; i < H; ++i)
      for (int c = 0; c < 3; ++c) {
        auto& x = lt.head_inputs[static_cast<std::size_t>(3 * i + c)];
        x.resize(n, d);
        const int r = g.head_reader(l, i, static_cast<Channel>(c));
        for (int t = 0; t < n; ++t) x.row(t) = assemble(circuit, g, t, r, ablated, corrupt, delta);
        const auto y = ops::layer_norm(x, lw.ln1_gain, lw.ln1_bias, cfg.layernorm_epsilon).y;
        const auto wslice = lw.qkv.middleCols(static_cast<Eigen::Index>(c) * d + i * dh, dh);
        head_block(*chan[c], i, dh) =
            (y * wslice).rowwise() + lw.qkv_bias.segment(static_cast<Eigen::Index>(c) * d + i * dh, dh);
      }

    ablated.rowwise() += lw.out_bias;
    corrupt.rowwise() += lw.out_bias;
    lt.pattern.resize(H);
    lt.head_out.resize(H);
    for (int i = 0; i < H; ++i) {
      const Matrix<Scalar> q = head_block(lt.q, i, dh), k = head_block(lt.k, i, dh), v = head_block(lt.v, i, dh);
      const Matrix<Scalar> qs = head_block(src.q[l], i, dh), ks = head_block(src.k[l], i, dh),
                           vs = head_block(src.v[l], i, dh);
      Matrix<Scalar> mixed = Matrix<Scalar>::Zero(n, dh);
      auto& p = lt.pattern[i];
      p = Matrix<Scalar>::Zero(n, n);
      for (int t = 0; t < n; ++t) {
        RowVector<Scalar> score(t + 1);
        for (int s = 0; s <= t; ++s) {
          const bool kq = kept(g.attention_edge(l, i, s, t, Channel::Q));
          const bool kk = kept(g.attention_edge(l, i, s, t, Channel::K));
          score[s] = (kq ? q.row(t) : qs.row(t)).dot(kk ? k.row(s) : ks.row(s)) * inv_sqrt;
        }
        const Scalar m = score.maxCoeff();
        RowVector<Scalar> e = (score.array() - m).exp().matrix();
        e /= e.sum();
        p.row(t).head(t + 1) = e;
        for (int s = 0; s <= t; ++s)
          mixed.row(t) += e[s] * (kept(g.attention_edge(l, i, s, t, Channel::V)) ? v.row(s) : vs.row(s));
      }
      lt.head_out[i] = mixed * w.head_out(l, i);
      delta.push_back(lt.head_out[i] - src.head_out[l][i]);
      ablated += lt.head_out[i];
      corrupt += src.head_out[l][i];
    }
    lt.resid_mid = ablated;

    Matrix<Scalar> x(n, d);
    const int r = g.mlp_reader(l);
    for (int t = 0; t < n; ++t) x.row(t) = assemble(circuit, g, t, r, ablated, corrupt, delta);
    const auto y = ops::layer_norm(x, lw.ln2_gain, lw.ln2_bias, cfg.layernorm_epsilon).y;
    lt.mlp_out = ops::mlp(y, lw.fc, lw.fc_bias, lw.proj, lw.proj_bias, &lt.mlp_hidden);
    delta.push_back(lt.mlp_out - src.mlp_out[l]);
    ablated += lt.mlp_out;
    corrupt += src.mlp_out[l];
  }

  // Logits read every component at the final position.
  const int last = n - 1;
  const EdgeId base = g.logits_edge(0);
  const int writers = g.components();
  int n_kept = 0;
  for (int c = 0; c < writers; ++c) n_kept += circuit[static_cast<std::size_t>(base + c)];
  RowVector<Scalar> xf;
  if (2 * n_kept <= writers) {
    xf = corrupt.row(last);
    for (int c = 0; c < writers; ++c)
      if (circuit[static_cast<std::size_t>(base + c)]) xf += delta[static_cast<std::size_t>(c)].row(last);
  } else {
    xf = ablated.row(last);
    for (int c = 0; c < writers; ++c)
      if (!circuit[static_cast<std::size_t>(base + c)]) xf -= delta[static_cast<std::size_t>(c)].row(last);
  }
  tr.resid_final = ablated;
  tr.resid_final.row(last) = xf;
  const Matrix<Scalar> fin = xf;
  const auto lnf = ops::layer_norm(fin, w.lnf_gain, w.lnf_bias, cfg.layernorm_epsilon);
  tr.logits = lnf.y * w.token_embedding.transpose();
  return tr;
}

template struct AblationSource<float>;
template struct AblationSource<double>;
template class MeanReference<float>;
template class MeanReference<double>;
template ForwardTrace<float> ablated_forward(const ModelWeights<float>&, const std::vector<int>&, const Graph&,
                                             const std::vector<bool>&, const AblationSource<float>&);
template ForwardTrace<double> ablated_forward(const ModelWeights<double>&, const std::vector<int>&, const Graph&,
                                              const std::vector<bool>&, const AblationSource<double>&);

}  // namespace peap
