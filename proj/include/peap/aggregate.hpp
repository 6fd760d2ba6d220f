#ifndef PEAP_AGGREGATE_HPP
#define PEAP_AGGREGATE_HPP

#include "peap/attribution.hpp"
#include "peap/graph.hpp"

#include <string>
#include <vector>

namespace peap {

// How the concrete edges that share one target edge are collapsed within an example.
// Across examples the collapsed values are always averaged.
//   Positional: plain sum (the identity on a one-to-one map)
//   AbsThenSum: sum of |g|     SumThenAbs: |sum of g|     MaxAbs: max of |g|
enum class AggregationMode { Positional, AbsThenSum, SumThenAbs, MaxAbs };

std::string to_string(AggregationMode m);
AggregationMode aggregation_mode_from_string(const std::string& s);

// Visits f(source_edge, target_edge) for every edge of `source` that has an image in
// `target` under a position map (source position -> target position). The map must be
// non-decreasing and send the last source position to the last target position.
// Attention edges have no image when the target graph omits them.
template <typename F>
void for_each_mapped_edge(const Graph& source, const Graph& target, const std::vector<int>& position_map, F&& f);

void check_position_map(const Graph& source, const Graph& target, const std::vector<int>& position_map);
std::vector<int> identity_position_map(int length);
std::vector<int> collapse_position_map(int length);  // everything onto position 0

// The position-free graph whose edges are the component pairs of `positional`.
Graph collapsed_graph(const Graph& positional, bool attention_edges);

// Streaming mean over examples of per-example collapsed tables. Tables from different
// source graphs can be mixed as long as each comes with its own position map.
class Aggregator {
 public:
  Aggregator(Graph target, AggregationMode mode);

  void add(const AttributionTable& table, const Graph& source, const std::vector<int>& position_map);
  void add(const AttributionTable& table);  // source graph equals the target graph
  void merge(const Aggregator& other);

  int count() const { return count_; }
  const Graph& target() const { return target_; }
  AttributionTable result() const;

 private:
  Graph target_;
  AggregationMode mode_;
  std::vector<double> total_;
  std::vector<double> scratch_;
  int count_ = 0;
};

// Convenience wrapper for fixed-length data: Positional keeps per-position keys; the
// other modes collapse positions onto `collapsed_graph(graph, attention_edges)`.
AttributionTable aggregate(const std::vector<AttributionTable>& tables, const Graph& graph, AggregationMode mode,
                           bool attention_edges = true);

template <typename F>
void for_each_mapped_edge(const Graph& source, const Graph& target, const std::vector<int>& pm, F&& f) {
  check_position_map(source, target, pm);
  const auto& cfg = source.config();
  const EdgeId within = source.within_edges_per_position();
  for (int t = 0; t < source.length(); ++t) {
    const EdgeId sb = source.block_start(t), tb = target.block_start(pm[static_cast<std::size_t>(t)]);
    for (EdgeId o = 0; o < within; ++o) f(sb + o, tb + o);
    if (!source.has_attention_edges() || !target.has_attention_edges()) continue;
    const int tt = pm[static_cast<std::size_t>(t)];
    for (int l = 0; l < cfg.n_layers; ++l)
      for (int i = 0; i < cfg.n_heads; ++i)
        for (int s = 0; s <= t; ++s) {
          const int ts = pm[static_cast<std::size_t>(s)];
          const EdgeId se = source.attention_edge(l, i, s, t, Channel::Q);
          const EdgeId te = target.attention_edge(l, i, ts, tt, Channel::Q);
          f(se, te);
          f(se + 1, te + 1);
          f(se + 2, te + 2);
        }
  }
  for (int w = 0; w < source.components(); ++w) f(source.logits_edge(w), target.logits_edge(w));
}

}  // namespace peap

#endif  // PEAP_AGGREGATE_HPP
