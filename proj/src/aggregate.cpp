#include "peap/aggregate.hpp"

#include "peap/common.hpp"

#include <fmt/format.h>

#include <cmath>

namespace peap {

std::string to_string(AggregationMode m) {
  switch (m) {
    case AggregationMode::Positional: return "positional";
    case AggregationMode::AbsThenSum: return "abs-then-sum";
    case AggregationMode::SumThenAbs: return "sum-then-abs";
    case AggregationMode::MaxAbs: return "max-abs";
  }
  return "?";
}

AggregationMode aggregation_mode_from_string(const std::string& s) {
  for (auto m : {AggregationMode::Positional, AggregationMode::AbsThenSum, AggregationMode::SumThenAbs,
                 AggregationMode::MaxAbs})
    if (to_string(m) == s) return m;
  throw ConfigError(fmt::format("unknown aggregation mode '{}'", s));
}

void check_position_map(const Graph& source, const Graph& target, const std::vector<int>& pm) {
  if (!(source.config() == target.config())) throw DataError("position map: graphs belong to different models");
  if (static_cast<int>(pm.size()) != source.length())
    throw DataError(fmt::format("position map covers {} positions, graph has {}", pm.size(), source.length()));
  int prev = 0;
  for (int p : pm) {
    if (p < prev || p >= target.length())
      throw DataError("position map must be non-decreasing and inside the target graph");
    prev = p;
  }
  if (pm.back() != target.length() - 1)
    throw DataError("position map must send the final position onto the final target position");
}

std::vector<int> identity_position_map(int length) {
  std::vector<int> pm(static_cast<std::size_t>(length));
  for (int t = 0; t < length; ++t) pm[static_cast<std::size_t>(t)] = t;
  return pm;
}

std::vector<int> collapse_position_map(int length) { return std::vector<int>(static_cast<std::size_t>(length), 0); }

Graph collapsed_graph(const Graph& positional, bool attention_edges) {
  return Graph(positional.config(), 1, attention_edges && positional.has_attention_edges());
}

Aggregator::Aggregator(Graph target, AggregationMode mode)
    : target_(std::move(target)),
      mode_(mode),
      total_(static_cast<std::size_t>(target_.num_edges()), 0.0),
      scratch_(total_.size(), 0.0) {}

void Aggregator::add(const AttributionTable& table, const Graph& source, const std::vector<int>& pm) {
  if (table.scores.size() != static_cast<std::size_t>(source.num_edges()))
    throw DataError(fmt::format("aggregate: table has {} scores, source graph {} edges", table.scores.size(),
                                source.num_edges()));
  std::fill(scratch_.begin(), scratch_.end(), 0.0);
  auto& acc = scratch_;
  switch (mode_) {
    case AggregationMode::Positional:
    case AggregationMode::SumThenAbs:
      for_each_mapped_edge(source, target_, pm, [&](EdgeId s, EdgeId t) { acc[static_cast<std::size_t>(t)] += table[s]; });
      break;
    case AggregationMode::AbsThenSum:
      for_each_mapped_edge(source, target_, pm,
                           [&](EdgeId s, EdgeId t) { acc[static_cast<std::size_t>(t)] += std::abs(table[s]); });
      break;
    case AggregationMode::MaxAbs:
      for_each_mapped_edge(source, target_, pm, [&](EdgeId s, EdgeId t) {
        auto& a = acc[static_cast<std::size_t>(t)];
        a = std::max(a, std::abs(table[s]));
      });
      break;
  }
  const bool take_abs = mode_ == AggregationMode::SumThenAbs;
  for (std::size_t i = 0; i < total_.size(); ++i) total_[i] += take_abs ? std::abs(acc[i]) : acc[i];
  ++count_;
}

void Aggregator::add(const AttributionTable& table) {
  if (table.scores.size() != total_.size())
    throw DataError("aggregate: key-set mismatch between tables");
  add(table, target_, identity_position_map(target_.length()));
}

void Aggregator::merge(const Aggregator& other) {
  if (other.total_.size() != total_.size() || other.mode_ != mode_)
    throw DataError("aggregate: cannot merge aggregators over different keys or modes");
  for (std::size_t i = 0; i < total_.size(); ++i) total_[i] += other.total_[i];
  count_ += other.count_;
}

AttributionTable Aggregator::result() const {
  if (count_ == 0) throw DataError("aggregate: no tables were added");
  AttributionTable out;
  out.scores.resize(total_.size());
  for (std::size_t i = 0; i < total_.size(); ++i) out.scores[i] = total_[i] / count_;
  out.mode = to_string(mode_);
  out.examples = count_;
  return out;
}

AttributionTable aggregate(const std::vector<AttributionTable>& tables, const Graph& graph, AggregationMode mode,
                           bool attention_edges) {
  if (tables.empty()) throw DataError("aggregate: no tables");
  const bool positional = mode == AggregationMode::Positional;
  Aggregator agg(positional ? graph : collapsed_graph(graph, attention_edges), mode);
  const auto pm = positional ? identity_position_map(graph.length()) : collapse_position_map(graph.length());
  for (const auto& t : tables) {
    if (t.scores.size() != static_cast<std::size_t>(graph.num_edges()))
      throw DataError("aggregate: key-set mismatch between tables");
    agg.add(t, graph, pm);
  }
  auto out = agg.result();
  out.model_id = tables.front().model_id;
  out.dataset_hash = tables.front().dataset_hash;
  return out;
}

}  // namespace peap
