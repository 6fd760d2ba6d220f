#ifndef PEAP_SCHEMA_HPP
#define PEAP_SCHEMA_HPP

#include "peap/aggregate.hpp"
#include "peap/attribution.hpp"
#include "peap/graph.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace peap {

struct Span {
  std::string title;
  std::string description;
};

// Ordered, uniquely titled spans shared by every example of a dataset.
struct Schema {
  std::vector<Span> spans;

  int size() const { return static_cast<int>(spans.size()); }
  std::optional<int> index_of(const std::string& title) const;
  std::vector<std::string> titles() const;

  // Throws DataError on an empty schema or duplicate titles.
  void validate() const;

  // {"title": "description", ...} with key order preserved.
  nlohmann::ordered_json to_json() const;
  static Schema from_json(const nlohmann::ordered_json& j);
};

// Token ranges [begin, end), one per schema span in order; empty ranges are allowed.
struct SpanMap {
  std::string example_id;
  std::vector<std::pair<int, int>> ranges;

  int length() const { return ranges.empty() ? 0 : ranges.back().second; }
  int span_length(int k) const { return ranges[static_cast<std::size_t>(k)].second - ranges[static_cast<std::size_t>(k)].first; }
  // Span index of every token; requires a valid map.
  std::vector<int> position_map() const;
  bool operator==(const SpanMap& o) const { return ranges == o.ranges; }

  static SpanMap one_token_per_span(int n);
  static SpanMap from_lengths(const std::vector<int>& lengths);

  nlohmann::json to_json() const;
  static SpanMap from_json(const nlohmann::json& j);
};

struct ValidationOptions {
  bool strict_final = true;  // the last token must sit alone in the last span
  bool allow_empty = true;   // empty spans are rejected when false
};

struct Verdict {
  bool valid = true;
  std::vector<std::string> reasons;

  void fail(std::string reason) {
    valid = false;
    reasons.push_back(std::move(reason));
  }
  std::string summary() const;
};

// Checks a resolved span map against an n-token prompt.
Verdict validate_application(const Schema& schema, int n_tokens, const SpanMap& map,
                             const ValidationOptions& options = {});

// An application as returned by a labeller: span title -> token strings, in the
// labeller's order.
struct Application {
  std::vector<std::pair<std::string, std::vector<std::string>>> spans;

  nlohmann::ordered_json to_json() const;
  static Application from_json(const nlohmann::ordered_json& j);
  static Application from_span_map(const Schema& schema, const std::vector<std::string>& tokens, const SpanMap& map);
};

struct Resolution {
  Verdict verdict;
  std::optional<SpanMap> map;  // present iff the verdict is valid
};

// Matches an application's token strings against the prompt tokens and reports every
// violated rule (missing, extra or misordered spans, skipped or repeated tokens,
// uncovered tokens, the final-token rule, empty spans in strict mode).
Resolution resolve_application(const Schema& schema, const std::vector<std::string>& tokens,
                               const Application& app, const ValidationOptions& options = {});

// The abstract graph of a schema is the computation graph over span positions.
Graph abstract_graph(const ModelConfig& config, const Schema& schema, bool attention_edges = true);

// Concrete edges of G_x represented by one abstract edge: same components and channel,
// endpoints inside the named spans, and source <= target for attention pairs.
std::vector<EdgeId> map_edge(const Graph& abstract, EdgeId abstract_edge, const SpanMap& map, const Graph& concrete);
std::int64_t mapped_count(const Graph& abstract, EdgeId abstract_edge, const SpanMap& map);

// g_S(e) = mean over examples of the summed scores of mapped concrete edges.
AttributionTable aggregate_abstract(const std::vector<AttributionTable>& tables, const std::vector<Graph>& graphs,
                                    const std::vector<SpanMap>& maps, const Graph& abstract,
                                    AggregationMode mode = AggregationMode::Positional);

struct GroundedCircuit {
  std::vector<bool> edges;  // membership over the concrete graph's edge ids
  std::int64_t size = 0;

  bool contains(EdgeId id) const { return edges[static_cast<std::size_t>(id)]; }
};

// C_x = union of f(e) over e in the abstract circuit.
GroundedCircuit ground_circuit(const std::vector<EdgeId>& abstract_circuit, const Graph& abstract,
                               const SpanMap& map, const Graph& concrete);

}  // namespace peap

#endif  // PEAP_SCHEMA_HPP
