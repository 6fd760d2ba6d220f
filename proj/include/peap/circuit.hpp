#ifndef PEAP_CIRCUIT_HPP
#define PEAP_CIRCUIT_HPP

#include "peap/attribution.hpp"
#include "peap/graph.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <queue>
#include <string>
#include <vector>

namespace peap {

// Minimal DAG for hand-built fixtures and property tests. Node 0..n-1; the root plays
// the role of Logits and `sources` the role of Embed nodes.
class ExplicitDag {
 public:
  ExplicitDag(int nodes, int root, std::vector<int> sources, std::vector<std::pair<int, int>> edges);

  EdgeId num_edges() const { return static_cast<EdgeId>(edges_.size()); }
  int num_nodes() const { return nodes_; }
  int logits_node() const { return root_; }
  bool is_embed(int node) const { return is_source_[static_cast<std::size_t>(node)]; }
  int parent(EdgeId e) const { return edges_[static_cast<std::size_t>(e)].first; }
  int child(EdgeId e) const { return edges_[static_cast<std::size_t>(e)].second; }
  template <typename F>
  void for_each_parent_edge(int node, F&& f) const {
    for (EdgeId e : into_[static_cast<std::size_t>(node)]) f(e);
  }

 private:
  int nodes_, root_;
  std::vector<bool> is_source_;
  std::vector<std::pair<int, int>> edges_;
  std::vector<std::vector<EdgeId>> into_;
};

struct BuildStep {
  EdgeId edge;
  double score;
  bool new_parent;  // the parent node joined the circuit with this edge
};

struct BuildLog {
  EdgeId requested = 0;
  EdgeId budget = 0;      // requested, clamped to |E|
  bool clamped = false;
  bool exhausted = false;  // ran out of candidates before the budget
  std::vector<BuildStep> steps;  // selection order, before pruning
  int prune_rounds = 0;
  EdgeId pruned = 0;
  std::vector<std::string> notes;
};

struct Circuit {
  std::vector<bool> edges;  // membership by edge id of the graph it was built on
  std::vector<bool> nodes;  // nodes touched by a kept edge (plus Logits when non-empty)
  EdgeId size = 0;
  std::string mode = "positional";
  BuildLog log;

  bool contains(EdgeId id) const { return edges[static_cast<std::size_t>(id)]; }
  bool empty() const { return size == 0; }
  std::vector<EdgeId> edge_list() const;
};

// Drops edges until every remaining node reaches an Embed node and is reached from
// Logits along kept edges. Returns the number of rounds until nothing changed.
template <typename Dag>
int prune_to_fixed_point(const Dag& dag, std::vector<bool>& edges) {
  const int nn = dag.num_nodes();
  int rounds = 0;
  for (;;) {
    ++rounds;
    std::vector<std::vector<EdgeId>> out(static_cast<std::size_t>(nn)), in(static_cast<std::size_t>(nn));
    for (EdgeId e = 0; e < dag.num_edges(); ++e) {
      if (!edges[static_cast<std::size_t>(e)]) continue;
      out[static_cast<std::size_t>(dag.parent(e))].push_back(e);
      in[static_cast<std::size_t>(dag.child(e))].push_back(e);
    }
    // Nodes that reach an embedding: walk child-ward from every Embed node.
    std::vector<bool> grounded(static_cast<std::size_t>(nn), false), live(static_cast<std::size_t>(nn), false);
    std::vector<int> stack;
    for (int v = 0; v < nn; ++v)
      if (dag.is_embed(v) && !out[static_cast<std::size_t>(v)].empty()) {
        grounded[static_cast<std::size_t>(v)] = true;
        stack.push_back(v);
      }
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (EdgeId e : out[static_cast<std::size_t>(v)]) {
        const int c = dag.child(e);
        if (!grounded[static_cast<std::size_t>(c)]) {
          grounded[static_cast<std::size_t>(c)] = true;
          stack.push_back(c);
        }
      }
    }
    // Nodes reached from Logits through grounded nodes.
    const int root = dag.logits_node();
    if (grounded[static_cast<std::size_t>(root)]) {
      live[static_cast<std::size_t>(root)] = true;
      stack.push_back(root);
    }
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (EdgeId e : in[static_cast<std::size_t>(v)]) {
        const int p = dag.parent(e);
        if (grounded[static_cast<std::size_t>(p)] && !live[static_cast<std::size_t>(p)]) {
          live[static_cast<std::size_t>(p)] = true;
          stack.push_back(p);
        }
      }
    }
    bool changed = false;
    for (EdgeId e = 0; e < dag.num_edges(); ++e) {
      if (!edges[static_cast<std::size_t>(e)]) continue;
      if (!live[static_cast<std::size_t>(dag.parent(e))] || !live[static_cast<std::size_t>(dag.child(e))]) {
        edges[static_cast<std::size_t>(e)] = false;
        changed = true;
      }
    }
    if (!changed) return rounds;
  }
}

// Greedy growth from Logits: each step takes the candidate with the largest |score|
// among edges whose child is already in the circuit (lower id wins ties), then prunes.
template <typename Dag>
Circuit greedy_build(const Dag& dag, const std::vector<double>& scores, EdgeId n_edges) {
  if (static_cast<EdgeId>(scores.size()) != dag.num_edges())
    throw DataError("greedy_build: table does not match the graph");
  if (n_edges < 1) throw ConfigError("greedy_build: edge budget must be at least 1");
  Circuit c;
  c.log.requested = n_edges;
  c.log.budget = std::min(n_edges, dag.num_edges());
  if (c.log.budget < n_edges) {
    c.log.clamped = true;
    c.log.notes.push_back("budget " + std::to_string(n_edges) + " clamped to " + std::to_string(c.log.budget));
  }
  c.edges.assign(static_cast<std::size_t>(dag.num_edges()), false);
  std::vector<bool> in_circuit(static_cast<std::size_t>(dag.num_nodes()), false);

  struct Candidate {
    double mag;
    EdgeId id;
    bool operator<(const Candidate& o) const { return mag != o.mag ? mag < o.mag : id > o.id; }
  };
  std::priority_queue<Candidate> heap;
  auto admit = [&](int node) {
    in_circuit[static_cast<std::size_t>(node)] = true;
    dag.for_each_parent_edge(node, [&](EdgeId e) {
      const double s = scores[static_cast<std::size_t>(e)];
      heap.push({std::isnan(s) ? 0.0 : std::abs(s), e});
    });
  };
  admit(dag.logits_node());
  while (static_cast<EdgeId>(c.log.steps.size()) < c.log.budget) {
    if (heap.empty()) {
      c.log.exhausted = true;
      c.log.notes.push_back("no candidates left after " + std::to_string(c.log.steps.size()) + " edges");
      break;
    }
    const auto top = heap.top();
    heap.pop();
    c.edges[static_cast<std::size_t>(top.id)] = true;
    const int p = dag.parent(top.id);
    const bool fresh = !in_circuit[static_cast<std::size_t>(p)];
    c.log.steps.push_back({top.id, scores[static_cast<std::size_t>(top.id)], fresh});
    if (fresh) admit(p);
  }
  c.log.prune_rounds = prune_to_fixed_point(dag, c.edges);
  c.nodes.assign(static_cast<std::size_t>(dag.num_nodes()), false);
  for (EdgeId e = 0; e < dag.num_edges(); ++e) {
    if (!c.edges[static_cast<std::size_t>(e)]) continue;
    ++c.size;
    c.nodes[static_cast<std::size_t>(dag.parent(e))] = true;
    c.nodes[static_cast<std::size_t>(dag.child(e))] = true;
  }
  c.log.pruned = static_cast<EdgeId>(c.log.steps.size()) - c.size;
  if (c.size == 0) c.log.notes.push_back("no selected path reaches an embedding node; circuit is empty");
  return c;
}

Circuit greedy_build(const AttributionTable& table, const Graph& graph, EdgeId n_edges);

// Violations of the reachability invariants; empty when the circuit is well formed.
template <typename Dag>
std::vector<std::string> connectivity_violations(const Dag& dag, const Circuit& c) {
  std::vector<std::string> out;
  if (c.size == 0) return out;
  auto copy = c.edges;
  prune_to_fixed_point(dag, copy);
  if (copy != c.edges) out.push_back("some kept node is cut off from Logits or from every embedding");
  if (!c.nodes[static_cast<std::size_t>(dag.logits_node())]) out.push_back("Logits node missing");
  return out;
}

nlohmann::json circuit_to_json(const Circuit& c, const Graph& graph, const AttributionTable* table = nullptr);
Circuit circuit_from_json(const nlohmann::json& j, const Graph& graph);
void save_circuit(const std::filesystem::path& path, const Circuit& c, const Graph& graph,
                  const AttributionTable* table = nullptr);
Circuit load_circuit(const std::filesystem::path& path, const Graph& graph);
// Graph the circuit file was built on.
Graph circuit_graph(const nlohmann::json& j);

}  // namespace peap

#endif  // PEAP_CIRCUIT_HPP
