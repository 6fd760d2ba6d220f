#include "peap/circuit.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <fstream>

namespace peap {

ExplicitDag::ExplicitDag(int nodes, int root, std::vector<int> sources, std::vector<std::pair<int, int>> edges)
    : nodes_(nodes), root_(root), is_source_(static_cast<std::size_t>(nodes), false), edges_(std::move(edges)),
      into_(static_cast<std::size_t>(nodes)) {
  if (root < 0 || root >= nodes) throw DataError("dag: root outside node range");
  for (int s : sources) {
    if (s < 0 || s >= nodes) throw DataError("dag: source outside node range");
    is_source_[static_cast<std::size_t>(s)] = true;
  }
  for (std::size_t e = 0; e < edges_.size(); ++e) {
    const auto [p, c] = edges_[e];
    if (p < 0 || p >= nodes || c < 0 || c >= nodes || p == c) throw DataError(fmt::format("dag: bad edge {}", e));
    into_[static_cast<std::size_t>(c)].push_back(static_cast<EdgeId>(e));
  }
}

std::vector<EdgeId> Circuit::edge_list() const {
  std::vector<EdgeId> out;
  out.reserve(static_cast<std::size_t>(size));
  for (std::size_t e = 0; e < edges.size(); ++e)
    if (edges[e]) out.push_back(static_cast<EdgeId>(e));
  return out;
}

Circuit greedy_build(const AttributionTable& table, const Graph& graph, EdgeId n_edges) {
  auto c = greedy_build(graph, table.scores, n_edges);
  c.mode = table.mode;
  for (const auto& note : c.log.notes) spdlog::info("greedy_build: {}", note);
  return c;
}

nlohmann::json circuit_to_json(const Circuit& c, const Graph& graph, const AttributionTable* table) {
  if (c.edges.size() != static_cast<std::size_t>(graph.num_edges()))
    throw DataError("circuit does not match the graph");
  nlohmann::json edges = nlohmann::json::array(), scores = nlohmann::json::array();
  for (EdgeId e : c.edge_list()) {
    edges.push_back(to_string(graph.edge(e)));
    if (table) scores.push_back((*table)[e]);
  }
  nlohmann::json order = nlohmann::json::array();
  for (const auto& s : c.log.steps) order.push_back({{"edge", to_string(graph.edge(s.edge))}, {"score", s.score}});
  nlohmann::json j = {{"graph", {{"config", graph.config().to_json()},
                                 {"length", graph.length()},
                                 {"attention", graph.has_attention_edges()}}},
                      {"builder", {{"N", c.log.requested},
                                   {"budget", c.log.budget},
                                   {"mode", c.mode},
                                   {"clamped", c.log.clamped},
                                   {"exhausted", c.log.exhausted},
                                   {"pruned", c.log.pruned},
                                   {"prune_rounds", c.log.prune_rounds},
                                   {"notes", c.log.notes}}},
                      {"edges", std::move(edges)},
                      {"selection", std::move(order)}};
  if (table) j["scores"] = std::move(scores);
  return j;
}

Graph circuit_graph(const nlohmann::json& j) {
  try {
    const auto& g = j.at("graph");
    return Graph(ModelConfig::from_json(g.at("config")), g.at("length").get<int>(), g.at("attention").get<bool>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("circuit file: {}", e.what()));
  }
}

Circuit circuit_from_json(const nlohmann::json& j, const Graph& graph) {
  Circuit c;
  c.edges.assign(static_cast<std::size_t>(graph.num_edges()), false);
  c.nodes.assign(static_cast<std::size_t>(graph.num_nodes()), false);
  try {
    const auto& b = j.at("builder");
    c.mode = b.at("mode").get<std::string>();
    c.log.requested = b.at("N").get<EdgeId>();
    c.log.budget = b.value("budget", c.log.requested);
    c.log.clamped = b.value("clamped", false);
    c.log.exhausted = b.value("exhausted", false);
    c.log.pruned = b.value("pruned", EdgeId{0});
    c.log.prune_rounds = b.value("prune_rounds", 0);
    c.log.notes = b.value("notes", std::vector<std::string>{});
    for (const auto& d : j.at("edges")) {
      const EdgeId e = graph.edge_id(edge_from_string(d.get<std::string>()));
      if (c.edges[static_cast<std::size_t>(e)]) throw DataError("circuit file: duplicate edge " + d.get<std::string>());
      c.edges[static_cast<std::size_t>(e)] = true;
      c.nodes[static_cast<std::size_t>(graph.parent(e))] = true;
      c.nodes[static_cast<std::size_t>(graph.child(e))] = true;
      ++c.size;
    }
    if (j.contains("selection"))
      for (const auto& s : j.at("selection"))
        c.log.steps.push_back(
            {graph.edge_id(edge_from_string(s.at("edge").get<std::string>())), s.at("score").get<double>(), false});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("circuit file: {}", e.what()));
  }
  return c;
}

void save_circuit(const std::filesystem::path& path, const Circuit& c, const Graph& graph,
                  const AttributionTable* table) {
  std::ofstream os(path);
  if (!os) throw DataError(fmt::format("cannot write {}", path.string()));
  os << circuit_to_json(c, graph, table).dump(1) << '\n';
}

Circuit load_circuit(const std::filesystem::path& path, const Graph& graph) {
  std::ifstream is(path);
  if (!is) throw DataError(fmt::format("cannot open {}", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return circuit_from_json(j, graph);
}

}  // namespace peap
