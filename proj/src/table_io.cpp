#include "peap/attribution.hpp"

#include "peap/common.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <charconv>
#include <fstream>

namespace peap {

namespace {

std::filesystem::path sidecar(const std::filesystem::path& csv) {
  auto p = csv;
  p += ".json";
  return p;
}

}  // namespace

void save_table(const std::filesystem::path& csv_path, const AttributionTable& table, const Graph& graph) {
  if (table.scores.size() != static_cast<std::size_t>(graph.num_edges()))
    throw DataError(fmt::format("table has {} scores, graph has {} edges", table.scores.size(), graph.num_edges()));
  std::ofstream os(csv_path, std::ios::binary);
  if (!os) throw DataError(fmt::format("cannot write {}", csv_path.string()));
  fmt::memory_buffer buf;
  fmt::format_to(std::back_inserter(buf), "edge_id,score\n");
  for (EdgeId id = 0; id < graph.num_edges(); ++id) {
    fmt::format_to(std::back_inserter(buf), "{},{}\n", to_string(graph.edge(id)), table[id]);
    if (buf.size() > (1u << 20)) {
      os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  nlohmann::json meta = {{"mode", table.mode},
                         {"examples", table.examples},
                         {"model", table.model_id},
                         {"dataset_hash", fmt::format("{:016x}", table.dataset_hash)},
                         {"graph", {{"config", graph.config().to_json()},
                                    {"length", graph.length()},
                                    {"attention", graph.has_attention_edges()}}}};
  std::ofstream(sidecar(csv_path)) << meta.dump(2) << '\n';
}

AttributionTable load_table(const std::filesystem::path& csv_path, const Graph& graph) {
  std::ifstream is(csv_path, std::ios::binary);
  if (!is) throw DataError(fmt::format("cannot open {}", csv_path.string()));
  AttributionTable table;
  table.scores.assign(static_cast<std::size_t>(graph.num_edges()), 0.0);
  std::vector<bool> seen(table.scores.size(), false);
  std::string line;
  int line_no = 1;
  if (!std::getline(is, line) || line != "edge_id,score")
    throw DataError(fmt::format("{}:1: expected header 'edge_id,score'", csv_path.string()));
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw DataError(fmt::format("{}:{}: missing score", csv_path.string(), line_no));
    EdgeId id;
    double score;
    try {
      id = graph.edge_id(edge_from_string(std::string_view(line).substr(0, comma)));
      score = std::stod(line.substr(comma + 1));
    } catch (const DataError& e) {
      throw DataError(fmt::format("{}:{}: {}", csv_path.string(), line_no, e.what()));
    } catch (const std::logic_error&) {
      throw DataError(fmt::format("{}:{}: bad score '{}'", csv_path.string(), line_no, line.substr(comma + 1)));
    }
    if (seen[static_cast<std::size_t>(id)])
      throw DataError(fmt::format("{}:{}: duplicate edge", csv_path.string(), line_no));
    seen[static_cast<std::size_t>(id)] = true;
    table.scores[static_cast<std::size_t>(id)] = score;
  }
  std::ifstream ms(sidecar(csv_path));
  if (ms) {
    try {
      const auto meta = nlohmann::json::parse(ms);
      table.mode = meta.value("mode", table.mode);
      table.examples = meta.value("examples", 1);
      table.model_id = meta.value("model", "");
      table.dataset_hash = std::stoull(meta.value("dataset_hash", "0"), nullptr, 16);
    } catch (const std::exception& e) {
      throw DataError(fmt::format("{}: {}", sidecar(csv_path).string(), e.what()));
    }
  }
  return table;
}

}  // namespace peap
