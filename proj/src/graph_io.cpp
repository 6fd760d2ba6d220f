#include "peap/graph.hpp"

#include "peap/common.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <fstream>
#include <istream>
#include <ostream>

namespace peap {

void write_graph(std::ostream& os, const Graph& g) {
  os << "peap-graph 1\n";
  os << "config " << g.config().to_json().dump() << '\n';
  os << "length " << g.length() << '\n';
  os << "attention " << (g.has_attention_edges() ? 1 : 0) << '\n';
  os << "edges " << g.num_edges() << '\n';
  fmt::memory_buffer buf;
  for (EdgeId id = 0; id < g.num_edges(); ++id) {
    const EdgeRef e = g.edge(id);
    fmt::format_to(std::back_inserter(buf), "{} {} {}\n", to_string(e.parent), to_string(e.channel), to_string(e.child));
    if (buf.size() > (1u << 20)) {
      os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void save_graph(const std::filesystem::path& path, const Graph& g) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(fmt::format("cannot write graph file {}", path.string()));
  write_graph(os, g);
  if (!os) throw DataError(fmt::format("error writing graph file {}", path.string()));
}

namespace {

std::string header_value(std::istream& is, const std::string& key, const std::string& src, int& line_no) {
  std::string line;
  ++line_no;
  if (!std::getline(is, line)) throw DataError(fmt::format("{}:{}: missing '{}' header", src, line_no, key));
  if (line.rfind(key + " ", 0) != 0)
    throw DataError(fmt::format("{}:{}: expected '{}' header, got '{}'", src, line_no, key, line));
  return line.substr(key.size() + 1);
}

}  // namespace

Graph read_graph(std::istream& is, const std::string& src) {
  int line_no = 0;
  if (header_value(is, "peap-graph", src, line_no) != "1")
    throw DataError(fmt::format("{}:1: unsupported graph format version", src));
  ModelConfig config;
  try {
    config = ModelConfig::from_json(nlohmann::json::parse(header_value(is, "config", src, line_no)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}:{}: config: {}", src, line_no, e.what()));
  } catch (const ConfigError& e) {
    throw DataError(fmt::format("{}:{}: {}", src, line_no, e.what()));
  }
  int length = 0, attention = 0;
  long long count = 0;
  try {
    length = std::stoi(header_value(is, "length", src, line_no));
    attention = std::stoi(header_value(is, "attention", src, line_no));
    count = std::stoll(header_value(is, "edges", src, line_no));
  } catch (const std::logic_error&) {
    throw DataError(fmt::format("{}:{}: non-numeric header value", src, line_no));
  }
  Graph g(config, length, attention != 0);
  if (count != g.num_edges())
    throw DataError(fmt::format("{}:{}: header declares {} edges, graph has {}", src, line_no, count, g.num_edges()));
  std::string line;
  for (EdgeId id = 0; id < g.num_edges(); ++id) {
    ++line_no;
    if (!std::getline(is, line)) throw DataError(fmt::format("{}:{}: truncated, expected edge {}", src, line_no, id));
    const auto a = line.find(' ');
    const auto b = a == std::string::npos ? a : line.find(' ', a + 1);
    if (b == std::string::npos)
      throw DataError(fmt::format("{}:{}: expected 'parent channel child', got '{}'", src, line_no, line));
    EdgeRef e;
    try {
      e.parent = node_from_string(std::string_view(line).substr(0, a));
      e.channel = channel_from_string(std::string_view(line).substr(a + 1, b - a - 1));
      e.child = node_from_string(std::string_view(line).substr(b + 1));
    } catch (const DataError& err) {
      throw DataError(fmt::format("{}:{}: {}", src, line_no, err.what()));
    }
    if (e != g.edge(id))
      throw DataError(fmt::format("{}:{}: edge {} out of canonical order (expected {})", src, line_no, to_string(e),
                                  to_string(g.edge(id))));
  }
  if (std::getline(is, line) && !line.empty())
    throw DataError(fmt::format("{}:{}: trailing content after last edge", src, line_no + 1));
  return g;
}

Graph load_graph(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(fmt::format("cannot open graph file {}", path.string()));
  return read_graph(is, path.string());
}

}  // namespace peap
