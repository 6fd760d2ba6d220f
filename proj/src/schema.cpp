#include "peap/schema.hpp"

#include "peap/common.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <set>

namespace peap {

std::optional<int> Schema::index_of(const std::string& title) const {
  for (int i = 0; i < size(); ++i)
    if (spans[static_cast<std::size_t>(i)].title == title) return i;
  return std::nullopt;
}

std::vector<std::string> Schema::titles() const {
  std::vector<std::string> out;
  for (const auto& s : spans) out.push_back(s.title);
  return out;
}

void Schema::validate() const {
  if (spans.empty()) throw DataError("schema has no spans");
  std::set<std::string> seen;
  for (const auto& s : spans) {
    if (s.title.empty()) throw DataError("schema span with empty title");
    if (!seen.insert(s.title).second) throw DataError(fmt::format("duplicate span title '{}'", s.title));
  }
}

nlohmann::ordered_json Schema::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& s : spans) j[s.title] = s.description;
  return j;
}

Schema Schema::from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw DataError("schema JSON must be an object of title -> description");
  Schema s;
  for (const auto& [title, desc] : j.items()) {
    if (!desc.is_string()) throw DataError(fmt::format("schema span '{}': description must be a string", title));
    s.spans.push_back({title, desc.get<std::string>()});
  }
  s.validate();
  return s;
}

std::vector<int> SpanMap::position_map() const {
  std::vector<int> pm;
  for (std::size_t k = 0; k < ranges.size(); ++k)
    for (int t = ranges[k].first; t < ranges[k].second; ++t) pm.push_back(static_cast<int>(k));
  return pm;
}

SpanMap SpanMap::one_token_per_span(int n) {
  SpanMap m;
  for (int t = 0; t < n; ++t) m.ranges.emplace_back(t, t + 1);
  return m;
}

SpanMap SpanMap::from_lengths(const std::vector<int>& lengths) {
  SpanMap m;
  int p = 0;
  for (int len : lengths) {
    m.ranges.emplace_back(p, p + len);
    p += len;
  }
  return m;
}

nlohmann::json SpanMap::to_json() const {
  nlohmann::json r = nlohmann::json::array();
  for (auto [b, e] : ranges) r.push_back({b, e});
  return {{"example", example_id}, {"ranges", r}};
}

SpanMap SpanMap::from_json(const nlohmann::json& j) {
  SpanMap m;
  try {
    m.example_id = j.value("example", "");
    for (const auto& r : j.at("ranges")) m.ranges.emplace_back(r.at(0).get<int>(), r.at(1).get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("span map JSON: {}", e.what()));
  }
  return m;
}

std::string Verdict::summary() const { return valid ? "valid" : fmt::format("{}", fmt::join(reasons, "; ")); }

Verdict validate_application(const Schema& schema, int n, const SpanMap& map, const ValidationOptions& options) {
  Verdict v;
  const int k = schema.size();
  const int got = static_cast<int>(map.ranges.size());
  if (got < k) v.fail(fmt::format("missing span: {} of {} spans present", got, k));
  if (got > k) v.fail(fmt::format("extra span: {} ranges for {} spans", got, k));
  auto title = [&](int i) { return i < k ? schema.spans[static_cast<std::size_t>(i)].title : fmt::format("#{}", i); };
  int prev = 0;
  for (int i = 0; i < got; ++i) {
    const auto [b, e] = map.ranges[static_cast<std::size_t>(i)];
    if (e < b) {
      v.fail(fmt::format("span '{}' has a reversed range [{}, {})", title(i), b, e));
      continue;
    }
    if (b > prev) v.fail(fmt::format("tokens {}..{} are not assigned to any span", prev, b - 1));
    if (b < prev) v.fail(fmt::format("tokens {}..{} are assigned to more than one span", b, prev - 1));
    if (b == e && !options.allow_empty) v.fail(fmt::format("span '{}' is empty", title(i)));
    prev = std::max(prev, e);
  }
  if (prev < n) v.fail(fmt::format("tokens {}..{} are not assigned to any span", prev, n - 1));
  if (prev > n) v.fail(fmt::format("spans extend past the {}-token prompt", n));
  if (got > 0 && n > 0) {
    const auto [b, e] = map.ranges.back();
    if (options.strict_final && !(b == n - 1 && e == n))
      v.fail(fmt::format("final token must be alone in the final span '{}'", title(got - 1)));
    else if (!options.strict_final && !(b <= n - 1 && e == n))
      v.fail(fmt::format("final token must lie in the final span '{}'", title(got - 1)));
  }
  return v;
}

nlohmann::ordered_json Application::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [title, toks] : spans) j[title] = toks;
  return j;
}

Application Application::from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw DataError("application JSON must be an object of span title -> token list");
  Application a;
  for (const auto& [title, toks] : j.items()) {
    std::vector<std::string> list;
    if (!toks.is_array()) throw DataError(fmt::format("application span '{}': value must be a list", title));
    for (const auto& t : toks) {
      if (!t.is_string()) throw DataError(fmt::format("application span '{}': tokens must be strings", title));
      list.push_back(t.get<std::string>());
    }
    a.spans.emplace_back(title, std::move(list));
  }
  return a;
}

Application Application::from_span_map(const Schema& schema, const std::vector<std::string>& tokens,
                                       const SpanMap& map) {
  Application a;
  for (int k = 0; k < schema.size(); ++k) {
    const auto [b, e] = map.ranges.at(static_cast<std::size_t>(k));
    a.spans.emplace_back(schema.spans[static_cast<std::size_t>(k)].title,
                         std::vector<std::string>(tokens.begin() + b, tokens.begin() + e));
  }
  return a;
}

namespace {

bool matches_at(const std::vector<std::string>& tokens, int at, const std::vector<std::string>& span) {
  if (at < 0 || at + static_cast<int>(span.size()) > static_cast<int>(tokens.size())) return false;
  return std::equal(span.begin(), span.end(), tokens.begin() + at);
}

}  // namespace

Resolution resolve_application(const Schema& schema, const std::vector<std::string>& tokens, const Application& app,
                               const ValidationOptions& options) {
  Resolution res;
  auto& v = res.verdict;
  const int n = static_cast<int>(tokens.size());
  std::vector<const std::vector<std::string>*> by_span(static_cast<std::size_t>(schema.size()), nullptr);
  int last_index = -1;
  bool misordered = false;
  for (const auto& [title, toks] : app.spans) {
    const auto idx = schema.index_of(title);
    if (!idx) {
      v.fail(fmt::format("extra span '{}' is not in the schema", title));
      continue;
    }
    if (by_span[static_cast<std::size_t>(*idx)]) {
      v.fail(fmt::format("span '{}' appears twice", title));
      continue;
    }
    by_span[static_cast<std::size_t>(*idx)] = &toks;
    if (*idx < last_index) misordered = true;
    last_index = std::max(last_index, *idx);
  }
  if (misordered) v.fail("spans are not in schema order");
  for (int k = 0; k < schema.size(); ++k)
    if (!by_span[static_cast<std::size_t>(k)])
      v.fail(fmt::format("missing span '{}'", schema.spans[static_cast<std::size_t>(k)].title));

  SpanMap map;
  int p = 0;
  for (int k = 0; k < schema.size(); ++k) {
    const auto& title = schema.spans[static_cast<std::size_t>(k)].title;
    const auto* toks = by_span[static_cast<std::size_t>(k)];
    if (!toks) {
      map.ranges.emplace_back(p, p);
      continue;
    }
    const int len = static_cast<int>(toks->size());
    if (len == 0 || matches_at(tokens, p, *toks)) {
      map.ranges.emplace_back(p, p + len);
      p += len;
      continue;
    }
    // Locate the span elsewhere to name the failure precisely.
    int found = -1;
    for (int q = 0; q + len <= n && found < 0; ++q)
      if (matches_at(tokens, q, *toks)) found = q;
    if (found >= 0 && found < p)
      v.fail(fmt::format("span '{}' repeats tokens {}..{} already assigned to an earlier span", title, found,
                         std::min(p, found + len) - 1));
    else if (found > p)
      v.fail(fmt::format("span '{}' is not contiguous with the previous span: tokens {}..{} are skipped", title, p,
                         found - 1));
    else
      v.fail(fmt::format("span '{}' lists tokens [{}] that do not appear in order in the prompt", title,
                         fmt::join(*toks, "|")));
    if (found >= 0) {
      map.ranges.emplace_back(found, found + len);
      p = std::max(p, found + len);
    } else {
      map.ranges.emplace_back(p, p);
    }
  }
  if (v.valid) {
    const Verdict structural = validate_application(schema, n, map, options);
    for (const auto& r : structural.reasons) v.fail(r);
  } else if (p < n) {
    v.fail(fmt::format("tokens {}..{} are not assigned to any span", p, n - 1));
  }
  if (v.valid) res.map = std::move(map);
  return res;
}

Graph abstract_graph(const ModelConfig& config, const Schema& schema, bool attention_edges) {
  schema.validate();
  return Graph(config, schema.size(), attention_edges);
}

namespace {

void check_map_for(const Graph& abstract, const SpanMap& map) {
  if (static_cast<int>(map.ranges.size()) != abstract.length())
    throw DataError(fmt::format("span map has {} spans, abstract graph {}", map.ranges.size(), abstract.length()));
}

template <typename F>
void expand(const Graph& abstract, EdgeId id, const SpanMap& map, const Graph& concrete, F&& f) {
  check_map_for(abstract, map);
  const EdgeRef e = abstract.edge(id);
  if (e.child.kind == NodeKind::Logits) {
    f(concrete.logits_edge(abstract.component(e.parent)));
    return;
  }
  if (e.is_attention()) {
    if (!concrete.has_attention_edges()) return;
    const auto [sb, se] = map.ranges[static_cast<std::size_t>(e.parent.position)];
    const auto [tb, te] = map.ranges[static_cast<std::size_t>(e.child.position)];
    for (int t = tb; t < te; ++t)
      for (int s = sb; s < se && s <= t; ++s) f(concrete.attention_edge(e.child.layer, e.child.head, s, t, e.channel));
    return;
  }
  const EdgeId offset = id - abstract.block_start(e.child.position);
  const auto [b, end] = map.ranges[static_cast<std::size_t>(e.child.position)];
  for (int t = b; t < end; ++t) f(concrete.block_start(t) + offset);
}

}  // namespace

std::vector<EdgeId> map_edge(const Graph& abstract, EdgeId id, const SpanMap& map, const Graph& concrete) {
  if (map.length() != concrete.length())
    throw DataError(fmt::format("span map covers {} tokens, graph has {}", map.length(), concrete.length()));
  std::vector<EdgeId> out;
  expand(abstract, id, map, concrete, [&](EdgeId c) { out.push_back(c); });
  return out;
}

std::int64_t mapped_count(const Graph& abstract, EdgeId id, const SpanMap& map) {
  check_map_for(abstract, map);
  const EdgeRef e = abstract.edge(id);
  if (e.child.kind == NodeKind::Logits) return 1;
  const std::int64_t lt = map.span_length(e.child.position);
  if (!e.is_attention()) return lt;
  if (e.parent.position == e.child.position) return lt * (lt + 1) / 2;
  return lt * map.span_length(e.parent.position);
}

AttributionTable aggregate_abstract(const std::vector<AttributionTable>& tables, const std::vector<Graph>& graphs,
                                    const std::vector<SpanMap>& maps, const Graph& abstract, AggregationMode mode) {
  if (tables.size() != maps.size() || tables.size() != graphs.size())
    throw DataError(fmt::format("aggregate_abstract: {} tables, {} graphs, {} span maps", tables.size(),
                                graphs.size(), maps.size()));
  Aggregator agg(abstract, mode);
  for (std::size_t x = 0; x < tables.size(); ++x) agg.add(tables[x], graphs[x], maps[x].position_map());
  return agg.result();
}

GroundedCircuit ground_circuit(const std::vector<EdgeId>& abstract_circuit, const Graph& abstract, const SpanMap& map,
                               const Graph& concrete) {
  if (map.length() != concrete.length())
    throw DataError(fmt::format("span map covers {} tokens, graph has {}", map.length(), concrete.length()));
  GroundedCircuit g;
  g.edges.assign(static_cast<std::size_t>(concrete.num_edges()), false);
  for (EdgeId a : abstract_circuit)
    expand(abstract, a, map, concrete, [&](EdgeId c) {
      if (!g.edges[static_cast<std::size_t>(c)]) {
        g.edges[static_cast<std::size_t>(c)] = true;
        ++g.size;
      }
    });
  return g;
}

}  // namespace peap
