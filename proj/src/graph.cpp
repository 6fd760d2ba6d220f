#include "peap/graph.hpp"

#include "peap/common.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>

namespace peap {

std::string to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Embed: return "Embed";
    case NodeKind::Head: return "Head";
    case NodeKind::MLP: return "MLP";
    case NodeKind::Logits: return "Logits";
  }
  return "?";
}

std::string to_string(Channel c) {
  switch (c) {
    case Channel::Q: return "Q";
    case Channel::K: return "K";
    case Channel::V: return "V";
    case Channel::Direct: return "Direct";
  }
  return "?";
}

namespace {

std::string field(int v) { return v < 0 ? "-" : std::to_string(v); }

int parse_field(std::string_view s, std::string_view what, std::string_view whole) {
  if (s == "-") return -1;
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || v < 0)
    throw DataError(fmt::format("bad {} field '{}' in node '{}'", what, s, whole));
  return v;
}

}  // namespace

std::string to_string(const NodeRef& n) {
  return fmt::format("{}:{}:{}:{}", to_string(n.kind), field(n.layer), field(n.head), n.position);
}

std::string to_string(const EdgeRef& e) {
  return fmt::format("{}>{}>{}", to_string(e.parent), to_string(e.channel), to_string(e.child));
}

NodeKind node_kind_from_string(std::string_view s) {
  if (s == "Embed") return NodeKind::Embed;
  if (s == "Head") return NodeKind::Head;
  if (s == "MLP") return NodeKind::MLP;
  if (s == "Logits") return NodeKind::Logits;
  throw DataError(fmt::format("unknown node kind '{}'", s));
}

Channel channel_from_string(std::string_view s) {
  if (s == "Q") return Channel::Q;
  if (s == "K") return Channel::K;
  if (s == "V") return Channel::V;
  if (s == "Direct") return Channel::Direct;
  throw DataError(fmt::format("unknown channel '{}'", s));
}

NodeRef node_from_string(std::string_view s) {
  std::string_view parts[4];
  std::size_t start = 0;
  for (int i = 0; i < 4; ++i) {
    const auto colon = s.find(':', start);
    if ((i < 3) == (colon == std::string_view::npos))
      throw DataError(fmt::format("malformed node '{}' (expected Kind:layer:head:pos)", s));
    parts[i] = s.substr(start, i < 3 ? colon - start : std::string_view::npos);
    start = colon + 1;
  }
  NodeRef n;
  n.kind = node_kind_from_string(parts[0]);
  n.layer = parse_field(parts[1], "layer", s);
  n.head = parse_field(parts[2], "head", s);
  n.position = parse_field(parts[3], "position", s);
  if (n.position < 0) throw DataError(fmt::format("node '{}' has no position", s));
  const bool want_layer = n.kind == NodeKind::Head || n.kind == NodeKind::MLP;
  if ((n.layer >= 0) != want_layer || (n.head >= 0) != (n.kind == NodeKind::Head))
    throw DataError(fmt::format("node '{}': layer/head fields do not fit kind {}", s, parts[0]));
  return n;
}

EdgeRef edge_from_string(std::string_view s) {
  const auto a = s.find('>');
  const auto b = a == std::string_view::npos ? a : s.find('>', a + 1);
  if (b == std::string_view::npos) throw DataError(fmt::format("malformed edge '{}'", s));
  return {node_from_string(s.substr(0, a)), node_from_string(s.substr(b + 1)),
          channel_from_string(s.substr(a + 1, b - a - 1))};
}

Graph::Graph(const ModelConfig& config, int length, bool attention_edges)
    : config_(config), length_(length), attention_(attention_edges) {
  config_.validate();
  if (length < 1) throw DataError(fmt::format("graph length must be >= 1, got {}", length));
  const int L = config_.n_layers, H = config_.n_heads;
  components_ = 1 + L * (H + 1);
  EdgeId offset = 0;
  for (int l = 0; l < L; ++l) {
    const int ph = 1 + l * (H + 1);
    for (int r = 0; r < 3 * H; ++r) reader_parents_.push_back(ph);
    reader_parents_.push_back(ph + H);
  }
  for (std::size_t r = 0; r < reader_parents_.size(); ++r) {
    reader_offset_.push_back(offset);
    reader_of_offset_.insert(reader_of_offset_.end(), static_cast<std::size_t>(reader_parents_[r]),
                             static_cast<int>(r));
    offset += reader_parents_[r];
  }
  within_ = offset;
  num_edges_ = count_edges(config_, length_, attention_);
}

EdgeId Graph::count_edges(const ModelConfig& c, int n, bool attention) {
  if (n < 1) throw DataError(fmt::format("graph length must be >= 1, got {}", n));
  const EdgeId L = c.n_layers, H = c.n_heads;
  EdgeId w = 0;
  for (EdgeId l = 0; l < L; ++l) w += 3 * H * (1 + l * (H + 1)) + (1 + l * (H + 1) + H);
  const EdgeId u = 1 + L * (H + 1);
  const EdgeId cross = attention ? 3 * L * H * n * (n + 1) / 2 : 0;
  return n * w + u + cross;
}

EdgeId Graph::block_start(int t) const {
  const EdgeId tt = t;
  return tt * within_ + (attention_ ? 3 * static_cast<EdgeId>(config_.n_layers) * config_.n_heads * tt * (tt + 1) / 2 : 0);
}

int Graph::component(const NodeRef& n) const {
  switch (n.kind) {
    case NodeKind::Embed: return 0;
    case NodeKind::Head: return head_component(n.layer, n.head);
    case NodeKind::MLP: return mlp_component(n.layer);
    case NodeKind::Logits: break;
  }
  throw DataError("Logits is not a residual writer");
}

NodeRef Graph::component_ref(int comp, int pos) const {
  if (comp == 0) return NodeRef::embed(pos);
  const int l = (comp - 1) / (config_.n_heads + 1);
  const int j = (comp - 1) % (config_.n_heads + 1);
  return j == config_.n_heads ? NodeRef::mlp(l, pos) : NodeRef::attn(l, j, pos);
}

int Graph::node_id(const NodeRef& n) const {
  if (n.kind == NodeKind::Logits) {
    if (n.position != length_ - 1) throw DataError(fmt::format("no Logits node at position {}", n.position));
    return logits_node();
  }
  if (n.position < 0 || n.position >= length_ ||
      (n.kind != NodeKind::Embed && (n.layer < 0 || n.layer >= config_.n_layers)) ||
      (n.kind == NodeKind::Head && (n.head < 0 || n.head >= config_.n_heads)))
    throw DataError(fmt::format("node {} outside graph", to_string(n)));
  return n.position * components_ + component(n);
}

NodeRef Graph::node(int id) const {
  if (id == logits_node()) return NodeRef::logits(length_ - 1);
  if (id < 0 || id > logits_node()) throw DataError(fmt::format("node id {} outside graph", id));
  return component_ref(id % components_, id / components_);
}

void Graph::locate(EdgeId id, int& position, EdgeId& offset) const {
  if (id < 0 || id >= num_edges_) throw DataError(fmt::format("edge id {} outside graph of {} edges", id, num_edges_));
  int lo = 0, hi = length_;  // largest t with block_start(t) <= id
  while (lo < hi) {
    const int mid = (lo + hi + 1) / 2;
    if (block_start(mid) <= id) lo = mid;
    else hi = mid - 1;
  }
  position = lo;
  offset = id - block_start(lo);
}

EdgeRef Graph::edge(EdgeId id) const {
  int t;
  EdgeId off;
  locate(id, t, off);
  if (t == length_) return {component_ref(static_cast<int>(off), length_ - 1), NodeRef::logits(length_ - 1), Channel::Direct};
  if (off < within_) {
    const int r = reader_of_offset_[static_cast<std::size_t>(off)];
    const int w = static_cast<int>(off - reader_offset_[static_cast<std::size_t>(r)]);
    const int per_layer = 3 * config_.n_heads + 1;
    const int l = r / per_layer, j = r % per_layer;
    const NodeRef parent = component_ref(w, t);
    if (j == 3 * config_.n_heads) return {parent, NodeRef::mlp(l, t), Channel::Direct};
    return {parent, NodeRef::attn(l, j / 3, t), static_cast<Channel>(j % 3)};
  }
  off -= within_;
  const int c = static_cast<int>(off % 3);
  off /= 3;
  const int s = static_cast<int>(off % (t + 1));
  off /= (t + 1);
  const int head = static_cast<int>(off % config_.n_heads);
  const int layer = static_cast<int>(off / config_.n_heads);
  return {NodeRef::attn(layer, head, s), NodeRef::attn(layer, head, t), static_cast<Channel>(c)};
}

std::optional<EdgeId> Graph::find_edge(const EdgeRef& e) const {
  const auto& p = e.parent;
  const auto& ch = e.child;
  auto valid_node = [&](const NodeRef& n) {
    if (n.position < 0 || n.position >= length_) return false;
    switch (n.kind) {
      case NodeKind::Embed: return n.layer == -1 && n.head == -1;
      case NodeKind::MLP: return n.layer >= 0 && n.layer < config_.n_layers && n.head == -1;
      case NodeKind::Head:
        return n.layer >= 0 && n.layer < config_.n_layers && n.head >= 0 && n.head < config_.n_heads;
      case NodeKind::Logits: return n.layer == -1 && n.head == -1 && n.position == length_ - 1;
    }
    return false;
  };
  if (!valid_node(p) || !valid_node(ch) || p.kind == NodeKind::Logits) return std::nullopt;
  if (e.is_attention()) {
    if (!attention_ || p.head != ch.head || p.position > ch.position || e.channel == Channel::Direct) return std::nullopt;
    return attention_edge(ch.layer, ch.head, p.position, ch.position, e.channel);
  }
  if (p.position != ch.position) return std::nullopt;
  const int w = component(p);
  switch (ch.kind) {
    case NodeKind::Logits:
      if (e.channel != Channel::Direct) return std::nullopt;
      return logits_edge(w);
    case NodeKind::MLP: {
      const int r = mlp_reader(ch.layer);
      if (e.channel != Channel::Direct || w >= reader_parent_count(r)) return std::nullopt;
      return within_edge(ch.position, r, w);
    }
    case NodeKind::Head: {
      if (e.channel == Channel::Direct) return std::nullopt;
      const int r = head_reader(ch.layer, ch.head, e.channel);
      if (w >= reader_parent_count(r)) return std::nullopt;
      return within_edge(ch.position, r, w);
    }
    case NodeKind::Embed: return std::nullopt;
  }
  return std::nullopt;
}

EdgeId Graph::edge_id(const EdgeRef& e) const {
  auto id = find_edge(e);
  if (!id) throw DataError(fmt::format("edge {} is not in the graph", to_string(e)));
  return *id;
}

int Graph::parent(EdgeId id) const {
  int t;
  EdgeId off;
  locate(id, t, off);
  if (t == length_) return (length_ - 1) * components_ + static_cast<int>(off);
  if (off < within_) {
    const int r = reader_of_offset_[static_cast<std::size_t>(off)];
    return t * components_ + static_cast<int>(off - reader_offset_[static_cast<std::size_t>(r)]);
  }
  off = (off - within_) / 3;
  const int s = static_cast<int>(off % (t + 1));
  const int lh = static_cast<int>(off / (t + 1));
  return s * components_ + head_component(lh / config_.n_heads, lh % config_.n_heads);
}

int Graph::child(EdgeId id) const {
  int t;
  EdgeId off;
  locate(id, t, off);
  if (t == length_) return logits_node();
  if (off < within_) {
    const int r = reader_of_offset_[static_cast<std::size_t>(off)];
    const int per_layer = 3 * config_.n_heads + 1;
    const int l = r / per_layer, j = r % per_layer;
    return t * components_ + (j == 3 * config_.n_heads ? mlp_component(l) : head_component(l, j / 3));
  }
  const int lh = static_cast<int>((off - within_) / 3 / (t + 1));
  return t * components_ + head_component(lh / config_.n_heads, lh % config_.n_heads);
}

std::vector<EdgeId> Graph::parent_edges(int node) const {
  std::vector<EdgeId> out;
  for_each_parent_edge(node, [&](EdgeId e) { out.push_back(e); });
  return out;
}

std::vector<EdgeId> Graph::child_edges(int node) const {
  std::vector<EdgeId> out;
  for_each_child_edge(node, [&](EdgeId e) { out.push_back(e); });
  return out;
}

}  // namespace peap
