#ifndef PEAP_GRAPH_HPP
#define PEAP_GRAPH_HPP

#include "peap/config.hpp"
#include "peap/trace.hpp"

#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace peap {

using EdgeId = std::int64_t;

enum class NodeKind { Embed = 0, Head = 1, MLP = 2, Logits = 3 };

struct NodeRef {
  NodeKind kind = NodeKind::Embed;
  int layer = -1;  // -1 for Embed and Logits
  int head = -1;   // -1 unless kind == Head
  int position = 0;

  static NodeRef embed(int pos) { return {NodeKind::Embed, -1, -1, pos}; }
  static NodeRef attn(int layer, int head, int pos) { return {NodeKind::Head, layer, head, pos}; }
  static NodeRef mlp(int layer, int pos) { return {NodeKind::MLP, layer, -1, pos}; }
  static NodeRef logits(int pos) { return {NodeKind::Logits, -1, -1, pos}; }

  auto operator<=>(const NodeRef&) const = default;
};

struct EdgeRef {
  NodeRef parent;
  NodeRef child;
  Channel channel = Channel::Direct;

  // Head-to-same-head attention edge (possibly with source == target position).
  bool is_attention() const {
    return parent.kind == NodeKind::Head && child.kind == NodeKind::Head && parent.layer == child.layer;
  }
  auto operator<=>(const EdgeRef&) const = default;
};

std::string to_string(NodeKind k);
std::string to_string(Channel c);
std::string to_string(const NodeRef& n);  // "Head:3:7:5", "MLP:3:-:5", "Embed:-:-:0"
std::string to_string(const EdgeRef& e);  // "Embed:-:-:0>Q>Head:0:1:0"
NodeKind node_kind_from_string(std::string_view s);
Channel channel_from_string(std::string_view s);
NodeRef node_from_string(std::string_view s);
EdgeRef edge_from_string(std::string_view s);

// Positional computation graph of a model on an input of `length` tokens (or spans).
//
// At every position there are U = 1 + L (H + 1) components: Embed, then per layer the
// H heads followed by the MLP. Each component writes to the residual stream; each
// "reader" reads the sum of upstream writers at its own position. Readers are the 3
// q/k/v inputs of each head and the MLP input, plus the Logits input, which exists at
// the final position only. Attention edges link Head(l,i,s) to Head(l,i,t) for every
// s <= t, one per channel.
//
// Edge ids are dense and position-major. The block of position t starts at
//   B(t) = t W + 3 L H t (t + 1) / 2,   W = sum_l (3 H P_h(l) + P_m(l)),
// with P_h(l) = 1 + l (H + 1) and P_m(l) = P_h(l) + H upstream writers. A block holds
// the W within-position edges (reader-major, then writer) followed by the 3 L H (t+1)
// attention edges into position t ordered by (layer, head, source, channel). The U
// Logits edges come last, so
//   |E| = n W + U + 3 L H n (n + 1) / 2.
// Node ids are t U + component, with Logits = n U.
class Graph {
 public:
  Graph(const ModelConfig& config, int length, bool attention_edges = true);

  const ModelConfig& config() const { return config_; }
  int length() const { return length_; }
  bool has_attention_edges() const { return attention_; }

  static EdgeId count_edges(const ModelConfig& config, int length, bool attention_edges = true);
  EdgeId num_edges() const { return num_edges_; }
  int num_nodes() const { return length_ * components_ + 1; }
  int components() const { return components_; }
  EdgeId within_edges_per_position() const { return within_; }

  // Components and readers at one position.
  int component(const NodeRef& n) const;  // excludes Logits
  NodeRef component_ref(int comp, int position) const;
  int head_component(int layer, int head) const { return 1 + layer * (config_.n_heads + 1) + head; }
  int mlp_component(int layer) const { return 1 + layer * (config_.n_heads + 1) + config_.n_heads; }
  int num_readers() const { return static_cast<int>(reader_parents_.size()); }
  int head_reader(int layer, int head, Channel c) const {
    return layer * (3 * config_.n_heads + 1) + 3 * head + static_cast<int>(c);
  }
  int mlp_reader(int layer) const { return layer * (3 * config_.n_heads + 1) + 3 * config_.n_heads; }
  int reader_parent_count(int reader) const { return reader_parents_[static_cast<std::size_t>(reader)]; }

  // Nodes.
  int node_id(const NodeRef& n) const;
  NodeRef node(int id) const;
  int logits_node() const { return length_ * components_; }
  bool is_embed(int node) const { return node < logits_node() && node % components_ == 0; }

  // Edges.
  EdgeRef edge(EdgeId id) const;
  std::optional<EdgeId> find_edge(const EdgeRef& e) const;
  EdgeId edge_id(const EdgeRef& e) const;  // throws DataError when absent
  int parent(EdgeId id) const;
  int child(EdgeId id) const;
  EdgeId block_start(int position) const;
  EdgeId within_edge(int position, int reader, int writer) const {
    return block_start(position) + reader_offset_[static_cast<std::size_t>(reader)] + writer;
  }
  EdgeId attention_edge(int layer, int head, int source, int target, Channel c) const {
    return block_start(target) + within_ +
           ((static_cast<EdgeId>(layer) * config_.n_heads + head) * (target + 1) + source) * 3 + static_cast<int>(c);
  }
  EdgeId logits_edge(int writer) const { return block_start(length_) + writer; }

  // Adjacency over all edges entering / leaving a node.
  template <typename F>
  void for_each_parent_edge(int node, F&& f) const;
  template <typename F>
  void for_each_child_edge(int node, F&& f) const;
  std::vector<EdgeId> parent_edges(int node) const;
  std::vector<EdgeId> child_edges(int node) const;

 private:
  void locate(EdgeId id, int& position, EdgeId& offset) const;

  ModelConfig config_;
  int length_;
  bool attention_;
  int components_;
  EdgeId within_;
  EdgeId num_edges_;
  std::vector<int> reader_parents_;
  std::vector<EdgeId> reader_offset_;
  std::vector<int> reader_of_offset_;  // reader index for each within-position offset
};

// Line-oriented text form: a header carrying the config and length, then one edge per
// line in id order as `parent channel child`.
void write_graph(std::ostream& os, const Graph& g);
void save_graph(const std::filesystem::path& path, const Graph& g);
Graph read_graph(std::istream& is, const std::string& source = "<stream>");
Graph load_graph(const std::filesystem::path& path);

template <typename F>
void Graph::for_each_parent_edge(int node, F&& f) const {
  if (node == logits_node()) {
    for (int w = 0; w < components_; ++w) f(logits_edge(w));
    return;
  }
  const NodeRef n = this->node(node);
  const int t = n.position;
  switch (n.kind) {
    case NodeKind::Embed:
      return;
    case NodeKind::MLP: {
      const int r = mlp_reader(n.layer);
      for (int w = 0; w < reader_parent_count(r); ++w) f(within_edge(t, r, w));
      return;
    }
    case NodeKind::Head: {
      for (int c = 0; c < 3; ++c) {
        const int r = head_reader(n.layer, n.head, static_cast<Channel>(c));
        for (int w = 0; w < reader_parent_count(r); ++w) f(within_edge(t, r, w));
      }
      if (attention_)
        for (int s = 0; s <= t; ++s)
          for (int c = 0; c < 3; ++c) f(attention_edge(n.layer, n.head, s, t, static_cast<Channel>(c)));
      return;
    }
    case NodeKind::Logits:
      return;
  }
}

template <typename F>
void Graph::for_each_child_edge(int node, F&& f) const {
  if (node == logits_node()) return;
  const NodeRef n = this->node(node);
  const int t = n.position;
  const int w = component(n);
  for (int r = 0; r < num_readers(); ++r)
    if (w < reader_parent_count(r)) f(within_edge(t, r, w));
  if (n.kind == NodeKind::Head && attention_)
    for (int target = t; target < length_; ++target)
      for (int c = 0; c < 3; ++c) f(attention_edge(n.layer, n.head, t, target, static_cast<Channel>(c)));
  if (t == length_ - 1) f(logits_edge(w));
}

}  // namespace peap

#endif  // PEAP_GRAPH_HPP
