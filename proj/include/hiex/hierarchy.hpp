#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>

#include "hiex/common.hpp"
#include "json.hpp"

namespace hiex {

/// One edge of the dependency tree with its aggregation weight.
struct Edge {
  NodeId parent;
  NodeId child;
  double phi = 1.0;
};

/// Immutable rooted tree over dense node ids with per-edge aggregation
/// weights. The target variable of a coherent panel satisfies
/// value(parent) == sum_children phi * value(child) at every internal node.
class HierarchyTree {
 public:
  /// Trivial single-node tree; placeholder until a real one is assigned.
  HierarchyTree() : HierarchyTree(1, {}) {}

  HierarchyTree(int n_nodes, std::vector<Edge> edges,
                std::vector<std::string> names = {})
      : n_(n_nodes),
        parent_(n_nodes, -1),
        phi_of_child_(n_nodes, 1.0),
        children_(n_nodes),
        level_(n_nodes, 0),
        names_(std::move(names)) {
    require(n_nodes >= 1, "hierarchy: need at least one node");
    require(static_cast<int>(edges.size()) == n_nodes - 1,
            "hierarchy: a tree on N nodes needs exactly N-1 edges, got " +
                std::to_string(edges.size()));
    if (names_.empty()) {
      for (int i = 0; i < n_; ++i) names_.push_back("n" + std::to_string(i));
    }
    require(static_cast<int>(names_.size()) == n_, "hierarchy: one name per node");
    for (const Edge& e : edges) {
      check_node(e.parent);
      check_node(e.child);
      require(std::isfinite(e.phi), "hierarchy: phi must be finite on edge " +
                                        std::to_string(e.parent) + "->" +
                                        std::to_string(e.child));
      require(parent_[e.child] == -1 && e.child != e.parent,
              "hierarchy: node " + std::to_string(e.child) +
                  " has more than one parent or a self edge");
      parent_[e.child] = e.parent;
      phi_of_child_[e.child] = e.phi;
      children_[e.parent].push_back(e.child);
    }
    root_ = -1;
    for (int i = 0; i < n_; ++i) {
      if (parent_[i] == -1) {
        require(root_ == -1, "hierarchy: more than one root (nodes " +
                                 std::to_string(root_) + " and " +
                                 std::to_string(i) + ")");
        root_ = i;
      }
      std::sort(children_[i].begin(), children_[i].end());
    }
    // Connectivity + levels via BFS from the root; a cycle or a detached
    // component leaves nodes unvisited.
    std::vector<int> order{root_};
    std::vector<bool> seen(n_, false);
    seen[root_] = true;
    for (size_t k = 0; k < order.size(); ++k) {
      const int u = order[k];
      for (int c : children_[u]) {
        require(!seen[c], "hierarchy: cycle through node " + std::to_string(c));
        seen[c] = true;
        level_[c] = level_[u] + 1;
        order.push_back(c);
      }
    }
    require(static_cast<int>(order.size()) == n_,
            "hierarchy: graph is not connected");
    bfs_order_ = std::move(order);
  }

  int size() const { return n_; }
  NodeId root() const { return root_; }
  std::optional<NodeId> parent(NodeId i) const {
    check_node(i);
    return parent_[i] == -1 ? std::nullopt : std::optional<NodeId>(parent_[i]);
  }
  const std::vector<NodeId>& children(NodeId i) const {
    check_node(i);
    return children_[i];
  }
  bool is_leaf(NodeId i) const { return children(i).empty(); }
  int level(NodeId i) const {
    check_node(i);
    return level_[i];
  }
  int depth() const {
    int d = 0;
    for (int i = 0; i < n_; ++i) d = std::max(d, level_[i]);
    return d;
  }
  const std::string& name(NodeId i) const {
    check_node(i);
    return names_[i];
  }
  /// Weight of the edge from parent(i) to i. 1.0 for the root.
  double phi(NodeId i) const {
    check_node(i);
    return phi_of_child_[i];
  }
  /// Root-first order in which every parent precedes its children.
  const std::vector<NodeId>& topological_order() const { return bfs_order_; }

  std::vector<NodeId> leaves() const {
    std::vector<NodeId> out;
    for (int i = 0; i < n_; ++i)
      if (is_leaf(i)) out.push_back(i);
    return out;
  }

  std::vector<NodeId> leaves_under(NodeId i) const {
    check_node(i);
    std::vector<NodeId> stack{i}, out;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      if (is_leaf(u)) out.push_back(u);
      for (int c : children_[u]) stack.push_back(c);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  bool is_ancestor_or_self(NodeId anc, NodeId node) const {
    check_node(anc);
    check_node(node);
    while (node != -1) {
      if (node == anc) return true;
      node = parent_[node];
    }
    return false;
  }

  /// Product of phi along the path from `anc` down to `node`.
  double path_weight(NodeId anc, NodeId node) const {
    require(is_ancestor_or_self(anc, node), "path_weight: not an ancestor");
    double w = 1.0;
    while (node != anc) {
      w *= phi_of_child_[node];
      node = parent_[node];
    }
    return w;
  }

  /// Unique tree path from a to b inclusive. path(a, a) == {a}.
  std::vector<NodeId> path(NodeId a, NodeId b) const {
    check_node(a);
    check_node(b);
    std::vector<NodeId> up_a, up_b;
    for (int u = a; u != -1; u = parent_[u]) up_a.push_back(u);
    for (int u = b; u != -1; u = parent_[u]) up_b.push_back(u);
    // Trim the shared tail above the meeting node.
    size_t ia = up_a.size(), ib = up_b.size();
    while (ia > 0 && ib > 0 && up_a[ia - 1] == up_b[ib - 1]) {
      --ia;
      --ib;
    }
    std::vector<NodeId> out(up_a.begin(), up_a.begin() + ia);
    out.push_back(up_a.size() > ia ? up_a[ia] : up_b[ib]);  // meeting node
    for (size_t k = ib; k-- > 0;) out.push_back(up_b[k]);
    return out;
  }

  bool adjacent(NodeId a, NodeId b) const {
    check_node(a);
    check_node(b);
    return parent_[a] == b || parent_[b] == a;
  }

  /// Deepest node that is an ancestor-or-self of every node in the set.
  NodeId lca(const std::set<NodeId>& nodes) const {
    require(!nodes.empty(), "lca: empty node set");
    auto it = nodes.begin();
    NodeId acc = *it;
    check_node(acc);
    for (++it; it != nodes.end(); ++it) {
      NodeId b = *it;
      check_node(b);
      NodeId a = acc;
      while (level_[a] > level_[b]) a = parent_[a];
      while (level_[b] > level_[a]) b = parent_[b];
      while (a != b) {
        a = parent_[a];
        b = parent_[b];
      }
      acc = a;
    }
    return acc;
  }

  /// Bottom-up aggregation of per-leaf series: each internal node becomes the
  /// phi-weighted elementwise sum of its children, leaves pass through.
  std::map<NodeId, std::vector<double>> aggregate_up(
      const std::map<NodeId, std::vector<double>>& leaf_values) const {
    size_t t_len = 0;
    bool first = true;
    for (NodeId l : leaves()) {
      auto it = leaf_values.find(l);
      require(it != leaf_values.end(),
              "aggregate_up: missing series for leaf " + std::to_string(l));
      if (first) {
        t_len = it->second.size();
        first = false;
      }
      require(it->second.size() == t_len,
              "aggregate_up: series length mismatch at leaf " + std::to_string(l));
    }
    std::map<NodeId, std::vector<double>> out;
    for (auto it = bfs_order_.rbegin(); it != bfs_order_.rend(); ++it) {
      const NodeId i = *it;
      if (is_leaf(i)) {
        out[i] = leaf_values.at(i);
        continue;
      }
      std::vector<double> acc(t_len, 0.0);
      for (NodeId c : children_[i]) {
        const auto& cv = out.at(c);
        for (size_t t = 0; t < t_len; ++t) acc[t] += phi_of_child_[c] * cv[t];
      }
      out[i] = std::move(acc);
    }
    return out;
  }

  /// Max over internal nodes and time of |value(i) - sum phi*value(child)|.
  double coherency_residual(
      const std::map<NodeId, std::vector<double>>& values) const {
    double worst = 0.0;
    for (int i = 0; i < n_; ++i) {
      auto it = values.find(i);
      require(it != values.end(),
              "coherency_residual: missing values for node " + std::to_string(i));
      if (is_leaf(i)) continue;
      const auto& vi = it->second;
      for (size_t t = 0; t < vi.size(); ++t) {
        double s = 0.0;
        for (NodeId c : children_[i]) {
          const auto& vc = values.at(c);
          require(vc.size() == vi.size(), "coherency_residual: length mismatch");
          s += phi_of_child_[c] * vc[t];
        }
        worst = std::max(worst, std::abs(vi[t] - s));
      }
    }
    return worst;
  }

  nlohmann::json to_json() const {
    nlohmann::json nodes = nlohmann::json::array();
    nlohmann::json edges = nlohmann::json::array();
    for (int i = 0; i < n_; ++i) {
      nodes.push_back({{"id", i}, {"name", names_[i]}});
      if (parent_[i] != -1)
        edges.push_back(
            {{"parent", parent_[i]}, {"child", i}, {"phi", phi_of_child_[i]}});
    }
    return {{"nodes", nodes}, {"edges", edges}};
  }

  static HierarchyTree from_json(const nlohmann::json& j) {
    require(j.contains("nodes") && j.contains("edges"),
            "hierarchy.json: needs 'nodes' and 'edges'");
    const auto& jn = j.at("nodes");
    const int n = static_cast<int>(jn.size());
    std::vector<std::string> names(n);
    std::vector<bool> seen(n, false);
    for (const auto& node : jn) {
      const int id = node.at("id").get<int>();
      require(id >= 0 && id < n && !seen[id],
              "hierarchy.json: node ids must be dense 0..N-1, bad id " +
                  std::to_string(id));
      seen[id] = true;
      names[id] = node.value("name", "n" + std::to_string(id));
    }
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) {
      edges.push_back({e.at("parent").get<int>(), e.at("child").get<int>(),
                       e.value("phi", 1.0)});
    }
    return HierarchyTree(n, std::move(edges), std::move(names));
  }

  static HierarchyTree load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open hierarchy file: " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), "cannot write hierarchy file: " + path);
    out << to_json().dump(2) << "\n";
  }

  /// Balanced tree with `levels` levels (root is level 0) and `branching`
  /// children per internal node. All phi are 1.
  static HierarchyTree balanced(int levels, int branching) {
    require(levels >= 1 && branching >= 1, "balanced: bad shape");
    std::vector<Edge> edges;
    std::vector<NodeId> frontier{0};
    int next = 1;
    for (int lv = 1; lv < levels; ++lv) {
      std::vector<NodeId> nxt;
      for (NodeId p : frontier)
        for (int b = 0; b < branching; ++b) {
          edges.push_back({p, next, 1.0});
          nxt.push_back(next++);
        }
      frontier = std::move(nxt);
    }
    return HierarchyTree(next, std::move(edges));
  }

 private:
  void check_node(NodeId i) const {
    require(i >= 0 && i < n_, "unknown node id " + std::to_string(i));
  }

  int n_;
  NodeId root_ = 0;
  std::vector<NodeId> parent_;
  std::vector<double> phi_of_child_;
  std::vector<std::vector<NodeId>> children_;
  std::vector<int> level_;
  std::vector<std::string> names_;
  std::vector<NodeId> bfs_order_;
};

}  // namespace hiex
