#pragma once

#include "hiex/attribution.hpp"

namespace hiex {

// ---------------------------------------------------------------------------
// Hierarchy-aware explanations. Importance between two arbitrary tree nodes
// is approximated by the product of adjacent importances along the unique
// tree path between them, computed by one BFS from the target that scores
// every other node with exactly one adjacent attribution per tree edge.
// ---------------------------------------------------------------------------

struct HierConfig {
  AttributionConfig attr;
  bool mean_abs_summary = false;   // edge scalar: mean |score| instead of max
  bool magnitude_only = false;     // drop signs from edge scalars
  bool normalize_edges = false;    // divide each edge matrix by its max |score|
};

/// Adjacent importance of one tree edge: attribution of the input node's
/// context cells to the output node's scalar forecast.
struct EdgeImportance {
  NodeId output_node = 0;  // nearer to the target
  NodeId input_node = 0;   // one step farther along the path
  Eigen::MatrixXd matrix;  // (variable, time) scores over the input node's cells
  double scalar = 0.0;     // summary used for propagation
};

/// Scores for every tree node relative to one target output.
struct HierImportanceMap {
  OutputSelector target;
  std::optional<double> quantile_level;  // set for probabilistic explanations
  std::string method;
  std::string mode;  // "subtree" or "flat"
  std::map<NodeId, double> node_scalar;
  std::map<NodeId, Eigen::MatrixXd> node_matrix;  // (variable, time) per node
  int edge_evaluations = 0;

  /// Assemble per-node matrices into one (node, variable, time) tensor.
  Grid3 to_tensor(int n_nodes) const {
    require(!node_matrix.empty(), "importance map holds no per-cell matrices");
    const auto& first = node_matrix.begin()->second;
    Grid3 g(n_nodes, static_cast<int>(first.rows()), static_cast<int>(first.cols()),
            0.0);
    for (const auto& [node, m] : node_matrix)
      for (int v = 0; v < g.vars; ++v)
        for (int t = 0; t < g.len; ++t) g.at(node, v, t) = m(v, t);
    return g;
  }

  nlohmann::json to_json() const {
    nlohmann::json scores = nlohmann::json::array();
    for (const auto& [node, s] : node_scalar)
      scores.push_back({{"node", node}, {"score", s}});
    nlohmann::json j = {{"target_node", target.node},
                        {"horizon_step", target.step},
                        {"mode", mode},
                        {"method", method},
                        {"scores", scores}};
    if (quantile_level) j["quantile_level"] = *quantile_level;
    return j;
  }
};

/// Makes the scalar forecast function explained at a given tree node; the
/// probabilistic variant substitutes quantile outputs here.
using ScalarFnFactory = std::function<std::unique_ptr<ScalarFn>(NodeId node)>;

namespace detail {

inline double edge_summary(const Eigen::MatrixXd& m, const HierConfig& cfg) {
  double s = 0.0;
  if (cfg.mean_abs_summary) {
    s = m.size() > 0 ? m.cwiseAbs().mean() : 0.0;
  } else {
    for (long v = 0; v < m.rows(); ++v)
      for (long t = 0; t < m.cols(); ++t)
        if (std::abs(m(v, t)) > std::abs(s)) s = m(v, t);
  }
  return cfg.magnitude_only ? std::abs(s) : s;
}

inline Eigen::MatrixXd node_slice(const Grid3& g, NodeId node) {
  Eigen::MatrixXd m(g.vars, g.len);
  for (int v = 0; v < g.vars; ++v)
    for (int t = 0; t < g.len; ++t) m(v, t) = g.at(node, v, t);
  return m;
}

}  // namespace detail

/// Attribution of `input_node`'s context cells to `output_node`'s output,
/// holding every other cell at its observed value.
inline EdgeImportance adjacent_importance(const HierarchyTree& tree, const Grid3& z,
                                          const Grid3& baseline,
                                          const ScalarFnFactory& factory,
                                          NodeId output_node, NodeId input_node,
                                          Method method, const HierConfig& cfg) {
  require(output_node == input_node || tree.adjacent(output_node, input_node),
          "adjacent_importance: nodes " + std::to_string(output_node) + " and " +
              std::to_string(input_node) + " are not adjacent");
  std::unique_ptr<ScalarFn> fn = factory(output_node);
  OutputSelector tgt;
  tgt.node = output_node;
  const ImportanceTensor it = attribute(method, *fn, z, CellDomain::node(z, input_node),
                                        baseline, cfg.attr, tgt);
  EdgeImportance e;
  e.output_node = output_node;
  e.input_node = input_node;
  e.matrix = detail::node_slice(it.scores, input_node);
  e.scalar = detail::edge_summary(e.matrix, cfg);
  if (cfg.normalize_edges) {
    const double mx = e.matrix.cwiseAbs().maxCoeff();
    if (mx > 0.0) {
      e.matrix /= mx;
      e.scalar /= mx;
    }
  }
  return e;
}

/// One adjacent-importance evaluation. `output_node` is the path node nearer
/// the target; `input_node` the farther one. Called once with both equal to
/// the target for the target's own cell matrix (scalar ignored). The matrix
/// is optional so scalar-only stubs can drive the propagation in tests.
struct EdgeResult {
  double scalar = 0.0;
  std::optional<Eigen::MatrixXd> matrix;
};
using EdgeOracle = std::function<EdgeResult(NodeId output_node, NodeId input_node)>;

/// Breadth-first importance propagation from the target: every node's score
/// is the product of adjacent importances along its unique tree path to the
/// target, and each tree edge is evaluated exactly once.
inline HierImportanceMap subtree_scores_with_oracle(const HierarchyTree& tree,
                                                    NodeId target_node,
                                                    const EdgeOracle& oracle) {
  HierImportanceMap out;
  out.target.node = target_node;
  out.mode = "subtree";
  out.node_scalar[target_node] = 1.0;
  const EdgeResult self = oracle(target_node, target_node);
  if (self.matrix) out.node_matrix[target_node] = *self.matrix;

  std::vector<NodeId> queue{target_node};
  for (size_t k = 0; k < queue.size(); ++k) {
    const NodeId cur = queue[k];
    const double cur_score = out.node_scalar.at(cur);
    auto visit = [&](NodeId nb) {
      if (out.node_scalar.count(nb)) return;
      const EdgeResult e = oracle(cur, nb);
      ++out.edge_evaluations;
      out.node_scalar[nb] = cur_score * e.scalar;
      if (e.matrix) out.node_matrix[nb] = cur_score * *e.matrix;
      queue.push_back(nb);
    };
    for (NodeId c : tree.children(cur)) visit(c);
    if (auto p = tree.parent(cur)) visit(*p);
  }
  require(static_cast<int>(out.node_scalar.size()) == tree.size(),
          "subtree propagation did not reach every node");
  return out;
}

/// Subtree-approximation explanation of one model output over a standardized
/// context: scalar per node plus the per-cell matrix of the final path hop
/// scaled by the accumulated upstream score.
inline HierImportanceMap subtree_scores(const HierarchyTree& tree, const Grid3& z,
                                        const Grid3& baseline,
                                        const ScalarFnFactory& factory,
                                        NodeId target_node, Method method,
                                        const HierConfig& cfg) {
  cfg.attr.validate();
  EdgeOracle oracle = [&](NodeId out_node, NodeId in_node) -> EdgeResult {
    const EdgeImportance e =
        adjacent_importance(tree, z, baseline, factory, out_node, in_node, method, cfg);
    return {e.scalar, e.matrix};
  };
  HierImportanceMap out = subtree_scores_with_oracle(tree, target_node, oracle);
  out.method = method_name(method);
  return out;
}

/// Flat baseline: one attribution of the target output over the whole
/// context; node scalars are the same summary applied per node slice.
inline HierImportanceMap flat_scores(const HierarchyTree& tree, const Grid3& z,
                                     const Grid3& baseline,
                                     const ScalarFnFactory& factory,
                                     NodeId target_node, Method method,
                                     const HierConfig& cfg) {
  cfg.attr.validate();
  std::unique_ptr<ScalarFn> fn = factory(target_node);
  OutputSelector tgt;
  tgt.node = target_node;
  const ImportanceTensor it =
      attribute(method, *fn, z, CellDomain::all(z), baseline, cfg.attr, tgt);
  HierImportanceMap out;
  out.target.node = target_node;
  out.mode = "flat";
  out.method = method_name(method);
  for (int n = 0; n < tree.size(); ++n) {
    Eigen::MatrixXd m = detail::node_slice(it.scores, n);
    out.node_matrix[n] = m;
    out.node_scalar[n] = detail::edge_summary(m, cfg);
  }
  return out;
}

/// Factory for plain forecast outputs: explain node -> scalar forecast of
/// that node at the template's horizon step / head component.
inline ScalarFnFactory forecast_factory(const ModelParams& params,
                                        OutputSelector tmpl) {
  return [&params, tmpl](NodeId node) -> std::unique_ptr<ScalarFn> {
    OutputSelector sel = tmpl;
    sel.node = node;
    return std::make_unique<ForecastScalarFn>(params, sel);
  };
}

/// Hierarchy-aware explanation of a trained forecaster from a raw context.
inline HierImportanceMap explain_forecast(const ModelParams& params,
                                          const Grid3& raw_context,
                                          OutputSelector target, Method method,
                                          const HierConfig& cfg,
                                          bool subtree_mode = true) {
  detail::validate_selector(params, target);
  const Grid3 z = detail::standardize(params, raw_context);
  const Grid3 b = detail::baseline_grid(params, z, cfg.attr.baseline);
  const ScalarFnFactory factory = forecast_factory(params, target);
  HierImportanceMap out =
      subtree_mode
          ? subtree_scores(params.tree, z, b, factory, target.node, method, cfg)
          : flat_scores(params.tree, z, b, factory, target.node, method, cfg);
  out.target = target;
  return out;
}

}  // namespace hiex
