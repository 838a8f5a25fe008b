#pragma once

#include <iostream>

#include "hiex/forecaster.hpp"

namespace hiex {

/// Importance scores for one scalar forecast output. Scores live on the full
/// (input node, variable, time) grid; cells outside the evaluated domain are
/// zero. All scores are in standardized input space.
struct ImportanceTensor {
  Grid3 scores;
  OutputSelector target;
  std::string method;
  std::string baseline = "train_mean";
  std::uint64_t seed = 0;
  int sample_count = 0;
};

struct AttributionConfig {
  enum class Baseline { zeros, train_mean };
  Baseline baseline = Baseline::train_mean;
  int ig_steps = 50;
  bool ig_right_riemann = false;  // default: midpoint rule (see tests)
  int sg_samples = 25;
  double sg_noise_scale = 0.1;
  bool sg_multiply_by_inputs = true;
  int lime_samples = 500;
  double lime_kernel_width = 0.75;  // on normalized Hamming distance
  double lime_ridge = 1e-3;
  std::uint64_t seed = 0;

  void validate() const {
    require(ig_steps >= 2, "attribution: ig_steps >= 2");
    require(sg_samples >= 1 && lime_samples >= 1, "attribution: sample counts >= 1");
    require(sg_noise_scale >= 0.0, "attribution: noise scale >= 0");
    require(lime_ridge > 0.0, "attribution: ridge must be positive");
  }
};

/// A deterministic scalar function of a standardized context. Implementations
/// may support exact gradients and incremental re-evaluation when only one
/// node's cells changed since rebase().
class ScalarFn {
 public:
  virtual ~ScalarFn() = default;
  virtual double eval(const Grid3& z) = 0;
  virtual bool has_gradient() const { return false; }
  virtual Grid3 grad(const Grid3& /*z*/) {
    throw Error("this model output does not support gradients");
  }
  /// Restricted gradient: only cells of `node` are needed by the caller.
  virtual Grid3 grad_for_node(const Grid3& z, NodeId /*node*/) { return grad(z); }
  virtual void rebase(const Grid3& z) { base_ = &z; }
  virtual double eval_dirty(const Grid3& z, NodeId /*dirty_node*/) { return eval(z); }

 protected:
  const Grid3* base_ = nullptr;
};

struct Cell {
  NodeId node;
  int var;
  int t;
};

/// Cells over which attribution scores are computed. Either the whole
/// context or a single node's rows (the conditional, restricted case).
struct CellDomain {
  std::vector<Cell> cells;
  std::optional<NodeId> single_node;  // set when all cells belong to one node

  static CellDomain all(const Grid3& shape) {
    CellDomain d;
    for (int n = 0; n < shape.nodes; ++n)
      for (int v = 0; v < shape.vars; ++v)
        for (int t = 0; t < shape.len; ++t) d.cells.push_back({n, v, t});
    return d;
  }
  static CellDomain node(const Grid3& shape, NodeId n) {
    CellDomain d;
    d.single_node = n;
    for (int v = 0; v < shape.vars; ++v)
      for (int t = 0; t < shape.len; ++t) d.cells.push_back({n, v, t});
    return d;
  }
};

/// Scalar forecaster output as a ScalarFn, with per-leaf caching so that
/// perturbations confined to one node only re-run the affected leaf models.
class ForecastScalarFn : public ScalarFn {
 public:
  ForecastScalarFn(const ModelParams& params, OutputSelector sel)
      : p_(&params), sel_(sel), leaves_(params.tree.leaves_under(sel.node)) {
    detail::validate_selector(params, sel);
    for (NodeId l : leaves_) {
      const double w = params.tree.path_weight(sel_.node, l);
      weight_[l] = sel_.comp == HeadComp::sigma ? std::abs(w) : w;
    }
  }

  double eval(const Grid3& z) override {
    double acc = 0.0;
    for (NodeId l : leaves_) acc += weight_[l] * leaf_value(z, l);
    return acc;
  }

  bool has_gradient() const override { return true; }
  Grid3 grad(const Grid3& z) override { return gradient_std(*p_, z, sel_); }
  Grid3 grad_for_node(const Grid3& z, NodeId node) override {
    const std::vector<NodeId> aff = affected_leaves(node);
    return gradient_std(*p_, z, sel_, &aff);
  }

  void rebase(const Grid3& z) override {
    base_total_ = 0.0;
    base_contrib_.clear();
    for (NodeId l : leaves_) {
      const double c = weight_[l] * leaf_value(z, l);
      base_contrib_[l] = c;
      base_total_ += c;
    }
    rebased_ = true;
  }

  double eval_dirty(const Grid3& z, NodeId dirty_node) override {
    if (!rebased_) return eval(z);
    double acc = base_total_;
    for (NodeId l : affected_leaves(dirty_node)) {
      acc -= base_contrib_.at(l);
      acc += weight_.at(l) * leaf_value(z, l);
    }
    return acc;
  }

  /// Leaves whose model inputs include cells of `node`, restricted to the
  /// subtree that feeds the selected output.
  std::vector<NodeId> affected_leaves(NodeId node) const {
    if (p_->tree.is_ancestor_or_self(node, sel_.node)) return leaves_;
    if (p_->tree.is_ancestor_or_self(sel_.node, node))
      return p_->tree.leaves_under(node);
    return {};
  }

 private:
  double leaf_value(const Grid3& z, NodeId leaf) const {
    const Eigen::RowVectorXd head =
        detail::leaf_head(*p_, detail::gather_input(*p_, z, leaf));
    return detail::leaf_component_raw(*p_, head, leaf, sel_.step, sel_.comp,
                                      sel_.level_index);
  }

  const ModelParams* p_;
  OutputSelector sel_;
  std::vector<NodeId> leaves_;
  std::map<NodeId, double> weight_;
  std::map<NodeId, double> base_contrib_;
  double base_total_ = 0.0;
  bool rebased_ = false;
};

namespace detail {

/// Baseline context in standardized space. train_mean is identically zero;
/// zeros is the raw-space origin.
inline Grid3 baseline_grid(const ModelParams& p, const Grid3& shape,
                           AttributionConfig::Baseline kind) {
  Grid3 b(shape.nodes, shape.vars, shape.len, 0.0);
  if (kind == AttributionConfig::Baseline::zeros)
    for (int n = 0; n < b.nodes; ++n)
      for (int v = 0; v < b.vars; ++v)
        for (int t = 0; t < b.len; ++t)
          b.at(n, v, t) = -p.mean(n, v) / p.stdev(n, v);
  return b;
}

inline std::uint64_t job_seed(const AttributionConfig& cfg, const std::string& method,
                              const OutputSelector& sel) {
  return derive_seed(cfg.seed, method,
                     static_cast<std::uint64_t>(sel.node) * 1024 + sel.step,
                     static_cast<std::uint64_t>(sel.level_index) * 4 +
                         static_cast<std::uint64_t>(sel.comp));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Feature Occlusion: score(cell) = f(z) - f(z with cell at baseline).
// ---------------------------------------------------------------------------

inline ImportanceTensor feature_occlusion(ScalarFn& f, const Grid3& z,
                                          const CellDomain& domain,
                                          const Grid3& baseline,
                                          const AttributionConfig& cfg,
                                          const OutputSelector& target) {
  cfg.validate();
  ImportanceTensor out{Grid3(z.nodes, z.vars, z.len, 0.0), target, "fo"};
  // The incremental path applies only to node-restricted domains, where the
  // hierarchy decomposition licenses it; a full-domain attribution treats the
  // model as a black box and re-evaluates it per cell.
  const bool incremental = domain.single_node.has_value();
  f.rebase(z);
  const double ref = incremental ? f.eval_dirty(z, *domain.single_node) : f.eval(z);
  Grid3 work = z;
  for (const Cell& c : domain.cells) {
    const double keep = work.at(c.node, c.var, c.t);
    const double b = baseline.at(c.node, c.var, c.t);
    if (keep == b) continue;  // occlusion is a no-op
    work.at(c.node, c.var, c.t) = b;
    out.scores.at(c.node, c.var, c.t) =
        ref - (incremental ? f.eval_dirty(work, c.node) : f.eval(work));
    work.at(c.node, c.var, c.t) = keep;
  }
  require(out.scores.all_finite(), "feature_occlusion: non-finite scores");
  return out;
}

// ---------------------------------------------------------------------------
// Integrated Gradients along the straight path from the baseline, restricted
// to the domain cells (cells outside the domain stay at their observed
// values). Completeness: sum of scores ~ f(z) - f(baseline-on-domain).
// ---------------------------------------------------------------------------

inline ImportanceTensor integrated_gradients(ScalarFn& f, const Grid3& z,
                                             const CellDomain& domain,
                                             const Grid3& baseline,
                                             const AttributionConfig& cfg,
                                             const OutputSelector& target) {
  cfg.validate();
  require(f.has_gradient(), "integrated_gradients: model lacks gradients");
  ImportanceTensor out{Grid3(z.nodes, z.vars, z.len, 0.0), target, "ig"};
  const int m = cfg.ig_steps;
  Grid3 point = z;
  Grid3 acc(z.nodes, z.vars, z.len, 0.0);
  for (int s = 1; s <= m; ++s) {
    const double alpha = cfg.ig_right_riemann
                             ? static_cast<double>(s) / m
                             : (static_cast<double>(s) - 0.5) / m;
    for (const Cell& c : domain.cells)
      point.at(c.node, c.var, c.t) =
          baseline.at(c.node, c.var, c.t) +
          alpha * (z.at(c.node, c.var, c.t) - baseline.at(c.node, c.var, c.t));
    const Grid3 g = domain.single_node ? f.grad_for_node(point, *domain.single_node)
                                       : f.grad(point);
    for (const Cell& c : domain.cells)
      acc.at(c.node, c.var, c.t) += g.at(c.node, c.var, c.t);
  }
  for (const Cell& c : domain.cells)
    out.scores.at(c.node, c.var, c.t) =
        (z.at(c.node, c.var, c.t) - baseline.at(c.node, c.var, c.t)) *
        acc.at(c.node, c.var, c.t) / m;
  require(out.scores.all_finite(), "integrated_gradients: non-finite scores");
  return out;
}

// ---------------------------------------------------------------------------
// SmoothGrad: signed average of gradients at noisy inputs; noise scale is
// relative to the value range over the domain. By default the averaged
// gradient is multiplied by (input - baseline) so linear models reproduce
// their exact contributions; set sg_multiply_by_inputs=false for the plain
// averaged-gradient saliency.
// ---------------------------------------------------------------------------

inline ImportanceTensor smoothgrad(ScalarFn& f, const Grid3& z,
                                   const CellDomain& domain, const Grid3& baseline,
                                   const AttributionConfig& cfg,
                                   const OutputSelector& target) {
  cfg.validate();
  require(f.has_gradient(), "smoothgrad: model lacks gradients");
  ImportanceTensor out{Grid3(z.nodes, z.vars, z.len, 0.0), target, "sg"};
  out.seed = detail::job_seed(cfg, "sg", target);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const Cell& c : domain.cells) {
    lo = std::min(lo, z.at(c.node, c.var, c.t));
    hi = std::max(hi, z.at(c.node, c.var, c.t));
  }
  const double sd = cfg.sg_noise_scale * (hi - lo);
  Rng rng(out.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Grid3 acc(z.nodes, z.vars, z.len, 0.0);
  Grid3 noisy = z;
  for (int k = 0; k < cfg.sg_samples; ++k) {
    for (const Cell& c : domain.cells)
      noisy.at(c.node, c.var, c.t) = z.at(c.node, c.var, c.t) + sd * nd(rng);
    const Grid3 g = domain.single_node ? f.grad_for_node(noisy, *domain.single_node)
                                       : f.grad(noisy);
    for (const Cell& c : domain.cells)
      acc.at(c.node, c.var, c.t) += g.at(c.node, c.var, c.t);
  }
  for (const Cell& c : domain.cells) {
    double s = acc.at(c.node, c.var, c.t) / cfg.sg_samples;
    if (cfg.sg_multiply_by_inputs)
      s *= z.at(c.node, c.var, c.t) - baseline.at(c.node, c.var, c.t);
    out.scores.at(c.node, c.var, c.t) = s;
  }
  out.sample_count = cfg.sg_samples;
  require(out.scores.all_finite(), "smoothgrad: non-finite scores");
  return out;
}

// ---------------------------------------------------------------------------
// LIME-style local surrogate: binary keep/occlude masks over the domain,
// exponential kernel on normalized Hamming distance, weighted ridge fit.
// Coefficients are the scores.
// ---------------------------------------------------------------------------

inline ImportanceTensor lime_surrogate(ScalarFn& f, const Grid3& z,
                                       const CellDomain& domain,
                                       const Grid3& baseline,
                                       const AttributionConfig& cfg,
                                       const OutputSelector& target) {
  cfg.validate();
  const int n_cells = static_cast<int>(domain.cells.size());
  if (cfg.lime_samples < n_cells / 10)
    std::cerr << "[hiex] warning: lime_samples=" << cfg.lime_samples
              << " is small for " << n_cells << " cells\n";
  ImportanceTensor out{Grid3(z.nodes, z.vars, z.len, 0.0), target, "lime"};
  out.seed = detail::job_seed(cfg, "lime", target);
  Rng rng(out.seed);
  std::bernoulli_distribution keep(0.5);

  const int S = cfg.lime_samples;
  Eigen::MatrixXd M(S, n_cells + 1);  // intercept last
  Eigen::VectorXd y(S), w(S);
  f.rebase(z);
  Grid3 pert = z;
  for (int s = 0; s < S; ++s) {
    int off = 0;
    for (int c = 0; c < n_cells; ++c) {
      const bool k = keep(rng);
      M(s, c) = k ? 1.0 : 0.0;
      const Cell& cc = domain.cells[c];
      pert.at(cc.node, cc.var, cc.t) =
          k ? z.at(cc.node, cc.var, cc.t) : baseline.at(cc.node, cc.var, cc.t);
      if (!k) ++off;
    }
    M(s, n_cells) = 1.0;
    y[s] = domain.single_node ? f.eval_dirty(pert, *domain.single_node)
                              : f.eval(pert);
    const double d = static_cast<double>(off) / n_cells;
    w[s] = std::exp(-(d * d) / (cfg.lime_kernel_width * cfg.lime_kernel_width));
  }
  // (M^T W M + ridge I) beta = M^T W y
  Eigen::MatrixXd A = M.transpose() * w.asDiagonal() * M;
  A.diagonal().array() += cfg.lime_ridge;
  Eigen::VectorXd beta = A.ldlt().solve(M.transpose() * (w.asDiagonal() * y));
  if (!beta.allFinite())
    throw Error("lime_surrogate: singular regression system; increase lime_ridge");
  for (int c = 0; c < n_cells; ++c) {
    const Cell& cc = domain.cells[c];
    out.scores.at(cc.node, cc.var, cc.t) = beta[c];
  }
  out.sample_count = S;
  return out;
}

// ---------------------------------------------------------------------------
// Method dispatch + forecaster-facing wrappers
// ---------------------------------------------------------------------------

enum class Method { fo, ig, sg, lime };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::fo: return "fo";
    case Method::ig: return "ig";
    case Method::sg: return "sg";
    case Method::lime: return "lime";
  }
  return "?";
}

inline Method method_from_name(const std::string& s) {
  if (s == "fo") return Method::fo;
  if (s == "ig") return Method::ig;
  if (s == "sg") return Method::sg;
  if (s == "lime") return Method::lime;
  throw ConfigError("unknown attribution method: " + s);
}

inline ImportanceTensor attribute(Method method, ScalarFn& f, const Grid3& z,
                                  const CellDomain& domain, const Grid3& baseline,
                                  const AttributionConfig& cfg,
                                  const OutputSelector& target) {
  switch (method) {
    case Method::fo: return feature_occlusion(f, z, domain, baseline, cfg, target);
    case Method::ig: return integrated_gradients(f, z, domain, baseline, cfg, target);
    case Method::sg: return smoothgrad(f, z, domain, baseline, cfg, target);
    case Method::lime: return lime_surrogate(f, z, domain, baseline, cfg, target);
  }
  throw Error("unreachable");
}

/// Attribution of one forecaster output against the full context.
inline ImportanceTensor attribute_model(Method method, const ModelParams& params,
                                        const Grid3& raw_context,
                                        const OutputSelector& target,
                                        const AttributionConfig& cfg) {
  const Grid3 z = detail::standardize(params, raw_context);
  const Grid3 b = detail::baseline_grid(params, z, cfg.baseline);
  ForecastScalarFn f(params, target);
  ImportanceTensor out = attribute(method, f, z, CellDomain::all(z), b, cfg, target);
  out.baseline = cfg.baseline == AttributionConfig::Baseline::zeros ? "zeros"
                                                                    : "train_mean";
  return out;
}

inline void write_importance_csv(std::ostream& os, const ImportanceTensor& it,
                                 const std::vector<std::string>& variables,
                                 bool header = true,
                                 std::optional<double> level = std::nullopt) {
  if (header) {
    os << "forecast_node,horizon_step,head_component,method,input_node,variable,"
          "t,score";
    if (level) os << ",level";
    os << "\n";
  }
  const char* comp = it.target.comp == HeadComp::value     ? "value"
                     : it.target.comp == HeadComp::sigma   ? "sigma"
                                                           : "quantile";
  std::ostringstream ss;
  ss.precision(17);
  for (int n = 0; n < it.scores.nodes; ++n)
    for (int v = 0; v < it.scores.vars; ++v)
      for (int t = 0; t < it.scores.len; ++t) {
        ss.str("");
        ss << it.scores.at(n, v, t);
        os << it.target.node << ',' << it.target.step << ',' << comp << ','
           << it.method << ',' << n << ',' << variables[v] << ',' << t << ','
           << ss.str();
        if (level) os << ',' << *level;
        os << "\n";
      }
}

}  // namespace hiex
