#pragma once

#include "hiex/hier_explain.hpp"

namespace hiex {

// ---------------------------------------------------------------------------
// Probabilistic forecasts are explained through deterministic quantile
// surrogates: the requested predictive quantile of one node at one horizon
// step becomes the scalar output that attribution methods operate on.
//   - gaussian head: analytic quantile mu + z(level) * sigma, differentiable.
//   - quantile head at a configured level: the head output itself.
//   - any other case: empirical quantile of predictive draws under common
//     random numbers (noise independent of the context), occlusion-style
//     methods only.
// ---------------------------------------------------------------------------

struct QuantileTarget {
  NodeId node = 0;
  int step = 0;
  double level = 0.9;          // in (0,1)
  int n_samples = 512;         // empirical path only
  std::uint64_t seed = 0;      // empirical path only (CRN stream)
  bool force_empirical = false;

  void validate() const {
    require(level > 0.0 && level < 1.0, "quantile level must be in (0,1)");
    require(n_samples >= 100, "empirical quantile needs n_samples >= 100");
  }
};

/// Analytic gaussian quantile: mu(node, step) + z(level) * sigma(node, step).
class GaussianQuantileFn : public ScalarFn {
 public:
  GaussianQuantileFn(const ModelParams& params, NodeId node, int step, double level)
      : zq_(inverse_normal_cdf(level)),
        mu_(params, OutputSelector{node, step, HeadComp::value, 0}),
        sig_(params, OutputSelector{node, step, HeadComp::sigma, 0}) {
    require(params.spec.head == HeadKind::gaussian,
            "analytic quantile needs a gaussian head");
  }

  double eval(const Grid3& z) override { return mu_.eval(z) + zq_ * sig_.eval(z); }
  bool has_gradient() const override { return true; }
  Grid3 grad(const Grid3& z) override {
    Grid3 g = mu_.grad(z);
    const Grid3 gs = sig_.grad(z);
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += zq_ * gs.v[i];
    return g;
  }
  Grid3 grad_for_node(const Grid3& z, NodeId node) override {
    Grid3 g = mu_.grad_for_node(z, node);
    const Grid3 gs = sig_.grad_for_node(z, node);
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += zq_ * gs.v[i];
    return g;
  }
  void rebase(const Grid3& z) override {
    mu_.rebase(z);
    sig_.rebase(z);
  }
  double eval_dirty(const Grid3& z, NodeId dirty) override {
    return mu_.eval_dirty(z, dirty) + zq_ * sig_.eval_dirty(z, dirty);
  }

 private:
  double zq_;
  ForecastScalarFn mu_, sig_;
};

/// Empirical predictive quantile under common random numbers: the noise
/// stream depends only on (seed, node, step), so perturbing the context moves
/// the draws smoothly and occlusion differences are noise-free.
class EmpiricalQuantileFn : public ScalarFn {
 public:
  EmpiricalQuantileFn(const ModelParams& params, const QuantileTarget& qt)
      : p_(&params), qt_(qt) {
    qt_.validate();
    require(params.spec.head != HeadKind::point,
            "empirical quantile needs a probabilistic head");
    Rng rng(derive_seed(qt_.seed, "predictive", static_cast<std::uint64_t>(qt_.node),
                        static_cast<std::uint64_t>(qt_.step)));
    if (params.spec.head == HeadKind::gaussian) {
      std::normal_distribution<double> nd(0.0, 1.0);
      for (int k = 0; k < qt_.n_samples; ++k) noise_.push_back(nd(rng));
      comps_.push_back(std::make_unique<ForecastScalarFn>(
          params, OutputSelector{qt_.node, qt_.step, HeadComp::value, 0}));
      comps_.push_back(std::make_unique<ForecastScalarFn>(
          params, OutputSelector{qt_.node, qt_.step, HeadComp::sigma, 0}));
    } else {
      std::uniform_real_distribution<double> ud(0.0, 1.0);
      for (int k = 0; k < qt_.n_samples; ++k) noise_.push_back(ud(rng));
      for (int q = 0; q < params.spec.n_levels(); ++q)
        comps_.push_back(std::make_unique<ForecastScalarFn>(
            params, OutputSelector{qt_.node, qt_.step, HeadComp::quantile, q}));
    }
  }

  double eval(const Grid3& z) override {
    std::vector<double> c(comps_.size());
    for (size_t i = 0; i < comps_.size(); ++i) c[i] = comps_[i]->eval(z);
    return quantile_of(c);
  }
  void rebase(const Grid3& z) override {
    for (auto& f : comps_) f->rebase(z);
  }
  double eval_dirty(const Grid3& z, NodeId dirty) override {
    std::vector<double> c(comps_.size());
    for (size_t i = 0; i < comps_.size(); ++i) c[i] = comps_[i]->eval_dirty(z, dirty);
    return quantile_of(c);
  }

 private:
  double quantile_of(const std::vector<double>& c) const {
    std::vector<double> draws(noise_.size());
    if (p_->spec.head == HeadKind::gaussian) {
      const double mu = c[0], sigma = c[1];
      for (size_t k = 0; k < noise_.size(); ++k) draws[k] = mu + sigma * noise_[k];
    } else {
      // Invert the predicted quantile curve at the seeded uniforms, linear
      // between configured levels and flat beyond them.
      std::vector<double> q = c;
      std::sort(q.begin(), q.end());
      const auto& lv = p_->spec.quantile_levels;
      for (size_t k = 0; k < noise_.size(); ++k) {
        const double u = noise_[k];
        if (u <= lv.front())
          draws[k] = q.front();
        else if (u >= lv.back())
          draws[k] = q.back();
        else {
          size_t i = 0;
          while (i + 1 < lv.size() && lv[i + 1] < u) ++i;
          const double w = (u - lv[i]) / (lv[i + 1] - lv[i]);
          draws[k] = (1 - w) * q[i] + w * q[i + 1];
        }
      }
    }
    std::sort(draws.begin(), draws.end());
    return interpolated_quantile(draws, qt_.level);
  }

  const ModelParams* p_;
  QuantileTarget qt_;
  std::vector<double> noise_;
  std::vector<std::unique_ptr<ScalarFn>> comps_;
};

/// Quantile surrogate for one node, picking the cheapest exact path.
inline std::unique_ptr<ScalarFn> make_quantile_fn(const ModelParams& params,
                                                  const QuantileTarget& qt) {
  qt.validate();
  require(params.spec.head != HeadKind::point,
          "cannot explain quantiles of a point forecaster");
  if (!qt.force_empirical) {
    if (params.spec.head == HeadKind::gaussian)
      return std::make_unique<GaussianQuantileFn>(params, qt.node, qt.step, qt.level);
    for (int q = 0; q < params.spec.n_levels(); ++q)
      if (std::abs(params.spec.quantile_levels[q] - qt.level) < 1e-12)
        return std::make_unique<ForecastScalarFn>(
            params, OutputSelector{qt.node, qt.step, HeadComp::quantile, q});
  }
  return std::make_unique<EmpiricalQuantileFn>(params, qt);
}

/// Hierarchy-aware explanation of one predictive quantile. Gradient methods
/// on a gradient-free surrogate fall back to occlusion with a warning, or
/// throw when the fallback is disabled.
inline HierImportanceMap explain_quantile(const ModelParams& params,
                                          const Grid3& raw_context,
                                          const QuantileTarget& target, Method method,
                                          const HierConfig& cfg,
                                          bool subtree_mode = true,
                                          bool fallback_to_occlusion = true) {
  target.validate();
  require(target.node >= 0 && target.node < params.tree.size(),
          "explain_quantile: unknown node " + std::to_string(target.node));
  require(target.step >= 0 && target.step < params.spec.horizon,
          "explain_quantile: bad horizon step");
  const Grid3 z = detail::standardize(params, raw_context);
  const Grid3 b = detail::baseline_grid(params, z, cfg.attr.baseline);
  const bool needs_grad = method == Method::ig || method == Method::sg;
  if (needs_grad && !make_quantile_fn(params, target)->has_gradient()) {
    if (!fallback_to_occlusion)
      throw Error("method " + method_name(method) +
                  " needs gradients; this quantile surrogate has none "
                  "(enable the occlusion fallback or use fo/lime)");
    std::cerr << "[hiex] warning: " << method_name(method)
              << " has no gradient through the empirical quantile; "
                 "falling back to occlusion\n";
    method = Method::fo;
  }
  ScalarFnFactory factory = [&params, &target](NodeId node) {
    QuantileTarget qt = target;
    qt.node = node;
    return make_quantile_fn(params, qt);
  };
  HierImportanceMap out =
      subtree_mode
          ? subtree_scores(params.tree, z, b, factory, target.node, method, cfg)
          : flat_scores(params.tree, z, b, factory, target.node, method, cfg);
  out.target = OutputSelector{target.node, target.step, HeadComp::value, 0};
  out.quantile_level = target.level;
  return out;
}

}  // namespace hiex
