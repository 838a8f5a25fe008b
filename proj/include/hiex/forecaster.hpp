#pragma once

#include <fstream>
#include <numeric>

#include "hiex/autodiff.hpp"
#include "hiex/panel.hpp"
#include "json.hpp"

namespace hiex {

enum class ModelKind { linear_ar, mlp };
enum class HeadKind { point, gaussian, quantile };

/// Which scalar output of a forecaster an explanation targets.
enum class HeadComp { value, sigma, quantile };

struct OutputSelector {
  NodeId node = 0;
  int step = 0;  // horizon step, 0-based
  HeadComp comp = HeadComp::value;
  int level_index = 0;  // quantile head only
};

struct ForecasterSpec {
  ModelKind kind = ModelKind::linear_ar;
  int context_length = 12;
  int horizon = 12;
  int hidden_width = 16;  // mlp only
  HeadKind head = HeadKind::point;
  std::vector<double> quantile_levels;  // quantile head only, strictly increasing
  std::uint64_t seed = 0;
  // Training knobs. linear_ar uses full-batch descent with a step chosen once
  // from the data curvature; mlp uses seeded minibatch descent.
  int max_epochs = 0;  // 0 = default per kind
  double learning_rate = 0.0;  // 0 = default per kind/loss
  int batch_size = 64;

  void validate() const {
    require(context_length >= 1 && horizon >= 1, "spec: bad window sizes");
    if (kind == ModelKind::mlp) require(hidden_width >= 1, "spec: hidden_width >= 1");
    if (head == HeadKind::quantile) {
      require(!quantile_levels.empty(), "spec: quantile head needs levels");
      for (size_t i = 0; i < quantile_levels.size(); ++i) {
        require(quantile_levels[i] > 0 && quantile_levels[i] < 1,
                "spec: quantile levels in (0,1)");
        require(i == 0 || quantile_levels[i] > quantile_levels[i - 1],
                "spec: quantile levels strictly increasing");
      }
    }
  }
  int n_levels() const { return static_cast<int>(quantile_levels.size()); }
  int head_dim() const {
    switch (head) {
      case HeadKind::point: return horizon;
      case HeadKind::gaussian: return 2 * horizon;
      case HeadKind::quantile: return horizon * n_levels();
    }
    return horizon;
  }
};

inline nlohmann::json spec_to_json(const ForecasterSpec& s) {
  return {{"kind", s.kind == ModelKind::linear_ar ? "linear_ar" : "mlp"},
          {"context_length", s.context_length},
          {"horizon", s.horizon},
          {"hidden_width", s.hidden_width},
          {"head", s.head == HeadKind::point     ? "point"
                   : s.head == HeadKind::gaussian ? "gaussian"
                                                  : "quantile"},
          {"quantile_levels", s.quantile_levels},
          {"seed", s.seed},
          {"max_epochs", s.max_epochs},
          {"learning_rate", s.learning_rate},
          {"batch_size", s.batch_size}};
}

inline ForecasterSpec spec_from_json(const nlohmann::json& j) {
  ForecasterSpec s;
  const std::string kind = j.value("kind", "linear_ar");
  require(kind == "linear_ar" || kind == "mlp", "spec: unknown kind " + kind);
  s.kind = kind == "mlp" ? ModelKind::mlp : ModelKind::linear_ar;
  s.context_length = j.value("context_length", 12);
  s.horizon = j.value("horizon", 12);
  s.hidden_width = j.value("hidden_width", 16);
  const std::string head = j.value("head", "point");
  require(head == "point" || head == "gaussian" || head == "quantile",
          "spec: unknown head " + head);
  s.head = head == "point"      ? HeadKind::point
           : head == "gaussian" ? HeadKind::gaussian
                                : HeadKind::quantile;
  s.quantile_levels = j.value("quantile_levels", std::vector<double>{});
  s.seed = j.value("seed", std::uint64_t{0});
  s.max_epochs = j.value("max_epochs", 0);
  s.learning_rate = j.value("learning_rate", 0.0);
  s.batch_size = j.value("batch_size", 64);
  s.validate();
  return s;
}

/// Trained model. Leaves are forecast from the standardized contexts of
/// their ancestor chain (own series first, then parent, up to the root);
/// internal nodes are reconciled bottom-up so coherency holds exactly.
/// Attribution operates in the standardized input space: the baseline
/// "train mean" is the zero context.
struct ModelParams {
  ForecasterSpec spec;
  HierarchyTree tree;
  int n_vars = 1;
  Eigen::MatrixXd mean, stdev;  // (node, var) training statistics
  // mlp: hidden = tanh(x * W1^T + b1); head = hidden * Wo^T + bo.
  // linear_ar: head = x * Wo^T + bo.
  Eigen::MatrixXd W1, Wo;
  Eigen::RowVectorXd b1, bo;
  double first_epoch_loss = 0.0, final_epoch_loss = 0.0;
  int epochs_run = 0;

  int chain_len() const { return tree.depth() + 1; }
  int input_dim() const { return chain_len() * n_vars * spec.context_length; }

  bool finite() const {
    auto ok = [](const Eigen::MatrixXd& m) { return m.allFinite(); };
    return ok(W1) && ok(Wo) && ok(b1) && ok(bo) && ok(mean) && ok(stdev);
  }

  Eigen::VectorXd flat() const {
    Eigen::MatrixXd b1m = b1, bom = bo;
    Eigen::VectorXd out(W1.size() + b1.size() + Wo.size() + bo.size());
    long k = 0;
    auto put = [&](const Eigen::MatrixXd& m) {
      for (long r = 0; r < m.rows(); ++r)
        for (long c = 0; c < m.cols(); ++c) out[k++] = m(r, c);
    };
    put(W1);
    put(b1m);
    put(Wo);
    put(bom);
    return out;
  }
  void unflatten(const Eigen::VectorXd& v) {
    long k = 0;
    auto get = [&](Eigen::MatrixXd& m) {
      for (long r = 0; r < m.rows(); ++r)
        for (long c = 0; c < m.cols(); ++c) m(r, c) = v[k++];
    };
    Eigen::MatrixXd b1m(1, b1.size()), bom(1, bo.size());
    get(W1);
    get(b1m);
    get(Wo);
    get(bom);
    b1 = b1m.row(0);
    bo = bom.row(0);
    require(k == v.size(), "checkpoint: parameter count mismatch");
  }
};

struct ForecastOutput {
  Eigen::MatrixXd point;                 // (node, step)
  Eigen::MatrixXd mu, sigma;             // gaussian head, else empty
  std::vector<Eigen::MatrixXd> quantiles;  // per level, (node, step)
};

namespace detail {

inline constexpr double kSigmaFloor = 1e-9;
inline constexpr double kStdFloor = 1e-8;

/// Ancestor chain of a node: itself, parent, ..., root.
inline std::vector<NodeId> ancestor_chain(const HierarchyTree& tree, NodeId i) {
  std::vector<NodeId> out;
  std::optional<NodeId> cur = i;
  while (cur) {
    out.push_back(*cur);
    cur = tree.parent(*cur);
  }
  return out;
}

/// Standardize a raw context in place semantics: NaN (masked) cells map to
/// the training mean, i.e. zero in standardized space.
inline Grid3 standardize(const ModelParams& p, const Grid3& raw) {
  require(raw.nodes == p.tree.size() && raw.vars == p.n_vars &&
              raw.len == p.spec.context_length,
          "context shape does not match model spec");
  Grid3 z = raw;
  for (int n = 0; n < raw.nodes; ++n)
    for (int v = 0; v < raw.vars; ++v)
      for (int t = 0; t < raw.len; ++t) {
        const double x = raw.at(n, v, t);
        z.at(n, v, t) =
            std::isfinite(x) ? (x - p.mean(n, v)) / p.stdev(n, v) : 0.0;
      }
  return z;
}

/// Gather the model input row for one leaf from a standardized context.
inline Eigen::RowVectorXd gather_input(const ModelParams& p, const Grid3& z,
                                       NodeId leaf) {
  const int V = p.n_vars, L = p.spec.context_length;
  Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(p.input_dim());
  const auto chain = ancestor_chain(p.tree, leaf);
  for (size_t d = 0; d < chain.size(); ++d)
    for (int v = 0; v < V; ++v)
      for (int l = 0; l < L; ++l)
        x[static_cast<long>(d) * V * L + v * L + l] = z.at(chain[d], v, l);
  return x;
}

/// Head output vector (standardized target units) for one leaf.
inline Eigen::RowVectorXd leaf_head(const ModelParams& p,
                                    const Eigen::RowVectorXd& x) {
  if (p.spec.kind == ModelKind::linear_ar) return x * p.Wo.transpose() + p.bo;
  Eigen::RowVectorXd h = (x * p.W1.transpose() + p.b1).array().tanh();
  return h * p.Wo.transpose() + p.bo;
}

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)));
}

/// Raw-space scalar head component of one leaf: value/mu, sigma, or one
/// quantile at one horizon step.
inline double leaf_component_raw(const ModelParams& p,
                                 const Eigen::RowVectorXd& head, NodeId leaf,
                                 int step, HeadComp comp, int level_index) {
  const double m = p.mean(leaf, 0), s = p.stdev(leaf, 0);
  const int h = p.spec.horizon;
  switch (comp) {
    case HeadComp::value:
      if (p.spec.head == HeadKind::quantile) {
        double acc = 0.0;
        for (int q = 0; q < p.spec.n_levels(); ++q)
          acc += m + s * head[q * h + step];
        return acc / p.spec.n_levels();
      }
      return m + s * head[step];
    case HeadComp::sigma:
      require(p.spec.head == HeadKind::gaussian, "sigma output needs gaussian head");
      return s * (softplus(head[h + step]) + kSigmaFloor);
    case HeadComp::quantile:
      require(p.spec.head == HeadKind::quantile, "quantile output needs quantile head");
      require(level_index >= 0 && level_index < p.spec.n_levels(),
              "bad quantile level index");
      return m + s * head[level_index * h + step];
  }
  return 0.0;
}

inline void validate_selector(const ModelParams& p, const OutputSelector& sel) {
  require(sel.node >= 0 && sel.node < p.tree.size(),
          "selector: unknown node " + std::to_string(sel.node));
  require(sel.step >= 0 && sel.step < p.spec.horizon, "selector: bad horizon step");
  if (sel.comp == HeadComp::sigma)
    require(p.spec.head == HeadKind::gaussian, "selector: sigma needs gaussian head");
  if (sel.comp == HeadComp::quantile) {
    require(p.spec.head == HeadKind::quantile,
            "selector: quantile component needs quantile head");
    require(sel.level_index >= 0 && sel.level_index < p.spec.n_levels(),
            "selector: bad level index");
  } else if (sel.comp == HeadComp::value) {
    require(p.spec.head != HeadKind::quantile || p.spec.n_levels() > 0,
            "selector: value component");
  }
}

}  // namespace detail

/// Scalar model output (raw target units) from a standardized context.
/// Internal-node outputs are the phi-weighted sums of their leaves'
/// outputs (sigma and quantiles aggregate the same way, comonotonically).
inline double eval_scalar_std(const ModelParams& p, const Grid3& z,
                              const OutputSelector& sel) {
  detail::validate_selector(p, sel);
  double acc = 0.0;
  for (NodeId leaf : p.tree.leaves_under(sel.node)) {
    const Eigen::RowVectorXd head = detail::leaf_head(p, detail::gather_input(p, z, leaf));
    double w = p.tree.path_weight(sel.node, leaf);
    if (sel.comp == HeadComp::sigma) w = std::abs(w);  // matches forecast()
    acc += w * detail::leaf_component_raw(p, head, leaf, sel.step, sel.comp,
                                          sel.level_index);
  }
  return acc;
}

/// Exact reverse-mode gradient of the selected scalar output with respect to
/// every standardized input cell. Shape matches the context.
inline Grid3 gradient_std(const ModelParams& p, const Grid3& z,
                          const OutputSelector& sel,
                          const std::vector<NodeId>* leaf_subset = nullptr) {
  detail::validate_selector(p, sel);
  const int V = p.n_vars, L = p.spec.context_length, h = p.spec.horizon;
  Grid3 g(z.nodes, z.vars, z.len, 0.0);
  const std::vector<NodeId> all = p.tree.leaves_under(sel.node);
  for (NodeId leaf : (leaf_subset ? *leaf_subset : all)) {
    const double w = p.tree.path_weight(sel.node, leaf);
    ad::Var x(detail::gather_input(p, z, leaf));
    ad::Var head;
    if (p.spec.kind == ModelKind::linear_ar) {
      head = ad::add_rowvec(ad::matmul(x, ad::Var(p.Wo.transpose())), ad::Var(p.bo));
    } else {
      ad::Var hid = ad::tanh(
          ad::add_rowvec(ad::matmul(x, ad::Var(p.W1.transpose())), ad::Var(p.b1)));
      head = ad::add_rowvec(ad::matmul(hid, ad::Var(p.Wo.transpose())), ad::Var(p.bo));
    }
    const double s = p.stdev(leaf, 0);
    ad::Var scalar;
    switch (sel.comp) {
      case HeadComp::value:
        if (p.spec.head == HeadKind::quantile) {
          ad::Var acc = ad::Var::constant(0.0);
          for (int q = 0; q < p.spec.n_levels(); ++q)
            acc = ad::add(acc, ad::at(head, 0, q * h + sel.step));
          scalar = ad::scale(acc, s / p.spec.n_levels());
        } else {
          scalar = ad::scale(ad::at(head, 0, sel.step), s);
        }
        break;
      case HeadComp::sigma:
        scalar = ad::scale(ad::softplus(ad::at(head, 0, h + sel.step)), s);
        break;
      case HeadComp::quantile:
        scalar = ad::scale(ad::at(head, 0, sel.level_index * h + sel.step), s);
        break;
    }
    scalar = ad::scale(scalar, sel.comp == HeadComp::sigma ? std::abs(w) : w);
    scalar.backward();
    const auto chain = detail::ancestor_chain(p.tree, leaf);
    const Eigen::MatrixXd& xg = x.grad();
    for (size_t d = 0; d < chain.size(); ++d)
      for (int v = 0; v < V; ++v)
        for (int l = 0; l < L; ++l)
          g.at(chain[d], v, l) += xg(0, static_cast<long>(d) * V * L + v * L + l);
  }
  return g;
}

/// Gradient from a raw context (standardized internally).
inline Grid3 gradient(const ModelParams& p, const Grid3& raw_context,
                      const OutputSelector& sel) {
  return gradient_std(p, detail::standardize(p, raw_context), sel);
}

inline ForecastOutput forecast(const ModelParams& p, const Grid3& raw_context) {
  const Grid3 z = detail::standardize(p, raw_context);
  const int N = p.tree.size(), h = p.spec.horizon, Q = p.spec.n_levels();
  ForecastOutput out;
  out.point = Eigen::MatrixXd::Zero(N, h);
  if (p.spec.head == HeadKind::gaussian) {
    out.mu = Eigen::MatrixXd::Zero(N, h);
    out.sigma = Eigen::MatrixXd::Zero(N, h);
  }
  if (p.spec.head == HeadKind::quantile)
    out.quantiles.assign(Q, Eigen::MatrixXd::Zero(N, h));

  // Leaves from the model, then bottom-up phi-weighted aggregation.
  for (NodeId leaf : p.tree.leaves()) {
    const Eigen::RowVectorXd head = detail::leaf_head(p, detail::gather_input(p, z, leaf));
    const double m = p.mean(leaf, 0), s = p.stdev(leaf, 0);
    for (int t = 0; t < h; ++t) {
      switch (p.spec.head) {
        case HeadKind::point:
          out.point(leaf, t) = m + s * head[t];
          break;
        case HeadKind::gaussian:
          out.mu(leaf, t) = m + s * head[t];
          out.sigma(leaf, t) = s * (detail::softplus(head[h + t]) + detail::kSigmaFloor);
          out.point(leaf, t) = out.mu(leaf, t);
          break;
        case HeadKind::quantile: {
          std::vector<double> q(Q);
          for (int k = 0; k < Q; ++k) q[k] = m + s * head[k * h + t];
          std::sort(q.begin(), q.end());  // enforce monotone levels
          double acc = 0.0;
          for (int k = 0; k < Q; ++k) {
            out.quantiles[k](leaf, t) = q[k];
            acc += q[k];
          }
          out.point(leaf, t) = acc / Q;
          break;
        }
      }
    }
  }
  const auto& order = p.tree.topological_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodeId i = *it;
    if (p.tree.is_leaf(i)) continue;
    for (NodeId c : p.tree.children(i)) {
      const double phi = p.tree.phi(c);
      out.point.row(i) += phi * out.point.row(c);
      if (p.spec.head == HeadKind::gaussian) {
        out.mu.row(i) += phi * out.mu.row(c);
        out.sigma.row(i) += std::abs(phi) * out.sigma.row(c);
      }
      for (int k = 0; k < Q; ++k)
        out.quantiles[k].row(i) += phi * out.quantiles[k].row(c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class TrainLoss { spec_default, l1 };

inline ModelParams train(const ForecasterSpec& spec, const TrainView& view,
                         TrainLoss loss_kind = TrainLoss::spec_default) {
  spec.validate();
  const SeriesPanel& panel = *view.panel;
  require(spec.context_length == view.context_length &&
              spec.horizon == view.horizon,
          "train: spec window sizes differ from the train view");
  const auto ends = view.window_ends();
  require(!ends.empty(), "train: no full (context, horizon) window in train range");

  ModelParams p;
  p.spec = spec;
  p.tree = panel.tree;
  p.n_vars = panel.n_vars();

  // Per (node, variable) statistics over the training range.
  const int N = panel.n_nodes(), V = panel.n_vars();
  p.mean = Eigen::MatrixXd::Zero(N, V);
  p.stdev = Eigen::MatrixXd::Ones(N, V);
  for (int n = 0; n < N; ++n)
    for (int v = 0; v < V; ++v) {
      double s = 0.0, s2 = 0.0;
      int cnt = 0;
      for (int t = 0; t < view.split_index; ++t)
        if (panel.present(n, v, t)) {
          s += panel.data.at(n, v, t);
          s2 += panel.data.at(n, v, t) * panel.data.at(n, v, t);
          ++cnt;
        }
      if (cnt > 0) {
        p.mean(n, v) = s / cnt;
        const double var = std::max(0.0, s2 / cnt - p.mean(n, v) * p.mean(n, v));
        p.stdev(n, v) = std::max(std::sqrt(var), detail::kStdFloor);
      }
    }

  // Assemble the pooled leaf design matrix.
  const auto leaves = p.tree.leaves();
  const int D = p.input_dim(), h = spec.horizon;
  const long B = static_cast<long>(leaves.size()) * static_cast<long>(ends.size());
  Eigen::MatrixXd X(B, D), Y(B, h);
  long row = 0;
  for (NodeId leaf : leaves) {
    for (int t_end : ends) {
      const Grid3 z = detail::standardize(p, panel.context_ending_at(t_end, spec.context_length));
      X.row(row) = detail::gather_input(p, z, leaf);
      for (int k = 0; k < h; ++k) {
        const int t = t_end + k;
        Y(row, k) = panel.present(leaf, 0, t)
                        ? (panel.data.at(leaf, 0, t) - p.mean(leaf, 0)) / p.stdev(leaf, 0)
                        : 0.0;
      }
      ++row;
    }
  }

  // Seeded initialization. The linear model starts at zero; the mlp uses
  // scaled uniform weights.
  const int out_dim = spec.head_dim();
  Rng rng(derive_seed(spec.seed, "init"));
  if (spec.kind == ModelKind::linear_ar) {
    p.W1.resize(0, 0);
    p.b1.resize(0);
    p.Wo = Eigen::MatrixXd::Zero(out_dim, D);
    p.bo = Eigen::RowVectorXd::Zero(out_dim);
  } else {
    const int H = spec.hidden_width;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double a1 = 1.0 / std::sqrt(static_cast<double>(D));
    const double a2 = 1.0 / std::sqrt(static_cast<double>(H));
    p.W1 = Eigen::MatrixXd::NullaryExpr(H, D, [&]() { return a1 * u(rng); });
    p.b1 = Eigen::RowVectorXd::Zero(H);
    p.Wo = Eigen::MatrixXd::NullaryExpr(out_dim, H, [&]() { return a2 * u(rng); });
    p.bo = Eigen::RowVectorXd::Zero(out_dim);
  }
  if (spec.head == HeadKind::gaussian) {
    // Start sigma near 1 (softplus(0.54) ~ 1).
    for (int t = 0; t < h; ++t) p.bo[h + t] = 0.5413;
  }

  auto loss_of = [&](const ad::Var& head, const ad::Var& y) -> ad::Var {
    // head: batch x out_dim, y: batch x h, both standardized.
    switch (spec.head) {
      case HeadKind::point: {
        if (loss_kind == TrainLoss::l1) {
          // Absolute error, scaled by 1/2 so it shares the conservative step
          // rule (and hence the trajectory) with the level-0.5 pinball loss.
          ad::Var d = ad::sub(head, y);
          return ad::scale(
              ad::mean(ad::add(ad::relu(d), ad::relu(ad::scale(d, -1.0)))), 0.5);
        }
        return ad::mean(ad::square(ad::sub(head, y)));
      }
      case HeadKind::gaussian: {
        // Negative log-likelihood up to the constant term. Slices of the
        // head go through the tape as selection-matrix products.
        Eigen::MatrixXd selL = Eigen::MatrixXd::Zero(2 * h, h);
        Eigen::MatrixXd selR = Eigen::MatrixXd::Zero(2 * h, h);
        for (int t = 0; t < h; ++t) {
          selL(t, t) = 1.0;
          selR(h + t, t) = 1.0;
        }
        ad::Var mu_v = ad::matmul(head, ad::Var(selL));
        ad::Var sig = ad::softplus(ad::matmul(head, ad::Var(selR)));
        ad::Var res = ad::sub(y, mu_v);
        ad::Var quad = ad::div(ad::square(res), ad::scale(ad::square(sig), 2.0));
        return ad::mean(ad::add(ad::log(sig), quad));
      }
      case HeadKind::quantile: {
        const int Q = spec.n_levels();
        ad::Var acc = ad::Var::constant(0.0);
        for (int q = 0; q < Q; ++q) {
          Eigen::MatrixXd sel = Eigen::MatrixXd::Zero(out_dim, h);
          for (int t = 0; t < h; ++t) sel(q * h + t, t) = 1.0;
          ad::Var pred = ad::matmul(head, ad::Var(sel));
          ad::Var d = ad::sub(y, pred);
          const double lv = spec.quantile_levels[q];
          ad::Var pin = ad::add(ad::scale(ad::relu(d), lv),
                                ad::scale(ad::relu(ad::scale(d, -1.0)), 1.0 - lv));
          acc = ad::add(acc, ad::mean(pin));
        }
        return ad::scale(acc, 1.0 / Q);
      }
    }
    return ad::Var::constant(0.0);
  };

  auto forward_loss = [&](const Eigen::MatrixXd& Xb, const Eigen::MatrixXd& Yb,
                          std::vector<ad::Var>& params_out) -> ad::Var {
    ad::Var x(Xb), y(Yb);
    ad::Var head;
    if (spec.kind == ModelKind::linear_ar) {
      ad::Var Wo(Eigen::MatrixXd(p.Wo.transpose())), bo(Eigen::MatrixXd(p.bo));
      head = ad::add_rowvec(ad::matmul(x, Wo), bo);
      params_out = {Wo, bo};
    } else {
      ad::Var W1(Eigen::MatrixXd(p.W1.transpose())), b1(Eigen::MatrixXd(p.b1));
      ad::Var Wo(Eigen::MatrixXd(p.Wo.transpose())), bo(Eigen::MatrixXd(p.bo));
      ad::Var hid = ad::tanh(ad::add_rowvec(ad::matmul(x, W1), b1));
      head = ad::add_rowvec(ad::matmul(hid, Wo), bo);
      params_out = {W1, b1, Wo, bo};
    }
    return loss_of(head, y);
  };

  auto apply_step = [&](const std::vector<ad::Var>& vars, double lr) {
    if (spec.kind == ModelKind::linear_ar) {
      p.Wo -= lr * vars[0].grad().transpose();
      p.bo -= lr * vars[1].grad().row(0);
    } else {
      p.W1 -= lr * vars[0].grad().transpose();
      p.b1 -= lr * vars[1].grad().row(0);
      p.Wo -= lr * vars[2].grad().transpose();
      p.bo -= lr * vars[3].grad().row(0);
    }
  };

  // Step size: for the full-batch linear model estimate the MSE curvature
  // once by power iteration on (2/B) X^T X and stay safely below 2/L.
  double lr = spec.learning_rate;
  if (lr <= 0.0) {
    if (spec.kind == ModelKind::linear_ar) {
      Eigen::VectorXd v = Eigen::VectorXd::Ones(D).normalized();
      double lam = 1.0;
      for (int it = 0; it < 30; ++it) {
        Eigen::VectorXd w = X.transpose() * (X * v) * (2.0 / static_cast<double>(B));
        lam = w.norm();
        if (lam <= 0) break;
        v = w / lam;
      }
      lr = 0.9 / std::max(lam, 1e-12);
      if (spec.head != HeadKind::point || loss_kind != TrainLoss::spec_default)
        lr *= 0.5;  // non-MSE losses get a more conservative step
    } else {
      lr = 0.05;
    }
  }
  const int epochs = spec.max_epochs > 0 ? spec.max_epochs
                     : spec.kind == ModelKind::linear_ar ? 1000
                                                         : 300;

  Rng shuffle_rng(derive_seed(spec.seed, "shuffle"));
  std::vector<long> perm(B);
  std::iota(perm.begin(), perm.end(), 0);
  double prev = std::numeric_limits<double>::infinity();
  // The curvature-based step is only guaranteed for the quadratic loss; other
  // losses (gaussian NLL in particular) can overshoot. When an epoch's loss
  // blows up, undo the offending step, halve the rate, and retry.
  Eigen::VectorXd good = p.flat();
  int backoffs = 0;
  auto exploded = [&](double epoch_loss) {
    return !std::isfinite(epoch_loss) ||
           (std::isfinite(prev) &&
            epoch_loss > prev + 0.5 * std::abs(prev) + 1e-6);
  };
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double epoch_loss = 0.0;
    if (spec.kind == ModelKind::linear_ar) {
      std::vector<ad::Var> vars;
      ad::Var loss = forward_loss(X, Y, vars);
      epoch_loss = loss.value()(0, 0);
      if (exploded(epoch_loss)) {
        p.unflatten(good);  // params from before the last step
        lr *= 0.5;
        if (++backoffs > 60)
          throw Error("train: loss diverged despite step-size backoff");
        --epoch;
        continue;
      }
      loss.backward();
      good = p.flat();
      apply_step(vars, lr);
    } else {
      good = p.flat();
      const Rng shuffle_snapshot = shuffle_rng;
      std::shuffle(perm.begin(), perm.end(), shuffle_rng);
      const int bs = std::max(1, spec.batch_size);
      double total = 0.0;
      long count = 0;
      for (long start = 0; start < B; start += bs) {
        const long nb = std::min<long>(bs, B - start);
        Eigen::MatrixXd Xb(nb, D), Yb(nb, h);
        for (long r = 0; r < nb; ++r) {
          Xb.row(r) = X.row(perm[start + r]);
          Yb.row(r) = Y.row(perm[start + r]);
        }
        std::vector<ad::Var> vars;
        ad::Var loss = forward_loss(Xb, Yb, vars);
        loss.backward();
        total += loss.value()(0, 0) * nb;
        count += nb;
        apply_step(vars, lr);
      }
      epoch_loss = total / count;
      if (exploded(epoch_loss)) {
        p.unflatten(good);  // params from the start of this epoch
        shuffle_rng = shuffle_snapshot;
        lr *= 0.5;
        if (++backoffs > 60)
          throw Error("train: loss diverged despite step-size backoff");
        --epoch;
        continue;
      }
    }
    if (epoch == 0) p.first_epoch_loss = epoch_loss;
    p.final_epoch_loss = epoch_loss;
    p.epochs_run = epoch + 1;
    if (spec.kind == ModelKind::linear_ar && std::isfinite(prev) &&
        std::abs(prev - epoch_loss) <= 1e-12 * std::max(1.0, std::abs(prev)))
      break;
    prev = epoch_loss;
  }
  require(p.finite(), "train: non-finite parameters after training");
  return p;
}

// ---------------------------------------------------------------------------
// Predictive sampling (common random numbers)
// ---------------------------------------------------------------------------

/// Draws from the predictive distribution, shape (node, step, sample).
/// The noise stream depends only on (seed, node, step, sample), never on the
/// context, so the same seed reuses identical noise across perturbed inputs.
inline std::vector<Eigen::MatrixXd> sample_predictive(const ModelParams& p,
                                                      const Grid3& raw_context,
                                                      int n_samples,
                                                      std::uint64_t seed) {
  require(p.spec.head != HeadKind::point, "sample_predictive: model is not probabilistic");
  require(n_samples >= 0, "sample_predictive: negative sample count");
  const ForecastOutput fc = forecast(p, raw_context);
  const int N = p.tree.size(), h = p.spec.horizon;
  std::vector<Eigen::MatrixXd> draws(n_samples, Eigen::MatrixXd::Zero(N, h));
  for (int n = 0; n < N; ++n)
    for (int t = 0; t < h; ++t) {
      Rng rng(derive_seed(seed, "predictive", static_cast<std::uint64_t>(n),
                          static_cast<std::uint64_t>(t)));
      if (p.spec.head == HeadKind::gaussian) {
        std::normal_distribution<double> nd(0.0, 1.0);
        for (int k = 0; k < n_samples; ++k)
          draws[k](n, t) = fc.mu(n, t) + fc.sigma(n, t) * nd(rng);
      } else {
        // Invert the predicted quantile curve at seeded uniforms, linear
        // between configured levels and flat beyond them.
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        const int Q = p.spec.n_levels();
        for (int k = 0; k < n_samples; ++k) {
          const double u = ud(rng);
          const auto& lv = p.spec.quantile_levels;
          double val;
          if (u <= lv.front())
            val = fc.quantiles.front()(n, t);
          else if (u >= lv.back())
            val = fc.quantiles.back()(n, t);
          else {
            int q = 0;
            while (q + 1 < Q && lv[q + 1] < u) ++q;
            const double w = (u - lv[q]) / (lv[q + 1] - lv[q]);
            val = (1 - w) * fc.quantiles[q](n, t) + w * fc.quantiles[q + 1](n, t);
          }
          draws[k](n, t) = val;
        }
      }
    }
  return draws;
}

// ---------------------------------------------------------------------------
// Checkpoint: JSON header + little-endian float64 parameter block.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  nlohmann::json header = {
      {"format", "hiex-checkpoint-v1"},
      {"spec", spec_to_json(p.spec)},
      {"hierarchy", p.tree.to_json()},
      {"n_vars", p.n_vars},
      {"training", {{"first_epoch_loss", p.first_epoch_loss},
                    {"final_epoch_loss", p.final_epoch_loss},
                    {"epochs_run", p.epochs_run}}}};
  std::vector<double> stats;
  for (int n = 0; n < p.mean.rows(); ++n)
    for (int v = 0; v < p.mean.cols(); ++v) {
      stats.push_back(p.mean(n, v));
      stats.push_back(p.stdev(n, v));
    }
  header["stats"] = stats;
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write checkpoint: " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
  char lenb[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                  static_cast<char>((len >> 16) & 0xff),
                  static_cast<char>((len >> 24) & 0xff)};
  out.write(lenb, 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  const Eigen::VectorXd theta = p.flat();
  out.write(reinterpret_cast<const char*>(theta.data()),
            static_cast<std::streamsize>(theta.size() * sizeof(double)));
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint: " + path);
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  require(in.gcount() == 4, "checkpoint: truncated header length");
  const std::uint32_t len = lenb[0] | (lenb[1] << 8) | (lenb[2] << 16) |
                            (static_cast<std::uint32_t>(lenb[3]) << 24);
  std::string hs(len, '\0');
  in.read(hs.data(), len);
  require(in.gcount() == static_cast<std::streamsize>(len), "checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(hs);
  require(header.value("format", "") == "hiex-checkpoint-v1",
          "checkpoint: unknown format");
  ModelParams p{spec_from_json(header.at("spec")),
                HierarchyTree::from_json(header.at("hierarchy"))};
  p.n_vars = header.at("n_vars").get<int>();
  const int N = p.tree.size(), V = p.n_vars;
  p.mean = Eigen::MatrixXd::Zero(N, V);
  p.stdev = Eigen::MatrixXd::Ones(N, V);
  const auto stats = header.at("stats").get<std::vector<double>>();
  require(static_cast<int>(stats.size()) == 2 * N * V, "checkpoint: bad stats block");
  for (int n = 0; n < N; ++n)
    for (int v = 0; v < V; ++v) {
      p.mean(n, v) = stats[2 * (n * V + v)];
      p.stdev(n, v) = stats[2 * (n * V + v) + 1];
    }
  p.first_epoch_loss = header["training"].value("first_epoch_loss", 0.0);
  p.final_epoch_loss = header["training"].value("final_epoch_loss", 0.0);
  p.epochs_run = header["training"].value("epochs_run", 0);

  const int D = p.input_dim(), out_dim = p.spec.head_dim();
  if (p.spec.kind == ModelKind::linear_ar) {
    p.W1.resize(0, 0);
    p.b1.resize(0);
    p.Wo.resize(out_dim, D);
    p.bo.resize(out_dim);
  } else {
    p.W1.resize(p.spec.hidden_width, D);
    p.b1.resize(p.spec.hidden_width);
    p.Wo.resize(out_dim, p.spec.hidden_width);
    p.bo.resize(out_dim);
  }
  const long count = p.W1.size() + p.b1.size() + p.Wo.size() + p.bo.size();
  Eigen::VectorXd theta(count);
  in.read(reinterpret_cast<char*>(theta.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  require(in.gcount() == static_cast<std::streamsize>(count * sizeof(double)),
          "checkpoint: truncated parameter block");
  p.unflatten(theta);
  require(p.finite(), "checkpoint: non-finite parameters");
  return p;
}

}  // namespace hiex
