#include "doctest.h"
#include "hiex/prob_explain.hpp"

using namespace hiex;

namespace {

/// Linear point model whose leaf forecast is the leaf's own last context
/// value; internal outputs then reconcile to phi-weighted sums.
ModelParams own_last_model(const HierarchyTree& tree, int L = 2) {
  ModelParams p;
  p.spec.kind = ModelKind::linear_ar;
  p.spec.context_length = L;
  p.spec.horizon = 1;
  p.tree = tree;
  p.n_vars = 1;
  p.mean = Eigen::MatrixXd::Zero(tree.size(), 1);
  p.stdev = Eigen::MatrixXd::Ones(tree.size(), 1);
  p.W1.resize(0, 0);
  p.b1.resize(0);
  p.Wo = Eigen::MatrixXd::Zero(1, p.input_dim());
  p.Wo(0, L - 1) = 1.0;  // own series slot, last step
  p.bo = Eigen::RowVectorXd::Zero(1);
  return p;
}

ModelParams gaussian_model(const HierarchyTree& tree, int L, std::uint64_t seed,
                           bool constant_sigma) {
  ModelParams p;
  p.spec.kind = ModelKind::linear_ar;
  p.spec.context_length = L;
  p.spec.horizon = 2;
  p.spec.head = HeadKind::gaussian;
  p.tree = tree;
  p.n_vars = 1;
  p.mean = Eigen::MatrixXd::Zero(tree.size(), 1);
  p.stdev = Eigen::MatrixXd::Ones(tree.size(), 1);
  Rng rng(seed);
  std::normal_distribution<double> nd;
  p.W1.resize(0, 0);
  p.b1.resize(0);
  p.Wo = Eigen::MatrixXd::NullaryExpr(p.spec.head_dim(), p.input_dim(),
                                      [&]() { return 0.5 * nd(rng); });
  p.bo = Eigen::RowVectorXd::NullaryExpr(p.spec.head_dim(), [&]() { return nd(rng); });
  if (constant_sigma)
    p.Wo.bottomRows(p.spec.horizon).setZero();  // sigma rows; bias only
  p.bo.tail(p.spec.horizon).array() = 0.4;      // softplus(0.4) > 0
  return p;
}

Grid3 random_context(int n, int v, int l, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  Grid3 g(n, v, l);
  for (auto& x : g.v) x = nd(rng);
  return g;
}

HierarchyTree random_tree(Rng& rng, int max_nodes, int max_levels) {
  std::uniform_int_distribution<int> nn(2, max_nodes);
  const int n = nn(rng);
  std::vector<int> level(n, 0);
  std::vector<Edge> edges;
  std::uniform_real_distribution<double> phi(-1.5, 1.5);
  for (int i = 1; i < n; ++i) {
    std::uniform_int_distribution<int> pp(0, i - 1);
    int par = pp(rng);
    while (level[par] >= max_levels - 1) par = pp(rng);
    level[i] = level[par] + 1;
    double w = phi(rng);
    if (std::abs(w) < 0.1) w = 0.1;
    edges.push_back({par, i, w});
  }
  return HierarchyTree(n, std::move(edges));
}

}  // namespace

TEST_CASE("propagation: single node and a two-edge chain") {
  const HierarchyTree single(1, {});
  const HierImportanceMap m0 = subtree_scores_with_oracle(
      single, 0, [](NodeId, NodeId) { return EdgeResult{0.0, std::nullopt}; });
  CHECK(m0.node_scalar.size() == 1);
  CHECK(m0.node_scalar.at(0) == 1.0);
  CHECK(m0.edge_evaluations == 0);

  const HierarchyTree chain(3, {{0, 1, 1.0}, {1, 2, 1.0}});
  const HierImportanceMap m = subtree_scores_with_oracle(
      chain, 0, [](NodeId out, NodeId in) -> EdgeResult {
        if (out == in) return {0.0, std::nullopt};
        return {out == 0 && in == 1 ? 0.5 : 0.4, std::nullopt};
      });
  CHECK(m.node_scalar.at(0) == 1.0);
  CHECK(m.node_scalar.at(1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(m.node_scalar.at(2) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(m.edge_evaluations == 2);
}

TEST_CASE("propagation: path-product identity on random trees") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const HierarchyTree tree = random_tree(rng, 200, 6);
    std::uniform_int_distribution<int> tn(0, tree.size() - 1);
    const NodeId target = tn(rng);
    // deterministic stub scalar per ordered (output, input) pair
    auto edge_scalar = [](NodeId out, NodeId in) {
      const std::uint64_t h = derive_seed(7, "edge", out, in);
      return 0.5 + static_cast<double>(h % 1000) / 1000.0;  // in [0.5, 1.5)
    };
    std::set<std::pair<NodeId, NodeId>> asked;
    const HierImportanceMap m = subtree_scores_with_oracle(
        tree, target, [&](NodeId out, NodeId in) -> EdgeResult {
          if (out != in) {
            CHECK(tree.adjacent(out, in));
            CHECK(!asked.count({out, in}));
            CHECK(!asked.count({in, out}));
            asked.insert({out, in});
          }
          Eigen::MatrixXd mat(1, 2);
          mat << edge_scalar(out, in), -edge_scalar(out, in);
          return {edge_scalar(out, in), mat};
        });
    CHECK(m.edge_evaluations == tree.size() - 1);
    CHECK(static_cast<int>(asked.size()) == tree.size() - 1);
    for (NodeId n = 0; n < tree.size(); ++n) {
      const std::vector<NodeId> path = tree.path(target, n);
      double expect = 1.0;
      for (size_t k = 0; k + 1 < path.size(); ++k)
        expect *= edge_scalar(path[k], path[k + 1]);
      CHECK(std::abs(m.node_scalar.at(n) - expect) <= 1e-12 * std::abs(expect));
      // per-cell matrix carries the accumulated upstream factor
      if (n != target) {
        const double up = expect / edge_scalar(path[path.size() - 2], path.back());
        CHECK(m.node_matrix.at(n)(0, 0) ==
              doctest::Approx(up * edge_scalar(path[path.size() - 2], path.back()))
                  .epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("adjacent importance: adjacency check, restriction, analytic scalar") {
  const HierarchyTree tree(3, {{0, 1, 1.0}, {0, 2, 2.0}});
  const ModelParams p = own_last_model(tree);
  Grid3 z = random_context(3, 1, 2, 32);
  z.at(1, 0, 1) = 1.0;
  const Grid3 base(3, 1, 2, 0.0);
  const ScalarFnFactory factory =
      forecast_factory(p, OutputSelector{0, 0, HeadComp::value, 0});
  HierConfig cfg;

  CHECK_THROWS_WITH_AS(
      adjacent_importance(tree, z, base, factory, 1, 2, Method::fo, cfg),
      doctest::Contains("not adjacent"), Error);

  const EdgeImportance e =
      adjacent_importance(tree, z, base, factory, 0, 1, Method::fo, cfg);
  CHECK(e.matrix.rows() == 1);
  CHECK(e.matrix.cols() == 2);
  CHECK(e.matrix(0, 0) == 0.0);
  CHECK(e.matrix(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(e.scalar == doctest::Approx(1.0).epsilon(1e-12));

  // occlusion is per-cell, so the restricted matrix equals the node slice of
  // a full-domain attribution
  std::unique_ptr<ScalarFn> fn = factory(0);
  const ImportanceTensor full = attribute(Method::fo, *fn, z, CellDomain::all(z),
                                          base, cfg.attr, OutputSelector{});
  CHECK(e.matrix(0, 1) == doctest::Approx(full.scores.at(1, 0, 1)).epsilon(1e-12));

  // summary flags
  HierConfig mean_cfg;
  mean_cfg.mean_abs_summary = true;
  CHECK(adjacent_importance(tree, z, base, factory, 0, 1, Method::fo, mean_cfg).scalar ==
        doctest::Approx(0.5).epsilon(1e-12));
  z.at(1, 0, 1) = -1.0;
  CHECK(adjacent_importance(tree, z, base, factory, 0, 1, Method::fo, cfg).scalar ==
        doctest::Approx(-1.0).epsilon(1e-12));
  HierConfig mag_cfg;
  mag_cfg.magnitude_only = true;
  CHECK(adjacent_importance(tree, z, base, factory, 0, 1, Method::fo, mag_cfg).scalar ==
        doctest::Approx(1.0).epsilon(1e-12));
  z.at(1, 0, 0) = 0.25;  // second nonzero cell to exercise normalization
  HierConfig norm_cfg;
  norm_cfg.normalize_edges = true;
  const EdgeImportance en =
      adjacent_importance(tree, z, base, factory, 0, 1, Method::fo, norm_cfg);
  CHECK(en.matrix.cwiseAbs().maxCoeff() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("subtree explanation agrees with the flat one where it is exact") {
  const HierarchyTree tree(3, {{0, 1, 1.0}, {0, 2, 2.0}});
  const ModelParams p = own_last_model(tree);
  const Grid3 ctx = random_context(3, 1, 2, 33);
  const OutputSelector tgt{0, 0, HeadComp::value, 0};
  HierConfig cfg;
  const HierImportanceMap sub = explain_forecast(p, ctx, tgt, Method::fo, cfg, true);
  const HierImportanceMap flat = explain_forecast(p, ctx, tgt, Method::fo, cfg, false);
  CHECK(sub.mode == "subtree");
  CHECK(flat.mode == "flat");
  CHECK(sub.edge_evaluations == 2);
  // depth-1 children: the adjacent importance IS the flat restriction
  for (NodeId c : {1, 2}) {
    CHECK(sub.node_scalar.at(c) == doctest::Approx(flat.node_scalar.at(c)).epsilon(1e-12));
    CHECK((sub.node_matrix.at(c) - flat.node_matrix.at(c)).cwiseAbs().maxCoeff() < 1e-12);
  }
  // target's own matrix matches too (self edge == restricted flat slice)
  CHECK((sub.node_matrix.at(0) - flat.node_matrix.at(0)).cwiseAbs().maxCoeff() < 1e-12);

  const Grid3 tensor = sub.to_tensor(3);
  CHECK(tensor.nodes == 3);
  CHECK(tensor.at(1, 0, 1) == doctest::Approx(sub.node_matrix.at(1)(0, 1)));
  const nlohmann::json j = sub.to_json();
  CHECK(j.at("mode") == "subtree");
  CHECK(j.at("scores").size() == 3);
}

TEST_CASE("subtree scores on a chain equal the product of its real edges") {
  const HierarchyTree chain(3, {{0, 1, 1.5}, {1, 2, 0.8}});
  const ModelParams p = own_last_model(chain, 3);
  const Grid3 ctx = random_context(3, 1, 3, 34);
  const OutputSelector tgt{0, 0, HeadComp::value, 0};
  HierConfig cfg;
  const Grid3 z = detail::standardize(p, ctx);
  const Grid3 b = detail::baseline_grid(p, z, cfg.attr.baseline);
  const ScalarFnFactory factory = forecast_factory(p, tgt);
  const double e01 =
      adjacent_importance(chain, z, b, factory, 0, 1, Method::fo, cfg).scalar;
  const double e12 =
      adjacent_importance(chain, z, b, factory, 1, 2, Method::fo, cfg).scalar;
  const HierImportanceMap sub = explain_forecast(p, ctx, tgt, Method::fo, cfg, true);
  CHECK(sub.node_scalar.at(1) == doctest::Approx(e01).epsilon(1e-12));
  CHECK(sub.node_scalar.at(2) == doctest::Approx(e01 * e12).epsilon(1e-12));
}

TEST_CASE("gaussian quantile surrogate: analytic value and gradient support") {
  const HierarchyTree tree(3, {{0, 1, 1.0}, {0, 2, 1.0}});
  const ModelParams p = gaussian_model(tree, 3, 35, false);
  const Grid3 z = random_context(3, 1, 3, 36);
  for (double level : {0.75, 0.90, 0.95}) {
    QuantileTarget qt;
    qt.node = 0;
    qt.step = 1;
    qt.level = level;
    std::unique_ptr<ScalarFn> fn = make_quantile_fn(p, qt);
    CHECK(fn->has_gradient());
    const double mu = eval_scalar_std(p, z, {0, 1, HeadComp::value, 0});
    const double sg = eval_scalar_std(p, z, {0, 1, HeadComp::sigma, 0});
    CHECK(fn->eval(z) ==
          doctest::Approx(mu + inverse_normal_cdf(level) * sg).epsilon(1e-12));
  }
}

TEST_CASE("constant sigma: quantile explanation equals the mean explanation") {
  const HierarchyTree tree(3, {{0, 1, 1.0}, {0, 2, 1.0}});
  const ModelParams p = gaussian_model(tree, 3, 37, true);
  const Grid3 ctx = random_context(3, 1, 3, 38);
  HierConfig cfg;
  QuantileTarget qt;
  qt.node = 0;
  qt.step = 0;
  qt.level = 0.95;
  for (Method method : {Method::fo, Method::ig}) {
    const HierImportanceMap q = explain_quantile(p, ctx, qt, method, cfg, true);
    const HierImportanceMap m =
        explain_forecast(p, ctx, {0, 0, HeadComp::value, 0}, method, cfg, true);
    REQUIRE(q.quantile_level.has_value());
    CHECK(*q.quantile_level == 0.95);
    for (NodeId n = 0; n < 3; ++n) {
      CHECK(q.node_scalar.at(n) == doctest::Approx(m.node_scalar.at(n)).epsilon(1e-10));
      CHECK((q.node_matrix.at(n) - m.node_matrix.at(n)).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("input-dependent sigma moves the quantile explanation where it should") {
  const HierarchyTree single(1, {});
  ModelParams p = gaussian_model(single, 4, 39, true);
  p.Wo(p.spec.horizon + 0, 2) = 0.8;  // sigma(step 0) now reads cell t=2 only
  const Grid3 ctx = random_context(1, 1, 4, 40);
  HierConfig cfg;
  QuantileTarget qt;
  qt.node = 0;
  qt.step = 0;
  qt.level = 0.95;
  const HierImportanceMap q = explain_quantile(p, ctx, qt, Method::fo, cfg, true);
  const HierImportanceMap m =
      explain_forecast(p, ctx, {0, 0, HeadComp::value, 0}, Method::fo, cfg, true);
  const Eigen::MatrixXd delta = q.node_matrix.at(0) - m.node_matrix.at(0);
  for (int t = 0; t < 4; ++t) {
    if (t == 2)
      CHECK(std::abs(delta(0, t)) > 1e-6);
    else
      CHECK(std::abs(delta(0, t)) < 1e-12);
  }
}

TEST_CASE("empirical quantile matches the analytic gaussian one") {
  const HierarchyTree single(1, {});
  const ModelParams p = gaussian_model(single, 3, 41, false);
  const Grid3 z = random_context(1, 1, 3, 42);
  const double sg = eval_scalar_std(p, z, {0, 0, HeadComp::sigma, 0});
  for (double level : {0.75, 0.90, 0.95}) {
    QuantileTarget qt;
    qt.node = 0;
    qt.step = 0;
    qt.level = level;
    qt.n_samples = 10000;
    qt.force_empirical = true;
    EmpiricalQuantileFn emp(p, qt);
    GaussianQuantileFn ana(p, 0, 0, level);
    CHECK(std::abs(emp.eval(z) - ana.eval(z)) <= 0.05 * sg);
    EmpiricalQuantileFn emp2(p, qt);
    CHECK(emp.eval(z) == emp2.eval(z));  // deterministic CRN stream
  }
  // monotone in the level
  auto at_level = [&](double lv) {
    QuantileTarget qt;
    qt.level = lv;
    qt.n_samples = 2000;
    qt.force_empirical = true;
    return EmpiricalQuantileFn(p, qt).eval(z);
  };
  CHECK(at_level(0.6) < at_level(0.9));
  CHECK(at_level(0.9) < at_level(0.95));
}

TEST_CASE("quantile-head surrogates: exact level is direct, otherwise empirical") {
  const HierarchyTree single(1, {});
  ModelParams p = own_last_model(single, 3);
  p.spec.head = HeadKind::quantile;
  p.spec.quantile_levels = {0.1, 0.5, 0.9};
  p.Wo = Eigen::MatrixXd::Zero(p.spec.head_dim(), p.input_dim());
  p.bo = Eigen::RowVectorXd::Zero(p.spec.head_dim());
  p.bo << -1.0, 0.0, 1.0;  // fixed quantile curve per step (horizon 1)
  QuantileTarget qt;
  qt.level = 0.9;
  CHECK(make_quantile_fn(p, qt)->has_gradient());  // configured level: head output
  qt.level = 0.7;
  std::unique_ptr<ScalarFn> emp = make_quantile_fn(p, qt);
  CHECK(!emp->has_gradient());
  const Grid3 z(1, 1, 3, 0.0);
  // the inverted curve interpolates between the 0.5 and 0.9 head outputs
  CHECK(emp->eval(z) > 0.0);
  CHECK(emp->eval(z) < 1.0);
}

TEST_CASE("gradient methods on empirical quantiles fall back or throw") {
  const HierarchyTree single(1, {});
  const ModelParams p = gaussian_model(single, 3, 43, false);
  const Grid3 ctx = random_context(1, 1, 3, 44);
  HierConfig cfg;
  QuantileTarget qt;
  qt.level = 0.8;
  qt.force_empirical = true;
  CHECK_THROWS_WITH_AS(explain_quantile(p, ctx, qt, Method::ig, cfg, true, false),
                       doctest::Contains("needs gradients"), Error);
  const HierImportanceMap m = explain_quantile(p, ctx, qt, Method::ig, cfg, true, true);
  CHECK(m.method == "fo");  // fell back to occlusion
  CHECK(m.node_scalar.size() == 1);
}
