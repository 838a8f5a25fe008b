#pragma once

#include <filesystem>

#include "hiex/panel.hpp"

namespace hiex {

// ---------------------------------------------------------------------------
// Semi-synthetic benchmark: planted anomaly windows with known hierarchical
// placements, so explanations can be scored against ground truth. Three
// anomaly families: a one-round (or few-round) sine window, a high-frequency
// sine with a drifting mean, and a reduced-variance Gaussian window.
// ---------------------------------------------------------------------------

struct AnomalySpec {
  enum class Kind { freq_shapes, seq_comb, low_var };
  Kind kind = Kind::freq_shapes;
  int length = 8;
  double amplitude = 2.0;
  double frequency = 1.0;   // cycles over the window (sine families)
  int slope_sign = +1;      // seq_comb ramp direction
  double var_ratio = 0.1;   // low_var: sd ratio vs the background
  double base_sigma = 1.0;  // low_var: background sd the ratio applies to

  void validate() const {
    require(length >= 4, "anomaly: length >= 4");
    require(amplitude > 0.0, "anomaly: amplitude > 0");
    require(var_ratio > 0.0 && var_ratio < 1.0, "anomaly: var_ratio in (0,1)");
    require(slope_sign == 1 || slope_sign == -1, "anomaly: slope_sign is +-1");
    require(frequency > 0.0, "anomaly: frequency > 0");
  }
};

inline std::string anomaly_kind_name(AnomalySpec::Kind k) {
  switch (k) {
    case AnomalySpec::Kind::freq_shapes: return "freq_shapes";
    case AnomalySpec::Kind::seq_comb: return "seq_comb";
    case AnomalySpec::Kind::low_var: return "low_var";
  }
  return "?";
}

inline AnomalySpec::Kind anomaly_kind_from_name(const std::string& s) {
  if (s == "freq_shapes") return AnomalySpec::Kind::freq_shapes;
  if (s == "seq_comb") return AnomalySpec::Kind::seq_comb;
  if (s == "low_var") return AnomalySpec::Kind::low_var;
  throw ConfigError("unknown anomaly kind: " + s);
}

/// One anomaly window. Sine families are deterministic; low_var is a seeded
/// Gaussian draw.
inline std::vector<double> gen_anomaly(const AnomalySpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<double> out(spec.length);
  const double L = spec.length;
  switch (spec.kind) {
    case AnomalySpec::Kind::freq_shapes:
      for (int k = 0; k < spec.length; ++k)
        out[k] = spec.amplitude * std::sin(2.0 * M_PI * spec.frequency * k / L);
      break;
    case AnomalySpec::Kind::seq_comb:
      // High-frequency sine plus a ramp reaching +-amplitude over the window.
      for (int k = 0; k < spec.length; ++k)
        out[k] = spec.amplitude * std::sin(2.0 * M_PI * spec.frequency * k / L) +
                 spec.slope_sign * spec.amplitude * k / (L - 1.0);
      break;
    case AnomalySpec::Kind::low_var: {
      Rng rng(derive_seed(seed, "low_var"));
      std::normal_distribution<double> nd(0.0, spec.var_ratio * spec.base_sigma);
      for (int k = 0; k < spec.length; ++k) out[k] = nd(rng);
      break;
    }
  }
  return out;
}

struct PlacementSpec {
  enum class Mode { same_series, cross_series, cross_level, external_variable };
  Mode mode = Mode::same_series;
  std::vector<NodeId> nodes;
  int variable = 0;   // > 0 for external_variable mode
  int t_start = -1;   // -1 = draw uniformly in the usable range
  std::uint64_t seed = 0;
};

inline std::string placement_mode_name(PlacementSpec::Mode m) {
  switch (m) {
    case PlacementSpec::Mode::same_series: return "same_series";
    case PlacementSpec::Mode::cross_series: return "cross_series";
    case PlacementSpec::Mode::cross_level: return "cross_level";
    case PlacementSpec::Mode::external_variable: return "external_variable";
  }
  return "?";
}

inline PlacementSpec::Mode placement_mode_from_name(const std::string& s) {
  if (s == "same_series") return PlacementSpec::Mode::same_series;
  if (s == "cross_series") return PlacementSpec::Mode::cross_series;
  if (s == "cross_level") return PlacementSpec::Mode::cross_level;
  if (s == "external_variable") return PlacementSpec::Mode::external_variable;
  throw ConfigError("unknown placement mode: " + s);
}

inline void validate_placement(const PlacementSpec& p, const HierarchyTree& tree,
                               int n_vars) {
  require(!p.nodes.empty(), "placement: needs at least one node");
  for (NodeId n : p.nodes)
    require(n >= 0 && n < tree.size(), "placement: unknown node " + std::to_string(n));
  switch (p.mode) {
    case PlacementSpec::Mode::same_series:
      require(p.nodes.size() == 1, "same_series placement takes exactly one node");
      require(p.variable == 0, "same_series placement targets variable 0");
      break;
    case PlacementSpec::Mode::cross_series: {
      require(p.nodes.size() >= 2, "cross_series placement needs >= 2 nodes");
      auto par = tree.parent(p.nodes[0]);
      require(par.has_value(), "cross_series placement nodes need a parent");
      for (NodeId n : p.nodes)
        require(tree.parent(n) == par, "cross_series placement nodes must share a parent");
      require(p.variable == 0, "cross_series placement targets variable 0");
      break;
    }
    case PlacementSpec::Mode::cross_level:
      require(p.nodes.size() >= 2, "cross_level placement needs >= 2 nodes");
      require(p.variable == 0, "cross_level placement targets variable 0");
      break;
    case PlacementSpec::Mode::external_variable:
      require(p.variable > 0 && p.variable < n_vars,
              "external_variable placement needs an external variable index");
      break;
  }
}

/// Explained node whose forecast a placement is expected to influence.
inline NodeId placement_forecast_node(const PlacementSpec& p, const HierarchyTree& tree) {
  switch (p.mode) {
    case PlacementSpec::Mode::same_series:
      return tree.parent(p.nodes[0]).value_or(p.nodes[0]);
    case PlacementSpec::Mode::cross_series:
      return *tree.parent(p.nodes[0]);
    case PlacementSpec::Mode::cross_level:
      return tree.lca(std::set<NodeId>(p.nodes.begin(), p.nodes.end()));
    case PlacementSpec::Mode::external_variable:
      return p.nodes[0];
  }
  return p.nodes[0];
}

/// Half-open time range of ground-truth cells on one series.
struct CellRange {
  NodeId node = 0;
  int variable = 0;
  int t_begin = 0, t_end = 0;  // [t_begin, t_end)
};

struct PlacementRecord {
  PlacementSpec place;  // t_start resolved
  AnomalySpec anomaly;
  NodeId forecast_node = 0;
  std::vector<CellRange> cells;  // exactly the injected cells
  std::optional<int> external_variable;
  std::optional<NodeId> lca;
};

struct GroundTruthManifest {
  std::vector<PlacementRecord> placements;

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : placements) {
      nlohmann::json cells = nlohmann::json::array();
      for (const auto& c : r.cells)
        cells.push_back({{"node", c.node},
                         {"variable", c.variable},
                         {"t_begin", c.t_begin},
                         {"t_end", c.t_end}});
      nlohmann::json j = {
          {"mode", placement_mode_name(r.place.mode)},
          {"nodes", r.place.nodes},
          {"variable", r.place.variable},
          {"t_start", r.place.t_start},
          {"seed", r.place.seed},
          {"anomaly",
           {{"kind", anomaly_kind_name(r.anomaly.kind)},
            {"length", r.anomaly.length},
            {"amplitude", r.anomaly.amplitude},
            {"frequency", r.anomaly.frequency},
            {"slope_sign", r.anomaly.slope_sign},
            {"var_ratio", r.anomaly.var_ratio},
            {"base_sigma", r.anomaly.base_sigma}}},
          {"forecast_node", r.forecast_node},
          {"expected_important_cells", cells}};
      if (r.external_variable) j["expected_external_variable"] = *r.external_variable;
      if (r.lca) j["expected_lca"] = *r.lca;
      arr.push_back(j);
    }
    return {{"placements", arr}};
  }

  static GroundTruthManifest from_json(const nlohmann::json& j) {
    GroundTruthManifest m;
    for (const auto& pj : j.at("placements")) {
      PlacementRecord r;
      r.place.mode = placement_mode_from_name(pj.at("mode").get<std::string>());
      r.place.nodes = pj.at("nodes").get<std::vector<NodeId>>();
      r.place.variable = pj.at("variable").get<int>();
      r.place.t_start = pj.at("t_start").get<int>();
      r.place.seed = pj.at("seed").get<std::uint64_t>();
      const auto& aj = pj.at("anomaly");
      r.anomaly.kind = anomaly_kind_from_name(aj.at("kind").get<std::string>());
      r.anomaly.length = aj.at("length").get<int>();
      r.anomaly.amplitude = aj.at("amplitude").get<double>();
      r.anomaly.frequency = aj.at("frequency").get<double>();
      r.anomaly.slope_sign = aj.at("slope_sign").get<int>();
      r.anomaly.var_ratio = aj.at("var_ratio").get<double>();
      r.anomaly.base_sigma = aj.at("base_sigma").get<double>();
      r.forecast_node = pj.at("forecast_node").get<NodeId>();
      for (const auto& cj : pj.at("expected_important_cells"))
        r.cells.push_back({cj.at("node").get<NodeId>(), cj.at("variable").get<int>(),
                           cj.at("t_begin").get<int>(), cj.at("t_end").get<int>()});
      if (pj.contains("expected_external_variable"))
        r.external_variable = pj.at("expected_external_variable").get<int>();
      if (pj.contains("expected_lca")) r.lca = pj.at("expected_lca").get<NodeId>();
      m.placements.push_back(std::move(r));
    }
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), "cannot write manifest: " + path);
    out << to_json().dump(2) << "\n";
  }
  static GroundTruthManifest load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open manifest: " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }
};

struct BenchmarkConfig {
  int n_datasets = 1;
  // Pure-synthetic base shape; real panels go through inject_into_real.
  int levels = 3;
  int branching = 3;
  int T = 100;
  double noise_sigma = 1.0;
  int n_external = 0;  // external variables per node
  WindowTask window;
  std::vector<std::pair<PlacementSpec, AnomalySpec>> placements;
  double amplitude_scale_c = 2.0;  // real-panel injection only
  std::uint64_t seed = 0;

  void validate() const {
    require(n_datasets >= 1, "benchmark: n_datasets >= 1");
    require(levels >= 1 && branching >= 1, "benchmark: bad tree shape");
    require(T >= window.context_length + window.horizon, "benchmark: panel too short");
    require(noise_sigma > 0.0, "benchmark: noise_sigma > 0");
    require(n_external >= 0, "benchmark: n_external >= 0");
  }

  nlohmann::json to_json() const {
    nlohmann::json pl = nlohmann::json::array();
    for (const auto& [p, a] : placements)
      pl.push_back({{"mode", placement_mode_name(p.mode)},
                    {"nodes", p.nodes},
                    {"variable", p.variable},
                    {"t_start", p.t_start},
                    {"anomaly",
                     {{"kind", anomaly_kind_name(a.kind)},
                      {"length", a.length},
                      {"amplitude", a.amplitude},
                      {"frequency", a.frequency},
                      {"slope_sign", a.slope_sign},
                      {"var_ratio", a.var_ratio},
                      {"base_sigma", a.base_sigma}}}});
    return {{"n_datasets", n_datasets},
            {"levels", levels},
            {"branching", branching},
            {"T", T},
            {"noise_sigma", noise_sigma},
            {"n_external", n_external},
            {"context_length", window.context_length},
            {"horizon", window.horizon},
            {"split_fraction", window.split_fraction},
            {"amplitude_scale_c", amplitude_scale_c},
            {"seed", seed},
            {"placements", pl}};
  }

  static BenchmarkConfig from_json(const nlohmann::json& j) {
    BenchmarkConfig c;
    c.n_datasets = j.value("n_datasets", 1);
    c.levels = j.value("levels", 3);
    c.branching = j.value("branching", 3);
    c.T = j.value("T", 100);
    c.noise_sigma = j.value("noise_sigma", 1.0);
    c.n_external = j.value("n_external", 0);
    c.window.context_length = j.value("context_length", 12);
    c.window.horizon = j.value("horizon", 12);
    c.window.split_fraction = j.value("split_fraction", 0.6);
    c.amplitude_scale_c = j.value("amplitude_scale_c", 2.0);
    c.seed = j.value("seed", std::uint64_t{0});
    for (const auto& pj : j.value("placements", nlohmann::json::array())) {
      PlacementSpec p;
      p.mode = placement_mode_from_name(pj.at("mode").get<std::string>());
      p.nodes = pj.at("nodes").get<std::vector<NodeId>>();
      p.variable = pj.value("variable", 0);
      p.t_start = pj.value("t_start", -1);
      AnomalySpec a;
      if (pj.contains("anomaly")) {
        const auto& aj = pj.at("anomaly");
        a.kind = anomaly_kind_from_name(aj.value("kind", "freq_shapes"));
        a.length = aj.value("length", 8);
        a.amplitude = aj.value("amplitude", 2.0);
        a.frequency = aj.value("frequency",
                               a.kind == AnomalySpec::Kind::seq_comb ? 4.0 : 1.0);
        a.slope_sign = aj.value("slope_sign", 1);
        a.var_ratio = aj.value("var_ratio", 0.1);
        a.base_sigma = aj.value("base_sigma", 1.0);
      }
      c.placements.emplace_back(std::move(p), a);
    }
    c.validate();
    return c;
  }
};

namespace detail {

/// Register injected cells, rejecting overlaps (ambiguous ground truth).
struct InjectionLedger {
  std::set<std::tuple<NodeId, int, int>> used;
  void claim(NodeId n, int v, int t) {
    const auto key = std::make_tuple(n, v, t);
    if (used.count(key))
      throw ConfigError("overlapping anomaly placements at node " +
                        std::to_string(n) + ", variable " + std::to_string(v) +
                        ", t=" + std::to_string(t));
    used.insert(key);
  }
};

/// Resolve a placement's window start: keep an explicit t_start, otherwise
/// draw uniformly from the test-side range so the window never straddles the
/// train/test split and fits before the forecast horizon runs out.
inline int resolve_t_start(const PlacementSpec& p, const AnomalySpec& a,
                           const WindowTask& w, int T, std::uint64_t seed) {
  if (p.t_start >= 0) {
    require(p.t_start + a.length <= T, "placement window exceeds panel bounds");
    return p.t_start;
  }
  const int split = static_cast<int>(std::floor(w.split_fraction * T));
  const int lo = split, hi = T - w.horizon - a.length;
  require(hi >= lo, "no room for an anomaly window in the test range");
  Rng rng(derive_seed(seed, "t_start"));
  std::uniform_int_distribution<int> d(lo, hi);
  return d(rng);
}

/// Leaves that actually receive a target-variable injection for a placement.
inline std::vector<NodeId> injection_leaves(const PlacementSpec& p,
                                            const HierarchyTree& tree) {
  if (p.mode == PlacementSpec::Mode::external_variable) return p.nodes;
  std::set<NodeId> out;
  for (NodeId n : p.nodes)
    for (NodeId l : tree.leaves_under(n)) out.insert(l);
  return {out.begin(), out.end()};
}

/// Write one anomaly window into a series slice. Sine families add; low_var
/// replaces the window (an additive low-variance draw could not lower the
/// local variance, which is the whole point of that family).
inline void apply_anomaly(std::vector<double>& series, int t0,
                          const std::vector<double>& wave, AnomalySpec::Kind kind,
                          double center = 0.0) {
  for (size_t k = 0; k < wave.size(); ++k) {
    if (kind == AnomalySpec::Kind::low_var)
      series[t0 + k] = center + wave[k];
    else
      series[t0 + k] += wave[k];
  }
}

}  // namespace detail

/// Pure-synthetic benchmark panel: Gaussian background on every leaf (and on
/// every node for external variables), anomalies planted per placement,
/// target variable re-aggregated bottom-up so coherency holds exactly.
inline std::pair<SeriesPanel, GroundTruthManifest> build_synthetic_panel(
    const BenchmarkConfig& cfg, int dataset_index = 0) {
  cfg.validate();
  const HierarchyTree tree = HierarchyTree::balanced(cfg.levels, cfg.branching);
  const int V = 1 + cfg.n_external, T = cfg.T, N = tree.size();
  const std::uint64_t ds_seed = derive_seed(cfg.seed, "dataset",
                                            static_cast<std::uint64_t>(dataset_index));

  // Background noise.
  std::map<NodeId, std::vector<double>> leaf_target;
  for (NodeId l : tree.leaves()) {
    Rng rng(derive_seed(ds_seed, "bg", static_cast<std::uint64_t>(l)));
    std::normal_distribution<double> nd(0.0, cfg.noise_sigma);
    std::vector<double> s(T);
    for (int t = 0; t < T; ++t) s[t] = nd(rng);
    leaf_target[l] = std::move(s);
  }
  std::vector<std::vector<double>> external(static_cast<size_t>(N) * cfg.n_external);
  for (int n = 0; n < N; ++n)
    for (int e = 0; e < cfg.n_external; ++e) {
      Rng rng(derive_seed(ds_seed, "ext", static_cast<std::uint64_t>(n),
                          static_cast<std::uint64_t>(e)));
      std::normal_distribution<double> nd(0.0, 1.0);
      std::vector<double> s(T);
      for (int t = 0; t < T; ++t) s[t] = nd(rng);
      external[static_cast<size_t>(n) * cfg.n_external + e] = std::move(s);
    }

  // Placements.
  GroundTruthManifest manifest;
  detail::InjectionLedger ledger;
  for (size_t pi = 0; pi < cfg.placements.size(); ++pi) {
    PlacementSpec place = cfg.placements[pi].first;
    AnomalySpec anom = cfg.placements[pi].second;
    validate_placement(place, tree, V);
    // low_var ratios apply to the actual background sd of the receiving
    // series: noise_sigma for the target, 1 for externals.
    anom.base_sigma = place.mode == PlacementSpec::Mode::external_variable
                          ? 1.0
                          : cfg.noise_sigma;
    place.seed = derive_seed(ds_seed, "place", pi);
    const int t0 = detail::resolve_t_start(place, anom, cfg.window, T, place.seed);
    place.t_start = t0;

    PlacementRecord rec;
    rec.place = place;
    rec.anomaly = anom;
    rec.forecast_node = placement_forecast_node(place, tree);
    if (place.mode == PlacementSpec::Mode::external_variable)
      rec.external_variable = place.variable;
    if (place.mode == PlacementSpec::Mode::cross_level)
      rec.lca = tree.lca(std::set<NodeId>(place.nodes.begin(), place.nodes.end()));

    if (place.mode == PlacementSpec::Mode::external_variable) {
      for (NodeId n : place.nodes) {
        const auto wave = gen_anomaly(
            anom, derive_seed(place.seed, "wave", static_cast<std::uint64_t>(n)));
        auto& s = external[static_cast<size_t>(n) * cfg.n_external +
                           (place.variable - 1)];
        for (int k = 0; k < anom.length; ++k) ledger.claim(n, place.variable, t0 + k);
        detail::apply_anomaly(s, t0, wave, anom.kind);
        rec.cells.push_back({n, place.variable, t0, t0 + anom.length});
      }
    } else {
      for (NodeId l : detail::injection_leaves(place, tree)) {
        const auto wave = gen_anomaly(
            anom, derive_seed(place.seed, "wave", static_cast<std::uint64_t>(l)));
        for (int k = 0; k < anom.length; ++k) ledger.claim(l, 0, t0 + k);
        detail::apply_anomaly(leaf_target.at(l), t0, wave, anom.kind);
        rec.cells.push_back({l, 0, t0, t0 + anom.length});
      }
    }
    manifest.placements.push_back(std::move(rec));
  }

  // Assemble the panel with exact bottom-up aggregation.
  const auto target = tree.aggregate_up(leaf_target);
  Grid3 data(N, V, T);
  for (int n = 0; n < N; ++n) {
    for (int t = 0; t < T; ++t) data.at(n, 0, t) = target.at(n)[t];
    for (int e = 0; e < cfg.n_external; ++e)
      for (int t = 0; t < T; ++t)
        data.at(n, 1 + e, t) = external[static_cast<size_t>(n) * cfg.n_external + e][t];
  }
  std::vector<std::string> vars{"target"};
  for (int e = 0; e < cfg.n_external; ++e) vars.push_back("x" + std::to_string(e + 1));
  return {make_panel(tree, std::move(vars), std::move(data)), std::move(manifest)};
}

/// Plant anomalies into an existing (real) panel. Amplitudes auto-scale to
/// c x the local rolling sd of each receiving series; target injections are
/// applied at leaves and their deltas aggregated up, so pre-existing
/// incoherence in the input panel is preserved unchanged elsewhere. The input
/// panel is copied, never modified.
inline std::pair<SeriesPanel, GroundTruthManifest> inject_into_real(
    const SeriesPanel& panel,
    const std::vector<std::pair<PlacementSpec, AnomalySpec>>& placements,
    const WindowTask& window, double c = 2.0, std::uint64_t seed = 0) {
  require(c > 0.0, "inject_into_real: scale c > 0");
  SeriesPanel out = panel;
  const HierarchyTree& tree = panel.tree;
  const int T = panel.T;
  GroundTruthManifest manifest;
  detail::InjectionLedger ledger;

  auto rolling_stats = [&](NodeId n, int v, int t0, int len) {
    const int lo = std::max(0, t0 - len), hi = std::min(T, t0 + 2 * len);
    double s = 0.0, s2 = 0.0;
    int cnt = 0;
    for (int t = lo; t < hi; ++t)
      if (panel.present(n, v, t)) {
        s += panel.data.at(n, v, t);
        s2 += panel.data.at(n, v, t) * panel.data.at(n, v, t);
        ++cnt;
      }
    require(cnt >= 2, "inject_into_real: too few observed cells near the window");
    const double mean = s / cnt;
    const double var = std::max(0.0, s2 / cnt - mean * mean);
    return std::make_pair(mean, std::sqrt(var));
  };

  for (size_t pi = 0; pi < placements.size(); ++pi) {
    PlacementSpec place = placements[pi].first;
    AnomalySpec anom = placements[pi].second;
    validate_placement(place, tree, panel.n_vars());
    place.seed = derive_seed(seed, "place", pi);
    const int t0 = detail::resolve_t_start(place, anom, window, T, place.seed);
    place.t_start = t0;

    PlacementRecord rec;
    rec.place = place;
    rec.forecast_node = placement_forecast_node(place, tree);
    if (place.mode == PlacementSpec::Mode::external_variable)
      rec.external_variable = place.variable;
    if (place.mode == PlacementSpec::Mode::cross_level)
      rec.lca = tree.lca(std::set<NodeId>(place.nodes.begin(), place.nodes.end()));

    const bool is_ext = place.mode == PlacementSpec::Mode::external_variable;
    const int var = is_ext ? place.variable : 0;
    for (NodeId recv : detail::injection_leaves(place, tree)) {
      const auto [mean, sd] = rolling_stats(recv, var, t0, anom.length);
      AnomalySpec local = anom;
      if (anom.kind == AnomalySpec::Kind::low_var)
        local.base_sigma = c * sd;
      else
        local.amplitude = anom.amplitude * c * std::max(sd, 1e-12);
      const auto wave = gen_anomaly(
          local, derive_seed(place.seed, "wave", static_cast<std::uint64_t>(recv)));
      for (int k = 0; k < anom.length; ++k) {
        ledger.claim(recv, var, t0 + k);
        require(panel.present(recv, var, t0 + k),
                "inject_into_real: masked cell inside the anomaly window");
      }
      std::vector<double> series(T);
      for (int t = 0; t < T; ++t) series[t] = out.data.at(recv, var, t);
      detail::apply_anomaly(series, t0, wave, anom.kind, mean);
      // Aggregate the delta up the tree for the target variable.
      if (!is_ext) {
        for (int k = 0; k < anom.length; ++k) {
          const double delta = series[t0 + k] - out.data.at(recv, var, t0 + k);
          NodeId up = recv;
          double w = 1.0;
          while (true) {
            out.data.at(up, 0, t0 + k) += w * delta;
            auto par = tree.parent(up);
            if (!par) break;
            w *= tree.phi(up);
            up = *par;
          }
        }
      } else {
        for (int k = 0; k < anom.length; ++k)
          out.data.at(recv, var, t0 + k) = series[t0 + k];
      }
      rec.cells.push_back({recv, var, t0, t0 + anom.length});
    }
    rec.anomaly = anom;
    manifest.placements.push_back(std::move(rec));
  }
  return {std::move(out), std::move(manifest)};
}

/// Write one benchmark bundle: hierarchy.json, series.csv, ground_truth.json
/// and the echoed config.json.
inline void write_bundle(const std::string& dir, const SeriesPanel& panel,
                         const GroundTruthManifest& manifest,
                         const nlohmann::json& config_echo) {
  std::filesystem::create_directories(dir);
  panel.tree.save(dir + "/hierarchy.json");
  panel.save_series(dir + "/series.csv");
  manifest.save(dir + "/ground_truth.json");
  std::ofstream cfg(dir + "/config.json");
  require(cfg.good(), "cannot write config echo");
  cfg << config_echo.dump(2) << "\n";
}

}  // namespace hiex
