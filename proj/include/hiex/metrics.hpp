#pragma once

#include "hiex/benchgen.hpp"

namespace hiex {

// ---------------------------------------------------------------------------
// Ground-truth metrics. IAS normalizes each (node, variable) score row over
// time (mean-center, divide by range) and averages the normalized scores on
// the manifest's planted cells. EVDA checks whether the external variable
// with the highest score anywhere is the planted one.
// ---------------------------------------------------------------------------

/// Per-row normalization over the time axis:
///   I_hat(j,t) = (I(j,t) - mean_k I(j,k)) / (max_k I(j,k) - min_k I(j,k)).
/// Zero-range rows map to all zeros. The signs of the scores are kept; the
/// scoring side decides whether to feed magnitudes in.
inline Grid3 ias_normalize(const Grid3& raw) {
  require(raw.len >= 1, "ias_normalize: empty time axis");
  Grid3 out(raw.nodes, raw.vars, raw.len, 0.0);
  for (int n = 0; n < raw.nodes; ++n)
    for (int v = 0; v < raw.vars; ++v) {
      double mean = 0.0, lo = raw.at(n, v, 0), hi = lo;
      for (int t = 0; t < raw.len; ++t) {
        const double x = raw.at(n, v, t);
        mean += x;
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
      mean /= raw.len;
      const double range = hi - lo;
      if (range <= 0.0) continue;
      for (int t = 0; t < raw.len; ++t)
        out.at(n, v, t) = (raw.at(n, v, t) - mean) / range;
    }
  return out;
}

/// One explanation tensor covering the context window
/// [context_start, context_start + scores.len) of the underlying panel.
struct Explanation {
  NodeId forecast_node = 0;
  Grid3 scores;  // (node, variable, time-within-context)
  int context_start = 0;
};

struct MetricReport {
  double ias = 0.0;
  std::optional<double> evda;
  int n_cells = 0;    // ground-truth cells scored for ias
  int n_targets = 0;  // targets scored for evda
  nlohmann::json per_placement = nlohmann::json::array();
  nlohmann::json config_echo;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"ias", ias},
                        {"n_cells", n_cells},
                        {"n_targets", n_targets},
                        {"per_placement", per_placement},
                        {"config_echo", config_echo}};
    j["evda"] = evda ? nlohmann::json(*evda) : nlohmann::json();
    return j;
  }
};

namespace detail {

inline const Explanation& find_explanation(const std::vector<Explanation>& ex,
                                           NodeId forecast_node) {
  for (const auto& e : ex)
    if (e.forecast_node == forecast_node) return e;
  throw MismatchError("no explanation provided for manifest forecast node " +
                      std::to_string(forecast_node));
}

}  // namespace detail

/// Mean normalized importance on the manifest's planted cells. Signed scores
/// of oscillating anomalies average out, so by default magnitudes are
/// normalized; pass use_magnitude=false for the literal signed scores.
/// Ground-truth cells outside an explanation's context window are skipped.
inline double ias_score(const std::vector<Explanation>& explanations,
                        const GroundTruthManifest& manifest,
                        bool use_magnitude = true,
                        std::vector<std::pair<std::string, double>>* breakdown = nullptr) {
  double total = 0.0;
  int count = 0;
  for (const auto& rec : manifest.placements) {
    const Explanation& ex = detail::find_explanation(explanations, rec.forecast_node);
    Grid3 raw = ex.scores;
    if (use_magnitude)
      for (double& x : raw.v) x = std::abs(x);
    const Grid3 norm = ias_normalize(raw);
    double p_total = 0.0;
    int p_count = 0;
    for (const CellRange& cr : rec.cells)
      for (int t = cr.t_begin; t < cr.t_end; ++t) {
        const int local = t - ex.context_start;
        if (local < 0 || local >= norm.len) continue;
        p_total += norm.at(cr.node, cr.variable, local);
        ++p_count;
      }
    if (breakdown)
      breakdown->push_back({placement_mode_name(rec.place.mode) + "/" +
                                anomaly_kind_name(rec.anomaly.kind),
                            p_count ? p_total / p_count : 0.0});
    total += p_total;
    count += p_count;
  }
  require(count > 0, "ias_score: no ground-truth cell falls inside any explanation");
  return total / count;
}

/// Fraction of manifest targets whose highest-scoring external variable (max
/// over nodes and time of the signed score) is the planted one.
inline double evda(const std::vector<Explanation>& explanations,
                   const GroundTruthManifest& manifest) {
  int hits = 0, targets = 0;
  for (const auto& rec : manifest.placements) {
    if (!rec.external_variable) continue;
    const Explanation& ex = detail::find_explanation(explanations, rec.forecast_node);
    require(ex.scores.vars >= 2, "evda: explanation has no external variables");
    int best_var = 1;
    double best = -std::numeric_limits<double>::infinity();
    for (int v = 1; v < ex.scores.vars; ++v)
      for (int n = 0; n < ex.scores.nodes; ++n)
        for (int t = 0; t < ex.scores.len; ++t)
          if (ex.scores.at(n, v, t) > best) {
            best = ex.scores.at(n, v, t);
            best_var = v;
          }
    hits += best_var == *rec.external_variable;
    ++targets;
  }
  require(targets > 0, "evda: manifest declares no external-variable placements");
  return static_cast<double>(hits) / targets;
}

/// Before/after protocol for injections into real panels: score the change
/// in explanations instead of the explanations themselves.
inline MetricReport delta_eval(const std::vector<Explanation>& before,
                               const std::vector<Explanation>& after,
                               const GroundTruthManifest& manifest,
                               bool use_magnitude = true) {
  require(before.size() == after.size(),
          "delta_eval: before/after explanation counts differ");
  std::vector<Explanation> delta;
  for (size_t i = 0; i < before.size(); ++i) {
    const Explanation& b = before[i];
    const Explanation& a = after[i];
    require(a.forecast_node == b.forecast_node && a.context_start == b.context_start &&
                a.scores.same_shape(b.scores),
            "delta_eval: before/after explanations computed on different targets "
            "or configs");
    Explanation d = a;
    for (size_t k = 0; k < d.scores.v.size(); ++k) d.scores.v[k] -= b.scores.v[k];
    delta.push_back(std::move(d));
  }
  MetricReport rep;
  std::vector<std::pair<std::string, double>> breakdown;
  rep.ias = ias_score(delta, manifest, use_magnitude, &breakdown);
  for (const auto& [k, v] : breakdown)
    rep.per_placement.push_back({{"placement", k}, {"ias", v}});
  bool any_ext = false;
  for (const auto& rec : manifest.placements) any_ext |= rec.external_variable.has_value();
  if (any_ext) rep.evda = evda(delta, manifest);
  for (const auto& rec : manifest.placements)
    rep.n_cells += static_cast<int>(rec.cells.size());
  rep.n_targets = static_cast<int>(manifest.placements.size());
  return rep;
}

/// Context end (exclusive) of the evaluation window that contains a
/// placement's anomaly, clipped to valid forecast starts.
inline int evaluation_context_end(const PlacementRecord& rec, const WindowTask& w,
                                  int T) {
  const int t_end = rec.place.t_start + rec.anomaly.length;
  int s = std::min(rec.place.t_start + w.context_length, T - w.horizon);
  s = std::max(s, std::min(t_end, T - w.horizon));
  require(s >= w.context_length, "no valid evaluation window for this placement");
  return s;
}

}  // namespace hiex
