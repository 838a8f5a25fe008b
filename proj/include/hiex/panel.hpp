#pragma once

#include <fstream>
#include <sstream>

#include "hiex/hierarchy.hpp"

namespace hiex {

/// Hierarchical multivariate dataset. Variable 0 is the forecast target;
/// the remaining variables are external covariates. Frozen after load.
struct SeriesPanel {
  HierarchyTree tree;
  int T = 0;
  std::vector<std::string> variables;  // index 0 is the target
  Grid3 data;                          // (node, variable, time)
  std::vector<std::uint8_t> mask;      // 1 = value present
  bool incoherent = false;             // target violates coherency at load
  double coherency_residual = 0.0;

  int n_nodes() const { return tree.size(); }
  int n_vars() const { return static_cast<int>(variables.size()); }

  bool present(int n, int v, int t) const {
    return mask[(static_cast<size_t>(n) * n_vars() + v) * T + t] != 0;
  }

  std::map<NodeId, std::vector<double>> target_series() const {
    std::map<NodeId, std::vector<double>> out;
    for (int i = 0; i < n_nodes(); ++i) {
      std::vector<double> s(T);
      for (int t = 0; t < T; ++t) s[t] = data.at(i, 0, t);
      out[i] = std::move(s);
    }
    return out;
  }

  /// Raw model context ending right before `t_end`: cells (node, var,
  /// t_end-context..t_end-1). Masked cells are returned as NaN; the
  /// forecaster imputes them with training means during standardization.
  Grid3 context_ending_at(int t_end, int context_length) const {
    require(t_end >= context_length && t_end <= T, "context window out of range");
    Grid3 g(n_nodes(), n_vars(), context_length);
    for (int n = 0; n < n_nodes(); ++n)
      for (int v = 0; v < n_vars(); ++v)
        for (int l = 0; l < context_length; ++l) {
          const int t = t_end - context_length + l;
          g.at(n, v, l) = present(n, v, t) ? data.at(n, v, t)
                                           : std::numeric_limits<double>::quiet_NaN();
        }
    return g;
  }

  void save_series(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), "cannot write series file: " + path);
    out << "node_id,variable,t,value\n";
    std::ostringstream ss;
    ss.precision(17);
    for (int n = 0; n < n_nodes(); ++n)
      for (int v = 0; v < n_vars(); ++v)
        for (int t = 0; t < T; ++t) {
          if (!present(n, v, t)) continue;
          ss.str("");
          ss << data.at(n, v, t);
          out << n << ',' << variables[v] << ',' << t << ',' << ss.str() << '\n';
        }
  }
};

namespace detail {
/// Relative coherency tolerance at load, scaled by mean absolute level.
inline constexpr double kCoherencyLoadTol = 1e-6;
}  // namespace detail

inline SeriesPanel make_panel(HierarchyTree tree, std::vector<std::string> variables,
                              Grid3 data, std::vector<std::uint8_t> mask = {}) {
  SeriesPanel p{std::move(tree), data.len, std::move(variables), std::move(data), {}};
  require(p.data.nodes == p.tree.size() && p.data.vars == p.n_vars(),
          "panel: data shape does not match tree/variables");
  if (mask.empty())
    p.mask.assign(p.data.size(), 1);
  else {
    require(mask.size() == p.data.size(), "panel: mask shape mismatch");
    p.mask = std::move(mask);
  }
  for (size_t i = 0; i < p.data.size(); ++i)
    require(p.mask[i] == 0 || std::isfinite(p.data.v[i]),
            "panel: NaN in unmasked cell");
  // Coherency check on the target variable, relative to mean absolute level.
  double scale = 0.0;
  std::map<NodeId, std::vector<double>> target = p.target_series();
  for (const auto& [node, s] : target)
    for (double x : s) scale += std::abs(x);
  scale /= std::max<size_t>(1, static_cast<size_t>(p.n_nodes()) * p.T);
  p.coherency_residual = p.tree.coherency_residual(target);
  p.incoherent =
      p.coherency_residual > detail::kCoherencyLoadTol * std::max(scale, 1.0);
  return p;
}

/// Parse `series.csv` (header `node_id,variable,t,value`) against a
/// hierarchy file. Absent cells become masked; duplicates are an error.
inline SeriesPanel load_panel(const std::string& hierarchy_path,
                              const std::string& series_path) {
  HierarchyTree tree = HierarchyTree::load(hierarchy_path);
  std::ifstream in(series_path);
  require(in.good(), "cannot open series file: " + series_path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "empty series file");

  struct Cell {
    int node, var, t;
    double value;
  };
  std::vector<Cell> cells;
  std::vector<std::string> variables;
  auto var_index = [&](const std::string& name) {
    for (size_t i = 0; i < variables.size(); ++i)
      if (variables[i] == name) return static_cast<int>(i);
    variables.push_back(name);
    return static_cast<int>(variables.size()) - 1;
  };
  int max_t = -1;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string node_s, var_s, t_s, val_s;
    require(std::getline(ss, node_s, ',') && std::getline(ss, var_s, ',') &&
                std::getline(ss, t_s, ',') && std::getline(ss, val_s),
            "series.csv line " + std::to_string(line_no) + ": expected 4 fields");
    Cell c;
    try {
      c.node = std::stoi(node_s);
      c.t = std::stoi(t_s);
      c.value = std::stod(val_s);
    } catch (const std::exception&) {
      throw ConfigError("series.csv line " + std::to_string(line_no) +
                        ": malformed number");
    }
    require(c.node >= 0 && c.node < tree.size(),
            "series.csv line " + std::to_string(line_no) + ": unknown node id " +
                std::to_string(c.node));
    require(c.t >= 0, "series.csv: negative time index");
    c.var = var_index(var_s);
    max_t = std::max(max_t, c.t);
    cells.push_back(c);
  }
  require(max_t >= 0, "series.csv: no data rows");
  const int T = max_t + 1;
  const int V = static_cast<int>(variables.size());
  Grid3 data(tree.size(), V, T);
  std::vector<std::uint8_t> mask(data.size(), 0);
  for (const Cell& c : cells) {
    const size_t idx = (static_cast<size_t>(c.node) * V + c.var) * T + c.t;
    require(mask[idx] == 0, "series.csv: duplicate cell (node " +
                                std::to_string(c.node) + ", " +
                                variables[c.var] + ", t=" + std::to_string(c.t) +
                                ")");
    mask[idx] = 1;
    data.v[idx] = c.value;
  }
  return make_panel(std::move(tree), std::move(variables), std::move(data),
                    std::move(mask));
}

// ---------------------------------------------------------------------------
// Train/test windowing
// ---------------------------------------------------------------------------

struct WindowTask {
  int context_length = 12;
  int horizon = 12;
  double split_fraction = 0.6;
};

/// Time range [0, split_index) of a frozen panel.
struct TrainView {
  const SeriesPanel* panel;
  int context_length;
  int horizon;
  int split_index;

  /// End positions t (exclusive) of contexts whose (context, horizon) window
  /// fits entirely in the training range.
  std::vector<int> window_ends() const {
    std::vector<int> out;
    for (int t = context_length; t + horizon <= split_index; ++t) out.push_back(t);
    return out;
  }
};

/// Rolling evaluation windows starting at the split.
struct TestView {
  const SeriesPanel* panel;
  int context_length;
  int horizon;
  int split_index;

  /// Start positions of forecast windows: context ends at s, horizon covers
  /// [s, s+horizon).
  std::vector<int> window_starts() const {
    std::vector<int> out;
    for (int s = split_index; s + horizon <= panel->T; ++s) out.push_back(s);
    return out;
  }
  int n_windows() const { return static_cast<int>(window_starts().size()); }
};

inline std::pair<TrainView, TestView> split(const SeriesPanel& panel,
                                            const WindowTask& task) {
  require(task.context_length >= 1 && task.horizon >= 1,
          "split: context_length and horizon must be positive");
  require(task.split_fraction > 0.0 && task.split_fraction < 1.0,
          "split: split_fraction must be in (0,1)");
  require(task.context_length + task.horizon <= panel.T,
          "split: context_length + horizon exceeds panel length");
  const int split_index = static_cast<int>(std::floor(task.split_fraction * panel.T));
  require(split_index >= task.context_length,
          "split: split index " + std::to_string(split_index) +
              " leaves no full context window (context_length " +
              std::to_string(task.context_length) + ")");
  TrainView tr{&panel, task.context_length, task.horizon, split_index};
  TestView te{&panel, task.context_length, task.horizon, split_index};
  return {tr, te};
}

}  // namespace hiex
