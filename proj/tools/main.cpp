// Command-line pipeline: generate benchmarks, train forecasters, explain
// forecasts, score explanations against ground truth, and run the
// subtree-vs-flat ablation. Exit codes: 0 ok, 2 config error, 3 input
// mismatch, 4 incomplete explanation coverage.

#include <chrono>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "hiex/metrics.hpp"
#include "hiex/prob_explain.hpp"

namespace {

using nlohmann::json;

struct CoverageError : hiex::Error {
  using Error::Error;
};

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw hiex::ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw hiex::ConfigError("bad JSON in " + path + ": " + e.what());
  }
  return j;
}

void parallel_for(int n, int jobs, const std::function<void(int)>& body) {
  jobs = std::max(1, jobs);
  if (jobs == 1 || n <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(jobs, n); ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

std::string dataset_dir(const std::string& out, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "ds_%04d", i);
  return out + "/" + buf;
}

// --------------------------------------------------------------------------
// benchgen
// --------------------------------------------------------------------------

int cmd_benchgen(const std::string& config_path, const std::string& out,
                 std::optional<std::uint64_t> seed, int jobs) {
  hiex::BenchmarkConfig cfg = hiex::BenchmarkConfig::from_json(load_json(config_path));
  if (seed) cfg.seed = *seed;
  std::mutex io;
  parallel_for(cfg.n_datasets, jobs, [&](int i) {
    auto [panel, manifest] = hiex::build_synthetic_panel(cfg, i);
    json echo = cfg.to_json();
    echo["dataset_index"] = i;
    hiex::write_bundle(dataset_dir(out, i), panel, manifest, echo);
    std::lock_guard<std::mutex> lk(io);
    std::cout << dataset_dir(out, i) << ": " << panel.n_nodes() << " nodes, T="
              << panel.T << ", " << manifest.placements.size() << " placements\n";
  });
  return 0;
}

// --------------------------------------------------------------------------
// train
// --------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& out,
              std::optional<std::uint64_t> seed) {
  const json cfg = load_json(config_path);
  if (!cfg.contains("bundle")) throw hiex::ConfigError("train config needs 'bundle'");
  const std::string bundle = cfg.at("bundle").get<std::string>();
  hiex::SeriesPanel panel =
      hiex::load_panel(bundle + "/hierarchy.json", bundle + "/series.csv");
  hiex::ForecasterSpec spec = hiex::spec_from_json(cfg.value("spec", json::object()));
  if (seed) spec.seed = *seed;
  hiex::WindowTask task{spec.context_length, spec.horizon,
                        cfg.value("split_fraction", 0.6)};
  auto [train_view, test_view] = hiex::split(panel, task);
  const hiex::ModelParams model = hiex::train(spec, train_view);
  hiex::save_checkpoint(model, out);
  std::cout << out << ": trained " << (spec.kind == hiex::ModelKind::mlp ? "mlp" : "linear_ar")
            << " for " << model.epochs_run << " epochs, loss "
            << model.first_epoch_loss << " -> " << model.final_epoch_loss << "\n";
  return 0;
}

// --------------------------------------------------------------------------
// explain
// --------------------------------------------------------------------------

struct ExplainInputs {
  hiex::SeriesPanel panel;
  hiex::ModelParams model;
  hiex::GroundTruthManifest manifest;
  hiex::WindowTask window;
};

ExplainInputs load_explain_inputs(const json& cfg) {
  if (!cfg.contains("bundle") || !cfg.contains("checkpoint"))
    throw hiex::ConfigError("config needs 'bundle' and 'checkpoint'");
  const std::string bundle = cfg.at("bundle").get<std::string>();
  ExplainInputs in{
      hiex::load_panel(bundle + "/hierarchy.json", bundle + "/series.csv"),
      hiex::load_checkpoint(cfg.at("checkpoint").get<std::string>()),
      hiex::GroundTruthManifest::load(bundle + "/ground_truth.json"),
      {}};
  if (in.model.tree.size() != in.panel.n_nodes() || in.model.n_vars != in.panel.n_vars())
    throw hiex::MismatchError(
        "checkpoint shape does not match the bundle panel (nodes " +
        std::to_string(in.model.tree.size()) + " vs " +
        std::to_string(in.panel.n_nodes()) + ", vars " +
        std::to_string(in.model.n_vars) + " vs " + std::to_string(in.panel.n_vars()) +
        ")");
  in.window = {in.model.spec.context_length, in.model.spec.horizon,
               cfg.value("split_fraction", 0.6)};
  return in;
}

/// Unique (forecast node, context end) pairs the manifest asks about.
std::vector<std::pair<hiex::NodeId, int>> manifest_targets(const ExplainInputs& in) {
  std::set<std::pair<hiex::NodeId, int>> seen;
  std::vector<std::pair<hiex::NodeId, int>> out;
  for (const auto& rec : in.manifest.placements) {
    const int s = hiex::evaluation_context_end(rec, in.window, in.panel.T);
    if (seen.insert({rec.forecast_node, s}).second) out.push_back({rec.forecast_node, s});
  }
  return out;
}

void write_rows(std::ostream& os, const hiex::HierImportanceMap& map,
                const hiex::SeriesPanel& panel, int context_start, int step) {
  const hiex::Grid3 g = map.to_tensor(panel.n_nodes());
  std::ostringstream ss;
  ss.precision(17);
  const char* comp = map.quantile_level ? "quantile" : "value";
  for (int n = 0; n < g.nodes; ++n)
    for (int v = 0; v < g.vars; ++v)
      for (int t = 0; t < g.len; ++t) {
        ss.str("");
        ss << g.at(n, v, t);
        os << map.target.node << ',' << step << ',' << comp << ',' << map.method
           << ',' << n << ',' << panel.variables[v] << ',' << context_start + t
           << ',' << ss.str();
        if (map.quantile_level) os << ',' << *map.quantile_level;
        os << "\n";
      }
}

int cmd_explain(const std::string& config_path, const std::string& out,
                const std::string& method_s, const std::string& mode,
                const std::vector<double>& levels, std::optional<std::uint64_t> seed,
                int jobs) {
  const json cfg = load_json(config_path);
  ExplainInputs in = load_explain_inputs(cfg);
  const hiex::Method method = hiex::method_from_name(method_s);
  if (mode != "subtree" && mode != "flat")
    throw hiex::ConfigError("mode must be 'subtree' or 'flat'");
  const bool subtree = mode == "subtree";
  hiex::HierConfig hcfg;
  hcfg.attr.seed = seed.value_or(cfg.value("seed", std::uint64_t{0}));
  if (cfg.contains("attribution")) {
    const json& a = cfg.at("attribution");
    hcfg.attr.ig_steps = a.value("ig_steps", hcfg.attr.ig_steps);
    hcfg.attr.sg_samples = a.value("sg_samples", hcfg.attr.sg_samples);
    hcfg.attr.sg_noise_scale = a.value("sg_noise_scale", hcfg.attr.sg_noise_scale);
    hcfg.attr.sg_multiply_by_inputs =
        a.value("sg_multiply_by_inputs", hcfg.attr.sg_multiply_by_inputs);
    hcfg.attr.lime_samples = a.value("lime_samples", hcfg.attr.lime_samples);
    hcfg.attr.lime_ridge = a.value("lime_ridge", hcfg.attr.lime_ridge);
  }
  const bool fallback = cfg.value("fallback_to_occlusion", true);
  if (!fallback && in.model.spec.head == hiex::HeadKind::quantile &&
      (method == hiex::Method::ig || method == hiex::Method::sg)) {
    bool covered = true;  // levels must all be configured head levels
    for (double lv : levels) {
      bool hit = false;
      for (double q : in.model.spec.quantile_levels) hit |= std::abs(q - lv) < 1e-12;
      covered &= hit;
    }
    if (!covered)
      throw hiex::MismatchError("gradient method on an empirical quantile surrogate "
                                "with the occlusion fallback disabled");
  }

  const auto targets = manifest_targets(in);
  std::filesystem::create_directories(out);

  struct Sheet {
    std::string path;
    std::optional<double> level;
  };
  std::vector<Sheet> sheets{{out + "/expl_" + method_s + "_" + mode + "_point.csv",
                             std::nullopt}};
  for (double lv : levels) {
    std::ostringstream name;
    name << out << "/expl_" << method_s << "_" << mode << "_q" << lv << ".csv";
    sheets.push_back({name.str(), lv});
  }

  for (const Sheet& sheet : sheets) {
    std::vector<std::string> blocks(targets.size());
    parallel_for(static_cast<int>(targets.size()), jobs, [&](int i) {
      const auto [node, s] = targets[i];
      const hiex::Grid3 ctx = in.panel.context_ending_at(s, in.window.context_length);
      hiex::HierImportanceMap map;
      if (sheet.level) {
        hiex::QuantileTarget qt;
        qt.node = node;
        qt.level = *sheet.level;
        qt.seed = hcfg.attr.seed;
        map = hiex::explain_quantile(in.model, ctx, qt, method, hcfg, subtree, fallback);
      } else {
        hiex::OutputSelector sel;
        sel.node = node;
        map = hiex::explain_forecast(in.model, ctx, sel, method, hcfg, subtree);
      }
      std::ostringstream os;
      write_rows(os, map, in.panel, s - in.window.context_length, 0);
      blocks[i] = os.str();
    });
    std::ofstream os(sheet.path);
    if (!os.good()) throw hiex::Error("cannot write " + sheet.path);
    os << "forecast_node,horizon_step,head_component,method,input_node,variable,t,score";
    if (sheet.level) os << ",level";
    os << "\n";
    for (const auto& b : blocks) os << b;
    std::cout << sheet.path << ": " << targets.size() << " targets\n";
  }
  return 0;
}

// --------------------------------------------------------------------------
// evaluate
// --------------------------------------------------------------------------

std::vector<hiex::Explanation> read_explanations(const std::string& csv_path,
                                                 const hiex::SeriesPanel& panel,
                                                 int context_length) {
  std::ifstream in(csv_path);
  if (!in.good()) throw hiex::ConfigError("cannot open explanation file: " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw hiex::ConfigError("empty explanation file");
  auto var_index = [&](const std::string& name) {
    for (size_t i = 0; i < panel.variables.size(); ++i)
      if (panel.variables[i] == name) return static_cast<int>(i);
    throw hiex::MismatchError("explanation references unknown variable: " + name);
  };
  struct Row {
    hiex::NodeId target, node;
    int var, t;
    double score;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f[9];
    int nf = 0;
    while (nf < 9 && std::getline(ss, f[nf], ',')) ++nf;
    if (nf < 8) throw hiex::ConfigError("malformed explanation row: " + line);
    rows.push_back({std::stoi(f[0]), std::stoi(f[4]), var_index(f[5]), std::stoi(f[6]),
                    std::stod(f[7])});
  }
  std::map<hiex::NodeId, std::pair<int, std::vector<Row>>> by_target;
  for (const Row& r : rows) {
    auto& [start, list] = by_target[r.target];
    if (list.empty()) start = r.t;
    start = std::min(start, r.t);
    list.push_back(r);
  }
  std::vector<hiex::Explanation> out;
  for (auto& [target, entry] : by_target) {
    hiex::Explanation e;
    e.forecast_node = target;
    e.context_start = entry.first;
    e.scores = hiex::Grid3(panel.n_nodes(), panel.n_vars(), context_length, 0.0);
    for (const Row& r : entry.second) {
      const int local = r.t - e.context_start;
      if (r.node < 0 || r.node >= panel.n_nodes() || local < 0 || local >= context_length)
        throw hiex::MismatchError("explanation cell outside the panel/context bounds");
      e.scores.at(r.node, r.var, local) = r.score;
    }
    out.push_back(std::move(e));
  }
  return out;
}

json evaluate_one(const ExplainInputs& in, const std::vector<hiex::Explanation>& ex,
                  const json& echo) {
  for (const auto& rec : in.manifest.placements) {
    bool found = false;
    for (const auto& e : ex) found |= e.forecast_node == rec.forecast_node;
    if (!found)
      throw CoverageError("no explanation covers manifest forecast node " +
                          std::to_string(rec.forecast_node));
  }
  std::vector<std::pair<std::string, double>> breakdown;
  hiex::MetricReport rep;
  rep.ias = hiex::ias_score(ex, in.manifest, true, &breakdown);
  for (const auto& [k, v] : breakdown)
    rep.per_placement.push_back({{"placement", k}, {"ias", v}});
  bool any_ext = false;
  for (const auto& rec : in.manifest.placements)
    any_ext |= rec.external_variable.has_value();
  if (any_ext) rep.evda = hiex::evda(ex, in.manifest);
  rep.n_targets = static_cast<int>(in.manifest.placements.size());
  rep.config_echo = echo;
  json j = rep.to_json();
  std::set<std::string> kinds, modes;
  for (const auto& rec : in.manifest.placements) {
    kinds.insert(hiex::anomaly_kind_name(rec.anomaly.kind));
    modes.insert(hiex::placement_mode_name(rec.place.mode));
  }
  auto joined = [](const std::set<std::string>& s) {
    std::string out;
    for (const auto& x : s) out += (out.empty() ? "" : "+") + x;
    return out;
  };
  j["anomaly_kind"] = joined(kinds);
  j["placement_mode"] = joined(modes);
  return j;
}

int cmd_evaluate(const std::string& config_path, const std::string& out,
                 const std::string& method_s, const std::string& mode,
                 std::optional<std::uint64_t> seed) {
  const json cfg = load_json(config_path);
  ExplainInputs in = load_explain_inputs(cfg);
  if (!cfg.contains("explanations"))
    throw hiex::ConfigError("evaluate config needs 'explanations' (CSV path)");
  const auto ex = read_explanations(cfg.at("explanations").get<std::string>(), in.panel,
                                    in.window.context_length);
  json echo = cfg;
  echo["method"] = method_s;
  echo["mode"] = mode;
  echo["seed"] = seed.value_or(cfg.value("seed", std::uint64_t{0}));
  json rep = evaluate_one(in, ex, echo);
  rep["method"] = method_s;
  rep["mode"] = mode;
  rep["seed"] = echo["seed"];
  std::ofstream os(out);
  if (!os.good()) throw hiex::Error("cannot write report: " + out);
  os << rep.dump(2) << "\n";
  std::cout << out << ": ias=" << rep["ias"] << " evda=" << rep["evda"] << "\n";
  return 0;
}

// --------------------------------------------------------------------------
// ablate: subtree vs flat on the same bundle, with wall-clock per mode.
// --------------------------------------------------------------------------

int cmd_ablate(const std::string& config_path, const std::string& out,
               const std::string& method_s, std::optional<std::uint64_t> seed) {
  const json cfg = load_json(config_path);
  ExplainInputs in = load_explain_inputs(cfg);
  const hiex::Method method = hiex::method_from_name(method_s);
  hiex::HierConfig hcfg;
  hcfg.attr.seed = seed.value_or(cfg.value("seed", std::uint64_t{0}));
  const auto targets = manifest_targets(in);

  json report;
  for (const bool subtree : {true, false}) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<hiex::Explanation> ex;
    for (const auto& [node, s] : targets) {
      const hiex::Grid3 ctx = in.panel.context_ending_at(s, in.window.context_length);
      hiex::OutputSelector sel;
      sel.node = node;
      const auto map = hiex::explain_forecast(in.model, ctx, sel, method, hcfg, subtree);
      ex.push_back({node, map.to_tensor(in.panel.n_nodes()),
                    s - in.window.context_length});
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json echo = cfg;
    echo["method"] = method_s;
    echo["mode"] = subtree ? "subtree" : "flat";
    echo["seed"] = hcfg.attr.seed;
    json one = evaluate_one(in, ex, echo);
    one["seconds"] = secs;
    report[subtree ? "subtree" : "flat"] = one;
  }
  report["method"] = method_s;
  std::ofstream os(out);
  if (!os.good()) throw hiex::Error("cannot write report: " + out);
  os << report.dump(2) << "\n";
  std::cout << out << ": subtree " << report["subtree"]["seconds"] << "s vs flat "
            << report["flat"]["seconds"] << "s\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical time-series forecast explanations"};
  app.require_subcommand(1);

  std::string config, out = ".", mode = "subtree", method = "ig";
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::vector<double> levels;

  auto add_common = [&](CLI::App* cmd, bool needs_out) {
    cmd->add_option("--config", config, "JSON config file")->required();
    auto* o = cmd->add_option("--out", out, "output path");
    if (needs_out) o->required();
    cmd->add_option("--seed", seed, "override the config seed");
    cmd->add_option("--jobs", jobs, "worker threads");
  };

  auto* bg = app.add_subcommand("benchgen", "generate benchmark bundles");
  add_common(bg, true);
  auto* tr = app.add_subcommand("train", "train a forecaster on a bundle");
  add_common(tr, true);
  auto* ex = app.add_subcommand("explain", "explain manifest targets");
  add_common(ex, true);
  ex->add_option("--mode", mode, "subtree|flat");
  ex->add_option("--method", method, "fo|ig|sg|lime");
  ex->add_option("--levels", levels, "quantile levels")->delimiter(',');
  auto* ev = app.add_subcommand("evaluate", "score explanation CSVs");
  add_common(ev, true);
  ev->add_option("--mode", mode, "mode echoed into the report");
  ev->add_option("--method", method, "method echoed into the report");
  auto* ab = app.add_subcommand("ablate", "paired subtree/flat run with timings");
  add_common(ab, true);
  ab->add_option("--method", method, "fo|ig|sg|lime");

  CLI11_PARSE(app, argc, argv);

  try {
    if (bg->parsed()) return cmd_benchgen(config, out, seed, jobs);
    if (tr->parsed()) return cmd_train(config, out, seed);
    if (ex->parsed()) return cmd_explain(config, out, method, mode, levels, seed, jobs);
    if (ev->parsed()) return cmd_evaluate(config, out, method, mode, seed);
    if (ab->parsed()) return cmd_ablate(config, out, method, seed);
  } catch (const hiex::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CoverageError& e) {
    std::cerr << "coverage error: " << e.what() << "\n";
    return 4;
  } catch (const hiex::MismatchError& e) {
    std::cerr << "input mismatch: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
