#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli() {
  const char* p = std::getenv("HIEX_CLI");
  REQUIRE(p != nullptr);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = cli() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return (status >> 8) & 0xff;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << "\n";
}

int count_lines(const std::string& s) {
  int n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("hiex_cli_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

json bench_config() {
  return {{"n_datasets", 1},
          {"levels", 2},
          {"branching", 2},
          {"T", 60},
          {"noise_sigma", 1.0},
          {"n_external", 1},
          {"context_length", 8},
          {"horizon", 4},
          {"split_fraction", 0.6},
          {"seed", 11},
          {"placements",
           json::array({{{"mode", "same_series"},
                         {"nodes", {1}},
                         {"anomaly",
                          {{"kind", "freq_shapes"}, {"length", 8}, {"amplitude", 4.0}}}}})}};
}

}  // namespace

TEST_CASE("cli pipeline: benchgen, train, explain, evaluate") {
  TempDir tmp("pipeline");
  const fs::path cfg = tmp.path / "bench.json";
  json bc = bench_config();
  bc["n_datasets"] = 3;
  dump(cfg, bc);

  CHECK(run("benchgen --config " + cfg.string() + " --out " + (tmp.path / "data").string() +
            " --jobs 2") == 0);
  for (int i = 0; i < 3; ++i) {
    const fs::path ds = tmp.path / "data" / ("ds_000" + std::to_string(i));
    CHECK(fs::exists(ds / "hierarchy.json"));
    CHECK(fs::exists(ds / "series.csv"));
    CHECK(fs::exists(ds / "ground_truth.json"));
    CHECK(fs::exists(ds / "config.json"));
  }
  // regeneration is byte-identical
  CHECK(run("benchgen --config " + cfg.string() + " --out " +
            (tmp.path / "data2").string()) == 0);
  CHECK(slurp(tmp.path / "data/ds_0000/series.csv") ==
        slurp(tmp.path / "data2/ds_0000/series.csv"));
  CHECK(slurp(tmp.path / "data/ds_0000/ground_truth.json") ==
        slurp(tmp.path / "data2/ds_0000/ground_truth.json"));

  const std::string bundle = (tmp.path / "data/ds_0000").string();
  const fs::path train_cfg = tmp.path / "train.json";
  dump(train_cfg, {{"bundle", bundle},
                   {"split_fraction", 0.6},
                   {"spec",
                    {{"kind", "linear_ar"},
                     {"context_length", 8},
                     {"horizon", 4},
                     {"head", "gaussian"}}}});
  const std::string ckpt = (tmp.path / "model.ckpt").string();
  CHECK(run("train --config " + train_cfg.string() + " --out " + ckpt) == 0);
  CHECK(fs::exists(ckpt));

  const fs::path ex_cfg = tmp.path / "explain.json";
  dump(ex_cfg, {{"bundle", bundle}, {"checkpoint", ckpt}, {"split_fraction", 0.6}});
  const std::string exdir = (tmp.path / "expl").string();
  CHECK(run("explain --config " + ex_cfg.string() + " --out " + exdir +
            " --method fo --mode subtree --levels 0.9") == 0);
  const std::string point = slurp(fs::path(exdir) / "expl_fo_subtree_point.csv");
  const std::string q90 = slurp(fs::path(exdir) / "expl_fo_subtree_q0.9.csv");
  // one manifest target x 3 nodes x 2 variables x 8 context steps, + header
  CHECK(count_lines(point) == 1 + 3 * 2 * 8);
  CHECK(count_lines(q90) == 1 + 3 * 2 * 8);
  CHECK(point.substr(0, point.find('\n')) ==
        "forecast_node,horizon_step,head_component,method,input_node,variable,t,score");
  CHECK(q90.find(",level") != std::string::npos);
  CHECK(q90.find(",0.9") != std::string::npos);
  CHECK(q90.find("quantile") != std::string::npos);

  const fs::path ev_cfg = tmp.path / "eval.json";
  dump(ev_cfg, {{"bundle", bundle},
                {"checkpoint", ckpt},
                {"split_fraction", 0.6},
                {"explanations", exdir + "/expl_fo_subtree_point.csv"}});
  const std::string report = (tmp.path / "report.json").string();
  CHECK(run("evaluate --config " + ev_cfg.string() + " --out " + report +
            " --method fo --mode subtree") == 0);
  const json rep = json::parse(slurp(report));
  CHECK(rep.contains("ias"));
  CHECK(rep.at("ias").is_number());
  CHECK(rep.at("method") == "fo");
  CHECK(rep.at("mode") == "subtree");
  CHECK(rep.at("anomaly_kind") == "freq_shapes");
  CHECK(rep.at("placement_mode") == "same_series");
  CHECK(rep.at("config_echo").at("bundle") == bundle);

  // ablate writes paired timings on the same inputs
  const std::string ab = (tmp.path / "ablate.json").string();
  CHECK(run("ablate --config " + ex_cfg.string() + " --out " + ab + " --method fo") == 0);
  const json abr = json::parse(slurp(ab));
  CHECK(abr.at("subtree").contains("seconds"));
  CHECK(abr.at("flat").contains("seconds"));
  CHECK(abr.at("subtree").at("ias").is_number());
}

TEST_CASE("cli exit codes: config, mismatch, coverage") {
  TempDir tmp("exitcodes");
  // missing config file
  CHECK(run("benchgen --config " + (tmp.path / "nope.json").string() + " --out " +
            (tmp.path / "x").string()) == 2);
  // malformed json
  std::ofstream(tmp.path / "bad.json") << "{not json";
  CHECK(run("benchgen --config " + (tmp.path / "bad.json").string() + " --out " +
            (tmp.path / "x").string()) == 2);
  // overlapping placements are a config error
  json bc = bench_config();
  bc["placements"].push_back(bc["placements"][0]);
  bc["placements"][0]["t_start"] = 40;
  bc["placements"][1]["t_start"] = 40;
  dump(tmp.path / "overlap.json", bc);
  CHECK(run("benchgen --config " + (tmp.path / "overlap.json").string() + " --out " +
            (tmp.path / "x").string()) == 2);

  // build two bundles of different shapes, then cross the checkpoint
  json small = bench_config();
  dump(tmp.path / "small.json", small);
  json big = bench_config();
  big["levels"] = 3;
  dump(tmp.path / "big.json", big);
  CHECK(run("benchgen --config " + (tmp.path / "small.json").string() + " --out " +
            (tmp.path / "small").string()) == 0);
  CHECK(run("benchgen --config " + (tmp.path / "big.json").string() + " --out " +
            (tmp.path / "big").string()) == 0);
  const std::string small_bundle = (tmp.path / "small/ds_0000").string();
  const std::string big_bundle = (tmp.path / "big/ds_0000").string();
  dump(tmp.path / "train.json",
       {{"bundle", small_bundle},
        {"spec", {{"kind", "linear_ar"}, {"context_length", 8}, {"horizon", 4}}}});
  const std::string ckpt = (tmp.path / "m.ckpt").string();
  CHECK(run("train --config " + (tmp.path / "train.json").string() + " --out " + ckpt) == 0);
  dump(tmp.path / "cross.json", {{"bundle", big_bundle}, {"checkpoint", ckpt}});
  CHECK(run("explain --config " + (tmp.path / "cross.json").string() + " --out " +
            (tmp.path / "e").string() + " --method fo") == 3);

  // explanations that skip the manifest's forecast node -> coverage error
  dump(tmp.path / "excfg.json", {{"bundle", small_bundle}, {"checkpoint", ckpt}});
  const std::string exdir = (tmp.path / "expl").string();
  CHECK(run("explain --config " + (tmp.path / "excfg.json").string() + " --out " + exdir +
            " --method fo") == 0);
  std::ofstream miss(tmp.path / "miss.csv");
  miss << "forecast_node,horizon_step,head_component,method,input_node,variable,t,score\n"
       << "1,0,value,fo,1,target,40,0.5\n";  // manifest target is node 0
  miss.close();
  dump(tmp.path / "evalmiss.json", {{"bundle", small_bundle},
                                    {"checkpoint", ckpt},
                                    {"explanations", (tmp.path / "miss.csv").string()}});
  CHECK(run("evaluate --config " + (tmp.path / "evalmiss.json").string() + " --out " +
            (tmp.path / "r.json").string()) == 4);

  // unknown attribution method name
  CHECK(run("explain --config " + (tmp.path / "excfg.json").string() + " --out " +
            (tmp.path / "e2").string() + " --method nope") == 2);
}

TEST_CASE("cli: subtree and flat coincide on a single-node hierarchy") {
  TempDir tmp("single");
  json bc = bench_config();
  bc["levels"] = 1;
  bc["branching"] = 1;
  bc["placements"] = json::array({{{"mode", "same_series"},
                                   {"nodes", {0}},
                                   {"anomaly",
                                    {{"kind", "seq_comb"}, {"length", 8}, {"amplitude", 3.0}}}}});
  dump(tmp.path / "bench.json", bc);
  CHECK(run("benchgen --config " + (tmp.path / "bench.json").string() + " --out " +
            (tmp.path / "data").string()) == 0);
  const std::string bundle = (tmp.path / "data/ds_0000").string();
  dump(tmp.path / "train.json",
       {{"bundle", bundle},
        {"spec", {{"kind", "linear_ar"}, {"context_length", 8}, {"horizon", 4}}}});
  const std::string ckpt = (tmp.path / "m.ckpt").string();
  CHECK(run("train --config " + (tmp.path / "train.json").string() + " --out " + ckpt) == 0);
  dump(tmp.path / "ex.json", {{"bundle", bundle}, {"checkpoint", ckpt}});
  CHECK(run("explain --config " + (tmp.path / "ex.json").string() + " --out " +
            (tmp.path / "sub").string() + " --method fo --mode subtree") == 0);
  CHECK(run("explain --config " + (tmp.path / "ex.json").string() + " --out " +
            (tmp.path / "flat").string() + " --method fo --mode flat") == 0);
  CHECK(slurp(tmp.path / "sub/expl_fo_subtree_point.csv") ==
        slurp(tmp.path / "flat/expl_fo_flat_point.csv"));
}
