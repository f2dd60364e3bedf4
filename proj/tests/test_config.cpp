#include "test_main.hpp"

#include "em3rf/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace em3rf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("em3rf_cfg_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Small and fast: 4 objects, 600 points, tiny widths.
Config tiny_config(const fs::path& root) {
  json doc = {
      {"seed", 5},
      {"workdir", (root / "run").string()},
      {"dataset", {{"dir", (root / "data").string()}, {"objects", 4}, {"points", 600}, {"holdout", 1}}},
      {"model",
       {{"c_geo", 8}, {"c_rgb", 4}, {"geo_blocks", 1}, {"rgb_blocks", 1}, {"shape_dim", 16}, {"seg_hidden", 8},
        {"vector_width", 8}, {"hidden", 16}, {"flow_blocks", 1}, {"pool_channels", 4}, {"cross_channels", 4}}},
      {"flow", {{"steps", 3}, {"views", 1}, {"encoder_points", 64}, {"overlap_points", 32}, {"log_every", 1}}},
      {"optimizer", {{"batch", 2}}},
      {"pretrain", {{"epochs", 1}, {"points", 64}, {"eval_points", 64}, {"batch", 2}}},
      {"inference", {{"steps", 5}}},
  };
  return config_from_json(doc);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(EM3RF_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config defaults round-trip through JSON") {
  const Config d;
  const Config back = config_from_json(config_to_json(d));
  CHECK(config_to_json(back) == config_to_json(d));
  CHECK(back.train.alpha == 0.3);
  CHECK(back.model.flow.lambda == 1.0);
  CHECK(back.model.flow.t_cap == 0.999);
  CHECK(back.train.overlap.resolution == 32);
  CHECK(back.train.overlap.sigma_cells == 1.5);
  CHECK(back.train.overlap.eps == 1e-6);
  CHECK(back.inference.mode == StartMode::sample_p0);
  CHECK(back.metrics.pa_threshold == 0.01);
  CHECK(back.metrics.chamfer == ChamferVariant::squared);
  CHECK(back.dataset.tau == 0.4);
  CHECK(back.dataset.points == 5000);

  const Config empty = config_from_json(json::object());
  CHECK(config_to_json(empty) == config_to_json(d));
}

TEST_CASE("unknown keys and bad values are rejected") {
  CHECK_THROWS_AS((void)config_from_json(json{{"sed", 1}}), ConfigError);
  CHECK_THROWS_AS((void)config_from_json(json{{"flow", {{"stpes", 1}}}}), ConfigError);
  CHECK_THROWS_AS((void)config_from_json(json{{"overlap", {{"alpha", "high"}}}}), ConfigError);
  CHECK_THROWS_AS((void)config_from_json(json{{"overlap", 3}}), ConfigError);
  CHECK_THROWS_AS((void)config_from_json(json{{"inference", {{"mode", "warp"}}}}), ConfigError);
  CHECK_THROWS_AS((void)config_from_json(json{{"metrics", {{"chamfer", "l3"}}}}), ConfigError);
  CHECK_THROWS_AS((void)config_from_json(json{{"flow", {{"t_cap", 1.0}}}}), ConfigError);
  CHECK_THROWS_AS((void)config_from_json(json{{"dataset", {{"shapes", {"teapot"}}}}}), ConfigError);
  CHECK_THROWS_AS((void)config_from_json(json{{"jobs", 0}}), ConfigError);
  CHECK_THROWS_AS((void)load_config("/nonexistent/em3rf.json"), ConfigError);
  try {
    (void)config_from_json(json{{"model", {{"widht", 3}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("widht") != std::string::npos);
  }
}

TEST_CASE("overrides and EM3RF_SEED") {
  json doc = json::object();
  apply_override(doc, "overlap.alpha=0");
  apply_override(doc, "model.backbone=mlp");
  apply_override(doc, "dataset.shapes=[\"sphere\"]");
  apply_override(doc, "seed=17");
  Config c = config_from_json(doc);
  CHECK(c.train.alpha == 0.0);
  CHECK(c.model.encoder.backbone == GeoBackbone::mlp);
  CHECK(c.dataset.shapes == std::vector<std::string>{"sphere"});
  CHECK(c.seed == 17);
  CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "a..b=1"), ConfigError);

  ::setenv("EM3RF_SEED", "99", 1);
  apply_environment(c);
  CHECK(c.seed == 99);
  ::setenv("EM3RF_SEED", "x9", 1);
  CHECK_THROWS_AS(apply_environment(c), ConfigError);
  ::unsetenv("EM3RF_SEED");
  apply_environment(c);
  CHECK(c.seed == 99);
}

TEST_CASE("generate is byte-identical for a seed and labels are symmetric") {
  const fs::path root = scratch("gen");
  Config cfg = tiny_config(root);
  std::ostringstream log;
  cfg.dataset.dir = root / "a";
  const auto a = cmd_generate(cfg, log);
  cfg.dataset.dir = root / "b";
  cfg.jobs = 2;
  const auto b = cmd_generate(cfg, log);
  REQUIRE(a.size() == 4);
  CHECK(list_manifests(root / "a").size() == 4);
  for (const auto& entry : fs::directory_iterator(root / "a"))
    CHECK(read_bytes(entry.path()) == read_bytes(root / "b" / entry.path().filename()));

  cfg.seed = 6;
  cfg.dataset.dir = root / "c";
  cmd_generate(cfg, log);
  CHECK(read_bytes(root / "a" / "obj_0000.json") != read_bytes(root / "c" / "obj_0000.json"));

  // Every positive label has a partner point within tau and every negative one has none.
  for (const auto& m : a) {
    const auto obj = read_object(m);
    const auto placed = assembled_positions(obj);
    for (std::size_t i = 0; i < obj.size(); ++i) {
      REQUIRE(obj.fragments[i].boundary_label);
      const auto& lab = *obj.fragments[i].boundary_label;
      for (Eigen::Index p = 0; p < placed[i].rows(); ++p) {
        double best = 1e300;
        for (std::size_t j = 0; j < obj.size(); ++j)
          if (j != i) best = std::min(best, (placed[j].rowwise() - placed[i].row(p)).rowwise().norm().minCoeff());
        CHECK_MESSAGE((best <= cfg.dataset.tau) == bool(lab[std::size_t(p)]), m.string());
      }
    }
  }
}

TEST_CASE("pipeline commands on a tiny dataset") {
  const fs::path root = scratch("pipe");
  Config cfg = tiny_config(root);
  std::ostringstream log;
  CHECK_THROWS_AS((void)load_split(cfg), DataError);
  cmd_generate(cfg, log);
  const auto split = load_split(cfg);
  CHECK(split.train.size() == 3);
  CHECK(split.holdout_names == std::vector<std::string>{"obj_0003"});

  SUBCASE("zero epochs leave the encoder at its initialization") {
    cfg.pretrain.epochs = 0;
    const auto trace = cmd_pretrain_seg(cfg, log);
    REQUIRE(trace.size() == 1);
    CHECK(trace[0].auc >= 0.0);
    const Model init(cfg.model, cfg.seed);
    const auto saved = tensor::read_checkpoint(cfg.encoder_checkpoint());
    const auto expected = tensor::export_store(init.encoder_store, "encoder/");
    REQUIRE(saved.size() == expected.size());
    for (std::size_t i = 0; i < saved.size(); ++i) {
      CHECK(saved[i].name == expected[i].name);
      CHECK(saved[i].values == expected[i].values);
    }
  }

  SUBCASE("resumed pretraining continues the log") {
    cmd_pretrain_seg(cfg, log);
    cfg.pretrain_resume = true;
    const auto more = cmd_pretrain_seg(cfg, log);
    REQUIRE(more.size() == 1);
    CHECK(more[0].epoch == 2);
    std::ifstream is(cfg.workdir / "seg_log.csv");
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(is, line)) lines.push_back(line);
    REQUIRE(lines.size() == 4);
    CHECK(lines[0] == "epoch,loss,auc,wall_ms");
    CHECK(lines[1].rfind("0,", 0) == 0);
    CHECK(lines[3].rfind("2,", 0) == 0);
  }

  SUBCASE("missing labels are a data error") {
    auto obj = read_object(cfg.dataset.dir / "obj_0000.json");
    for (auto& f : obj.fragments) f.boundary_label.reset();
    write_object(cfg.dataset.dir, "obj_0000", obj);
    CHECK_THROWS_AS(cmd_pretrain_seg(cfg, log), DataError);
  }

  SUBCASE("train, assemble and eval") {
    CHECK_THROWS_AS((void)load_trained_model(cfg), DataError);
    const auto rows = cmd_train(cfg, log);
    CHECK(rows.back().step == 2);
    CHECK(rows.size() == 3);
    std::ifstream is(cfg.workdir / "flow_log.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "step,L_flow,L_overlap,L_total,wall_ms");

    const auto a = cmd_assemble(cfg, cfg.dataset.dir / "obj_0003.json", root / "out", log);
    CHECK(a.poses.size() == 2);
    CHECK(fs::exists(root / "out" / "obj_0003_frag0.ply"));
    const auto poses = json::parse(read_bytes(root / "out" / "obj_0003_poses.json"));
    CHECK(poses["poses"].size() == 2);
    CHECK(poses["anchor"].get<std::size_t>() == a.anchor);

    const auto r = cmd_eval(cfg, log);
    CHECK(r.reports.size() == 1);
    CHECK(fs::exists(cfg.workdir / "report.csv"));
    CHECK(fs::exists(cfg.workdir / "report.json"));
    CHECK(r.summary.pa_pct >= 0.0);

    Config other = cfg;
    other.model.flow.hidden = 32;
    CHECK_THROWS((void)load_trained_model(other));
  }
}

TEST_CASE("command line exit codes") {
  const fs::path root = scratch("cli");
  const std::string common = " --workdir " + (root / "run").string() + " --data " + (root / "data").string();
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("train --set bogus=1" + common) == 2);
  {
    std::ofstream(root / "bad.json") << R"({"flow": {"steps": 10, "colour": true}})";
  }
  CHECK(run_cli("train -c " + (root / "bad.json").string() + common) == 2);
  CHECK(run_cli("train" + common) == 3);
  CHECK(run_cli("eval" + common) == 3);
  CHECK(run_cli("certify --trials 3 --points 16 --set model.geo_blocks=1") == 0);
  CHECK(run_cli("certify --trials 3 --points 16 --fault-layer geo/lift") == 4);
  CHECK(run_cli("generate --objects 2 --set dataset.points=400" + common) == 0);
  CHECK(list_manifests(root / "data").size() == 2);

  // A file value is overridden by a flag, and --seed by nothing.
  {
    std::ofstream(root / "cfg.json") << R"({"seed": 1, "dataset": {"objects": 1, "points": 400}})";
  }
  const std::string data2 = " --data " + (root / "data2").string();
  CHECK(run_cli("generate -c " + (root / "cfg.json").string() + " --objects 3" + data2) == 0);
  CHECK(list_manifests(root / "data2").size() == 3);
}

TEST_CASE("certify names the faulty layer") {
  Config cfg;
  cfg.model.encoder.geo_blocks = 2;
  cfg.model.encoder.c_geo = 8;
  cfg.model.encoder.fault_layer = "geo/block1/mlp";
  CertifyOptions opt;
  opt.trials = 3;
  opt.points = 16;
  std::ostringstream log;
  const auto run = cmd_certify(cfg, {}, opt, log);
  CHECK_FALSE(run.passed());
  CHECK(run.float64.first_failure() == "geo/block1/mlp");
  CHECK(log.str().find("VIOLATION") != std::string::npos);
}
