#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "blockflow/io.hpp"
#include "blockflow/pipeline.hpp"

using namespace blockflow;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("blockflow_test_pipeline_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream(p) << j.dump(2);
}

int run_cli(const std::string& args) {
  std::string cmd = std::string("\"") + BLOCKFLOW_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

json tiny_config(const fs::path& out) {
  RunConfig c;
  c.seed = 11;
  c.out = out;
  c.synth.n_cells = 200;
  c.synth.n_genes = 40;
  for (auto& t : c.synth.types)
    for (auto& l : t.levels) l.n_genes = 4;
  c.block_size = 8;
  c.vae.width = 8;
  c.vae.latent = 2;
  c.vae.enc_blocks = c.vae.dec_blocks = 1;
  c.vae.heads = 2;
  c.vae_train.epochs = 2;
  c.vae_train.batch_size = 64;
  c.vae_train.warmup_epochs = 1;
  c.flow.n_blocks = 1;
  c.flow.width = 8;
  c.flow.heads = 2;
  c.flow.ode_steps = 4;
  c.flow_train.epochs = 2;
  c.flow_train.batch_size = 64;
  c.flow_train.warmup_epochs = 1;
  return c.to_json();
}

}  // namespace

TEST_CASE("config defaults and JSON round trip") {
  RunConfig d;
  CHECK_NOTHROW(d.validate());
  CHECK(d.schema_version == kConfigSchemaVersion);
  auto back = RunConfig::from_json(d.to_json());
  CHECK(back.to_json() == d.to_json());
  auto j = tiny_config("x");
  CHECK(RunConfig::from_json(j).to_json() == j);
  // partial configs keep defaults
  auto p = RunConfig::from_json({{"schema_version", 1}, {"seed", 9}});
  CHECK(p.seed == 9);
  CHECK(p.block_size == d.block_size);
}

TEST_CASE("config rejects unknown keys, bad versions and bad values") {
  CHECK_THROWS_AS(RunConfig::from_json({{"schema_version", 1}, {"sed", 3}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"schema_version", 1}, {"vae", {{"widht", 3}}}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"schema_version", 1}, {"paths", {{"count", "a"}}}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"schema_version", 2}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"schema_version", 1}, {"vae_train", {{"lr", -1.0}}}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"schema_version", 1}, {"seed", "abc"}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"schema_version", 1}, {"evaluate", {{"space", "pixels"}}}}), ValidationError);
  auto d = scratch("load");
  std::ofstream(d / "broken.json") << "{ not json";
  CHECK_THROWS_AS(load_config(d / "broken.json"), ValidationError);
  CHECK_THROWS_AS(load_config(d / "missing.json"), ValidationError);
  write_json(d / "noversion.json", {{"seed", 1}});
  CHECK_THROWS_AS(load_config(d / "noversion.json"), ValidationError);
  fs::remove_all(d);
}

TEST_CASE("default paths live under out") {
  RunConfig c;
  c.out = "runs/a";
  CHECK(c.counts_path() == fs::path("runs/a/counts.csv"));
  CHECK(c.metrics_path() == fs::path("runs/a/metrics.csv"));
  c.paths.metrics = "elsewhere/m.csv";
  CHECK(c.metrics_path() == fs::path("elsewhere/m.csv"));
}

TEST_CASE("evaluate_by_condition: identical sets, grouping and CSV header") {
  Rng rng(1);
  DenseMatrix x(30, 4);
  for (auto& v : x.data) v = rng.normal();
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < 30; ++i) keys.push_back(i % 3 == 0 ? "A\x1f" "b1" : (i % 3 == 1 ? "B\x1f" "b1" : "B\x1f" "b2"));
  auto rows = evaluate_by_condition(x, keys, x, keys, 512, 5);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.labels.size() == 2);
    CHECK(r.n_real == 10);
    CHECK(r.n_gen == 10);
    CHECK(r.wd.value == 0.0);
    CHECK(r.wd.exact);
    CHECK(r.mmd < 1e-9);
    CHECK(r.stats.pcc == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.stats.mse == 0.0);
  }
  auto csv = metrics_csv({"cell_type", "batch"}, rows);
  CHECK(csv.substr(0, csv.find('\n')) == "cell_type,batch,n_real,n_gen,WD,WD_mode,MMD,PCC,R2,MSE");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  // a condition with no generated cells is reported, not dropped
  std::vector<std::string> gen_keys(30, "A\x1f" "b1");
  auto partial = evaluate_by_condition(x, keys, x, gen_keys, 512, 5);
  CHECK(partial.size() == 3);
  std::size_t empty = 0;
  for (const auto& r : partial) empty += r.n_gen == 0;
  CHECK(empty == 2);
  CHECK_THROWS_AS(evaluate_by_condition(x, keys, DenseMatrix(30, 5), keys, 512, 5), DimensionError);
}

TEST_CASE("tiny end-to-end pipeline through the library") {
  auto d = scratch("e2e");
  auto cfg = RunConfig::from_json(tiny_config(d));
  run_synth(cfg);
  CHECK(fs::exists(cfg.counts_path()));
  CHECK(fs::exists(cfg.ground_truth_path()));
  auto layout = run_build_blocks(cfg);
  CHECK(layout.n_blocks == 5);
  CHECK(layout.block_size == 8);
  run_train_vae(cfg);
  CHECK(fs::exists(cfg.vae_path()));
  CHECK(fs::exists(cfg.vae_loss_path()));
  run_train_fm(cfg);
  CHECK(fs::exists(cfg.flow_path()));
  run_generate(cfg);
  auto gen = read_matrix(cfg.generated_path());
  CHECK(gen.n_cells() == 200);
  CHECK(gen.n_genes() == 40);
  run_evaluate(cfg);
  std::string metrics = read_file(cfg.metrics_path());
  CHECK(metrics.substr(0, metrics.find('\n')) == "cell_type,batch,n_real,n_gen,WD,WD_mode,MMD,PCC,R2,MSE");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 7);  // 3 cell types x 2 batches

  cfg.transfer.where = {{"batch", "b1"}};
  cfg.transfer.set = {{"batch", "b2"}};
  run_transfer(cfg);
  auto tr = read_matrix(cfg.transferred_path());
  CHECK(tr.n_cells() > 0);
  CHECK(tr.n_cells() < 200);

  // steps run out of order report what is missing
  auto fresh = cfg;
  fresh.out = d / "empty";
  CHECK_THROWS_AS(run_train_vae(fresh), ValidationError);
  fs::remove_all(d);
}

TEST_CASE("CLI exit codes and flag precedence") {
  auto d = scratch("cli");
  auto j = tiny_config(d / "run");
  j["seed"] = 3;
  write_json(d / "cfg.json", j);
  std::string cfg = "--config \"" + (d / "cfg.json").string() + "\"";

  CHECK(run_cli(cfg + " --seed 5 synth") == 0);
  auto truth = json::parse(read_file(d / "run" / "ground_truth.json"));
  CHECK(truth["seed"] == 5);

  CHECK(run_cli("--config \"" + (d / "nope.json").string() + "\" synth") == 1);
  auto bad = j;
  bad["unknown_key"] = 1;
  write_json(d / "bad.json", bad);
  CHECK(run_cli("--config \"" + (d / "bad.json").string() + "\" synth") == 1);
  CHECK(run_cli("no-such-verb") == 1);
  CHECK(run_cli(cfg + " train-vae") == 1);  // no layout yet

  CHECK(run_cli(cfg + " build-blocks") == 0);
  auto blow = j;
  blow["vae_train"]["lr"] = 1e200;
  write_json(d / "blow.json", blow);
  CHECK(run_cli("--config \"" + (d / "blow.json").string() + "\" train-vae") == 2);
  fs::remove_all(d);
}
