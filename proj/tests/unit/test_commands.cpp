#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <array>
#include <fstream>
#include <random>
#include <sstream>

#include "calseg/commands.hpp"
#include "calseg/errors.hpp"
#include "calseg/features.hpp"
#include "calseg/inference.hpp"
#include "test_util.hpp"

using namespace calseg;

namespace {

Json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  return Json::parse(in);
}

void write_json_file(const fs::path& p, const Json& j) { std::ofstream(p) << j.dump(2); }

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CALSEG_EXE) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Json tiny_config() {
  return Json{{"sim", {{"height", 32}, {"width", 32}, {"n_frames", 30}, {"n_neurons", 1}}},
              {"train", {{"epochs", 1}, {"batch_size", 2}}}};
}

// Simulated blocks, features and a one-epoch checkpoint shared by the tests
// below; built once.
struct Pipeline {
  testutil::TempDir dir{"calseg_cmd"};
  fs::path config = dir.path() / "tiny.json";
  fs::path sim = dir.path() / "sim", feat = dir.path() / "feat", ckpt = dir.path() / "net.ckpt";

  Pipeline() {
    write_json_file(config, tiny_config());
    std::ostringstream err;
    REQUIRE(cmd_simulate({config, sim, 5, 3}, err) == kExitOk);
    REQUIRE(cmd_features(sim, feat, err) == kExitOk);
    REQUIRE(cmd_train({feat, sim, config, ckpt, 8, ""}, err) == kExitOk);
  }
  static Pipeline& get() {
    static Pipeline p;
    return p;
  }
};

}  // namespace

TEST_CASE("simulate: files, manifest and byte reproducibility") {
  testutil::TempDir dir;
  const auto cfg = dir.path() / "c.json";
  write_json_file(cfg, tiny_config());
  std::ostringstream err;
  REQUIRE(cmd_simulate({cfg, dir.path() / "a", 1, 42}, err) == kExitOk);
  CHECK(fs::exists(dir.path() / "a" / "block_0000.csf4"));
  CHECK(fs::exists(dir.path() / "a" / "truth_0000.csf4"));
  const Json m = read_json_file(dir.path() / "a" / "manifest.json");
  CHECK(m["n_blocks"] == 1);
  CHECK(m["seed"] == 42);
  CHECK(m["blocks"].size() == 1);

  REQUIRE(cmd_simulate({cfg, dir.path() / "b", 1, 42}, err) == kExitOk);
  for (const char* f : {"block_0000.csf4", "truth_0000.csf4", "manifest.json"})
    CHECK(testutil::file_bytes(dir.path() / "a" / f) == testutil::file_bytes(dir.path() / "b" / f));
  REQUIRE(cmd_simulate({cfg, dir.path() / "c", 1, 43}, err) == kExitOk);
  CHECK(testutil::file_bytes(dir.path() / "a" / "block_0000.csf4") !=
        testutil::file_bytes(dir.path() / "c" / "block_0000.csf4"));
}

TEST_CASE("cli: exit codes for config, usage and I/O errors") {
  testutil::TempDir dir;
  const auto log = dir.path() / "log.txt";
  const auto bad = dir.path() / "bad.json";
  write_json_file(bad, Json{{"sim", {{"n_frames", 1}}}});
  CHECK(run_cli("simulate --config " + bad.string() + " --out " + (dir.path() / "o").string() +
                    " --blocks 1 --seed 1",
                log) == kExitUsage);
  CHECK(slurp(log).find("n_frames") != std::string::npos);
  CHECK(run_cli("simulate --out x", log) == kExitUsage);
  CHECK(run_cli("bogus", log) == kExitUsage);
  CHECK(run_cli("features --in " + (dir.path() / "missing").string() + " --out " + (dir.path() / "f").string(),
                log) == kExitIo);
  CHECK(run_cli("simulate --config " + (dir.path() / "none.json").string() + " --out " +
                    (dir.path() / "o").string() + " --blocks 1 --seed 1",
                log) == kExitIo);
  CHECK(run_cli("train --features a --labels b --out c --seed 1 --half third", log) == kExitUsage);
  CHECK(run_cli("--help", log) == kExitOk);
}

TEST_CASE("exit_code_for: error classes") {
  CHECK(exit_code_for(ConfigError("x")) == kExitUsage);
  CHECK(exit_code_for(ShapeError("x")) == kExitUsage);
  CHECK(exit_code_for(IoError("x")) == kExitIo);
  CHECK(exit_code_for(FormatError("x")) == kExitIo);
  CHECK(exit_code_for(DataError("x")) == kExitNumeric);
  CHECK(exit_code_for(NumericError("x")) == kExitNumeric);
  CHECK(exit_code_for(std::runtime_error("x")) == kExitFailure);
}

TEST_CASE("features: matches the library and is idempotent") {
  auto& p = Pipeline::get();
  for (std::uint64_t id = 0; id < 5; ++id) {
    const std::string num = std::string(4 - std::to_string(id).size(), '0') + std::to_string(id);
    const auto block = load_block(p.sim / ("block_" + num + ".csf4"));
    CHECK(load_feature_stack(p.feat / ("features_" + num + ".csf4")) == build_feature_stack(block));
  }
  testutil::TempDir again;
  std::ostringstream err;
  REQUIRE(cmd_features(p.sim, again.path(), err) == kExitOk);
  CHECK(testutil::file_bytes(again.path() / "features_0002.csf4") ==
        testutil::file_bytes(p.feat / "features_0002.csf4"));
}

TEST_CASE("make-gt: writes masks and skips degenerate blocks") {
  auto& p = Pipeline::get();
  testutil::TempDir dir;
  fs::create_directories(dir.path() / "in");
  fs::copy_file(p.sim / "block_0000.csf4", dir.path() / "in" / "block_0000.csf4");
  save_block(Block(9, 10, 32, 32, std::vector<float>(10 * 32 * 32, 1.0f)), dir.path() / "in" / "block_0009.csf4");
  std::ostringstream err;
  REQUIRE(cmd_make_gt(dir.path() / "in", dir.path() / "gt", err) == kExitOk);
  CHECK(err.str().find("warning") != std::string::npos);
  CHECK(fs::exists(dir.path() / "gt" / "gt_0000.csf4"));
  CHECK(!fs::exists(dir.path() / "gt" / "gt_0009.csf4"));
  const Json m = read_json_file(dir.path() / "gt" / "manifest.json");
  CHECK(m["masks"].size() == 1);
  CHECK(m["skipped"].size() == 1);
  CHECK(m["skipped"][0]["block_id"] == 9);
}

TEST_CASE("train: checkpoint metadata, split file, history") {
  auto& p = Pipeline::get();
  Json meta;
  load_checkpoint(p.ckpt, &meta);
  CHECK(meta["hyperparams"]["epochs"] == 1);
  CHECK(meta["optimizer_steps"] == 2);  // 4 training blocks, batch 2
  const Json split = read_json_file(p.ckpt.string() + ".split.json");
  CHECK(split["train"].size() == 4);
  CHECK(split["test"].size() == 1);
  CHECK(slurp(p.ckpt.string() + ".history.jsonl").find("\"ce\"") != std::string::npos);

  // Without a config the documented defaults apply.
  const Hyperparams d = pipeline_config_from_json(Json::object()).train;
  CHECK(d.epochs == 60);

  // Same inputs and seed give identical bytes; the halves are disjoint.
  testutil::TempDir dir;
  std::ostringstream err;
  REQUIRE(cmd_train({p.feat, p.sim, p.config, dir.path() / "again.ckpt", 8, ""}, err) == kExitOk);
  CHECK(testutil::file_bytes(dir.path() / "again.ckpt") == testutil::file_bytes(p.ckpt));
  REQUIRE(cmd_train({p.feat, p.sim, p.config, dir.path() / "h1.ckpt", 8, "first"}, err) == kExitOk);
  REQUIRE(cmd_train({p.feat, p.sim, p.config, dir.path() / "h2.ckpt", 8, "second"}, err) == kExitOk);
  const Json s1 = read_json_file(dir.path() / "h1.ckpt.split.json");
  const Json s2 = read_json_file(dir.path() / "h2.ckpt.split.json");
  CHECK(s1["train"].size() == 2);
  CHECK(s2["train"].size() == 2);
  for (const auto& a : s1["train"])
    for (const auto& b : s2["train"]) CHECK(a != b);
  CHECK(s1["test"] == split["test"]);
  CHECK(s2["test"] == split["test"]);
}

TEST_CASE("predict: matches mc_ensemble, split restriction, single sample") {
  auto& p = Pipeline::get();
  testutil::TempDir dir;
  std::ostringstream err;
  PredictArgs a;
  a.ckpt = p.ckpt;
  a.features = p.feat;
  a.out = dir.path() / "all";
  a.samples = 3;
  a.seed = 5;
  REQUIRE(cmd_predict(a, err) == kExitOk);
  const BUNet net = load_checkpoint(p.ckpt);
  const auto x = load_feature_stack(p.feat / "features_0001.csf4");
  const auto r = mc_ensemble(net, x, 3, 5);
  CHECK(load_map(a.out / "prob_0001.csf4") == r.probability);
  CHECK(load_map(a.out / "uncert_0001.csf4") == r.uncertainty);
  CHECK(load_mask(a.out / "mask_0001.csf4") == binarize(r.probability, 0.5));
  const Json side = read_json_file(a.out / "pred_0001.json");
  CHECK(side["n_samples"] == 3);
  CHECK(side["block_id"] == 1);

  a.out = dir.path() / "one";
  a.samples = 1;
  a.split = p.ckpt.string() + ".split.json";
  REQUIRE(cmd_predict(a, err) == kExitOk);
  const Json split = read_json_file(*a.split);
  std::size_t n_masks = 0;
  for (const auto& e : fs::directory_iterator(a.out)) n_masks += e.path().filename().string().rfind("mask_", 0) == 0;
  CHECK(n_masks == split["test"].size());
  char name[32];
  std::snprintf(name, sizeof name, "uncert_%04llu.csf4", split["test"][0].get<unsigned long long>());
  const ImageMap uncert = load_map(a.out / name);
  for (float v : uncert.values()) CHECK(v == 0.0f);

  a.samples = 0;
  CHECK(cmd_predict(a, err) == kExitUsage);
}

TEST_CASE("evaluate: perfect prediction, missing truth") {
  auto& p = Pipeline::get();
  testutil::TempDir dir;
  std::ostringstream err;
  // Truth masks posing as predictions.
  fs::create_directories(dir.path() / "pred");
  for (int id = 0; id < 3; ++id) {
    char name[32];
    std::snprintf(name, sizeof name, "truth_%04d.csf4", id);
    save_mask(load_mask(p.sim / name), id, dir.path() / "pred" / (std::string("mask") + (name + 5)));
  }
  REQUIRE(cmd_evaluate(dir.path() / "pred", p.sim, dir.path() / "r.json", err) == kExitOk);
  const Json r = read_json_file(dir.path() / "r.json");
  CHECK(r["n_blocks"] == 3);
  for (const char* k : {"dice", "accuracy", "sensitivity"}) CHECK(r["mean"][k] == 1.0);
  CHECK(r["mean"]["mcc"].get<double>() == doctest::Approx(1.0));

  save_mask(MaskMap(32, 32), 77, dir.path() / "pred" / "mask_0077.csf4");
  CHECK(cmd_evaluate(dir.path() / "pred", p.sim, dir.path() / "r2.json", err) == kExitUsage);
}

TEST_CASE("repro: identical and complementary runs") {
  testutil::TempDir dir;
  std::mt19937_64 rng(1);
  std::bernoulli_distribution coin(0.3);
  for (const char* d : {"a", "b", "c"}) fs::create_directories(dir.path() / d);
  for (int id = 0; id < 3; ++id) {
    MaskMap m(8, 8);
    for (auto& v : m.values()) v = coin(rng);
    MaskMap inv = m;
    for (auto& v : inv.values()) v = !v;
    const std::string name = "mask_000" + std::to_string(id) + ".csf4";
    save_mask(m, id, dir.path() / "a" / name);
    save_mask(m, id, dir.path() / "b" / name);
    save_mask(inv, id, dir.path() / "c" / name);
  }
  std::ostringstream err;
  REQUIRE(cmd_repro(dir.path() / "a", dir.path() / "b", dir.path() / "same.json", err) == kExitOk);
  CHECK(read_json_file(dir.path() / "same.json")["mean"]["dice"] == 1.0);
  REQUIRE(cmd_repro(dir.path() / "a", dir.path() / "c", dir.path() / "opp.json", err) == kExitOk);
  CHECK(read_json_file(dir.path() / "opp.json")["mean"]["dice"] == 0.0);
  fs::remove(dir.path() / "c" / "mask_0002.csf4");
  CHECK(cmd_repro(dir.path() / "a", dir.path() / "c", dir.path() / "x.json", err) != kExitOk);
}

TEST_CASE("render: black maps and overlay colours") {
  testutil::TempDir dir;
  save_block(Block(0, 2, 5, 5, std::vector<float>(50, 3.0f)), dir.path() / "b.csf4");
  save_map(ImageMap(5, 5), 0, dir.path() / "p.csf4", "probability");
  save_map(ImageMap(5, 5), 0, dir.path() / "u.csf4", "uncertainty");
  save_mask(MaskMap(5, 5), 0, dir.path() / "t.csf4");
  std::ostringstream err;
  RenderArgs a{dir.path() / "b.csf4", dir.path() / "p.csf4", dir.path() / "u.csf4", dir.path() / "t.csf4",
               dir.path() / "out"};
  REQUIRE(cmd_render(a, err) == kExitOk);
  for (const char* f : {"mean_frame.png", "probability.png", "uncertainty.png"}) {
    const PngImage img = read_png(dir.path() / "out" / f);
    CHECK(img.width == 5);
    for (auto v : img.samples) CHECK(v == 0);
  }

  // 3x3 truth square and a 3x3 prediction square shifted one column right.
  MaskMap truth(5, 5), pred(5, 5);
  for (std::size_t h = 1; h < 4; ++h)
    for (std::size_t w = 1; w < 4; ++w) truth(h, w) = 1, pred(h, w + 1) = 1;
  const PngImage img = render_overlay(ImageMap(5, 5, 0.5f), truth, pred);
  CHECK(img.channels == 3);
  CHECK(img.bit_depth == 16);
  auto rgb = [&](std::size_t h, std::size_t w) {
    return std::array<int, 3>{img.at(h, w, 0), img.at(h, w, 1), img.at(h, w, 2)};
  };
  CHECK(rgb(1, 1) == std::array<int, 3>{65535, 0, 0});      // truth only
  CHECK(rgb(1, 4) == std::array<int, 3>{0, 65535, 0});      // prediction only
  CHECK(rgb(1, 2) == std::array<int, 3>{65535, 65535, 0});  // both
  CHECK(rgb(0, 0)[0] == rgb(0, 0)[1]);                      // gray background
  CHECK(mask_contour(truth)(2, 2) == 0);
  CHECK(mask_contour(truth).count() == 8);
  CHECK_THROWS_AS(render_overlay(ImageMap(4, 5), truth, pred), ShapeError);
}
