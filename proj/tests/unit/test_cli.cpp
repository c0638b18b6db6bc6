#include <doctest.h>

#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "xprotonet/checkpoint.hpp"
#include "xprotonet/cli.hpp"
#include "xprotonet/config.hpp"

using namespace xprotonet;
using nlohmann::json;
using xprotonet::test::TempDir;
namespace fs = std::filesystem;

namespace {

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "xprotonet");
  std::vector<char*> argv;
  for (std::string& a : args) argv.push_back(a.data());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

// 80 synthetic images at 32 x 32, one epoch per stage and a single cycle.
json tiny_run_json() {
  return json{{"seed", 1},
              {"model",
               {{"num_classes", 3},
                {"input_channels", 1},
                {"input_height", 32},
                {"input_width", 32},
                {"backbone_channels", {4, 8}},
                {"feature_dim", 8},
                {"prototypes_per_class", 2}}},
              {"train",
               {{"batch_size", 8},
                {"warmup_epochs", 2},
                {"max_joint_epochs", 1},
                {"head_epochs", 1},
                {"min_cycles", 1},
                {"max_cycles", 1}}},
              {"data", {{"synthetic_count", 80}, {"normalization", "dataset"}}},
              {"explain", {{"max_images", 2}}}};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("synth-data is byte-identical across invocations") {
  TempDir dir("cli_synth");
  const fs::path cfg = dir.path() / "run.json";
  write_json(cfg, tiny_run_json());
  REQUIRE(run_cli({"synth-data", "--config", cfg.string(), "--out", (dir.path() / "a").string()}) == kExitOk);
  REQUIRE(run_cli({"synth-data", "--config", cfg.string(), "--out", (dir.path() / "b").string()}) == kExitOk);
  const auto a = tree(dir.path() / "a"), b = tree(dir.path() / "b");
  CHECK(a.size() > 80);
  CHECK(a == b);
  CHECK(a.count("labels.csv"));
  CHECK(a.count("bbox.csv"));
  CHECK(a.count("images/s0000000.png"));
}

TEST_CASE("a constant-output checkpoint evaluates at chance level") {
  TempDir dir("cli_const");
  const fs::path cfg = dir.path() / "run.json";
  json j = tiny_run_json();
  j["data"]["synthetic_count"] = 400;
  write_json(cfg, j);
  const RunConfig run = load_run_config(cfg);
  ModelConfig model = run.model;
  model.class_names = run.data.synthetic.class_names();
  Network<float> net(model);
  net.head_weights().setZero();
  CheckpointExtras extras;
  extras.preprocess.channels = 1;
  extras.preprocess.height = extras.preprocess.width = 32;
  extras.preprocess.normalization = Normalization{{0.3f}, {0.15f}};
  save_checkpoint(dir.path() / "ckpt", net, extras);

  REQUIRE(run_cli({"evaluate", "--config", cfg.string(), "--out", (dir.path() / "eval").string(), "--checkpoint",
                   (dir.path() / "ckpt").string()}) == kExitOk);
  const json ev = read_json(dir.path() / "eval" / "evaluation.json");
  CHECK(std::abs(ev["mean_auc"].get<double>() - 0.5) <= 0.02);
  // All scores tie, so every defined class sits at exactly 0.5.
  for (const auto& [name, auc] : ev["per_class_auc"].items()) CHECK(auc.get<double>() == 0.5);
  CHECK(ev["samples"].get<int>() > 0);
}

TEST_CASE("train, evaluate, project, prune and explain run end to end") {
  TempDir dir("cli_train");
  const fs::path cfg = dir.path() / "run.json";
  write_json(cfg, tiny_run_json());
  const fs::path out = dir.path() / "train";
  REQUIRE(run_cli({"train", "--config", cfg.string(), "--out", out.string()}) == kExitOk);
  CHECK(count_lines(out / "metrics.jsonl") >= 2);
  CHECK(fs::exists(out / "train.txt"));
  CHECK(fs::exists(out / "val.txt"));
  CHECK(fs::exists(out / "test.txt"));
  CHECK_FALSE(fs::exists(out / "FAILED"));
  const fs::path ckpt = out / "checkpoint";
  const LoadedCheckpoint loaded = load_checkpoint(ckpt);
  REQUIRE(loaded.extras.state);
  CHECK(loaded.extras.state->history.back().stage == Stage::kPrune);
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 2; ++k)
      if (loaded.net.bank().active[c * 2 + k]) CHECK(loaded.net.head_weights()(c, k) >= 0.0f);

  const std::string c = cfg.string();
  CHECK(run_cli({"evaluate", "--config", c, "--out", (dir.path() / "eval").string(), "--checkpoint",
                 ckpt.string()}) == kExitOk);
  CHECK(fs::exists(dir.path() / "eval" / "evaluation.json"));
  CHECK(run_cli({"project", "--config", c, "--out", (dir.path() / "proj").string(), "--checkpoint",
                 ckpt.string()}) == kExitOk);
  CHECK(fs::exists(dir.path() / "proj" / "checkpoint" / "manifest.json"));
  CHECK(run_cli({"prune", "--config", c, "--out", (dir.path() / "prune").string(), "--checkpoint",
                 ckpt.string()}) == kExitOk);
  CHECK(run_cli({"explain", "--config", c, "--out", (dir.path() / "explain").string(), "--checkpoint",
                 ckpt.string()}) == kExitOk);
  int pngs = 0, jsons = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir.path() / "explain")) {
    pngs += e.path().extension() == ".png";
    jsons += e.path().extension() == ".json";
  }
  CHECK(pngs > 0);
  CHECK(jsons >= 2);

  // Resuming a finished run leaves the metrics log unchanged.
  const fs::path resumed = dir.path() / "resumed";
  REQUIRE(run_cli({"train", "--config", c, "--out", resumed.string(), "--checkpoint", ckpt.string()}) == kExitOk);
  CHECK(slurp(resumed / "metrics.jsonl") == slurp(out / "metrics.jsonl"));
}

TEST_CASE("train-prior and directory datasets work from the command line") {
  TempDir dir("cli_prior");
  const fs::path cfg = dir.path() / "run.json";
  write_json(cfg, tiny_run_json());
  REQUIRE(run_cli({"synth-data", "--config", cfg.string(), "--out", (dir.path() / "data").string()}) == kExitOk);

  json j = tiny_run_json();
  j["data"]["source"] = "directory";
  j["data"]["dataset_dir"] = (dir.path() / "data").string();
  j["data"]["class_names"] = {"ellipse", "blob", "streak"};
  const fs::path dir_cfg = dir.path() / "dir.json";
  write_json(dir_cfg, j);
  REQUIRE(run_cli({"train-prior", "--config", dir_cfg.string(), "--out", (dir.path() / "prior").string()}) ==
          kExitOk);
  const LoadedCheckpoint loaded = load_checkpoint(dir.path() / "prior" / "checkpoint");
  int restricted = 0;
  for (const auto& p : loaded.net.bank().provenance) restricted += p && p->box_restricted;
  CHECK(restricted > 0);
}

TEST_CASE("compare-baselines tabulates all three variants") {
  TempDir dir("cli_compare");
  const fs::path cfg = dir.path() / "run.json";
  write_json(cfg, tiny_run_json());
  REQUIRE(run_cli({"compare-baselines", "--config", cfg.string(), "--out", dir.path().string(), "--patch-r", "2"}) ==
          kExitOk);
  const json summary = read_json(dir.path() / "comparison.json");
  const std::string text = summary.dump();
  CHECK(text.find("xprotonet") != std::string::npos);
  CHECK(text.find("patch") != std::string::npos);
  CHECK(text.find("gap") != std::string::npos);
}

TEST_CASE("failures exit non-zero and leave a FAILED marker") {
  TempDir dir("cli_fail");
  const fs::path bad = dir.path() / "bad.json";
  json j = tiny_run_json();
  j["train"]["batch_sise"] = 8;
  write_json(bad, j);
  const fs::path out = dir.path() / "out";
  CHECK(run_cli({"train", "--config", bad.string(), "--out", out.string()}) == kExitConfigError);
  REQUIRE(fs::exists(out / "FAILED"));
  CHECK(slurp(out / "FAILED").find("batch_sise") != std::string::npos);

  CHECK(run_cli({"train", "--out", out.string()}) == kExitConfigError);
  CHECK(run_cli({"frobnicate"}) == kExitConfigError);

  // Corrupt checkpoint: runtime error.
  const fs::path good = dir.path() / "good.json";
  write_json(good, tiny_run_json());
  fs::create_directories(dir.path() / "ckpt");
  std::ofstream(dir.path() / "ckpt" / "manifest.json") << "{\"format\": \"something-else\"}";
  const fs::path out2 = dir.path() / "out2";
  CHECK(run_cli({"evaluate", "--config", good.string(), "--out", out2.string(), "--checkpoint",
                 (dir.path() / "ckpt").string()}) == kExitRuntimeError);
  CHECK(fs::exists(out2 / "FAILED"));

  // A checkpoint with a different class count.
  ModelConfig two;
  two.num_classes = 2;
  two.input_channels = 1;
  two.input_height = two.input_width = 32;
  two.backbone_channels = {4, 8};
  two.feature_dim = 8;
  Network<float> net(two);
  CheckpointExtras extras;
  extras.preprocess.channels = 1;
  extras.preprocess.height = extras.preprocess.width = 32;
  extras.preprocess.normalization = Normalization{{0.3f}, {0.15f}};
  save_checkpoint(dir.path() / "two", net, extras);
  CHECK(run_cli({"evaluate", "--config", good.string(), "--out", out2.string(), "--checkpoint",
                 (dir.path() / "two").string()}) == kExitConfigError);
  CHECK(slurp(out2 / "FAILED").find("classes") != std::string::npos);
}
