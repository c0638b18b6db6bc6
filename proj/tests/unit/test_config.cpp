#include <doctest.h>

#include <string>

#include "test_util.hpp"
#include "xprotonet/config.hpp"

using namespace xprotonet;
using nlohmann::json;

TEST_CASE("defaults round-trip through json") {
  const RunConfig defaults;
  const json j = to_json(defaults);
  CHECK(to_json(parse_run_config(j)) == j);
  CHECK(to_json(parse_run_config(json::object())) == j);
}

TEST_CASE("unknown keys are rejected with their path") {
  CHECK_THROWS_WITH_AS(parse_run_config(json{{"sed", 1}}), doctest::Contains("sed"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(json{{"train", {{"optimizer", {{"lr_haed", 0.1}}}}}}),
                       doctest::Contains("train.optimizer.lr_haed"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(json{{"data", {{"synthetic", {{"classes", {{{"nme", "x"}}}}}}}}}),
                       doctest::Contains("nme"), ConfigError);
}

TEST_CASE("type mismatches name the key") {
  CHECK_THROWS_WITH_AS(parse_run_config(json{{"train", {{"batch_size", "32"}}}}),
                       doctest::Contains("train.batch_size"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(json{{"train", {{"optimizer", {{"lr_head", "fast"}}}}}}),
                       doctest::Contains("train.optimizer.lr_head"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(json{{"train", {{"augment", 1}}}}), doctest::Contains("train.augment"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(json{{"model", {{"backbone_channels", 16}}}}),
                       doctest::Contains("model.backbone_channels"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(json{{"seed", -1}}), ConfigError);
  CHECK_THROWS_AS(parse_run_config(json{{"data", {{"split", {{"mode", "tenfold"}}}}}}), ConfigError);
}

TEST_CASE("validate rejects out-of-range settings") {
  auto invalid = [](const json& j) {
    RunConfig cfg = parse_run_config(j);
    cfg.data.synthetic.classes.resize(cfg.model.num_classes, cfg.data.synthetic.classes[0]);
    cfg.validate();
  };
  CHECK_THROWS_AS(invalid({{"loss", {{"lambda_occur", -0.1}}}}), ConfigError);
  CHECK_THROWS_AS(invalid({{"loss", {{"gamma", -1.0}}}}), ConfigError);
  CHECK_THROWS_AS(invalid({{"train", {{"early_stop_patience", 0}}}}), ConfigError);
  CHECK_THROWS_AS(invalid({{"train", {{"min_cycles", 3}, {"max_cycles", 2}}}}), ConfigError);
  CHECK_THROWS_AS(invalid({{"model", {{"feature_dim", 0}}}}), ConfigError);
  CHECK_THROWS_AS(invalid({{"model", {{"input_height", 500}}}}), ConfigError);
  CHECK_THROWS_AS(invalid({{"data", {{"split", {{"train", 0.5}, {"val", 0.1}, {"test", 0.2}}}}}}), ConfigError);
  CHECK_THROWS_AS(invalid({{"data", {{"source", "ftp"}}}}), ConfigError);
  CHECK_THROWS_AS(invalid({{"data", {{"source", "directory"}, {"dataset_dir", "/nonexistent/xpn"}}}}), ConfigError);

  RunConfig mismatch = parse_run_config(json{{"model", {{"num_classes", 4}}}});
  CHECK_THROWS_WITH_AS(mismatch.validate(), doctest::Contains("num_classes"), ConfigError);
}

TEST_CASE("shipped configurations parse and validate") {
  const std::filesystem::path root(XPROTONET_SOURCE_DIR);
  const RunConfig desk = load_run_config(root / "configs" / "desk.json");
  CHECK_NOTHROW(desk.validate());
  CHECK(desk.model.num_classes == 3);
  CHECK(desk.data.synthetic_count == 2800);
  CHECK(desk.seed == 1);

  const json full = read_json(root / "configs" / "full.json");
  const RunConfig p = parse_run_config(full);
  CHECK(p.model.num_classes == 14);
  CHECK(p.train.batch_size == 32);
}

TEST_CASE("run seed propagates into every seeded section") {
  RunConfig cfg = parse_run_config(json{{"seed", 42}});
  cfg.propagate_seed();
  CHECK(cfg.model.seed == 42);
  CHECK(cfg.train.seed == 42);
  CHECK(cfg.data.split.seed == 42);
  CHECK(cfg.data.synthetic.seed == 42);
}
