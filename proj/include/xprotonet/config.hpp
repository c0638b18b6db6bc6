#ifndef XPROTONET_CONFIG_HPP_
#define XPROTONET_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "xprotonet/data.hpp"
#include "xprotonet/explain.hpp"
#include "xprotonet/model.hpp"
#include "xprotonet/objectives.hpp"
#include "xprotonet/trainer.hpp"

namespace xprotonet {

struct DataConfig {
  // "synthetic": generated in memory from `synthetic`.
  // "directory": NIH layout under dataset_dir (labels.csv, bbox.csv, images/).
  std::string source = "synthetic";
  std::string dataset_dir;
  // Label vocabulary of a directory dataset; empty means the NIH findings.
  std::vector<std::string> class_names;
  SyntheticSpec synthetic;
  int synthetic_count = 2800;
  SplitSpec split;
  std::string test_ids_file;
  PreprocessConfig preprocess;
  // "imagenet", or "dataset" for statistics of the training split.
  std::string normalization = "imagenet";
};

/// Every setting of a run. Defaults are the full-scale settings;
/// configs/desk.json holds the desk-scale overrides.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;
  ExplainConfig explain;

  /// Copies the run seed into every seeded section.
  void propagate_seed();
  /// Section validation plus cross-section checks and path existence.
  void validate() const;
};

/// Strict parse: unknown keys and type mismatches raise ConfigError naming
/// the key path (e.g. "train.optimizer.lr_head").
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const RunConfig& config);
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PreprocessConfig& config);
PreprocessConfig preprocess_config_from_json(const nlohmann::json& j);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace xprotonet

#endif  // XPROTONET_CONFIG_HPP_
