#ifndef XPROTONET_PIPELINE_HPP_
#define XPROTONET_PIPELINE_HPP_

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xprotonet/checkpoint.hpp"
#include "xprotonet/config.hpp"
#include "xprotonet/data.hpp"
#include "xprotonet/eval.hpp"
#include "xprotonet/trainer.hpp"

namespace xprotonet {

/// Samples, splits and prepared tensors for one run.
struct Dataset {
  std::vector<std::string> class_names;
  std::vector<Sample> samples;
  Splits splits;
  PreprocessConfig preprocess;
  std::vector<PreparedSample> train;
  std::vector<PreparedSample> val;
  std::vector<PreparedSample> test;
};

/// Generates or loads the samples, splits them and prepares every split.
/// A given `preprocess` (e.g. from a checkpoint) replaces the configured
/// resolution and normalization.
Dataset load_dataset(const RunConfig& config, const std::optional<PreprocessConfig>& preprocess = std::nullopt);

/// Model configuration with class names filled in from the dataset.
ModelConfig resolved_model_config(const RunConfig& config, const Dataset& data);

/// Throws ConfigError when a loaded network disagrees with the dataset in
/// class count or class names.
void check_compatible(const Network<float>& net, const Dataset& data);

/// Snapshot of a trainer for save_checkpoint().
CheckpointExtras checkpoint_extras(const Trainer& trainer, const Dataset& data, const RunConfig& config);

/// Restores trainer state and optimizer moments saved by checkpoint_extras().
void resume_trainer(Trainer& trainer, const CheckpointExtras& extras);

/// Share of (positive test image, class) pairs with a planted box where the
/// grid cell at the peak of the top-contributing prototype's occurrence map
/// lies inside the rasterized box.
struct Localization {
  int hits = 0;
  int total = 0;
  double rate() const { return total ? static_cast<double>(hits) / total : 0.0; }
};
Localization localization_rate(const Network<float>& net, std::span<const PreparedSample> samples);

/// Per-class AUC table (markdown) for named evaluations.
std::string auc_table(const std::vector<std::string>& class_names,
                      const std::vector<std::pair<std::string, Evaluation>>& rows);

}  // namespace xprotonet

#endif  // XPROTONET_PIPELINE_HPP_
