#ifndef XPROTONET_TRAINER_HPP_
#define XPROTONET_TRAINER_HPP_

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xprotonet/data.hpp"
#include "xprotonet/imaging.hpp"
#include "xprotonet/model.hpp"
#include "xprotonet/objectives.hpp"
#include "xprotonet/optimizer.hpp"

namespace xprotonet {

enum class Stage { kWarmup, kJoint, kProject, kHead, kPrune, kDone };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct TrainConfig {
  int batch_size = 32;
  int warmup_epochs = 5;
  int early_stop_patience = 3;
  int max_joint_epochs = 30;
  int head_epochs = 5;
  int min_cycles = 2;
  int max_cycles = 10;
  // A cycle that raises the best validation mean AUC by less than this ends
  // the loop (once min_cycles have run).
  double convergence_tolerance = 1e-4;
  OptimizerConfig optimizer;
  bool prior_condition = false;
  // Prior condition: classes whose prototypes are tied to boxes. Empty means
  // every class with a box-annotated positive in the training split.
  std::vector<std::string> constrained_classes;
  bool augment = true;
  std::vector<double> affine_ratios = {0.75, 0.875};
  std::uint64_t seed = 0;

  void validate() const;
};

/// One line of the metrics log.
struct MetricsRecord {
  int cycle = 0;
  Stage stage = Stage::kWarmup;
  int epoch = 0;
  LossBreakdown loss;
  double val_mean_auc = 0.0;
};

std::string metrics_line(const MetricsRecord& record);
MetricsRecord parse_metrics_line(const std::string& line);

struct TrainState {
  int cycle = 0;
  Stage stage = Stage::kWarmup;
  int epoch = 0;         // epochs completed in the current stage
  int global_epoch = 0;  // training epochs completed overall
  double best_val_auc = 0.0;
  double stage_best_auc = 0.0;
  int stage_evaluations = 0;
  int epochs_since_improvement = 0;
  double cycle_start_best = 0.0;
  std::vector<MetricsRecord> history;
};

/// Parameter groups updated in a stage.
TrainableGroups trainable_for(Stage stage);

/// Drives warm-up, joint training with early stopping, projection and head
/// training until convergence, then prunes. One step() is one epoch or one
/// projection/pruning action, so a run can stop and resume at any step.
class Trainer {
 public:
  Trainer(Network<float>& net, std::span<const PreparedSample> train, std::span<const PreparedSample> val,
          TrainConfig config, LossConfig loss, PreprocessConfig preprocess);

  bool done() const { return state_.stage == Stage::kDone; }
  void step();
  /// Steps until done; `after_step` runs after every step.
  void run(const std::function<void(const Trainer&)>& after_step = {});

  /// Replaces the validation mean AUC computation (used by tests).
  void set_validation_metric(std::function<double()> metric) { metric_ = std::move(metric); }

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  Adam<float>& optimizer() { return optimizer_; }
  const Adam<float>& optimizer() const { return optimizer_; }
  Network<float>& network() { return net_; }
  const TrainConfig& config() const { return config_; }
  const LossConfig& loss_config() const { return loss_; }

  const std::vector<bool>& excluded_classes() const { return excluded_; }
  const std::vector<bool>& constrained_classes() const { return constrained_; }

  /// Training examples for one batch (augmented, with box masks and
  /// transforms as configured); owns the augmented images.
  struct Batch {
    std::vector<Mat<float>> images;
    std::vector<TrainingExample<float>> examples;
  };
  Batch make_batch(std::span<const std::size_t> indices, int epoch_seed_index) const;

  /// One pass over the training split with the given groups and weights.
  LossBreakdown train_epoch(const TrainableGroups& trainable, const TermWeights& weights);
  /// One head-only pass on cached similarities, classification loss only.
  LossBreakdown head_epoch();
  void project();
  double validation_auc();

 private:
  void record(const LossBreakdown& loss, double auc);
  void enter(Stage stage);
  void end_cycle();

  Network<float>& net_;
  std::span<const PreparedSample> train_;
  std::span<const PreparedSample> val_;
  TrainConfig config_;
  LossConfig loss_;
  PreprocessConfig preprocess_;
  Adam<float> optimizer_;
  std::unique_ptr<ResizeTransformSet> transforms_;
  std::vector<bool> excluded_;
  std::vector<bool> constrained_;
  bool any_constrained_ = false;
  std::vector<Mat<float>> head_cache_;
  std::function<double()> metric_;
  TrainState state_;
};

}  // namespace xprotonet

#endif  // XPROTONET_TRAINER_HPP_
