#ifndef XPROTONET_OPTIMIZER_HPP_
#define XPROTONET_OPTIMIZER_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xprotonet/model.hpp"

namespace xprotonet {

struct OptimizerConfig {
  std::string kind = "adam";
  double lr_backbone = 1e-4;
  double lr_feature = 1e-3;
  double lr_occurrence = 1e-3;
  double lr_prototypes = 1e-3;
  double lr_head = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  double learning_rate(ParamGroup group) const;
  void validate() const;
};

/// Adam with one learning rate per parameter group. Moments are keyed by
/// parameter name and only advance for parameters that are updated.
template <typename Dtype>
class Adam {
 public:
  struct Slot {
    Vec<Dtype> m;
    Vec<Dtype> v;
    std::int64_t steps = 0;
  };

  explicit Adam(OptimizerConfig config);

  /// Applies one update to every parameter whose group is trainable.
  void step(const std::vector<ParamView<Dtype>>& params, const TrainableGroups& trainable);

  const OptimizerConfig& config() const { return config_; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  OptimizerConfig config_;
  std::map<std::string, Slot> slots_;
};

}  // namespace xprotonet

#endif  // XPROTONET_OPTIMIZER_HPP_
