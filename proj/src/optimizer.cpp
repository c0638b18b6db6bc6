#include "xprotonet/optimizer.hpp"

#include <cmath>

namespace xprotonet {

double OptimizerConfig::learning_rate(ParamGroup group) const {
  switch (group) {
    case ParamGroup::kBackbone: return lr_backbone;
    case ParamGroup::kFeature: return lr_feature;
    case ParamGroup::kOccurrence: return lr_occurrence;
    case ParamGroup::kPrototypes: return lr_prototypes;
    case ParamGroup::kHead: return lr_head;
  }
  return 0.0;
}

void OptimizerConfig::validate() const {
  if (kind != "adam") throw ConfigError("train.optimizer.kind: unsupported optimizer '" + kind + "' (available: adam)");
  const std::pair<const char*, double> rates[] = {{"lr_backbone", lr_backbone},
                                                  {"lr_feature", lr_feature},
                                                  {"lr_occurrence", lr_occurrence},
                                                  {"lr_prototypes", lr_prototypes},
                                                  {"lr_head", lr_head}};
  for (const auto& [key, value] : rates) {
    if (!(value > 0.0) || !std::isfinite(value)) {
      throw ConfigError(std::string("train.optimizer.") + key + ": must be positive");
    }
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.optimizer.beta1: must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.optimizer.beta2: must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("train.optimizer.epsilon: must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.optimizer.weight_decay: must be >= 0");
}

template <typename Dtype>
Adam<Dtype>::Adam(OptimizerConfig config) : config_(std::move(config)) {
  config_.validate();
}

template <typename Dtype>
void Adam<Dtype>::step(const std::vector<ParamView<Dtype>>& params, const TrainableGroups& trainable) {
  const Dtype b1 = static_cast<Dtype>(config_.beta1);
  const Dtype b2 = static_cast<Dtype>(config_.beta2);
  const Dtype eps = static_cast<Dtype>(config_.epsilon);
  const Dtype decay = static_cast<Dtype>(config_.weight_decay);
  for (const ParamView<Dtype>& p : params) {
    if (!trainable.contains(p.group)) continue;
    Slot& slot = slots_[p.name];
    if (slot.m.size() != p.size()) {
      slot.m = Vec<Dtype>::Zero(p.size());
      slot.v = Vec<Dtype>::Zero(p.size());
      slot.steps = 0;
    }
    ++slot.steps;
    const Dtype lr = static_cast<Dtype>(config_.learning_rate(p.group));
    const Dtype c1 = Dtype(1) - static_cast<Dtype>(std::pow(config_.beta1, static_cast<double>(slot.steps)));
    const Dtype c2 = Dtype(1) - static_cast<Dtype>(std::pow(config_.beta2, static_cast<double>(slot.steps)));
    Eigen::Map<Vec<Dtype>> value(p.value, p.size());
    Eigen::Map<const Vec<Dtype>> grad(p.grad, p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const Dtype g = grad(i) + decay * value(i);
      slot.m(i) = b1 * slot.m(i) + (Dtype(1) - b1) * g;
      slot.v(i) = b2 * slot.v(i) + (Dtype(1) - b2) * g * g;
      const Dtype m_hat = slot.m(i) / c1;
      const Dtype v_hat = slot.v(i) / c2;
      value(i) -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace xprotonet
