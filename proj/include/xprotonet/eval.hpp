#ifndef XPROTONET_EVAL_HPP_
#define XPROTONET_EVAL_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "xprotonet/data.hpp"
#include "xprotonet/model.hpp"

namespace xprotonet {

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. Empty when the labels hold a single class.
std::optional<double> auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct Evaluation {
  std::vector<std::optional<double>> per_class;
  double mean_auc = 0.0;  // NaN when no class has a defined AUC
  int defined_classes = 0;
  Mat<double> probabilities;  // samples x classes
};

/// Per-class and mean AUC from a probability matrix (samples x classes).
Evaluation evaluate_scores(const Mat<double>& probabilities,
                           const std::vector<std::vector<std::uint8_t>>& labels);

/// Runs the network over the samples and scores them.
template <typename Dtype>
Evaluation evaluate(const Network<Dtype>& net, std::span<const PreparedSample> samples);

}  // namespace xprotonet

#endif  // XPROTONET_EVAL_HPP_
