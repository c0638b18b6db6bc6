#include "xprotonet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace xprotonet {

std::optional<double> auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ConfigError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positive_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // Tied block occupies ranks i+1 .. j; each member gets the average.
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) {
        positive_rank_sum += rank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;
  const double p = static_cast<double>(positives);
  return (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

Evaluation evaluate_scores(const Mat<double>& probabilities, const std::vector<std::vector<std::uint8_t>>& labels) {
  if (static_cast<std::size_t>(probabilities.rows()) != labels.size()) {
    throw ConfigError("evaluate: probability rows and label rows differ");
  }
  Evaluation result;
  result.probabilities = probabilities;
  const int num_classes = static_cast<int>(probabilities.cols());
  double sum = 0.0;
  std::vector<double> scores(labels.size());
  std::vector<std::uint8_t> y(labels.size());
  for (int c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      scores[i] = probabilities(static_cast<Eigen::Index>(i), c);
      y[i] = labels[i].at(c);
    }
    result.per_class.push_back(auc(scores, y));
    if (result.per_class.back()) {
      sum += *result.per_class.back();
      ++result.defined_classes;
    }
  }
  result.mean_auc =
      result.defined_classes > 0 ? sum / result.defined_classes : std::numeric_limits<double>::quiet_NaN();
  return result;
}

template <typename Dtype>
Evaluation evaluate(const Network<Dtype>& net, std::span<const PreparedSample> samples) {
  const int num_classes = net.config().num_classes;
  Mat<double> probabilities(static_cast<Eigen::Index>(samples.size()), num_classes);
  std::vector<std::vector<std::uint8_t>> labels;
  labels.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ModelOutput<Dtype> out = net.forward(samples[i].image.template cast<Dtype>());
    probabilities.row(static_cast<Eigen::Index>(i)) = out.probabilities.template cast<double>().transpose();
    labels.push_back(samples[i].labels);
  }
  return evaluate_scores(probabilities, labels);
}

template Evaluation evaluate(const Network<float>&, std::span<const PreparedSample>);
template Evaluation evaluate(const Network<double>&, std::span<const PreparedSample>);

}  // namespace xprotonet
