#ifndef XPROTONET_OBJECTIVES_HPP_
#define XPROTONET_OBJECTIVES_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "xprotonet/common.hpp"
#include "xprotonet/imaging.hpp"
#include "xprotonet/model.hpp"

namespace xprotonet {

/// Probabilities are clamped to [eps, 1 - eps] before taking logs.
inline constexpr double kProbabilityEpsilon = 1e-7;

struct LossConfig {
  double lambda_clst = 0.5;
  double lambda_sep = 0.5;
  double lambda_occur = 0.5;
  double gamma = 2.0;
  // Cluster/separation weights for box-annotated samples (prior condition).
  double annotated_lambda_clst = 1.5;
  double annotated_lambda_sep = 1.5;

  void validate() const;
};

/// Loss components for one batch. `clst`/`sep` cover unannotated samples and
/// the `_annotated` fields cover box-annotated ones (zero outside prior mode).
struct LossBreakdown {
  double cls = 0.0;
  double clst = 0.0;
  double sep = 0.0;
  double clst_annotated = 0.0;
  double sep_annotated = 0.0;
  double occur = 0.0;  // includes trans
  double trans = 0.0;
  double total = 0.0;
  std::vector<double> per_class_cls;

  /// cls + lambda_clst*clst + lambda_sep*sep + annotated terms + lambda_occur*occur.
  double combine(const LossConfig& config) const;
  LossBreakdown& operator+=(const LossBreakdown& other);
  LossBreakdown scaled(double factor) const;
};

struct BatchLabels {
  int batch_size = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> y;  // batch_size x num_classes, row-major
  std::vector<int> num_pos;
  std::vector<int> num_neg;

  static BatchLabels from_rows(std::span<const std::vector<std::uint8_t>> rows, int num_classes);
  bool positive(int i, int c) const { return y[static_cast<std::size_t>(i) * num_classes + c] != 0; }
};

/// One sample's weighted-balance classification term and its derivative with
/// respect to the logit. `count` is N_pos (positive) or N_neg (negative);
/// a zero count contributes nothing.
double classification_term(double logit, bool positive, int count, double gamma, double* dlogit);

/// Weighted balance loss summed over classes and samples.
/// `probabilities` is batch x classes.
double classification_loss(const Mat<double>& probabilities, const BatchLabels& labels, double gamma,
                           std::vector<double>* per_class = nullptr);

struct ClusterSeparation {
  double clst = 0.0;
  double sep = 0.0;
};

/// `similarities[i]` is the C x K similarity matrix of sample i.
ClusterSeparation cluster_separation_losses(std::span<const Mat<double>> similarities,
                                            const BatchLabels& labels);

/// Sum of element-wise absolute differences between M(A(x)) and A(M(x)).
double transformation_loss(const Mat<double>& maps_of_transformed_input,
                           const Mat<double>& transformed_maps);

/// trans_term + sum of all map entries; with a mask, only cells outside it.
double occurrence_loss(const Mat<double>& maps, double trans_term, const GridMask* box_mask = nullptr);

/// Fills `total` from the components.
LossBreakdown total_loss(LossBreakdown components, const LossConfig& config);

/// Occurrence-weighted pooling restricted to cells inside the box mask.
/// Throws ConfigError for an empty mask.
template <typename Dtype>
Vec<Dtype> bbox_pooled_feature(const Mat<Dtype>& features, const Eigen::Ref<const Vec<Dtype>>& occurrence,
                               const GridMask& box_mask);

// ---------------------------------------------------------------------------
// Batch objective with gradients.

template <typename Dtype>
struct TrainingExample {
  const Mat<Dtype>* image = nullptr;
  const std::vector<std::uint8_t>* labels = nullptr;
  bool annotated = false;
  // Per-class box masks on the feature grid (annotated samples only).
  std::vector<std::optional<GridMask>> box_masks;
  // Resize used by the transformation loss; none disables the term.
  std::optional<ResizeTransformSet::Transform> transform;
};

/// Multipliers applied to each component when forming the objective.
struct TermWeights {
  double cls = 1.0;
  double clst = 0.0;
  double sep = 0.0;
  double clst_annotated = 0.0;
  double sep_annotated = 0.0;
  double occurrence_l1 = 0.0;
  double trans = 0.0;

  static TermWeights from(const LossConfig& config);
};

struct ObjectiveOptions {
  TermWeights weights;
  bool backward = false;
  TrainableGroups trainable;
  // Classes left out of the cluster/separation terms.
  std::vector<bool> excluded_classes;
};

/// Evaluates the objective on a batch and, when requested, accumulates
/// parameter gradients into `net` (gradients are not zeroed here).
/// `total` in the result is the weighted sum under `options.weights`.
template <typename Dtype>
LossBreakdown batch_objective(Network<Dtype>& net, std::span<const TrainingExample<Dtype>> batch,
                              const LossConfig& config, const ObjectiveOptions& options);

}  // namespace xprotonet

#endif  // XPROTONET_OBJECTIVES_HPP_
