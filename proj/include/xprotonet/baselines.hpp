#ifndef XPROTONET_BASELINES_HPP_
#define XPROTONET_BASELINES_HPP_

#include "xprotonet/common.hpp"

namespace xprotonet {

// Comparison baselines: ProtoPNet-style fixed r x r patches and global
// average pooling. Neither has an occurrence module.

/// Flattens the r x r patch whose top-left cell is (y, x) into a vector of
/// length r*r*D, ordered (dy, dx, d).
template <typename Dtype>
Vec<Dtype> extract_patch(const Mat<Dtype>& features, int grid_width, int r, int y, int x);

/// Adds a flattened patch gradient back onto the feature-map gradient.
template <typename Dtype>
void scatter_patch(Mat<Dtype>& features_grad, int grid_width, int r, int y, int x,
                   const Eigen::Ref<const Vec<Dtype>>& patch_grad);

template <typename Dtype>
struct PatchMatch {
  Dtype similarity = 0;
  int position = 0;  // row-major over the (H-r+1) x (W-r+1) valid positions
};

/// Max over all valid stride-1 positions of the cosine similarity between the
/// patch and the prototype. Ties resolve to the lowest position index.
/// Throws ConfigError if r exceeds the grid.
template <typename Dtype>
PatchMatch<Dtype> patch_similarity(const Mat<Dtype>& features, int grid_height, int grid_width,
                                   const Eigen::Ref<const Vec<Dtype>>& prototype, int r);

/// Mean over spatial locations.
template <typename Dtype>
Vec<Dtype> gap_pooled_feature(const Mat<Dtype>& features);

}  // namespace xprotonet

#endif  // XPROTONET_BASELINES_HPP_
