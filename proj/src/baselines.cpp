#include "xprotonet/baselines.hpp"

#include <string>

#include "xprotonet/model.hpp"

namespace xprotonet {

template <typename Dtype>
Vec<Dtype> extract_patch(const Mat<Dtype>& features, int grid_width, int r, int y, int x) {
  const Eigen::Index d = features.rows();
  Vec<Dtype> patch(r * r * d);
  for (int dy = 0; dy < r; ++dy)
    for (int dx = 0; dx < r; ++dx)
      patch.segment((dy * r + dx) * d, d) = features.col((y + dy) * grid_width + (x + dx));
  return patch;
}

template <typename Dtype>
void scatter_patch(Mat<Dtype>& features_grad, int grid_width, int r, int y, int x,
                   const Eigen::Ref<const Vec<Dtype>>& patch_grad) {
  const Eigen::Index d = features_grad.rows();
  for (int dy = 0; dy < r; ++dy)
    for (int dx = 0; dx < r; ++dx)
      features_grad.col((y + dy) * grid_width + (x + dx)) += patch_grad.segment((dy * r + dx) * d, d);
}

template <typename Dtype>
PatchMatch<Dtype> patch_similarity(const Mat<Dtype>& features, int grid_height, int grid_width,
                                   const Eigen::Ref<const Vec<Dtype>>& prototype, int r) {
  if (r < 1 || r > grid_height || r > grid_width) {
    throw ConfigError("patch size r=" + std::to_string(r) + " does not fit a " +
                      std::to_string(grid_height) + "x" + std::to_string(grid_width) + " grid");
  }
  if (features.cols() != grid_height * grid_width ||
      prototype.size() != static_cast<Eigen::Index>(r) * r * features.rows()) {
    throw ConfigError("patch_similarity: shape mismatch");
  }
  const int positions_x = grid_width - r + 1;
  PatchMatch<Dtype> best;
  bool first = true;
  for (int y = 0; y + r <= grid_height; ++y) {
    for (int x = 0; x < positions_x; ++x) {
      const Vec<Dtype> patch = extract_patch(features, grid_width, r, y, x);
      const Dtype s = cosine_similarity<Dtype>(patch, prototype);
      if (first || s > best.similarity) {
        best.similarity = s;
        best.position = y * positions_x + x;
        first = false;
      }
    }
  }
  return best;
}

template <typename Dtype>
Vec<Dtype> gap_pooled_feature(const Mat<Dtype>& features) {
  return features.rowwise().mean();
}

#define XPN_INSTANTIATE(T)                                                                  \
  template Vec<T> extract_patch(const Mat<T>&, int, int, int, int);                         \
  template void scatter_patch(Mat<T>&, int, int, int, int, const Eigen::Ref<const Vec<T>>&); \
  template PatchMatch<T> patch_similarity(const Mat<T>&, int, int,                          \
                                          const Eigen::Ref<const Vec<T>>&, int);            \
  template Vec<T> gap_pooled_feature(const Mat<T>&);
XPN_INSTANTIATE(float)
XPN_INSTANTIATE(double)
#undef XPN_INSTANTIATE

}  // namespace xprotonet
