#ifndef XPROTONET_IMAGING_HPP_
#define XPROTONET_IMAGING_HPP_

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "xprotonet/common.hpp"

namespace xprotonet {

/// Planar (channel, row, column) float image.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  bool empty() const { return pixels.empty(); }
};

/// channels x (height*width) matrix view of an image.
Mat<float> to_matrix(const Image& image);
Image from_matrix(const Mat<float>& m, int height, int width);

/// Bilinear resize with edge clamping, pixel-center aligned.
Mat<float> bilinear_resize(const Mat<float>& src, int src_h, int src_w, int dst_h, int dst_w);
Image bilinear_resize(const Image& src, int dst_h, int dst_w);

/// Nearest-neighbour resize of a binary mask.
std::vector<std::uint8_t> nearest_resize(const std::vector<std::uint8_t>& mask, int src_h, int src_w,
                                         int dst_h, int dst_w);

/// A 2D affine resampling on a fixed h x w grid, stored as a sparse linear
/// operator: each output pixel bilinearly samples the input at
/// center + inverse * (p - center), with zero outside the input.
/// Coordinates are continuous with pixel i covering [i, i+1).
class WarpOperator {
 public:
  WarpOperator() = default;

  /// Shrinks (ratio < 1) or enlarges content about the center.
  static WarpOperator center_scale(int height, int width, double ratio);
  /// Rotation (degrees, counter-clockwise) combined with isotropic scaling.
  static WarpOperator rotate_scale(int height, int width, double degrees, double scale);

  int height() const { return height_; }
  int width() const { return width_; }

  template <typename Dtype>
  Mat<Dtype> apply(const Mat<Dtype>& input) const;
  /// Transpose of apply(); used to backpropagate through the warp.
  template <typename Dtype>
  Mat<Dtype> apply_adjoint(const Mat<Dtype>& grad_out) const;

  /// Forward image of an input-space point (continuous coordinates).
  std::array<double, 2> map_point(double x, double y) const;

 private:
  struct Taps {
    std::array<int, 4> index{-1, -1, -1, -1};
    std::array<double, 4> weight{0, 0, 0, 0};
  };
  static WarpOperator build(int height, int width, const std::array<double, 4>& inverse);

  int height_ = 0;
  int width_ = 0;
  std::array<double, 4> forward_{1, 0, 0, 1};  // row-major 2x2 about the center
  std::vector<Taps> taps_;
};

/// The center-resize transforms used by the transformation loss, prebuilt for
/// image space and feature-grid space.
class ResizeTransformSet {
 public:
  struct Transform {
    double ratio = 1.0;
    const WarpOperator* image = nullptr;
    const WarpOperator* map = nullptr;
  };

  ResizeTransformSet(std::vector<double> ratios, int image_h, int image_w, int grid_h, int grid_w);

  /// Uniform draw over the configured ratios.
  Transform sample(std::mt19937_64& rng) const;
  Transform get(std::size_t index) const;
  std::size_t size() const { return ratios_.size(); }

 private:
  std::vector<double> ratios_;
  std::vector<WarpOperator> image_ops_;
  std::vector<WarpOperator> map_ops_;
};

}  // namespace xprotonet

#endif  // XPROTONET_IMAGING_HPP_
