#include "xprotonet/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace xprotonet {

Mat<float> to_matrix(const Image& image) {
  using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  return Eigen::Map<const RowMajor>(image.pixels.data(), image.channels,
                                    static_cast<Eigen::Index>(image.height) * image.width);
}

Image from_matrix(const Mat<float>& m, int height, int width) {
  using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Image out(static_cast<int>(m.rows()), height, width);
  Eigen::Map<RowMajor>(out.pixels.data(), m.rows(), m.cols()) = m;
  return out;
}

namespace {

struct Axis {
  int i0;
  int i1;
  float t;
};

Axis clamp_axis(double pos, int size) {
  pos = std::clamp(pos, 0.0, static_cast<double>(size - 1));
  const int i0 = static_cast<int>(std::floor(pos));
  const int i1 = std::min(i0 + 1, size - 1);
  return {i0, i1, static_cast<float>(pos - i0)};
}

}  // namespace

Mat<float> bilinear_resize(const Mat<float>& src, int src_h, int src_w, int dst_h, int dst_w) {
  Mat<float> dst(src.rows(), static_cast<Eigen::Index>(dst_h) * dst_w);
  const double sy = static_cast<double>(src_h) / dst_h;
  const double sx = static_cast<double>(src_w) / dst_w;
  for (int y = 0; y < dst_h; ++y) {
    const Axis ay = clamp_axis((y + 0.5) * sy - 0.5, src_h);
    for (int x = 0; x < dst_w; ++x) {
      const Axis ax = clamp_axis((x + 0.5) * sx - 0.5, src_w);
      const float w00 = (1 - ay.t) * (1 - ax.t);
      const float w01 = (1 - ay.t) * ax.t;
      const float w10 = ay.t * (1 - ax.t);
      const float w11 = ay.t * ax.t;
      dst.col(y * dst_w + x) = w00 * src.col(ay.i0 * src_w + ax.i0) + w01 * src.col(ay.i0 * src_w + ax.i1) +
                               w10 * src.col(ay.i1 * src_w + ax.i0) + w11 * src.col(ay.i1 * src_w + ax.i1);
    }
  }
  return dst;
}

Image bilinear_resize(const Image& src, int dst_h, int dst_w) {
  if (src.height == dst_h && src.width == dst_w) return src;
  return from_matrix(bilinear_resize(to_matrix(src), src.height, src.width, dst_h, dst_w), dst_h, dst_w);
}

std::vector<std::uint8_t> nearest_resize(const std::vector<std::uint8_t>& mask, int src_h, int src_w,
                                         int dst_h, int dst_w) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(dst_h) * dst_w);
  for (int y = 0; y < dst_h; ++y) {
    const int iy = std::min(src_h - 1, static_cast<int>((y + 0.5) * src_h / dst_h));
    for (int x = 0; x < dst_w; ++x) {
      const int ix = std::min(src_w - 1, static_cast<int>((x + 0.5) * src_w / dst_w));
      out[y * dst_w + x] = mask[iy * src_w + ix];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

WarpOperator WarpOperator::build(int height, int width, const std::array<double, 4>& fwd) {
  WarpOperator op;
  op.height_ = height;
  op.width_ = width;
  op.forward_ = fwd;
  const double det = fwd[0] * fwd[3] - fwd[1] * fwd[2];
  const std::array<double, 4> inv{fwd[3] / det, -fwd[1] / det, -fwd[2] / det, fwd[0] / det};
  const double cx = width / 2.0;
  const double cy = height / 2.0;
  op.taps_.resize(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dx = x + 0.5 - cx;
      const double dy = y + 0.5 - cy;
      // Source position in index space (pixel centers at integers).
      const double src_x = cx + inv[0] * dx + inv[1] * dy - 0.5;
      const double src_y = cy + inv[2] * dx + inv[3] * dy - 0.5;
      const int x0 = static_cast<int>(std::floor(src_x));
      const int y0 = static_cast<int>(std::floor(src_y));
      const double tx = src_x - x0;
      const double ty = src_y - y0;
      Taps taps;
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      const double ws[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
      for (int t = 0; t < 4; ++t) {
        if (xs[t] < 0 || xs[t] >= width || ys[t] < 0 || ys[t] >= height || ws[t] == 0.0) continue;
        taps.index[t] = ys[t] * width + xs[t];
        taps.weight[t] = ws[t];
      }
      op.taps_[y * width + x] = taps;
    }
  }
  return op;
}

WarpOperator WarpOperator::center_scale(int height, int width, double ratio) {
  return build(height, width, {ratio, 0.0, 0.0, ratio});
}

WarpOperator WarpOperator::rotate_scale(int height, int width, double degrees, double scale) {
  const double rad = degrees * std::numbers::pi / 180.0;
  // Image rows grow downward, so a visually counter-clockwise rotation flips the sine sign.
  const double c = std::cos(rad) * scale;
  const double s = std::sin(rad) * scale;
  return build(height, width, {c, s, -s, c});
}

template <typename Dtype>
Mat<Dtype> WarpOperator::apply(const Mat<Dtype>& input) const {
  if (input.cols() != static_cast<Eigen::Index>(height_) * width_) {
    throw ConfigError("WarpOperator: input grid mismatch");
  }
  Mat<Dtype> out = Mat<Dtype>::Zero(input.rows(), input.cols());
  for (std::size_t o = 0; o < taps_.size(); ++o) {
    const Taps& t = taps_[o];
    for (int j = 0; j < 4; ++j)
      if (t.index[j] >= 0) out.col(o) += static_cast<Dtype>(t.weight[j]) * input.col(t.index[j]);
  }
  return out;
}

template <typename Dtype>
Mat<Dtype> WarpOperator::apply_adjoint(const Mat<Dtype>& grad_out) const {
  if (grad_out.cols() != static_cast<Eigen::Index>(height_) * width_) {
    throw ConfigError("WarpOperator: gradient grid mismatch");
  }
  Mat<Dtype> out = Mat<Dtype>::Zero(grad_out.rows(), grad_out.cols());
  for (std::size_t o = 0; o < taps_.size(); ++o) {
    const Taps& t = taps_[o];
    for (int j = 0; j < 4; ++j)
      if (t.index[j] >= 0) out.col(t.index[j]) += static_cast<Dtype>(t.weight[j]) * grad_out.col(o);
  }
  return out;
}

std::array<double, 2> WarpOperator::map_point(double x, double y) const {
  const double cx = width_ / 2.0;
  const double cy = height_ / 2.0;
  const double dx = x - cx;
  const double dy = y - cy;
  return {cx + forward_[0] * dx + forward_[1] * dy, cy + forward_[2] * dx + forward_[3] * dy};
}

template Mat<float> WarpOperator::apply(const Mat<float>&) const;
template Mat<double> WarpOperator::apply(const Mat<double>&) const;
template Mat<float> WarpOperator::apply_adjoint(const Mat<float>&) const;
template Mat<double> WarpOperator::apply_adjoint(const Mat<double>&) const;

// ---------------------------------------------------------------------------

ResizeTransformSet::ResizeTransformSet(std::vector<double> ratios, int image_h, int image_w, int grid_h,
                                       int grid_w)
    : ratios_(std::move(ratios)) {
  if (ratios_.empty()) throw ConfigError("train.affine_ratios: at least one ratio required");
  for (double r : ratios_) {
    if (!(r > 0.0)) throw ConfigError("train.affine_ratios: ratios must be positive");
    image_ops_.push_back(WarpOperator::center_scale(image_h, image_w, r));
    map_ops_.push_back(WarpOperator::center_scale(grid_h, grid_w, r));
  }
}

ResizeTransformSet::Transform ResizeTransformSet::sample(std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> pick(0, ratios_.size() - 1);
  return get(pick(rng));
}

ResizeTransformSet::Transform ResizeTransformSet::get(std::size_t index) const {
  return {ratios_.at(index), &image_ops_.at(index), &map_ops_.at(index)};
}

}  // namespace xprotonet
