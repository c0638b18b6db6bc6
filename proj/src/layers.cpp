#include "xprotonet/layers.hpp"

#include <cmath>

namespace xprotonet {

template <typename Dtype>
Mat<Dtype> im2col(const Mat<Dtype>& input, const ConvGeometry& g) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int k = g.kernel;
  Mat<Dtype> cols = Mat<Dtype>::Zero(g.in_channels * k * k, oh * ow);
  for (int ci = 0; ci < g.in_channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int row = (ci * k + ky) * k + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_width) continue;
            cols(row, oy * ow + ox) = input(ci, iy * g.in_width + ix);
          }
        }
      }
    }
  }
  return cols;
}

template <typename Dtype>
Mat<Dtype> col2im(const Mat<Dtype>& cols, const ConvGeometry& g) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int k = g.kernel;
  Mat<Dtype> out = Mat<Dtype>::Zero(g.in_channels, g.in_height * g.in_width);
  for (int ci = 0; ci < g.in_channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int row = (ci * k + ky) * k + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_width) continue;
            out(ci, iy * g.in_width + ix) += cols(row, oy * ow + ox);
          }
        }
      }
    }
  }
  return out;
}

template <typename Dtype>
ConvLayer<Dtype>::ConvLayer(std::string layer_name, const ConvGeometry& g)
    : name(std::move(layer_name)), geometry(g) {
  const int fan_in = g.in_channels * g.kernel * g.kernel;
  weight = Mat<Dtype>::Zero(g.out_channels, fan_in);
  bias = Vec<Dtype>::Zero(g.out_channels);
  weight_grad = Mat<Dtype>::Zero(g.out_channels, fan_in);
  bias_grad = Vec<Dtype>::Zero(g.out_channels);
}

template <typename Dtype>
void ConvLayer<Dtype>::initialize(std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(weight.cols());
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  for (Eigen::Index j = 0; j < weight.cols(); ++j)
    for (Eigen::Index i = 0; i < weight.rows(); ++i)
      weight(i, j) = static_cast<Dtype>(normal(rng));
  bias.setZero();
}

template <typename Dtype>
void ConvLayer<Dtype>::zero_grad() {
  weight_grad.setZero();
  bias_grad.setZero();
}

template <typename Dtype>
Mat<Dtype> ConvLayer<Dtype>::forward(const Mat<Dtype>& input, Mat<Dtype>* cols) const {
  if (input.rows() != geometry.in_channels ||
      input.cols() != geometry.in_height * geometry.in_width) {
    throw ConfigError("layer " + name + ": input shape mismatch");
  }
  Mat<Dtype> out;
  if (geometry.pointwise()) {
    out.noalias() = weight * input;
  } else {
    Mat<Dtype> c = im2col(input, geometry);
    out.noalias() = weight * c;
    if (cols) *cols = std::move(c);
  }
  out.colwise() += bias;
  return out;
}

template <typename Dtype>
Mat<Dtype> ConvLayer<Dtype>::backward(const Mat<Dtype>& input_or_cols,
                                      const Mat<Dtype>& grad_out,
                                      bool need_input_grad, bool accumulate) {
  if (accumulate) {
    weight_grad.noalias() += grad_out * input_or_cols.transpose();
    bias_grad += grad_out.rowwise().sum();
  }
  if (!need_input_grad) return {};
  Mat<Dtype> dcols;
  dcols.noalias() = weight.transpose() * grad_out;
  if (geometry.pointwise()) return dcols;
  return col2im(dcols, geometry);
}

template Mat<float> im2col(const Mat<float>&, const ConvGeometry&);
template Mat<double> im2col(const Mat<double>&, const ConvGeometry&);
template Mat<float> col2im(const Mat<float>&, const ConvGeometry&);
template Mat<double> col2im(const Mat<double>&, const ConvGeometry&);
template struct ConvLayer<float>;
template struct ConvLayer<double>;

}  // namespace xprotonet
