#ifndef XPROTONET_LAYERS_HPP_
#define XPROTONET_LAYERS_HPP_

#include <random>
#include <string>

#include "xprotonet/common.hpp"

namespace xprotonet {

/// Spatial bookkeeping for a square-kernel 2D convolution.
struct ConvGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int in_height = 0;
  int in_width = 0;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

template <typename Dtype>
Mat<Dtype> im2col(const Mat<Dtype>& input, const ConvGeometry& g);

template <typename Dtype>
Mat<Dtype> col2im(const Mat<Dtype>& cols, const ConvGeometry& g);

/// Convolution with bias. Weight layout: out_channels x (in_channels*k*k),
/// column index (ci * k + ky) * k + kx.
template <typename Dtype>
struct ConvLayer {
  std::string name;
  ConvGeometry geometry;
  Mat<Dtype> weight;
  Vec<Dtype> bias;
  Mat<Dtype> weight_grad;
  Vec<Dtype> bias_grad;

  ConvLayer() = default;
  ConvLayer(std::string layer_name, const ConvGeometry& g);

  /// He-normal weights, zero bias.
  void initialize(std::mt19937_64& rng);
  void zero_grad();

  /// `cols` receives the im2col buffer needed by backward().
  Mat<Dtype> forward(const Mat<Dtype>& input, Mat<Dtype>* cols) const;

  /// `input_or_cols` is the layer input for pointwise layers and the im2col
  /// buffer otherwise. Accumulates parameter gradients when `accumulate` is
  /// set; returns the input gradient when `need_input_grad` is set.
  Mat<Dtype> backward(const Mat<Dtype>& input_or_cols, const Mat<Dtype>& grad_out,
                      bool need_input_grad, bool accumulate = true);

  template <typename Other>
  ConvLayer<Other> cast() const {
    ConvLayer<Other> out;
    out.name = name;
    out.geometry = geometry;
    out.weight = weight.template cast<Other>();
    out.bias = bias.template cast<Other>();
    out.weight_grad = Mat<Other>::Zero(weight.rows(), weight.cols());
    out.bias_grad = Vec<Other>::Zero(bias.size());
    return out;
  }
};

template <typename Dtype>
inline Mat<Dtype> relu(const Mat<Dtype>& x) {
  return x.cwiseMax(Dtype(0));
}

/// Gradient of relu given its pre-activation.
template <typename Dtype>
inline Mat<Dtype> relu_backward(const Mat<Dtype>& pre, const Mat<Dtype>& grad) {
  return (pre.array() > Dtype(0)).select(grad, Dtype(0));
}

template <typename Dtype>
inline Dtype sigmoid(Dtype z) {
  return Dtype(1) / (Dtype(1) + std::exp(-z));
}

}  // namespace xprotonet

#endif  // XPROTONET_LAYERS_HPP_
