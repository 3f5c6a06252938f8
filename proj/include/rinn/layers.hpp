#pragma once

#include <cstddef>
#include <vector>

#include "rinn/tensor.hpp"

namespace rinn {

// Valid (unpadded) 2-D cross-correlation over [H, W, C] feature maps.
// weights: [kh, kw, c_in, c_out], bias: [c_out].
struct Conv2DLayer {
  Tensor weights;
  Tensor bias;

  std::size_t kernel_h() const { return weights.dim(0); }
  std::size_t kernel_w() const { return weights.dim(1); }
  std::size_t in_channels() const { return weights.dim(2); }
  std::size_t out_channels() const { return weights.dim(3); }
  void validate() const;
};

// Fully connected layer on a flattened input. weights: [d_in, d_out].
struct DenseLayer {
  Tensor weights;
  Tensor bias;

  std::size_t in_features() const { return weights.dim(0); }
  std::size_t out_features() const { return weights.dim(1); }
  void validate() const;
};

struct Conv2DGrads {
  Tensor dx;
  Tensor dweights;
  Tensor dbias;
};

using DenseGrads = Conv2DGrads;

Tensor conv2d_forward(const Tensor& x, const Conv2DLayer& layer);
// When `need_dx` is false the returned dx is empty.
Conv2DGrads conv2d_backward(const Tensor& x, const Conv2DLayer& layer, const Tensor& dy,
                            bool need_dx = true);

Tensor dense_forward(const Tensor& x, const DenseLayer& layer);
DenseGrads dense_backward(const Tensor& x, const DenseLayer& layer, const Tensor& dy,
                          bool need_dx = true);

struct PoolResult {
  Tensor y;
  // Flat index into the input for every output element.
  std::vector<std::size_t> argmax;
};

// Disjoint 2x2 max pooling; ties resolve to the first element in row-major
// window order.
PoolResult maxpool2_forward(const Tensor& x);
Tensor maxpool2_backward(const std::vector<std::size_t>& argmax, const Shape& input_shape,
                         const Tensor& dy);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);

struct LossResult {
  double loss = 0.0;
  Tensor dlogits;
};

Tensor softmax(const Tensor& logits);
double log_sum_exp(std::span<const double> logits);

// loss = logsumexp(logits) - <label, logits>, dlogits = softmax(logits) - label.
// `label` may be sub-stochastic; the all-zero label marks background.
LossResult softmax_loss(const Tensor& logits, const Tensor& label);

}  // namespace rinn
