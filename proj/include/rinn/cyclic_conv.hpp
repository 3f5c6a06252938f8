#pragma once

#include "rinn/tensor.hpp"

namespace rinn {

// 3-D convolution over (y, x, orientation) whose orientation extent spans the
// whole channel axis and whose orientation padding wraps around inside each
// rotate group.
//
// kernels: [sh, sw, m*p, k], bias: [k], layout: (m, p) of the input channels.
struct CyclicConvLayer {
  Tensor kernels;
  Tensor bias;
  GroupLayout layout;

  std::size_t kernel_h() const { return kernels.dim(0); }
  std::size_t kernel_w() const { return kernels.dim(1); }
  std::size_t out_kernels() const { return kernels.dim(3); }
  void validate() const;
};

struct CyclicConvGrads {
  Tensor dx;
  Tensor dkernels;
  Tensor dbias;
};

// y[i, j, c, t] = bias[c] + sum kernels[di, dj, g*p + o, c] * x[i+di, j+dj, g*p + (o+t) mod p]
// Output shape [H - sh + 1, W - sw + 1, k, p].
Tensor cyclic_conv_forward(const Tensor& x, const CyclicConvLayer& layer);
CyclicConvGrads cyclic_conv_backward(const Tensor& x, const CyclicConvLayer& layer, const Tensor& dy,
                                     bool need_dx = true);

// 1x1 layer with one output kernel per group that copies the group's
// orientation-0 channel, so the forward pass re-indexes the input as
// [H, W, m, p].
CyclicConvLayer identity_init(const GroupLayout& layout);

}  // namespace rinn
