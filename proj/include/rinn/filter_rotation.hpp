#pragma once

#include "rinn/tensor.hpp"

namespace rinn {

// Trained base kernels before expansion. kernels: [kh, kw, c_in, m];
// input_layout describes c_in (period 1 for raw image input).
struct BaseBank {
  Tensor kernels;
  GroupLayout input_layout;
};

// m base filters x p orientations. Output channel i*p + j holds base filter
// i rotated by j * step_deg with its input channels cycled by j.
struct RotatedBank {
  Tensor kernels;  // [kh, kw, c_in, m*p]
  int base_count = 0;
  int period = 0;
  double step_deg = 0.0;

  GroupLayout layout() const { return {base_count, period}; }
};

// Rotates every input-channel plane of a [kh, kw, c_in] kernel by `angle_deg`
// and then cycles its channels by `shift` inside each rotate group of the
// input layout. Without the channel cycle a rotated deeper-layer kernel
// would read the wrong orientation channels of its input.
Tensor rotate_kernel(const Tensor& kernel, double angle_deg, const GroupLayout& input_layout, int shift);

// Expands the base bank to m*p channels spaced 360/n degrees apart.
// Requires p | n. Rotation j uses channel shift j mod (input period).
RotatedBank expand_bank(const BaseBank& base, int n, int p);

// order 1: identity. order 2: average of each plane with its 180-degree
// rotation, giving kernels that are safe to use with period n/2.
Tensor symmetrize_kernel(const Tensor& kernel, int order);

// Extracts output channel `index` of a [kh, kw, c_in, c_out] tensor.
Tensor kernel_slice(const Tensor& kernels, std::size_t index);
void set_kernel_slice(Tensor& kernels, std::size_t index, const Tensor& kernel);

}  // namespace rinn
