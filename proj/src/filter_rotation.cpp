#include "rinn/filter_rotation.hpp"

#include <cmath>

#include "rinn/errors.hpp"

namespace rinn {

namespace {

// Applies `fn` to each [kh, kw] plane of a kernel whose last axis is the
// channel axis.
template <typename Fn>
Tensor map_planes(const Tensor& kernel, Fn&& fn) {
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const std::size_t planes = kernel.size() / (kh * kw);
  Tensor out(kernel.shape());
  Tensor plane({kh, kw});
  for (std::size_t c = 0; c < planes; ++c) {
    for (std::size_t e = 0; e < kh * kw; ++e) plane[e] = kernel[e * planes + c];
    const Tensor mapped = fn(plane);
    for (std::size_t e = 0; e < kh * kw; ++e) out[e * planes + c] = mapped[e];
  }
  return out;
}

}  // namespace

Tensor kernel_slice(const Tensor& kernels, std::size_t index) {
  if (kernels.rank() != 4) throw DimensionError("kernel bank must be [kh, kw, c_in, c_out]");
  const std::size_t kh = kernels.dim(0), kw = kernels.dim(1), cin = kernels.dim(2), cout = kernels.dim(3);
  if (index >= cout) throw DimensionError("kernel index out of range");
  Tensor out({kh, kw, cin});
  for (std::size_t e = 0; e < kh * kw * cin; ++e) out[e] = kernels[e * cout + index];
  return out;
}

void set_kernel_slice(Tensor& kernels, std::size_t index, const Tensor& kernel) {
  const std::size_t cout = kernels.dim(3);
  if (index >= cout || kernel.size() * cout != kernels.size()) {
    throw DimensionError("kernel slice does not fit bank " + shape_string(kernels.shape()));
  }
  for (std::size_t e = 0; e < kernel.size(); ++e) kernels[e * cout + index] = kernel[e];
}

Tensor rotate_kernel(const Tensor& kernel, double angle_deg, const GroupLayout& input_layout, int shift) {
  if (kernel.rank() != 3) throw DimensionError("rotate_kernel expects [kh, kw, c_in], got " + shape_string(kernel.shape()));
  input_layout.validate(kernel.dim(2));
  const Tensor rotated = map_planes(kernel, [&](const Tensor& plane) { return rotate_plane(plane, angle_deg); });
  if (input_layout.period == 1 || positive_mod(shift, input_layout.period) == 0) return rotated;
  return cyclic_shift_orientation(rotated, input_layout, shift, 2);
}

RotatedBank expand_bank(const BaseBank& base, int n, int p) {
  if (n < 1 || p < 1 || n % p != 0) {
    throw ConfigError("orientation period " + std::to_string(p) + " must divide resolution " + std::to_string(n));
  }
  if (base.kernels.rank() != 4) throw DimensionError("base bank must be [kh, kw, c_in, m]");
  if (!base.kernels.all_finite()) throw ValidationError("base kernels must be finite");
  base.input_layout.validate(base.kernels.dim(2));

  const std::size_t m = base.kernels.dim(3);
  const double step = 360.0 / n;
  RotatedBank bank;
  bank.base_count = static_cast<int>(m);
  bank.period = p;
  bank.step_deg = step;
  bank.kernels = Tensor({base.kernels.dim(0), base.kernels.dim(1), base.kernels.dim(2), m * static_cast<std::size_t>(p)});
  for (std::size_t i = 0; i < m; ++i) {
    const Tensor kernel = kernel_slice(base.kernels, i);
    for (int j = 0; j < p; ++j) {
      const int shift = j % base.input_layout.period;
      set_kernel_slice(bank.kernels, i * p + j, rotate_kernel(kernel, j * step, base.input_layout, shift));
    }
  }
  return bank;
}

Tensor symmetrize_kernel(const Tensor& kernel, int order) {
  if (order == 1) return kernel;
  if (order != 2) throw ConfigError("symmetrize_kernel supports order 1 or 2, got " + std::to_string(order));
  if (kernel.rank() < 2) throw DimensionError("symmetrize_kernel needs spatial axes");
  return map_planes(kernel, [](const Tensor& plane) {
    const Tensor turned = rotate_plane(plane, 180.0);
    Tensor avg(plane.shape());
    for (std::size_t e = 0; e < plane.size(); ++e) avg[e] = 0.5 * (plane[e] + turned[e]);
    return avg;
  });
}

}  // namespace rinn
