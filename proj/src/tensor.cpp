#include "rinn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rinn/errors.hpp"

namespace rinn {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (auto extent : shape_) {
    if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_string(shape_));
  }
}

Tensor::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto extent : shape_) {
    if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_string(shape_));
  }
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index rank does not match tensor rank " + std::to_string(shape_.size()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range on axis " + std::to_string(axis));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
  Tensor out = *this;
  out.reshape(std::move(shape));
  return out;
}

void Tensor::reshape(Shape shape) {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void GroupLayout::validate(std::size_t channel_count) const {
  if (groups < 1 || period < 1) {
    throw LayoutError("group layout needs positive groups and period, got " +
                      std::to_string(groups) + "x" + std::to_string(period));
  }
  if (channels() != channel_count) {
    throw LayoutError("channel extent " + std::to_string(channel_count) + " is not " +
                      std::to_string(groups) + " groups x " + std::to_string(period) +
                      " orientations");
  }
}

int positive_mod(long long value, long long modulus) {
  long long r = value % modulus;
  if (r < 0) r += modulus;
  return static_cast<int>(r);
}

Tensor cyclic_shift_orientation(const Tensor& x, const GroupLayout& layout, int shift, int axis) {
  if (x.rank() == 0) throw DimensionError("cyclic shift needs a tensor with a channel axis");
  const int rank = static_cast<int>(x.rank());
  const int ax = axis < 0 ? rank + axis : axis;
  if (ax < 0 || ax >= rank) throw DimensionError("channel axis out of range");
  const std::size_t channels = x.dim(static_cast<std::size_t>(ax));
  layout.validate(channels);

  std::size_t outer = 1;
  for (int a = 0; a < ax; ++a) outer *= x.shape()[a];
  std::size_t inner = 1;
  for (int a = ax + 1; a < rank; ++a) inner *= x.shape()[a];

  const int p = layout.period;
  std::vector<std::size_t> source(channels);
  for (int g = 0; g < layout.groups; ++g) {
    for (int o = 0; o < p; ++o) {
      source[layout.channel(g, o)] = layout.channel(g, positive_mod(static_cast<long long>(o) - shift, p));
    }
  }

  Tensor out(x.shape());
  const double* in = x.raw();
  double* dst = out.raw();
  for (std::size_t b = 0; b < outer; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* from = in + (b * channels + source[c]) * inner;
      std::copy(from, from + inner, dst + (b * channels + c) * inner);
    }
  }
  return out;
}

CosSin exact_cos_sin(double angle_deg) {
  const double quarter = angle_deg / 90.0;
  if (std::isfinite(quarter) && quarter == std::round(quarter) && std::abs(quarter) < 1e15) {
    switch (positive_mod(static_cast<long long>(quarter), 4)) {
      case 0: return {1.0, 0.0};
      case 1: return {0.0, 1.0};
      case 2: return {-1.0, 0.0};
      default: return {0.0, -1.0};
    }
  }
  const double rad = angle_deg * (M_PI / 180.0);
  return {std::cos(rad), std::sin(rad)};
}

double sample_bilinear(const Tensor& plane, double row, double col) {
  const long long rows = static_cast<long long>(plane.dim(0));
  const long long cols = static_cast<long long>(plane.dim(1));
  const double r0f = std::floor(row);
  const double c0f = std::floor(col);
  const double fr = row - r0f;
  const double fc = col - c0f;
  if (r0f < -1.0 || c0f < -1.0 || r0f >= static_cast<double>(rows) || c0f >= static_cast<double>(cols)) {
    return 0.0;
  }
  const long long r0 = static_cast<long long>(r0f);
  const long long c0 = static_cast<long long>(c0f);
  auto value = [&](long long r, long long c) -> double {
    if (r < 0 || c < 0 || r >= rows || c >= cols) return 0.0;
    return plane[static_cast<std::size_t>(r * cols + c)];
  };
  if (fr == 0.0 && fc == 0.0) return value(r0, c0);
  return (1.0 - fr) * ((1.0 - fc) * value(r0, c0) + fc * value(r0, c0 + 1)) +
         fr * ((1.0 - fc) * value(r0 + 1, c0) + fc * value(r0 + 1, c0 + 1));
}

Tensor rotate_plane(const Tensor& plane, double angle_deg) {
  if (plane.rank() != 2) throw DimensionError("rotate_plane expects a 2-D tensor, got " + shape_string(plane.shape()));
  if (!std::isfinite(angle_deg)) throw ValidationError("rotation angle must be finite");
  const std::size_t rows = plane.dim(0);
  const std::size_t cols = plane.dim(1);
  const double center_r = (static_cast<double>(rows) - 1.0) / 2.0;
  const double center_c = (static_cast<double>(cols) - 1.0) / 2.0;
  const auto [cs, sn] = exact_cos_sin(angle_deg);

  Tensor out(plane.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double dy = static_cast<double>(r) - center_r;
    for (std::size_t c = 0; c < cols; ++c) {
      const double dx = static_cast<double>(c) - center_c;
      // Inverse map: content turns counterclockwise on screen (row axis down).
      const double src_c = center_c + cs * dx - sn * dy;
      const double src_r = center_r + sn * dx + cs * dy;
      out[r * cols + c] = sample_bilinear(plane, src_r, src_c);
    }
  }
  return out;
}

}  // namespace rinn
