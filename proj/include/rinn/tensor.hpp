#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace rinn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Every buffer starts on a 64-byte boundary. Vectorized reductions peel a
// prologue that depends on the start address, so unaligned buffers would make
// the summation order, and the last bits of results, vary between runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

// Dense row-major array of doubles. Values are owned; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, Storage data);
  Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}
  Tensor(Shape shape, std::initializer_list<double> data) : Tensor(std::move(shape), Storage(data)) {}

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }
  Storage& values() { return data_; }
  const Storage& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Row-major element access; the number of indices must equal rank().
  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Tensor reshaped(Shape shape) const;
  void reshape(Shape shape);

  void fill(double value);
  double sum() const;
  double max_abs() const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  Storage data_;
};

// Channel layout of a feature map whose channels are m rotate groups of p
// orientation channels each: channel c = g * p + o.
struct GroupLayout {
  int groups = 1;
  int period = 1;

  std::size_t channels() const {
    return static_cast<std::size_t>(groups) * static_cast<std::size_t>(period);
  }
  std::size_t channel(int group, int orientation) const {
    return static_cast<std::size_t>(group) * period + orientation;
  }
  // Throws LayoutError unless both counts are positive and the product
  // matches `channel_count`.
  void validate(std::size_t channel_count) const;

  friend bool operator==(const GroupLayout&, const GroupLayout&) = default;
};

// Cycles orientation channels within every rotate group along `axis`
// (default: last axis). Output channel g*p + o holds input channel
// g*p + ((o - shift) mod p).
Tensor cyclic_shift_orientation(const Tensor& x, const GroupLayout& layout,
                                int shift, int axis = -1);

// Rotates a 2-D plane counterclockwise by `angle_deg` about its center
// ((H-1)/2, (W-1)/2) using inverse-mapped bilinear sampling. Samples that
// fall outside the plane read as zero. Multiples of 90 degrees are exact
// index permutations.
Tensor rotate_plane(const Tensor& plane, double angle_deg);

// Bilinear read of a 2-D plane with zero outside the support.
double sample_bilinear(const Tensor& plane, double row, double col);

// Exact (cos, sin) for multiples of 90 degrees, std::cos/std::sin otherwise.
struct CosSin {
  double c;
  double s;
};
CosSin exact_cos_sin(double angle_deg);

int positive_mod(long long value, long long modulus);

}  // namespace rinn
