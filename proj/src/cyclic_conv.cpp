#include "rinn/cyclic_conv.hpp"

#include "linalg.hpp"
#include "rinn/errors.hpp"

namespace rinn {

namespace {

using detail::ConstRowMap;
using detail::RowMap;
using detail::RowMatrix;

std::vector<std::size_t> shifted_channels(const GroupLayout& layout, int t) {
  std::vector<std::size_t> source(layout.channels());
  for (int g = 0; g < layout.groups; ++g) {
    for (int o = 0; o < layout.period; ++o) {
      source[layout.channel(g, o)] = layout.channel(g, (o + t) % layout.period);
    }
  }
  return source;
}

// Patch matrix of the orientation-offset input: column (di, dj, c) reads
// channel source[c].
RowMatrix shifted_patches(const Tensor& x, std::size_t kh, std::size_t kw, const std::vector<std::size_t>& source) {
  const std::size_t width = x.dim(1), channels = x.dim(2);
  const std::size_t out_h = x.dim(0) - kh + 1, out_w = width - kw + 1;
  RowMatrix patches(out_h * out_w, kh * kw * channels);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      double* row = patches.data() + (i * out_w + j) * patches.cols();
      for (std::size_t di = 0; di < kh; ++di) {
        for (std::size_t dj = 0; dj < kw; ++dj) {
          const double* pixel = x.raw() + ((i + di) * width + j + dj) * channels;
          double* dst = row + (di * kw + dj) * channels;
          for (std::size_t c = 0; c < channels; ++c) dst[c] = pixel[source[c]];
        }
      }
    }
  }
  return patches;
}

void check_input(const Tensor& x, const CyclicConvLayer& layer) {
  layer.validate();
  if (x.rank() != 3) throw DimensionError("cyclic conv expects [H, W, m*p], got " + shape_string(x.shape()));
  layer.layout.validate(x.dim(2));
  if (x.dim(0) < layer.kernel_h() || x.dim(1) < layer.kernel_w()) {
    throw DimensionError("cyclic conv input smaller than its kernel");
  }
}

}  // namespace

void CyclicConvLayer::validate() const {
  if (kernels.rank() != 4) throw DimensionError("cyclic kernels must be [sh, sw, m*p, k], got " + shape_string(kernels.shape()));
  layout.validate(kernels.dim(2));
  if (bias.rank() != 1 || bias.dim(0) != kernels.dim(3)) throw DimensionError("cyclic bias does not match kernel count");
}

Tensor cyclic_conv_forward(const Tensor& x, const CyclicConvLayer& layer) {
  check_input(x, layer);
  const std::size_t kh = layer.kernel_h(), kw = layer.kernel_w();
  const std::size_t out_h = x.dim(0) - kh + 1, out_w = x.dim(1) - kw + 1;
  const std::size_t k = layer.out_kernels();
  const std::size_t p = static_cast<std::size_t>(layer.layout.period);
  const std::size_t pixels = out_h * out_w;

  ConstRowMap wm(layer.kernels.raw(), static_cast<Eigen::Index>(kh * kw * x.dim(2)), static_cast<Eigen::Index>(k));
  Tensor y({out_h, out_w, k, p});
  RowMatrix slice(pixels, k);
  for (std::size_t t = 0; t < p; ++t) {
    const RowMatrix patches = shifted_patches(x, kh, kw, shifted_channels(layer.layout, static_cast<int>(t)));
    slice.noalias() = patches * wm;
    for (std::size_t r = 0; r < pixels; ++r) {
      for (std::size_t c = 0; c < k; ++c) y[(r * k + c) * p + t] = slice(r, c) + layer.bias[c];
    }
  }
  return y;
}

CyclicConvGrads cyclic_conv_backward(const Tensor& x, const CyclicConvLayer& layer, const Tensor& dy, bool need_dx) {
  check_input(x, layer);
  const std::size_t kh = layer.kernel_h(), kw = layer.kernel_w();
  const std::size_t out_h = x.dim(0) - kh + 1, out_w = x.dim(1) - kw + 1;
  const std::size_t k = layer.out_kernels();
  const std::size_t p = static_cast<std::size_t>(layer.layout.period);
  const std::size_t pixels = out_h * out_w;
  const std::size_t channels = x.dim(2);
  if (dy.shape() != Shape{out_h, out_w, k, p}) {
    throw DimensionError("cyclic conv dY " + shape_string(dy.shape()) + " does not match output");
  }

  CyclicConvGrads grads{Tensor(), Tensor(layer.kernels.shape()), Tensor(layer.bias.shape())};
  if (need_dx) grads.dx = Tensor(x.shape());
  ConstRowMap wm(layer.kernels.raw(), static_cast<Eigen::Index>(kh * kw * channels), static_cast<Eigen::Index>(k));
  RowMap dwm(grads.dkernels.raw(), wm.rows(), wm.cols());

  RowMatrix dslice(pixels, k);
  for (std::size_t t = 0; t < p; ++t) {
    for (std::size_t r = 0; r < pixels; ++r) {
      for (std::size_t c = 0; c < k; ++c) {
        const double g = dy[(r * k + c) * p + t];
        dslice(r, c) = g;
        grads.dbias[c] += g;
      }
    }
    const auto source = shifted_channels(layer.layout, static_cast<int>(t));
    const RowMatrix patches = shifted_patches(x, kh, kw, source);
    dwm.noalias() += patches.transpose() * dslice;
    if (!need_dx) continue;
    const RowMatrix dpatches = dslice * wm.transpose();
    for (std::size_t i = 0; i < out_h; ++i) {
      for (std::size_t j = 0; j < out_w; ++j) {
        const double* row = dpatches.data() + (i * out_w + j) * dpatches.cols();
        for (std::size_t di = 0; di < kh; ++di) {
          for (std::size_t dj = 0; dj < kw; ++dj) {
            double* pixel = grads.dx.raw() + ((i + di) * x.dim(1) + j + dj) * channels;
            const double* src = row + (di * kw + dj) * channels;
            for (std::size_t c = 0; c < channels; ++c) pixel[source[c]] += src[c];
          }
        }
      }
    }
  }
  return grads;
}

CyclicConvLayer identity_init(const GroupLayout& layout) {
  layout.validate(layout.channels());
  const std::size_t m = static_cast<std::size_t>(layout.groups);
  CyclicConvLayer layer{Tensor({1, 1, layout.channels(), m}), Tensor({m}), layout};
  for (int g = 0; g < layout.groups; ++g) {
    layer.kernels[layout.channel(g, 0) * m + static_cast<std::size_t>(g)] = 1.0;
  }
  return layer;
}

}  // namespace rinn
