#include "rinn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "linalg.hpp"
#include "rinn/errors.hpp"

namespace rinn {

namespace {

using detail::ConstRowMap;
using detail::RowMap;
using detail::RowMatrix;

void require_rank3(const Tensor& x, const char* what) {
  if (x.rank() != 3) {
    throw DimensionError(std::string(what) + " expects [H, W, C], got " + shape_string(x.shape()));
  }
}

// Rows are output pixels, columns are (di, dj, ci) in kernel order, so a
// row of the patch matrix dotted with a weight column is one output value.
RowMatrix im2col(const Tensor& x, std::size_t kh, std::size_t kw) {
  const std::size_t width = x.dim(1), channels = x.dim(2);
  const std::size_t out_h = x.dim(0) - kh + 1, out_w = width - kw + 1;
  const std::size_t span = kw * channels;
  RowMatrix patches(out_h * out_w, kh * span);
  const double* src = x.raw();
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      double* row = patches.data() + (i * out_w + j) * kh * span;
      for (std::size_t di = 0; di < kh; ++di) {
        const double* from = src + ((i + di) * width + j) * channels;
        std::copy(from, from + span, row + di * span);
      }
    }
  }
  return patches;
}

void col2im_add(const RowMatrix& patches, std::size_t kh, std::size_t kw, Tensor& dx) {
  const std::size_t width = dx.dim(1), channels = dx.dim(2);
  const std::size_t out_h = dx.dim(0) - kh + 1, out_w = width - kw + 1;
  const std::size_t span = kw * channels;
  double* dst = dx.raw();
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      const double* row = patches.data() + (i * out_w + j) * kh * span;
      for (std::size_t di = 0; di < kh; ++di) {
        double* to = dst + ((i + di) * width + j) * channels;
        const double* from = row + di * span;
        for (std::size_t e = 0; e < span; ++e) to[e] += from[e];
      }
    }
  }
}

void check_conv_input(const Tensor& x, const Conv2DLayer& layer) {
  require_rank3(x, "conv2d");
  layer.validate();
  if (x.dim(0) < layer.kernel_h() || x.dim(1) < layer.kernel_w()) {
    throw DimensionError("conv2d input " + shape_string(x.shape()) + " smaller than kernel " +
                         shape_string(layer.weights.shape()));
  }
  if (x.dim(2) != layer.in_channels()) {
    throw DimensionError("conv2d input has " + std::to_string(x.dim(2)) + " channels, kernel expects " +
                         std::to_string(layer.in_channels()));
  }
}

}  // namespace

void Conv2DLayer::validate() const {
  if (weights.rank() != 4) throw DimensionError("conv weights must be [kh, kw, c_in, c_out], got " + shape_string(weights.shape()));
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(3)) {
    throw DimensionError("conv bias " + shape_string(bias.shape()) + " does not match " + std::to_string(weights.dim(3)) + " outputs");
  }
}

void DenseLayer::validate() const {
  if (weights.rank() != 2) throw DimensionError("dense weights must be [d_in, d_out], got " + shape_string(weights.shape()));
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(1)) {
    throw DimensionError("dense bias " + shape_string(bias.shape()) + " does not match " + std::to_string(weights.dim(1)) + " outputs");
  }
}

Tensor conv2d_forward(const Tensor& x, const Conv2DLayer& layer) {
  check_conv_input(x, layer);
  const std::size_t kh = layer.kernel_h(), kw = layer.kernel_w();
  const std::size_t out_h = x.dim(0) - kh + 1, out_w = x.dim(1) - kw + 1;
  const std::size_t cout = layer.out_channels();
  const std::size_t depth = kh * kw * layer.in_channels();

  Tensor y({out_h, out_w, cout});
  RowMap ym(y.raw(), static_cast<Eigen::Index>(out_h * out_w), static_cast<Eigen::Index>(cout));
  ConstRowMap wm(layer.weights.raw(), static_cast<Eigen::Index>(depth), static_cast<Eigen::Index>(cout));
  if (kh == 1 && kw == 1) {
    ConstRowMap xm(x.raw(), ym.rows(), static_cast<Eigen::Index>(depth));
    ym.noalias() = xm * wm;
  } else {
    const RowMatrix patches = im2col(x, kh, kw);
    ym.noalias() = patches * wm;
  }
  const Eigen::Map<const Eigen::RowVectorXd> bias(layer.bias.raw(), static_cast<Eigen::Index>(cout));
  ym.rowwise() += bias;
  return y;
}

Conv2DGrads conv2d_backward(const Tensor& x, const Conv2DLayer& layer, const Tensor& dy, bool need_dx) {
  check_conv_input(x, layer);
  const std::size_t kh = layer.kernel_h(), kw = layer.kernel_w();
  const std::size_t out_h = x.dim(0) - kh + 1, out_w = x.dim(1) - kw + 1;
  const std::size_t cout = layer.out_channels();
  const std::size_t depth = kh * kw * layer.in_channels();
  if (dy.shape() != Shape{out_h, out_w, cout}) {
    throw DimensionError("conv2d dY " + shape_string(dy.shape()) + " does not match output " +
                         shape_string({out_h, out_w, cout}));
  }

  Conv2DGrads grads{Tensor(), Tensor(layer.weights.shape()), Tensor(layer.bias.shape())};
  ConstRowMap dym(dy.raw(), static_cast<Eigen::Index>(out_h * out_w), static_cast<Eigen::Index>(cout));
  ConstRowMap wm(layer.weights.raw(), static_cast<Eigen::Index>(depth), static_cast<Eigen::Index>(cout));
  RowMap dwm(grads.dweights.raw(), wm.rows(), wm.cols());
  Eigen::Map<Eigen::RowVectorXd>(grads.dbias.raw(), static_cast<Eigen::Index>(cout)) = dym.colwise().sum();

  if (kh == 1 && kw == 1) {
    ConstRowMap xm(x.raw(), dym.rows(), static_cast<Eigen::Index>(depth));
    dwm.noalias() = xm.transpose() * dym;
    if (need_dx) {
      grads.dx = Tensor(x.shape());
      RowMap dxm(grads.dx.raw(), xm.rows(), xm.cols());
      dxm.noalias() = dym * wm.transpose();
    }
    return grads;
  }

  const RowMatrix patches = im2col(x, kh, kw);
  dwm.noalias() = patches.transpose() * dym;
  if (need_dx) {
    grads.dx = Tensor(x.shape());
    const RowMatrix dpatches = dym * wm.transpose();
    col2im_add(dpatches, kh, kw, grads.dx);
  }
  return grads;
}

Tensor dense_forward(const Tensor& x, const DenseLayer& layer) {
  layer.validate();
  if (x.size() != layer.in_features()) {
    throw DimensionError("dense input has " + std::to_string(x.size()) + " values, layer expects " +
                         std::to_string(layer.in_features()));
  }
  Tensor y({layer.out_features()});
  ConstRowMap wm(layer.weights.raw(), static_cast<Eigen::Index>(layer.in_features()),
                 static_cast<Eigen::Index>(layer.out_features()));
  const Eigen::Map<const Eigen::RowVectorXd> xv(x.raw(), static_cast<Eigen::Index>(x.size()));
  const Eigen::Map<const Eigen::RowVectorXd> bias(layer.bias.raw(), static_cast<Eigen::Index>(layer.out_features()));
  Eigen::Map<Eigen::RowVectorXd>(y.raw(), static_cast<Eigen::Index>(y.size())) = xv * wm + bias;
  return y;
}

DenseGrads dense_backward(const Tensor& x, const DenseLayer& layer, const Tensor& dy, bool need_dx) {
  layer.validate();
  if (x.size() != layer.in_features() || dy.size() != layer.out_features()) {
    throw DimensionError("dense backward shape mismatch");
  }
  DenseGrads grads{Tensor(), Tensor(layer.weights.shape()), Tensor(layer.bias.shape(), dy.values())};
  const Eigen::Map<const Eigen::VectorXd> xv(x.raw(), static_cast<Eigen::Index>(x.size()));
  const Eigen::Map<const Eigen::RowVectorXd> dyv(dy.raw(), static_cast<Eigen::Index>(dy.size()));
  RowMap(grads.dweights.raw(), xv.rows(), dyv.cols()).noalias() = xv * dyv;
  if (need_dx) {
    grads.dx = Tensor(x.shape());
    ConstRowMap wm(layer.weights.raw(), xv.rows(), dyv.cols());
    Eigen::Map<Eigen::RowVectorXd>(grads.dx.raw(), xv.rows()).noalias() = dyv * wm.transpose();
  }
  return grads;
}

PoolResult maxpool2_forward(const Tensor& x) {
  require_rank3(x, "maxpool2");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("maxpool2 needs even spatial extents, got " + shape_string(x.shape()));
  }
  PoolResult result{Tensor({h / 2, w / 2, c}), std::vector<std::size_t>(h / 2 * w / 2 * c)};
  for (std::size_t i = 0; i < h / 2; ++i) {
    for (std::size_t j = 0; j < w / 2; ++j) {
      for (std::size_t k = 0; k < c; ++k) {
        std::size_t best = ((2 * i) * w + 2 * j) * c + k;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = ((2 * i + di) * w + 2 * j + dj) * c + k;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t out = (i * (w / 2) + j) * c + k;
        result.y[out] = x[best];
        result.argmax[out] = best;
      }
    }
  }
  return result;
}

Tensor maxpool2_backward(const std::vector<std::size_t>& argmax, const Shape& input_shape, const Tensor& dy) {
  if (argmax.size() != dy.size()) throw DimensionError("maxpool2 dY does not match recorded argmax");
  Tensor dx(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) {
    if (argmax[i] >= dx.size()) throw DimensionError("maxpool2 argmax index out of range");
    dx[argmax[i]] += dy[i];
  }
  return dx;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  if (x.shape() != dy.shape()) throw DimensionError("relu dY shape mismatch");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
  return dx;
}

double log_sum_exp(std::span<const double> logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double acc = 0.0;
  for (double v : logits) acc += std::exp(v - top);
  return top + std::log(acc);
}

Tensor softmax(const Tensor& logits) {
  if (logits.empty()) throw DimensionError("softmax of an empty vector");
  const double lse = log_sum_exp(logits.data());
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

LossResult softmax_loss(const Tensor& logits, const Tensor& label) {
  if (logits.size() != label.size() || logits.empty()) {
    throw DimensionError("softmax_loss label " + shape_string(label.shape()) + " does not match logits " +
                         shape_string(logits.shape()));
  }
  double mass = 0.0;
  for (double v : label.values()) {
    if (!(v >= 0.0)) throw ValidationError("softmax_loss label entries must be non-negative");
    mass += v;
  }
  if (mass > 1.0 + 1e-9) throw ValidationError("softmax_loss label mass exceeds 1");
  if (!logits.all_finite()) throw ValidationError("softmax_loss logits must be finite");

  LossResult result;
  result.loss = log_sum_exp(logits.data());
  for (std::size_t i = 0; i < logits.size(); ++i) result.loss -= label[i] * logits[i];
  result.dlogits = softmax(logits);
  for (std::size_t i = 0; i < logits.size(); ++i) result.dlogits[i] -= label[i];
  return result;
}

}  // namespace rinn
