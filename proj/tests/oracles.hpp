#pragma once

// Test-only reference implementations. Written as direct transcriptions of
// the defining formulas, without sharing code with the library kernels.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "rinn/tensor.hpp"

namespace rinn::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline std::size_t random_extent(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// y[i,j,co] = b[co] + sum w[di,dj,ci,co] x[i+di,j+dj,ci]
inline Tensor conv2d_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const std::size_t KH = w.dim(0), KW = w.dim(1), CO = w.dim(3);
  Tensor y({H - KH + 1, W - KW + 1, CO});
  for (std::size_t i = 0; i + KH <= H; ++i)
    for (std::size_t j = 0; j + KW <= W; ++j)
      for (std::size_t co = 0; co < CO; ++co) {
        double acc = b[co];
        for (std::size_t di = 0; di < KH; ++di)
          for (std::size_t dj = 0; dj < KW; ++dj)
            for (std::size_t ci = 0; ci < C; ++ci)
              acc += w.at({di, dj, ci, co}) * x.at({i + di, j + dj, ci});
        y.at({i, j, co}) = acc;
      }
  return y;
}

inline Tensor maxpool_oracle(const Tensor& x) {
  Tensor y({x.dim(0) / 2, x.dim(1) / 2, x.dim(2)});
  for (std::size_t i = 0; i < y.dim(0); ++i)
    for (std::size_t j = 0; j < y.dim(1); ++j)
      for (std::size_t c = 0; c < y.dim(2); ++c)
        y.at({i, j, c}) = std::max(std::max(x.at({2 * i, 2 * j, c}), x.at({2 * i, 2 * j + 1, c})),
                                   std::max(x.at({2 * i + 1, 2 * j, c}), x.at({2 * i + 1, 2 * j + 1, c})));
  return y;
}

// y[i,j,c,t] = b[c] + sum k[di,dj,g*p+o,c] x[i+di,j+dj,g*p+(o+t)%p]
inline Tensor cyclic_oracle(const Tensor& x, const Tensor& k, const Tensor& b, int m, int p) {
  const std::size_t H = x.dim(0), W = x.dim(1);
  const std::size_t SH = k.dim(0), SW = k.dim(1), K = k.dim(3);
  Tensor y({H - SH + 1, W - SW + 1, K, static_cast<std::size_t>(p)});
  for (std::size_t i = 0; i + SH <= H; ++i)
    for (std::size_t j = 0; j + SW <= W; ++j)
      for (std::size_t c = 0; c < K; ++c)
        for (int t = 0; t < p; ++t) {
          double acc = b[c];
          for (std::size_t di = 0; di < SH; ++di)
            for (std::size_t dj = 0; dj < SW; ++dj)
              for (int g = 0; g < m; ++g)
                for (int o = 0; o < p; ++o)
                  acc += k.at({di, dj, static_cast<std::size_t>(g * p + o), c}) *
                         x.at({i + di, j + dj, static_cast<std::size_t>(g * p + (o + t) % p)});
          y.at({i, j, c, static_cast<std::size_t>(t)}) = acc;
        }
  return y;
}

// Scalar inverse-map bilinear rotation, counterclockwise on screen, about
// ((H-1)/2, (W-1)/2). Uses plain trig with no special cases.
inline Tensor rotate_oracle(const Tensor& img, double angle_deg) {
  const double a = angle_deg * M_PI / 180.0;
  const long H = static_cast<long>(img.dim(0)), W = static_cast<long>(img.dim(1));
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  Tensor out(img.shape());
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c) {
      // Screen coordinates with y pointing up.
      const double X = c - cx, Y = cy - r;
      const double sx = std::cos(a) * X + std::sin(a) * Y;
      const double sy = -std::sin(a) * X + std::cos(a) * Y;
      const double col = cx + sx, row = cy - sy;
      double acc = 0.0;
      for (long rr = static_cast<long>(std::floor(row)); rr <= static_cast<long>(std::floor(row)) + 1; ++rr)
        for (long cc = static_cast<long>(std::floor(col)); cc <= static_cast<long>(std::floor(col)) + 1; ++cc) {
          if (rr < 0 || cc < 0 || rr >= H || cc >= W) continue;
          const double wr = 1.0 - std::abs(row - rr), wc = 1.0 - std::abs(col - cc);
          acc += wr * wc * img[static_cast<std::size_t>(rr * W + cc)];
        }
      out[static_cast<std::size_t>(r * W + c)] = acc;
    }
  return out;
}

// Exact 90-degree counterclockwise turn of a square plane by index permutation:
// out[r][c] = in[c][N-1-r].
inline Tensor turn90_oracle(const Tensor& img) {
  const std::size_t n = img.dim(0);
  Tensor out(img.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) out.at({r, c}) = img.at({c, n - 1 - r});
  return out;
}

// Central finite differences of a scalar function over every entry of `param`.
inline Tensor numeric_gradient(Tensor& param, const std::function<double()>& f, double step = 1e-5) {
  Tensor g(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + step;
    const double up = f();
    param[i] = saved - step;
    const double down = f();
    param[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace rinn::testing
