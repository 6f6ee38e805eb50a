#pragma once

// Shared oracles for the test suites. Everything here is written as plain
// reference code, independent of the library's lowering/graph paths.

#include <cmath>
#include <functional>
#include <vector>

#include "psp/rng.hpp"
#include "psp/tensor.hpp"

namespace psp::testing {

inline Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.next_gaussian();
  return t;
}

inline double rel_err(double analytic, double reference, double floor = 1e-4) {
  const double denom = std::max({std::fabs(analytic), std::fabs(reference), floor});
  return std::fabs(analytic - reference) / denom;
}

// Plain i-j-k triple loop.
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (int64_t i = 0; i < a.dim(0); ++i)
    for (int64_t j = 0; j < b.dim(1); ++j) {
      double sum = 0.0;
      for (int64_t k = 0; k < a.dim(1); ++k) sum += a.at2(i, k) * b.at2(k, j);
      c.at2(i, j) = sum;
    }
  return c;
}

// Direct 7-loop convolution, no lowering.
inline Tensor conv_oracle(const Tensor& w, const Tensor& x, const ConvGeometry& g) {
  const int64_t batch = x.dim(0), oh = g.out_h(), ow = g.out_w();
  Tensor y({batch, g.out_channels, oh, ow});
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t k = 0; k < g.out_channels; ++k)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          double sum = 0.0;
          for (int64_t c = 0; c < g.in_channels; ++c)
            for (int64_t r = 0; r < g.kernel_h; ++r)
              for (int64_t s = 0; s < g.kernel_w; ++s) {
                const int64_t iy = i * g.stride - g.padding + r;
                const int64_t ix = j * g.stride - g.padding + s;
                if (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                  sum += w.at4(k, c, r, s) * x.at4(n, c, iy, ix);
              }
          y.at4(n, k, i, j) = sum;
        }
  return y;
}

// Central finite differences of f with respect to every coordinate of p.
inline Tensor finite_difference(Tensor& p, const std::function<double()>& f, double h = 1e-5) {
  Tensor grad(p.shape());
  for (int64_t i = 0; i < p.numel(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double hi = f();
    p[i] = keep - h;
    const double lo = f();
    p[i] = keep;
    grad[i] = (hi - lo) / (2.0 * h);
  }
  return grad;
}

// One-vs-all ridge regression probe on flattened pixels; returns accuracy.
inline double linear_probe_accuracy(const Tensor& images, const std::vector<int>& labels,
                                    int classes, double ridge = 1e-3) {
  const int64_t n = images.dim(0);
  const int64_t d = images.numel() / n;
  // Normal equations: (X^T X + ridge I) W = X^T Y
  std::vector<double> xtx(static_cast<size_t>(d * d), 0.0);
  std::vector<double> xty(static_cast<size_t>(d * classes), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = images.data() + i * d;
    for (int64_t a = 0; a < d; ++a) {
      for (int64_t b = 0; b < d; ++b) xtx[static_cast<size_t>(a * d + b)] += xi[a] * xi[b];
      xty[static_cast<size_t>(a * classes + labels[static_cast<size_t>(i)])] += xi[a];
    }
  }
  for (int64_t a = 0; a < d; ++a) xtx[static_cast<size_t>(a * d + a)] += ridge;
  // Gaussian elimination with partial pivoting on [xtx | xty].
  std::vector<double> w = xty;
  for (int64_t col = 0; col < d; ++col) {
    int64_t piv = col;
    for (int64_t r = col + 1; r < d; ++r)
      if (std::fabs(xtx[static_cast<size_t>(r * d + col)]) >
          std::fabs(xtx[static_cast<size_t>(piv * d + col)]))
        piv = r;
    if (piv != col) {
      for (int64_t c = 0; c < d; ++c)
        std::swap(xtx[static_cast<size_t>(col * d + c)], xtx[static_cast<size_t>(piv * d + c)]);
      for (int c = 0; c < classes; ++c)
        std::swap(w[static_cast<size_t>(col * classes + c)],
                  w[static_cast<size_t>(piv * classes + c)]);
    }
    const double diag = xtx[static_cast<size_t>(col * d + col)];
    for (int64_t r = 0; r < d; ++r) {
      if (r == col) continue;
      const double factor = xtx[static_cast<size_t>(r * d + col)] / diag;
      if (factor == 0.0) continue;
      for (int64_t c = col; c < d; ++c)
        xtx[static_cast<size_t>(r * d + c)] -= factor * xtx[static_cast<size_t>(col * d + c)];
      for (int c = 0; c < classes; ++c)
        w[static_cast<size_t>(r * classes + c)] -= factor * w[static_cast<size_t>(col * classes + c)];
    }
  }
  for (int64_t a = 0; a < d; ++a)
    for (int c = 0; c < classes; ++c)
      w[static_cast<size_t>(a * classes + c)] /= xtx[static_cast<size_t>(a * d + a)];

  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = images.data() + i * d;
    int best = 0;
    double best_v = -1e300;
    for (int c = 0; c < classes; ++c) {
      double v = 0.0;
      for (int64_t a = 0; a < d; ++a) v += xi[a] * w[static_cast<size_t>(a * classes + c)];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    if (best == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace psp::testing
