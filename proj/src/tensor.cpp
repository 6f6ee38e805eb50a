#include "psp/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace psp {

namespace {

int64_t checked_numel(const std::vector<int64_t>& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e < 1) throw std::invalid_argument("tensor extents must be >= 1, got " + Tensor::shape_str(shape));
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(checked_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (checked_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str());
  }
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = value;
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t({1});
  t.data_[0] = value;
  return t;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
  if (checked_numel(new_shape) != numel()) {
    throw std::invalid_argument("reshape " + shape_str() + " -> " + shape_str(new_shape) +
                                " changes element count");
  }
  return Tensor(std::move(new_shape), data_);
}

std::string Tensor::shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

std::string Tensor::shape_str() const { return shape_str(shape_); }

void ConvGeometry::validate() const {
  if (out_channels < 1 || in_channels < 1 || kernel_h < 1 || kernel_w < 1 || in_h < 1 || in_w < 1)
    throw std::invalid_argument("conv geometry extents must be >= 1");
  if (stride < 1) throw std::invalid_argument("conv stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv padding must be >= 0");
  if (out_h() < 1 || out_w() < 1)
    throw std::invalid_argument("conv geometry yields empty output (" + std::to_string(out_h()) +
                                "x" + std::to_string(out_w()) + ")");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul shape mismatch: " + a.shape_str() + " x " + b.shape_str());
  }
  const int64_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  Tensor c({m, p});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  // i-k-j ordering: per output element the contraction still runs k = 0..n-1
  // left to right, which keeps results bit-identical across runs.
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = pa + i * n;
    double* crow = pc + i * p;
    for (int64_t k = 0; k < n; ++k) {
      const double av = arow[k];
      const double* brow = pb + k * p;
      for (int64_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

namespace {

void check_im2col_input(const Tensor& x, const ConvGeometry& g) {
  g.validate();
  if (x.rank() != 4 || x.dim(1) != g.in_channels || x.dim(2) != g.in_h || x.dim(3) != g.in_w) {
    throw std::invalid_argument("im2col input " + x.shape_str() + " inconsistent with geometry C=" +
                                std::to_string(g.in_channels) + " H=" + std::to_string(g.in_h) +
                                " W=" + std::to_string(g.in_w));
  }
}

// Writes one patch row (fixed c,r,s) across all output positions.
void fill_patch_row(double* dst, const Tensor& x, const ConvGeometry& g, int64_t c, int64_t r,
                    int64_t s) {
  const int64_t batch = x.dim(0), oh = g.out_h(), ow = g.out_w();
  int64_t col = 0;
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t y = 0; y < oh; ++y) {
      const int64_t iy = y * g.stride - g.padding + r;
      for (int64_t xo = 0; xo < ow; ++xo, ++col) {
        const int64_t ix = xo * g.stride - g.padding + s;
        dst[col] = (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w) ? x.at4(n, c, iy, ix) : 0.0;
      }
    }
  }
}

}  // namespace

Tensor im2col(const Tensor& x, const ConvGeometry& g) {
  check_im2col_input(x, g);
  const int64_t cols = x.dim(0) * g.out_h() * g.out_w();
  Tensor out({g.patch_size(), cols});
  int64_t row = 0;
  for (int64_t c = 0; c < g.in_channels; ++c)
    for (int64_t r = 0; r < g.kernel_h; ++r)
      for (int64_t s = 0; s < g.kernel_w; ++s, ++row) fill_patch_row(out.data() + row * cols, x, g, c, r, s);
  return out;
}

Tensor im2col_rows(const Tensor& x, const ConvGeometry& g, const std::vector<int64_t>& rows) {
  check_im2col_input(x, g);
  if (rows.empty()) throw std::invalid_argument("im2col_rows needs at least one row");
  const int64_t rs = g.kernel_h * g.kernel_w;
  const int64_t cols = x.dim(0) * g.out_h() * g.out_w();
  Tensor out({static_cast<int64_t>(rows.size()), cols});
  for (size_t i = 0; i < rows.size(); ++i) {
    const int64_t id = rows[i];
    if (id < 0 || id >= g.patch_size())
      throw std::invalid_argument("im2col row id " + std::to_string(id) + " out of range");
    const int64_t c = id / rs, r = (id % rs) / g.kernel_w, s = id % g.kernel_w;
    fill_patch_row(out.data() + static_cast<int64_t>(i) * cols, x, g, c, r, s);
  }
  return out;
}

Tensor col2im(const Tensor& cols, const ConvGeometry& g, int64_t batch) {
  g.validate();
  const int64_t oh = g.out_h(), ow = g.out_w();
  if (cols.rank() != 2 || cols.dim(0) != g.patch_size() || cols.dim(1) != batch * oh * ow)
    throw std::invalid_argument("col2im input " + cols.shape_str() + " inconsistent with geometry");
  Tensor x({batch, g.in_channels, g.in_h, g.in_w});
  int64_t row = 0;
  for (int64_t c = 0; c < g.in_channels; ++c) {
    for (int64_t r = 0; r < g.kernel_h; ++r) {
      for (int64_t s = 0; s < g.kernel_w; ++s, ++row) {
        const double* src = cols.data() + row * cols.dim(1);
        int64_t col = 0;
        for (int64_t n = 0; n < batch; ++n) {
          for (int64_t y = 0; y < oh; ++y) {
            const int64_t iy = y * g.stride - g.padding + r;
            for (int64_t xo = 0; xo < ow; ++xo, ++col) {
              const int64_t ix = xo * g.stride - g.padding + s;
              if (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w) x.at4(n, c, iy, ix) += src[col];
            }
          }
        }
      }
    }
  }
  return x;
}

namespace {

Tensor reshape_conv_out(Tensor prod, int64_t batch, int64_t k, int64_t oh, int64_t ow) {
  // prod is [K x (N*oh*ow)] with columns grouped by sample; regroup to NCHW.
  Tensor y({batch, k, oh, ow});
  const int64_t spatial = oh * ow;
  for (int64_t kk = 0; kk < k; ++kk) {
    const double* src = prod.data() + kk * batch * spatial;
    for (int64_t n = 0; n < batch; ++n) {
      double* dst = y.data() + (n * k + kk) * spatial;
      const double* s = src + n * spatial;
      for (int64_t i = 0; i < spatial; ++i) dst[i] = s[i];
    }
  }
  return y;
}

}  // namespace

Tensor conv2d_forward(const Tensor& w, const Tensor& x, const ConvGeometry& g) {
  if (w.rank() != 4 || w.dim(0) != g.out_channels || w.dim(1) != g.in_channels ||
      w.dim(2) != g.kernel_h || w.dim(3) != g.kernel_w) {
    throw std::invalid_argument("conv weight " + w.shape_str() + " inconsistent with geometry");
  }
  const Tensor cols = im2col(x, g);
  Tensor prod = matmul(w.reshaped({g.out_channels, g.patch_size()}), cols);
  return reshape_conv_out(std::move(prod), x.dim(0), g.out_channels, g.out_h(), g.out_w());
}

Tensor conv2d_packed(const Tensor& w2, const std::vector<int64_t>& col_ids, const Tensor& x,
                     const ConvGeometry& g) {
  check_im2col_input(x, g);
  const int64_t batch = x.dim(0), oh = g.out_h(), ow = g.out_w();
  if (col_ids.empty()) {
    // Fully pruned kernel support: the layer emits zeros.
    return Tensor({batch, g.out_channels, oh, ow});
  }
  if (w2.rank() != 2 || w2.dim(0) != g.out_channels || w2.dim(1) != static_cast<int64_t>(col_ids.size()))
    throw std::invalid_argument("packed conv weight " + w2.shape_str() + " does not match kept columns");
  const Tensor cols = im2col_rows(x, g, col_ids);
  Tensor prod = matmul(w2, cols);
  return reshape_conv_out(std::move(prod), batch, g.out_channels, oh, ow);
}

}  // namespace psp
