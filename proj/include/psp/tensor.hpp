#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace psp {

/// Dense n-dimensional array of 64-bit floats, row-major.
/// Layout conventions are fixed globally: activations are N x C x H x W,
/// conv weights are K x C x R x S (output channels, input channels,
/// kernel rows, kernel cols). All extents are >= 1 and
/// product(shape) == data size at all times.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor scalar(double value);

  const std::vector<int64_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  int64_t dim(size_t i) const { return shape_[i]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at2(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at2(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }

  double& at4(int64_t a, int64_t b, int64_t c, int64_t d) {
    return data_[static_cast<size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }
  double at4(int64_t a, int64_t b, int64_t c, int64_t d) const {
    return data_[static_cast<size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Same data, new shape; element count must be preserved.
  Tensor reshaped(std::vector<int64_t> new_shape) const;

  std::string shape_str() const;
  static std::string shape_str(const std::vector<int64_t>& shape);

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

/// Geometry of one 2-D convolution, with the input spatial extents resolved.
struct ConvGeometry {
  int64_t out_channels = 1;  // K
  int64_t in_channels = 1;   // C
  int64_t kernel_h = 1;      // R
  int64_t kernel_w = 1;      // S
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t in_h = 1;          // H
  int64_t in_w = 1;          // W

  int64_t out_h() const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  int64_t out_w() const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
  int64_t patch_size() const { return in_channels * kernel_h * kernel_w; }

  void validate() const;
  bool operator==(const ConvGeometry&) const = default;
};

// ---- lowering kernel -------------------------------------------------------

/// a[M x N] * b[N x P]. The contraction is summed left-to-right over N so
/// repeated runs are bit-identical.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Lower x[N x C x H x W] to the patch matrix [(C*R*S) x (N*out_h*out_w)].
/// Row index is c*(R*S) + r*S + s; column j holds the receptive field of
/// output position j; padding is materialized as zeros.
Tensor im2col(const Tensor& x, const ConvGeometry& g);

/// im2col restricted to a subset of patch rows (compacted execution path).
Tensor im2col_rows(const Tensor& x, const ConvGeometry& g, const std::vector<int64_t>& rows);

/// Scatter-add inverse of im2col; cols is [(C*R*S) x (batch*out_h*out_w)].
Tensor col2im(const Tensor& cols, const ConvGeometry& g, int64_t batch);

/// Dense convolution via lowering: reshape(w, K x CRS) * im2col(x).
Tensor conv2d_forward(const Tensor& w, const Tensor& x, const ConvGeometry& g);

/// Convolution with a packed weight matrix w2[K x M] over a subset of patch
/// rows; col_ids lists the kept rows of the virtual full im2col matrix.
/// M == 0 is allowed and yields an all-zero output.
Tensor conv2d_packed(const Tensor& w2, const std::vector<int64_t>& col_ids, const Tensor& x,
                     const ConvGeometry& g);

}  // namespace psp
