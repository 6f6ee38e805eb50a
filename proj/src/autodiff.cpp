#include "psp/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace psp {

namespace {

Tensor transpose2d(const Tensor& a) {
  Tensor t({a.dim(1), a.dim(0)});
  for (int64_t i = 0; i < a.dim(0); ++i)
    for (int64_t j = 0; j < a.dim(1); ++j) t.at2(j, i) = a.at2(i, j);
  return t;
}

// [N x K x oh x ow] -> [K x (N*oh*ow)] with columns grouped by sample.
Tensor flatten_conv_grad(const Tensor& gy) {
  const int64_t n = gy.dim(0), k = gy.dim(1), spatial = gy.dim(2) * gy.dim(3);
  Tensor flat({k, n * spatial});
  for (int64_t kk = 0; kk < k; ++kk)
    for (int64_t nn = 0; nn < n; ++nn) {
      const double* src = gy.data() + (nn * k + kk) * spatial;
      double* dst = flat.data() + kk * n * spatial + nn * spatial;
      for (int64_t i = 0; i < spatial; ++i) dst[i] = src[i];
    }
  return flat;
}

StructureSet set_from_meta(const PspMeta& meta, const Tensor& alpha) {
  StructureSet s;
  s.granularity = meta.granularity;
  s.alpha = alpha;
  s.epsilon = meta.epsilon;
  s.grad_rule = meta.grad_rule;
  s.fixed_mask = meta.fixed_mask;
  return s;
}

ConvGeometry geom_from_weight(const Tensor& w) {
  ConvGeometry g;
  g.out_channels = w.dim(0);
  g.in_channels = w.dim(1);
  g.kernel_h = w.dim(2);
  g.kernel_w = w.dim(3);
  g.in_h = w.dim(2);
  g.in_w = w.dim(3);
  return g;
}

void accumulate(Tensor& dst, const Tensor& src) {
  for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

}  // namespace

size_t Graph::check_id(int id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    throw std::logic_error("graph node id " + std::to_string(id) + " out of range");
  return static_cast<size_t>(id);
}

int Graph::push(Node n) {
  for (int in : n.inputs) {
    if (nodes_[check_id(in)].requires_grad) n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size() - 1);
}

Tensor& Graph::ensure_grad(int id) {
  Node& n = nodes_[check_id(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

const Tensor& Graph::grad(int id) const {
  const Node& n = nodes_[check_id(id)];
  if (n.grad.empty())
    throw std::logic_error("no gradient at node " + std::to_string(id) + " (" + n.name +
                           "); run backward first");
  return n.grad;
}

int Graph::add_input(Tensor value) {
  Node n;
  n.kind = OpKind::input;
  n.value = std::move(value);
  return push(std::move(n));
}

int Graph::add_param(Tensor value, std::string name) {
  Node n;
  n.kind = OpKind::param;
  n.value = std::move(value);
  n.name = std::move(name);
  n.requires_grad = true;
  return push(std::move(n));
}

int Graph::conv2d(int w, int x, const ConvGeometry& g) {
  Node n;
  n.kind = OpKind::conv2d;
  n.inputs = {w, x};
  n.geom = g;
  n.aux0 = im2col(value(x), g);  // reused by backward
  Tensor prod = matmul(value(w).reshaped({g.out_channels, g.patch_size()}), n.aux0);
  const int64_t batch = value(x).dim(0);
  Tensor y({batch, g.out_channels, g.out_h(), g.out_w()});
  const int64_t spatial = g.out_h() * g.out_w();
  for (int64_t k = 0; k < g.out_channels; ++k)
    for (int64_t nn = 0; nn < batch; ++nn) {
      const double* src = prod.data() + k * batch * spatial + nn * spatial;
      double* dst = y.data() + (nn * g.out_channels + k) * spatial;
      for (int64_t i = 0; i < spatial; ++i) dst[i] = src[i];
    }
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::conv2d_packed_op(int w2, int x, const ConvGeometry& g, std::vector<int64_t> col_ids) {
  Node n;
  n.kind = OpKind::conv2d_packed;
  n.inputs = {w2, x};
  n.geom = g;
  n.iattr = std::move(col_ids);
  n.value = conv2d_packed(value(w2), n.iattr, value(x), g);
  return push(std::move(n));
}

int Graph::psp_scale(int w, int alpha, const PspMeta& meta) {
  Node n;
  n.kind = OpKind::psp_scale;
  n.inputs = {w, alpha};
  n.psp = meta;
  const ConvGeometry g = geom_from_weight(value(w));
  n.value = psp_forward(value(w), set_from_meta(meta, value(alpha)), g);
  return push(std::move(n));
}

int Graph::mask_scale(int w, Tensor mask) {
  if (!mask.same_shape(value(w)))
    throw std::invalid_argument("mask_scale mask " + mask.shape_str() + " != weight " +
                                value(w).shape_str());
  Node n;
  n.kind = OpKind::mask_scale;
  n.inputs = {w};
  n.aux0 = std::move(mask);
  Tensor q(value(w).shape());
  for (int64_t i = 0; i < q.numel(); ++i) q[i] = value(w)[i] * n.aux0[i];
  n.value = std::move(q);
  return push(std::move(n));
}

int Graph::linear(int x, int w, int bias) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
    throw std::invalid_argument("linear shape mismatch: " + xv.shape_str() + " x " + wv.shape_str());
  Node n;
  n.kind = OpKind::linear;
  n.inputs = bias >= 0 ? std::vector<int>{x, w, bias} : std::vector<int>{x, w};
  Tensor y = matmul(xv, transpose2d(wv));
  if (bias >= 0) {
    const Tensor& bv = value(bias);
    for (int64_t i = 0; i < y.dim(0); ++i)
      for (int64_t j = 0; j < y.dim(1); ++j) y.at2(i, j) += bv[j];
  }
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::batchnorm(int x, int gamma, int beta, Tensor* running_mean, Tensor* running_var,
                     bool training, double momentum) {
  const Tensor& xv = value(x);
  if (xv.rank() != 4) throw std::invalid_argument("batchnorm expects NCHW input");
  const int64_t channels = xv.dim(1);
  if (value(gamma).numel() != channels || value(beta).numel() != channels ||
      !running_mean || !running_var || running_mean->numel() != channels ||
      running_var->numel() != channels)
    throw std::invalid_argument("batchnorm channel extents do not match input " + xv.shape_str());

  constexpr double kEps = 1e-5;
  const int64_t batch = xv.dim(0), spatial = xv.dim(2) * xv.dim(3);
  const int64_t per_channel = batch * spatial;

  Node n;
  n.kind = OpKind::batchnorm;
  n.inputs = {x, gamma, beta};
  n.training = training;
  n.run_mean = running_mean;
  n.run_var = running_var;
  n.aux0 = Tensor({channels});  // mean used for normalization
  n.aux1 = Tensor({channels});  // 1/sqrt(var + eps)

  for (int64_t c = 0; c < channels; ++c) {
    double mean, var;
    if (training) {
      // two-pass batch statistics
      double sum = 0.0;
      bool all_zero = true;
      for (int64_t b = 0; b < batch; ++b) {
        const double* src = xv.data() + (b * channels + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) {
          sum += src[i];
          if (src[i] != 0.0) all_zero = false;
        }
      }
      mean = sum / static_cast<double>(per_channel);
      double sq = 0.0;
      for (int64_t b = 0; b < batch; ++b) {
        const double* src = xv.data() + (b * channels + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) {
          const double d = src[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(per_channel);
      // Fully dead (all-zero) channels keep their running stats frozen.
      if (!all_zero) {
        (*running_mean)[c] = (1.0 - momentum) * (*running_mean)[c] + momentum * mean;
        (*running_var)[c] = (1.0 - momentum) * (*running_var)[c] + momentum * var;
      }
    } else {
      mean = (*running_mean)[c];
      var = (*running_var)[c];
    }
    n.aux0[c] = mean;
    n.aux1[c] = 1.0 / std::sqrt(var + kEps);
  }

  Tensor y(xv.shape());
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t c = 0; c < channels; ++c) {
      const double* src = xv.data() + (b * channels + c) * spatial;
      double* dst = y.data() + (b * channels + c) * spatial;
      const double m = n.aux0[c], istd = n.aux1[c], ga = gv[c], be = bv[c];
      for (int64_t i = 0; i < spatial; ++i) dst[i] = ga * (src[i] - m) * istd + be;
    }
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::relu(int x) {
  Node n;
  n.kind = OpKind::relu;
  n.inputs = {x};
  Tensor y(value(x).shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = value(x)[i] > 0.0 ? value(x)[i] : 0.0;
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::add(int a, int b) {
  if (!value(a).same_shape(value(b)))
    throw std::invalid_argument("add shape mismatch: " + value(a).shape_str() + " vs " +
                                value(b).shape_str());
  Node n;
  n.kind = OpKind::add;
  n.inputs = {a, b};
  Tensor y = value(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += value(b)[i];
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::bias_add_channels(int x, int bias) {
  const Tensor& xv = value(x);
  if (xv.rank() != 4 || value(bias).numel() != xv.dim(1))
    throw std::invalid_argument("bias_add_channels: bias " + value(bias).shape_str() +
                                " does not match input " + xv.shape_str());
  Node n;
  n.kind = OpKind::bias_add_channels;
  n.inputs = {x, bias};
  Tensor y = xv;
  const int64_t spatial = xv.dim(2) * xv.dim(3);
  for (int64_t b = 0; b < xv.dim(0); ++b)
    for (int64_t c = 0; c < xv.dim(1); ++c) {
      double* dst = y.data() + (b * xv.dim(1) + c) * spatial;
      const double bv = value(bias)[c];
      for (int64_t i = 0; i < spatial; ++i) dst[i] += bv;
    }
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::concat_channels(const std::vector<int>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat needs at least one input");
  const Tensor& first = value(xs[0]);
  if (first.rank() != 4) throw std::invalid_argument("concat expects NCHW inputs");
  int64_t channels = 0;
  for (int id : xs) {
    const Tensor& t = value(id);
    if (t.rank() != 4 || t.dim(0) != first.dim(0) || t.dim(2) != first.dim(2) ||
        t.dim(3) != first.dim(3))
      throw std::invalid_argument("concat input " + t.shape_str() + " incompatible with " +
                                  first.shape_str());
    channels += t.dim(1);
  }
  Node n;
  n.kind = OpKind::concat_channels;
  n.inputs = xs;
  Tensor y({first.dim(0), channels, first.dim(2), first.dim(3)});
  const int64_t spatial = first.dim(2) * first.dim(3);
  for (int64_t b = 0; b < first.dim(0); ++b) {
    int64_t co = 0;
    for (int id : xs) {
      const Tensor& t = value(id);
      for (int64_t c = 0; c < t.dim(1); ++c, ++co) {
        const double* src = t.data() + (b * t.dim(1) + c) * spatial;
        double* dst = y.data() + (b * channels + co) * spatial;
        for (int64_t i = 0; i < spatial; ++i) dst[i] = src[i];
      }
    }
  }
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::gather_channels(int x, std::vector<int64_t> ids) {
  const Tensor& xv = value(x);
  if (xv.rank() != 4) throw std::invalid_argument("gather_channels expects NCHW input");
  if (ids.empty()) throw std::invalid_argument("gather_channels needs at least one channel");
  for (int64_t id : ids)
    if (id < 0 || id >= xv.dim(1))
      throw std::invalid_argument("gather channel " + std::to_string(id) + " out of range");
  Node n;
  n.kind = OpKind::gather_channels;
  n.inputs = {x};
  n.iattr = std::move(ids);
  const int64_t spatial = xv.dim(2) * xv.dim(3);
  Tensor y({xv.dim(0), static_cast<int64_t>(n.iattr.size()), xv.dim(2), xv.dim(3)});
  for (int64_t b = 0; b < xv.dim(0); ++b)
    for (size_t j = 0; j < n.iattr.size(); ++j) {
      const double* src = xv.data() + (b * xv.dim(1) + n.iattr[j]) * spatial;
      double* dst = y.data() + (b * static_cast<int64_t>(n.iattr.size()) + static_cast<int64_t>(j)) * spatial;
      for (int64_t i = 0; i < spatial; ++i) dst[i] = src[i];
    }
  n.value = std::move(y);
  return push(std::move(n));
}

namespace {

void check_pool_geom(const Tensor& x, int64_t window, int64_t stride) {
  if (x.rank() != 4) throw std::invalid_argument("pool expects NCHW input");
  if (window < 1 || stride < 1 || x.dim(2) < window || x.dim(3) < window)
    throw std::invalid_argument("pool window " + std::to_string(window) + " invalid for input " +
                                x.shape_str());
}

}  // namespace

int Graph::avgpool(int x, int64_t window, int64_t stride) {
  const Tensor& xv = value(x);
  check_pool_geom(xv, window, stride);
  const int64_t oh = (xv.dim(2) - window) / stride + 1, ow = (xv.dim(3) - window) / stride + 1;
  Node n;
  n.kind = OpKind::avgpool;
  n.inputs = {x};
  n.iattr = {window, stride};
  Tensor y({xv.dim(0), xv.dim(1), oh, ow});
  const double inv = 1.0 / static_cast<double>(window * window);
  for (int64_t b = 0; b < xv.dim(0); ++b)
    for (int64_t c = 0; c < xv.dim(1); ++c)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          double sum = 0.0;
          for (int64_t r = 0; r < window; ++r)
            for (int64_t s = 0; s < window; ++s) sum += xv.at4(b, c, i * stride + r, j * stride + s);
          y.at4(b, c, i, j) = sum * inv;
        }
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::maxpool(int x, int64_t window, int64_t stride) {
  const Tensor& xv = value(x);
  check_pool_geom(xv, window, stride);
  const int64_t oh = (xv.dim(2) - window) / stride + 1, ow = (xv.dim(3) - window) / stride + 1;
  Node n;
  n.kind = OpKind::maxpool;
  n.inputs = {x};
  n.iattr = {window, stride};
  Tensor y({xv.dim(0), xv.dim(1), oh, ow});
  n.argmax.resize(static_cast<size_t>(y.numel()));
  int64_t out = 0;
  for (int64_t b = 0; b < xv.dim(0); ++b)
    for (int64_t c = 0; c < xv.dim(1); ++c)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j, ++out) {
          double best = -1e308;
          int64_t best_at = 0;
          for (int64_t r = 0; r < window; ++r)
            for (int64_t s = 0; s < window; ++s) {
              const int64_t iy = i * stride + r, ix = j * stride + s;
              const double v = xv.at4(b, c, iy, ix);
              if (v > best) {  // first maximum wins ties
                best = v;
                best_at = ((b * xv.dim(1) + c) * xv.dim(2) + iy) * xv.dim(3) + ix;
              }
            }
          y[out] = best;
          n.argmax[static_cast<size_t>(out)] = best_at;
        }
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::global_avgpool(int x) {
  const Tensor& xv = value(x);
  if (xv.rank() != 4) throw std::invalid_argument("global_avgpool expects NCHW input");
  Node n;
  n.kind = OpKind::global_avgpool;
  n.inputs = {x};
  const int64_t spatial = xv.dim(2) * xv.dim(3);
  Tensor y({xv.dim(0), xv.dim(1)});
  for (int64_t b = 0; b < xv.dim(0); ++b)
    for (int64_t c = 0; c < xv.dim(1); ++c) {
      const double* src = xv.data() + (b * xv.dim(1) + c) * spatial;
      double sum = 0.0;
      for (int64_t i = 0; i < spatial; ++i) sum += src[i];
      y.at2(b, c) = sum / static_cast<double>(spatial);
    }
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::softmax_cross_entropy(int logits, const std::vector<int>& labels) {
  const Tensor& lv = value(logits);
  if (lv.rank() != 2) throw std::invalid_argument("cross entropy expects [N x classes] logits");
  const int64_t batch = lv.dim(0), classes = lv.dim(1);
  if (static_cast<int64_t>(labels.size()) != batch)
    throw std::invalid_argument("label count " + std::to_string(labels.size()) +
                                " != batch size " + std::to_string(batch));
  for (int lab : labels)
    if (lab < 0 || lab >= classes)
      throw std::invalid_argument("label " + std::to_string(lab) + " out of range [0, " +
                                  std::to_string(classes) + ")");
  Node n;
  n.kind = OpKind::softmax_ce;
  n.inputs = {logits};
  n.iattr.assign(labels.begin(), labels.end());
  n.aux0 = Tensor({batch, classes});  // softmax probabilities
  double loss = 0.0;
  for (int64_t b = 0; b < batch; ++b) {
    double mx = lv.at2(b, 0);
    for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, lv.at2(b, c));
    double denom = 0.0;
    for (int64_t c = 0; c < classes; ++c) denom += std::exp(lv.at2(b, c) - mx);
    const double log_denom = std::log(denom);
    for (int64_t c = 0; c < classes; ++c)
      n.aux0.at2(b, c) = std::exp(lv.at2(b, c) - mx) / denom;
    loss += -(lv.at2(b, labels[static_cast<size_t>(b)]) - mx - log_denom);
  }
  n.value = Tensor::scalar(loss / static_cast<double>(batch));
  return push(std::move(n));
}

int Graph::sum_all(int x) {
  Node n;
  n.kind = OpKind::sum_all;
  n.inputs = {x};
  double sum = 0.0;
  for (int64_t i = 0; i < value(x).numel(); ++i) sum += value(x)[i];
  n.value = Tensor::scalar(sum);
  return push(std::move(n));
}

int Graph::square(int x) {
  Node n;
  n.kind = OpKind::square;
  n.inputs = {x};
  Tensor y(value(x).shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = value(x)[i] * value(x)[i];
  n.value = std::move(y);
  return push(std::move(n));
}

int Graph::scale_const(int x, double c) {
  Node n;
  n.kind = OpKind::scale_const;
  n.inputs = {x};
  n.sattr = c;
  Tensor y(value(x).shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = c * value(x)[i];
  n.value = std::move(y);
  return push(std::move(n));
}

void Graph::backward(int loss_id) {
  if (nodes_.empty()) throw std::logic_error("backward called before any forward pass");
  const Node& loss = nodes_[check_id(loss_id)];
  if (loss.value.numel() != 1)
    throw std::invalid_argument("backward needs a scalar loss, got " + loss.value.shape_str());
  ensure_grad(loss_id)[0] = 1.0;
  for (int id = loss_id; id >= 0; --id) {
    if (!nodes_[static_cast<size_t>(id)].grad.empty() &&
        nodes_[static_cast<size_t>(id)].requires_grad)
      backward_node(id);
  }
  backward_done_ = true;
}

void Graph::backward_node(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  const Tensor& gy = n.grad;
  switch (n.kind) {
    case OpKind::input:
    case OpKind::param:
      return;

    case OpKind::conv2d: {
      const ConvGeometry& g = n.geom;
      const Tensor gflat = flatten_conv_grad(gy);
      if (nodes_[check_id(n.inputs[0])].requires_grad) {
        Tensor dw = matmul(gflat, transpose2d(n.aux0));
        accumulate(ensure_grad(n.inputs[0]),
                   dw.reshaped({g.out_channels, g.in_channels, g.kernel_h, g.kernel_w}));
      }
      if (nodes_[check_id(n.inputs[1])].requires_grad) {
        const Tensor& w = value(n.inputs[0]);
        Tensor dcols = matmul(transpose2d(w.reshaped({g.out_channels, g.patch_size()})), gflat);
        accumulate(ensure_grad(n.inputs[1]), col2im(dcols, g, value(n.inputs[1]).dim(0)));
      }
      return;
    }

    case OpKind::conv2d_packed:
      throw std::logic_error("packed convolution is an inference-only op");

    case OpKind::psp_scale: {
      const Tensor& w = value(n.inputs[0]);
      const StructureSet s = set_from_meta(n.psp, value(n.inputs[1]));
      const ConvGeometry g = geom_from_weight(w);
      accumulate(ensure_grad(n.inputs[0]), weight_gradient(gy, s, g));
      accumulate(ensure_grad(n.inputs[1]), alpha_gradient(gy, w, s, g));
      return;
    }

    case OpKind::mask_scale: {
      Tensor& dw = ensure_grad(n.inputs[0]);
      for (int64_t i = 0; i < dw.numel(); ++i) dw[i] += gy[i] * n.aux0[i];
      return;
    }

    case OpKind::linear: {
      const Tensor& xv = value(n.inputs[0]);
      const Tensor& wv = value(n.inputs[1]);
      if (nodes_[check_id(n.inputs[0])].requires_grad)
        accumulate(ensure_grad(n.inputs[0]), matmul(gy, wv));
      if (nodes_[check_id(n.inputs[1])].requires_grad)
        accumulate(ensure_grad(n.inputs[1]), matmul(transpose2d(gy), xv));
      if (n.inputs.size() == 3 && nodes_[check_id(n.inputs[2])].requires_grad) {
        Tensor& db = ensure_grad(n.inputs[2]);
        for (int64_t b = 0; b < gy.dim(0); ++b)
          for (int64_t o = 0; o < gy.dim(1); ++o) db[o] += gy.at2(b, o);
      }
      return;
    }

    case OpKind::batchnorm: {
      const Tensor& xv = value(n.inputs[0]);
      const Tensor& gv = value(n.inputs[1]);
      const int64_t batch = xv.dim(0), channels = xv.dim(1), spatial = xv.dim(2) * xv.dim(3);
      const double m = static_cast<double>(batch * spatial);
      const bool need_dx = nodes_[check_id(n.inputs[0])].requires_grad;
      Tensor* dx = need_dx ? &ensure_grad(n.inputs[0]) : nullptr;
      Tensor& dgamma = ensure_grad(n.inputs[1]);
      Tensor& dbeta = ensure_grad(n.inputs[2]);
      for (int64_t c = 0; c < channels; ++c) {
        const double mean = n.aux0[c], istd = n.aux1[c], ga = gv[c];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t b = 0; b < batch; ++b) {
          const double* xs = xv.data() + (b * channels + c) * spatial;
          const double* gs = gy.data() + (b * channels + c) * spatial;
          for (int64_t i = 0; i < spatial; ++i) {
            sum_g += gs[i];
            sum_gx += gs[i] * (xs[i] - mean) * istd;
          }
        }
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        if (!need_dx) continue;
        if (n.training) {
          const double mean_g = sum_g / m, mean_gx = sum_gx / m;
          for (int64_t b = 0; b < batch; ++b) {
            const double* xs = xv.data() + (b * channels + c) * spatial;
            const double* gs = gy.data() + (b * channels + c) * spatial;
            double* ds = dx->data() + (b * channels + c) * spatial;
            for (int64_t i = 0; i < spatial; ++i) {
              const double xhat = (xs[i] - mean) * istd;
              ds[i] += ga * istd * (gs[i] - mean_g - xhat * mean_gx);
            }
          }
        } else {
          for (int64_t b = 0; b < batch; ++b) {
            const double* gs = gy.data() + (b * channels + c) * spatial;
            double* ds = dx->data() + (b * channels + c) * spatial;
            for (int64_t i = 0; i < spatial; ++i) ds[i] += ga * istd * gs[i];
          }
        }
      }
      return;
    }

    case OpKind::relu: {
      const Tensor& xv = value(n.inputs[0]);
      Tensor& dx = ensure_grad(n.inputs[0]);
      for (int64_t i = 0; i < dx.numel(); ++i)
        if (xv[i] > 0.0) dx[i] += gy[i];
      return;
    }

    case OpKind::add: {
      for (int in : n.inputs)
        if (nodes_[check_id(in)].requires_grad) accumulate(ensure_grad(in), gy);
      return;
    }

    case OpKind::bias_add_channels: {
      if (nodes_[check_id(n.inputs[0])].requires_grad) accumulate(ensure_grad(n.inputs[0]), gy);
      if (nodes_[check_id(n.inputs[1])].requires_grad) {
        Tensor& db = ensure_grad(n.inputs[1]);
        const int64_t channels = gy.dim(1), spatial = gy.dim(2) * gy.dim(3);
        for (int64_t b = 0; b < gy.dim(0); ++b)
          for (int64_t c = 0; c < channels; ++c) {
            const double* src = gy.data() + (b * channels + c) * spatial;
            for (int64_t i = 0; i < spatial; ++i) db[c] += src[i];
          }
      }
      return;
    }

    case OpKind::concat_channels: {
      const int64_t batch = n.value.dim(0), channels = n.value.dim(1);
      const int64_t spatial = n.value.dim(2) * n.value.dim(3);
      int64_t co = 0;
      for (int in : n.inputs) {
        const Tensor& t = value(in);
        if (nodes_[check_id(in)].requires_grad) {
          Tensor& dx = ensure_grad(in);
          for (int64_t b = 0; b < batch; ++b)
            for (int64_t c = 0; c < t.dim(1); ++c) {
              const double* src = gy.data() + (b * channels + co + c) * spatial;
              double* dst = dx.data() + (b * t.dim(1) + c) * spatial;
              for (int64_t i = 0; i < spatial; ++i) dst[i] += src[i];
            }
        }
        co += t.dim(1);
      }
      return;
    }

    case OpKind::gather_channels: {
      const Tensor& xv = value(n.inputs[0]);
      Tensor& dx = ensure_grad(n.inputs[0]);
      const int64_t spatial = xv.dim(2) * xv.dim(3);
      const auto picked = static_cast<int64_t>(n.iattr.size());
      for (int64_t b = 0; b < xv.dim(0); ++b)
        for (int64_t j = 0; j < picked; ++j) {
          const double* src = gy.data() + (b * picked + j) * spatial;
          double* dst = dx.data() + (b * xv.dim(1) + n.iattr[static_cast<size_t>(j)]) * spatial;
          for (int64_t i = 0; i < spatial; ++i) dst[i] += src[i];
        }
      return;
    }

    case OpKind::avgpool: {
      Tensor& dx = ensure_grad(n.inputs[0]);
      const int64_t window = n.iattr[0], stride = n.iattr[1];
      const double inv = 1.0 / static_cast<double>(window * window);
      for (int64_t b = 0; b < n.value.dim(0); ++b)
        for (int64_t c = 0; c < n.value.dim(1); ++c)
          for (int64_t i = 0; i < n.value.dim(2); ++i)
            for (int64_t j = 0; j < n.value.dim(3); ++j) {
              const double g = gy.at4(b, c, i, j) * inv;
              for (int64_t r = 0; r < window; ++r)
                for (int64_t s = 0; s < window; ++s)
                  dx.at4(b, c, i * stride + r, j * stride + s) += g;
            }
      return;
    }

    case OpKind::maxpool: {
      Tensor& dx = ensure_grad(n.inputs[0]);
      for (int64_t out = 0; out < n.value.numel(); ++out)
        dx[n.argmax[static_cast<size_t>(out)]] += gy[out];
      return;
    }

    case OpKind::global_avgpool: {
      const Tensor& xv = value(n.inputs[0]);
      Tensor& dx = ensure_grad(n.inputs[0]);
      const int64_t spatial = xv.dim(2) * xv.dim(3);
      const double inv = 1.0 / static_cast<double>(spatial);
      for (int64_t b = 0; b < xv.dim(0); ++b)
        for (int64_t c = 0; c < xv.dim(1); ++c) {
          const double g = gy.at2(b, c) * inv;
          double* dst = dx.data() + (b * xv.dim(1) + c) * spatial;
          for (int64_t i = 0; i < spatial; ++i) dst[i] += g;
        }
      return;
    }

    case OpKind::softmax_ce: {
      Tensor& dl = ensure_grad(n.inputs[0]);
      const int64_t batch = n.aux0.dim(0), classes = n.aux0.dim(1);
      const double scale = gy[0] / static_cast<double>(batch);
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t c = 0; c < classes; ++c) {
          const double onehot = (c == n.iattr[static_cast<size_t>(b)]) ? 1.0 : 0.0;
          dl.at2(b, c) += scale * (n.aux0.at2(b, c) - onehot);
        }
      return;
    }

    case OpKind::sum_all: {
      Tensor& dx = ensure_grad(n.inputs[0]);
      for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += gy[0];
      return;
    }

    case OpKind::square: {
      const Tensor& xv = value(n.inputs[0]);
      Tensor& dx = ensure_grad(n.inputs[0]);
      for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += 2.0 * xv[i] * gy[i];
      return;
    }

    case OpKind::scale_const: {
      Tensor& dx = ensure_grad(n.inputs[0]);
      for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += n.sattr * gy[i];
      return;
    }
  }
}

}  // namespace psp
