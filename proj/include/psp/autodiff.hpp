#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psp/structure.hpp"
#include "psp/tensor.hpp"

namespace psp {

enum class OpKind {
  input,
  param,
  conv2d,
  conv2d_packed,
  psp_scale,
  mask_scale,
  linear,
  batchnorm,
  relu,
  add,
  bias_add_channels,
  concat_channels,
  gather_channels,
  avgpool,
  maxpool,
  global_avgpool,
  softmax_ce,
  sum_all,
  square,
  scale_const,
};

/// Substitution metadata carried by a psp_scale node. The alpha tensor itself
/// travels as a graph input so its gradient lands next to the other params.
struct PspMeta {
  Granularity granularity = Granularity::column;
  double epsilon = 0.0;
  GradRule grad_rule = GradRule::paper_sum;
  std::vector<uint8_t> fixed_mask;  // fixed-sparsity keep mask; empty = threshold
};

struct Node {
  OpKind kind = OpKind::input;
  std::vector<int> inputs;
  Tensor value;
  Tensor grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::string name;

  // op attributes; only the ones relevant to `kind` are set
  ConvGeometry geom{};
  PspMeta psp{};
  Tensor aux0, aux1;                // saved forward intermediates
  std::vector<int64_t> iattr;       // labels / pool params / gather ids / col ids
  std::vector<int64_t> argmax;      // maxpool routing
  double sattr = 0.0;
  bool training = false;
  Tensor* run_mean = nullptr;       // batchnorm running stats (owned by the model)
  Tensor* run_var = nullptr;
};

/// Define-by-run reverse-mode tape. Nodes are evaluated eagerly as they are
/// added, so inputs always precede consumers and reverse creation order is a
/// reverse topological order. One graph instance is single-owner.
class Graph {
 public:
  int add_input(Tensor value);
  int add_param(Tensor value, std::string name);

  int conv2d(int w, int x, const ConvGeometry& g);
  int conv2d_packed_op(int w2, int x, const ConvGeometry& g, std::vector<int64_t> col_ids);
  int psp_scale(int w, int alpha, const PspMeta& meta);
  int mask_scale(int w, Tensor mask);
  int linear(int x, int w, int bias = -1);
  int batchnorm(int x, int gamma, int beta, Tensor* running_mean, Tensor* running_var,
                bool training, double momentum = 0.1);
  int relu(int x);
  int add(int a, int b);
  int bias_add_channels(int x, int bias);  // NCHW + per-channel bias
  int concat_channels(const std::vector<int>& xs);
  int gather_channels(int x, std::vector<int64_t> ids);
  int avgpool(int x, int64_t window, int64_t stride);
  int maxpool(int x, int64_t window, int64_t stride);
  int global_avgpool(int x);
  int softmax_cross_entropy(int logits, const std::vector<int>& labels);
  int sum_all(int x);
  int square(int x);
  int scale_const(int x, double c);

  /// Populates gradients for every node the loss depends on. The loss must be
  /// scalar and must come from a completed forward pass on this graph.
  void backward(int loss_id);

  const Tensor& value(int id) const { return nodes_[check_id(id)].value; }
  bool has_grad(int id) const { return !nodes_[check_id(id)].grad.empty(); }
  const Tensor& grad(int id) const;
  const Node& node(int id) const { return nodes_[check_id(id)]; }
  size_t size() const { return nodes_.size(); }

 private:
  size_t check_id(int id) const;
  int push(Node n);
  Tensor& ensure_grad(int id);
  void backward_node(int id);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace psp
