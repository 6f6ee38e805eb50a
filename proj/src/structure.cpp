#include "psp/structure.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "psp/rng.hpp"

namespace psp {

const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::column: return "column";
    case Granularity::channel: return "channel";
    case Granularity::shape: return "shape";
    case Granularity::layer: return "layer";
  }
  return "?";
}

const char* to_string(RegMode m) { return m == RegMode::weight_decay ? "weight_decay" : "l1"; }

const char* to_string(GradRule r) { return r == GradRule::paper_sum ? "paper_sum" : "chain_rule"; }

Granularity granularity_from_string(const std::string& s) {
  if (s == "column") return Granularity::column;
  if (s == "channel") return Granularity::channel;
  if (s == "shape") return Granularity::shape;
  if (s == "layer") return Granularity::layer;
  throw std::invalid_argument("unknown granularity '" + s + "'");
}

RegMode reg_mode_from_string(const std::string& s) {
  if (s == "weight_decay") return RegMode::weight_decay;
  if (s == "l1") return RegMode::l1;
  throw std::invalid_argument("unknown regularizer '" + s + "'");
}

GradRule grad_rule_from_string(const std::string& s) {
  if (s == "paper_sum") return GradRule::paper_sum;
  if (s == "chain_rule") return GradRule::chain_rule;
  throw std::invalid_argument("unknown grad rule '" + s + "'");
}

std::vector<int64_t> alpha_shape_for(Granularity g, const ConvGeometry& geom) {
  switch (g) {
    case Granularity::column: return {geom.kernel_h, geom.kernel_w, geom.in_channels};
    case Granularity::channel: return {geom.in_channels};
    case Granularity::shape: return {geom.kernel_h, geom.kernel_w};
    case Granularity::layer: return {1};
  }
  return {1};
}

int64_t structure_count_for(Granularity g, const ConvGeometry& geom) {
  int64_t n = 1;
  for (int64_t e : alpha_shape_for(g, geom)) n *= e;
  return n;
}

int64_t members_per_structure(Granularity g, const ConvGeometry& geom) {
  switch (g) {
    case Granularity::column: return geom.out_channels;
    case Granularity::channel: return geom.out_channels * geom.kernel_h * geom.kernel_w;
    case Granularity::shape: return geom.out_channels * geom.in_channels;
    case Granularity::layer:
      return geom.out_channels * geom.in_channels * geom.kernel_h * geom.kernel_w;
  }
  return 0;
}

SparseView threshold(const Tensor& alpha, double epsilon) {
  if (epsilon < 0.0) throw std::invalid_argument("threshold epsilon must be >= 0");
  SparseView v;
  v.nu = alpha;
  v.active.assign(static_cast<size_t>(alpha.numel()), 1);
  for (int64_t i = 0; i < alpha.numel(); ++i) {
    if (std::fabs(alpha[i]) < epsilon) {
      v.nu[i] = 0.0;
      v.active[static_cast<size_t>(i)] = 0;
    }
  }
  return v;
}

SparseView sparse_view(const StructureSet& s) {
  if (s.fixed_mask.empty()) return threshold(s.alpha, s.epsilon);
  if (s.fixed_mask.size() != static_cast<size_t>(s.alpha.numel()))
    throw std::invalid_argument("fixed mask size does not match structure count");
  SparseView v;
  v.nu = s.alpha;
  v.active = s.fixed_mask;
  for (int64_t i = 0; i < s.alpha.numel(); ++i)
    if (!s.fixed_mask[static_cast<size_t>(i)]) v.nu[i] = 0.0;
  return v;
}

namespace {

void check_weight(const Tensor& w, const ConvGeometry& geom) {
  if (w.rank() != 4 || w.dim(0) != geom.out_channels || w.dim(1) != geom.in_channels ||
      w.dim(2) != geom.kernel_h || w.dim(3) != geom.kernel_w)
    throw std::invalid_argument("weight " + w.shape_str() + " inconsistent with conv geometry");
}

void check_alpha(const StructureSet& s, const ConvGeometry& geom) {
  const auto want = alpha_shape_for(s.granularity, geom);
  if (s.alpha.shape() != want)
    throw std::invalid_argument("alpha " + s.alpha.shape_str() + " does not match granularity " +
                                std::string(to_string(s.granularity)) + " shape " +
                                Tensor::shape_str(want));
}

}  // namespace

Tensor psp_forward(const Tensor& w, const StructureSet& s, const ConvGeometry& geom) {
  check_weight(w, geom);
  check_alpha(s, geom);
  const SparseView v = sparse_view(s);
  Tensor q(w.shape());
  int64_t i = 0;
  for (int64_t k = 0; k < geom.out_channels; ++k)
    for (int64_t c = 0; c < geom.in_channels; ++c)
      for (int64_t r = 0; r < geom.kernel_h; ++r)
        for (int64_t sx = 0; sx < geom.kernel_w; ++sx, ++i)
          q[i] = w[i] * v.nu[structure_index_of(s.granularity, geom, k, c, r, sx)];
  return q;
}

Tensor alpha_gradient(const Tensor& grad_at_q, const Tensor& w, const StructureSet& s,
                      const ConvGeometry& geom) {
  check_weight(grad_at_q, geom);
  check_weight(w, geom);
  check_alpha(s, geom);
  Tensor grad(s.alpha.shape());
  const bool chain = s.grad_rule == GradRule::chain_rule;
  int64_t i = 0;
  for (int64_t k = 0; k < geom.out_channels; ++k)
    for (int64_t c = 0; c < geom.in_channels; ++c)
      for (int64_t r = 0; r < geom.kernel_h; ++r)
        for (int64_t sx = 0; sx < geom.kernel_w; ++sx, ++i) {
          const int64_t si = structure_index_of(s.granularity, geom, k, c, r, sx);
          grad[si] += chain ? grad_at_q[i] * w[i] : grad_at_q[i];
        }
  return grad;
}

Tensor weight_gradient(const Tensor& grad_at_q, const StructureSet& s, const ConvGeometry& geom) {
  check_weight(grad_at_q, geom);
  check_alpha(s, geom);
  const SparseView v = sparse_view(s);
  Tensor grad(grad_at_q.shape());
  int64_t i = 0;
  for (int64_t k = 0; k < geom.out_channels; ++k)
    for (int64_t c = 0; c < geom.in_channels; ++c)
      for (int64_t r = 0; r < geom.kernel_h; ++r)
        for (int64_t sx = 0; sx < geom.kernel_w; ++sx, ++i)
          grad[i] = grad_at_q[i] * v.nu[structure_index_of(s.granularity, geom, k, c, r, sx)];
  return grad;
}

void init_alpha(StructureSet& s, uint64_t seed, double stddev) {
  Rng rng(seed);
  for (int64_t i = 0; i < s.alpha.numel(); ++i) s.alpha[i] = stddev * rng.next_gaussian();
}

namespace {

std::vector<int64_t> ascending_by_value(const std::vector<double>& score) {
  std::vector<int64_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return score[static_cast<size_t>(a)] < score[static_cast<size_t>(b)]; });
  return order;
}

std::vector<uint8_t> keep_mask_from_order(const std::vector<int64_t>& order, double fraction) {
  if (fraction < 0.0 || fraction >= 1.0)
    throw std::invalid_argument("prune fraction must be in [0, 1), got " + std::to_string(fraction));
  const auto n = static_cast<int64_t>(order.size());
  const auto drop = static_cast<int64_t>(std::floor(fraction * static_cast<double>(n)));
  std::vector<uint8_t> keep(order.size(), 1);
  for (int64_t i = 0; i < drop; ++i) keep[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0;
  return keep;
}

}  // namespace

std::vector<int64_t> rank_by_l1_norm(const Tensor& w, Granularity g, const ConvGeometry& geom) {
  check_weight(w, geom);
  std::vector<double> sums(static_cast<size_t>(structure_count_for(g, geom)), 0.0);
  int64_t i = 0;
  for (int64_t k = 0; k < geom.out_channels; ++k)
    for (int64_t c = 0; c < geom.in_channels; ++c)
      for (int64_t r = 0; r < geom.kernel_h; ++r)
        for (int64_t sx = 0; sx < geom.kernel_w; ++sx, ++i)
          sums[static_cast<size_t>(structure_index_of(g, geom, k, c, r, sx))] += std::fabs(w[i]);
  return ascending_by_value(sums);
}

std::vector<uint8_t> apply_fixed_sparsity(StructureSet& s, double fraction) {
  std::vector<double> mags(static_cast<size_t>(s.alpha.numel()));
  for (int64_t i = 0; i < s.alpha.numel(); ++i) mags[static_cast<size_t>(i)] = std::fabs(s.alpha[i]);
  s.fixed_mask = keep_mask_from_order(ascending_by_value(mags), fraction);
  return s.fixed_mask;
}

std::vector<uint8_t> l1_norm_keep_mask(const Tensor& w, Granularity g, const ConvGeometry& geom,
                                       double fraction) {
  return keep_mask_from_order(rank_by_l1_norm(w, g, geom), fraction);
}

}  // namespace psp
