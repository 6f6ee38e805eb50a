#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psp/tensor.hpp"

namespace psp {

/// Which group of weights is pruned as a unit.
///   column  -> one (r,s,c) position of the flattened weight matrix, all K outputs
///   channel -> all weights consuming one input feature map
///   shape   -> one (r,s) kernel position across all channels
///   layer   -> the whole weight tensor (multi-branch architectures only)
enum class Granularity { column, channel, shape, layer };

enum class RegMode { weight_decay, l1 };

/// How the structure-parameter gradient is aggregated from the upstream
/// gradient at the substituted tensor positions.
///   paper_sum  -> sum of upstream gradients over the structure's members
///   chain_rule -> sum of upstream gradient * member weight
enum class GradRule { paper_sum, chain_rule };

const char* to_string(Granularity g);
const char* to_string(RegMode m);
const char* to_string(GradRule r);
Granularity granularity_from_string(const std::string& s);
RegMode reg_mode_from_string(const std::string& s);
GradRule grad_rule_from_string(const std::string& s);

/// Expected structure-parameter tensor shape for a granularity:
/// column [R,S,C] / channel [C] / shape [R,S] / layer [1].
std::vector<int64_t> alpha_shape_for(Granularity g, const ConvGeometry& geom);

/// Dense structure parameters of one conv layer at one granularity.
struct StructureSet {
  Granularity granularity = Granularity::column;
  Tensor alpha;                      // dense structure parameters
  double epsilon = 0.0;              // pruning threshold; 0 disables thresholding
  RegMode regularizer = RegMode::weight_decay;
  GradRule grad_rule = GradRule::paper_sum;
  std::vector<uint8_t> fixed_mask;   // fixed-sparsity mode: 1 = keep; empty = threshold mode

  int64_t structure_count() const { return alpha.numel(); }
};

/// Thresholded view of a StructureSet: nu[i] = 0 where |alpha[i]| < eps,
/// alpha[i] elsewhere. active[i] mirrors nu[i] != 0... except alpha exactly 0
/// with eps 0, where the structure counts as active with value 0.
struct SparseView {
  Tensor nu;
  std::vector<uint8_t> active;
};

/// Structure index of weight element (k,c,r,s); the flattening matches
/// alpha_shape_for (row-major).
inline int64_t structure_index_of(Granularity g, const ConvGeometry& geom, int64_t /*k*/,
                                  int64_t c, int64_t r, int64_t s) {
  switch (g) {
    case Granularity::column: return (r * geom.kernel_w + s) * geom.in_channels + c;
    case Granularity::channel: return c;
    case Granularity::shape: return r * geom.kernel_w + s;
    case Granularity::layer: return 0;
  }
  return 0;
}

/// Total structure count at a granularity for a geometry.
int64_t structure_count_for(Granularity g, const ConvGeometry& geom);

/// Number of member weights per structure.
int64_t members_per_structure(Granularity g, const ConvGeometry& geom);

/// Boundary |alpha| == eps stays active.
SparseView threshold(const Tensor& alpha, double epsilon);

/// Effective sparse view of a set: fixed mask when present, threshold otherwise.
SparseView sparse_view(const StructureSet& s);

/// Substituted tensor q[k,c,r,s] = w[k,c,r,s] * nu(structure_of(k,c,r,s)).
Tensor psp_forward(const Tensor& w, const StructureSet& s, const ConvGeometry& geom);

/// Gradient for alpha from the upstream gradient dE/dW at the substituted
/// positions. The threshold is bypassed (straight-through): pruned structures
/// receive gradient like active ones. Members are accumulated in weight
/// memory order (k,c,r,s ascending), which fixes the summation order.
Tensor alpha_gradient(const Tensor& grad_at_q, const Tensor& w, const StructureSet& s,
                      const ConvGeometry& geom);

/// dE/dw = dE/dq * nu; weights in pruned structures get zero loss gradient.
Tensor weight_gradient(const Tensor& grad_at_q, const StructureSet& s, const ConvGeometry& geom);

/// alpha ~ N(0, std^2), deterministic under seed. Default std 0.1.
void init_alpha(StructureSet& s, uint64_t seed, double stddev = 0.1);

/// Structure indices ordered ascending by sum |w| over members, ties by index.
std::vector<int64_t> rank_by_l1_norm(const Tensor& w, Granularity g, const ConvGeometry& geom);

/// Masks exactly floor(fraction * n) structures with smallest |alpha|
/// (ties kept stable by index); stores and returns the keep mask.
std::vector<uint8_t> apply_fixed_sparsity(StructureSet& s, double fraction);

/// Keep mask ranked by member |w| sums instead of alpha (the l1-norm pruning
/// baseline); floor(fraction * n) smallest structures are dropped.
std::vector<uint8_t> l1_norm_keep_mask(const Tensor& w, Granularity g, const ConvGeometry& geom,
                                       double fraction);

}  // namespace psp
