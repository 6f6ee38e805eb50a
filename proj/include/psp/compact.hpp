#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "psp/layers.hpp"

namespace psp {

/// Per-layer accounting and kept-structure record of one compaction.
struct LayerPlan {
  std::string name;
  LayerKind kind = LayerKind::relu;
  bool removed = false;
  int64_t structures_total = 0, structures_kept = 0;
  int64_t params_before = 0, params_after = 0;
  int64_t macs_before = 0, macs_after = 0;
  std::vector<int64_t> kept_channels;  // original input-channel ids (channel granularity)
  std::vector<int64_t> kept_cols;      // packed patch-row ids in the compact channel space
  std::vector<uint8_t> kernel_mask;    // shape granularity R*S keep mask
};

struct CompactionPlan {
  std::vector<LayerPlan> layers;
  int64_t removed_params = 0;
  int64_t removed_macs = 0;
};

struct FoldResult {
  Model model;  // compacted; structure parameters folded into the weights
  CompactionPlan plan;
};

/// Folds structure parameters into the weights and physically removes pruned
/// structures. The compact model's forward equals the masked-dense forward on
/// any input. Throws on an already-compacted model and on a fully pruned
/// layer with no bypass join ("network disconnected").
FoldResult fold_and_compact(const Model& m);

/// Learnable parameter count (weights, biases, batchnorm gamma/beta).
int64_t count_params(const Model& m);

/// Per-sample multiply-accumulates: conv K*C*R*S*out_h*out_w, linear in*out.
int64_t count_macs(const Model& m);

/// Weighted layers (conv + linear), the "Layers" column of reports.
int64_t count_weighted_layers(const Model& m);

struct AlphaHistogram {
  double lo = 0.0, hi = 0.0;  // symmetric range [-max|alpha|, +max|alpha|]
  std::array<int64_t, 101> bins{};
};

AlphaHistogram alpha_histogram(const Tensor& alpha);

struct StructureReportRow {
  std::string layer;
  Granularity granularity = Granularity::column;
  int64_t total = 0;
  int64_t active = 0;
  double below_epsilon_fraction = 0.0;
  double epsilon = 0.0;
  AlphaHistogram hist;
};

/// Sparsity/distribution fragment over a model's structure sets.
std::vector<StructureReportRow> sparsity_report(const Model& m);

struct CompressionReport {
  std::vector<LayerPlan> layers;
  std::vector<StructureReportRow> structures;
  int64_t params_before = 0, params_after = 0;
  int64_t macs_before = 0, macs_after = 0;
  int64_t layers_before = 0, layers_after = 0;
};

CompressionReport make_compression_report(const Model& original, const FoldResult& folded);

}  // namespace psp
