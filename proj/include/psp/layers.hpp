#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "psp/autodiff.hpp"
#include "psp/structure.hpp"
#include "psp/tensor.hpp"

namespace psp {

enum class LayerKind { conv, linear, batchnorm, relu, avgpool, maxpool, residual_add, concat };
enum class ExemptReason { none, input, output, transition, shortcut };
enum class PruneMode { none, psp_threshold, psp_fixed_sparsity, l1_norm_baseline };

const char* to_string(LayerKind k);
const char* to_string(ExemptReason r);
const char* to_string(PruneMode m);
LayerKind layer_kind_from_string(const std::string& s);
ExemptReason exempt_from_string(const std::string& s);
PruneMode prune_mode_from_string(const std::string& s);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::vector<int> inputs;  // producer layer ids; -1 denotes the model input

  ConvGeometry geom{};                         // conv
  int64_t in_features = 0, out_features = 0;   // linear
  int64_t channels = 0;                        // batchnorm
  int64_t pool_window = 0, pool_stride = 0;    // pools; avgpool window 0 = global
  bool has_bias = false;

  bool psp_attached = false;
  ExemptReason exempt = ExemptReason::none;
  bool join_feeder = false;  // output feeds a residual_add/concat directly
};

struct LayerParams {
  Tensor weight, bias;
  Tensor gamma, beta, running_mean, running_var;

  // Compacted execution metadata (unused on dense models).
  std::vector<int64_t> input_gather;  // kept channels of the incoming tensor
  bool packed = false;                // conv weight stored as [K x M] over kept_cols
  std::vector<int64_t> kept_cols;     // kept patch rows of the virtual im2col
  std::vector<uint8_t> kernel_mask;   // shape pruning: R*S kernel-position keep mask
};

/// Ordered layer DAG with a single input and a single output (the last layer).
struct Model {
  std::string arch = "custom";
  int64_t input_channels = 3, input_h = 16, input_w = 16;
  int num_classes = 10;
  std::vector<LayerSpec> layers;
  std::vector<LayerParams> params;
  std::map<int, std::vector<StructureSet>> structures;  // layer id -> attached sets
  PruneMode prune_mode = PruneMode::none;
  bool compacted = false;
  std::vector<std::string> removed_layers;

  int layer_index(const std::string& name) const;  // -1 if absent
};

void validate_model(const Model& m);

// ---- reference architectures ------------------------------------------------

/// Pre-activation residual net with the 6n+2 layout; PSP eligible on the 6n
/// block convs, stem/shortcuts/classifier exempt.
Model build_resnet_small(int depth, int num_classes, std::vector<int64_t> widths = {8, 16, 32},
                         int64_t in_channels = 3, int64_t in_h = 16, int64_t in_w = 16);

/// Densely connected net (depth 3n+4) built from relu-conv blocks whose convs
/// feed the concatenation directly, so pruned blocks drop out exactly. No
/// batchnorm in this variant; stem/transitions carry biases instead.
Model build_densenet_small(int depth, int growth, int num_classes, int64_t in_channels = 3,
                           int64_t in_h = 8, int64_t in_w = 8);

/// He-style weight init; deterministic under seed. Structure parameters are
/// drawn from separate streams so attaching PSP never shifts the weight draws.
void init_model_params(Model& m, uint64_t seed);

// ---- pruning attachment ------------------------------------------------------

struct PruneAttachConfig {
  PruneMode mode = PruneMode::psp_threshold;
  std::vector<Granularity> granularities = {Granularity::column};
  double epsilon = 0.1;
  RegMode regularizer = RegMode::weight_decay;
  GradRule grad_rule = GradRule::paper_sum;
  double fraction = 0.0;  // fixed-sparsity / l1-baseline prune fraction
  std::map<std::string, bool> attach_overrides;
  std::map<std::string, double> epsilon_overrides;
  uint64_t seed = 1;
  double init_std = 0.1;
};

/// Creates the StructureSets on eligible convs and sets the model prune mode.
void attach_psp(Model& m, const PruneAttachConfig& cfg);

// ---- forward ------------------------------------------------------------------

struct ForwardPass {
  Graph graph;
  int logits = -1;
  std::vector<std::pair<std::string, int>> param_nodes;  // declared order
};

/// Builds the graph for one batch. In training mode batchnorm running stats
/// are updated in place. Substitution follows m.prune_mode.
ForwardPass model_forward(Model& m, const Tensor& batch, bool training);

/// Eval logits without gradient bookkeeping; pure function of (model, batch).
Tensor model_logits(const Model& m, const Tensor& batch);

/// Standalone batchnorm (shared semantics with the graph op, eps 1e-5).
Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Tensor& running_mean, Tensor& running_var, bool training,
                         double momentum = 0.1);

/// Mean cross-entropy of logits [N x classes] against integer labels.
double cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace psp
