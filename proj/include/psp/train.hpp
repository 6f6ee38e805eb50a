#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "psp/compact.hpp"
#include "psp/data.hpp"
#include "psp/layers.hpp"

namespace psp {

struct TrainConfig {
  int epochs = 30;
  int64_t batch_size = 64;
  double lr = 0.1;
  std::vector<double> milestone_fracs = {0.5, 0.75};  // lr / divisor at these epoch fractions
  double milestone_divisor = 10.0;
  double momentum = 0.9;
  double weight_decay = 1e-4;                    // lambda for weights (always Eq-style decay)
  RegMode struct_reg = RegMode::weight_decay;    // regularizer for structure parameters
  double struct_lambda = 1e-4;                   // lambda for structure parameters
  double prune_fraction = 0.0;                   // fixed-sparsity / l1-baseline, re-ranked per epoch
  bool augment_flip = false;
  bool augment_crop = false;
  uint64_t seed = 1;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_top1 = 0.0;
  double val_top5 = -1.0;  // -1 when classes <= 5
  double sparsity = 0.0;   // pruned fraction over all attached structures
  std::vector<StructureReportRow> structures;
};

struct RunLog {
  std::string run_id = "run";
  std::vector<EpochRecord> records;
};

struct EvalResult {
  double top1_error = 0.0;       // percent
  double top5_error = -1.0;      // percent; -1 when classes <= 5
  int64_t samples = 0;
};

/// Learning rate for an epoch under the milestone schedule.
double scheduled_lr(const TrainConfig& cfg, int epoch);

/// All trainable tensors in declared order: per layer weight, structure
/// parameters, bias / gamma, beta. Running stats are buffers, not parameters.
std::vector<std::pair<std::string, Tensor*>> named_parameters(Model& m);

/// Pruned fraction over all attached structure sets (0 when none).
double model_sparsity(const Model& m);

EvalResult evaluate(const Model& m, const Dataset& val, int64_t batch_size = 256);

/// SGD training with the dual update path: weights always take the
/// weight-decay rule with cfg.weight_decay; structure parameters take their
/// set's regularizer with cfg.struct_lambda. Deterministic under cfg.seed.
RunLog train(Model& m, const DatasetPair& data, const TrainConfig& cfg,
             const std::string& run_id = "run");

enum class SweepAxis { epsilon, lambda };

struct SweepRow {
  double value = 0.0;     // the swept quantity
  double epsilon = 0.0;   // effective threshold of the run
  double lambda = 0.0;    // effective structure regularization strength
  double sparsity = 0.0;
  double val_top1 = 0.0;
};

/// Retrains per sweep level from the same seed and reports sparsity vs error.
std::vector<SweepRow> ablation_sweep(const std::function<Model(uint64_t)>& build_model,
                                     PruneAttachConfig prune, TrainConfig tcfg,
                                     const DatasetPair& data, SweepAxis axis,
                                     const std::vector<double>& values);

}  // namespace psp
