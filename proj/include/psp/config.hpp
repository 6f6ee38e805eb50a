#pragma once

#include <optional>
#include <string>
#include <vector>

#include "psp/data.hpp"
#include "psp/layers.hpp"
#include "psp/train.hpp"

namespace psp {

struct ModelConfig {
  std::string arch = "resnet_small";  // resnet_small | densenet_small
  int depth = 8;
  std::vector<int64_t> widths = {8, 16, 32};  // resnet group widths
  int growth = 6;                              // densenet growth rate
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | idx | cifar
  int classes = 10;
  int64_t train_samples = 2000;
  int64_t val_samples = 400;
  int64_t channels = 3, height = 16, width = 16;
  double noise = 0.3;
  uint64_t data_seed = 1234;
  std::string root;  // PSP_DATA_ROOT env var overrides
  std::string train_images, train_labels, val_images, val_labels;  // idx
  std::vector<std::string> train_bins;                             // cifar
  std::string val_bin;
};

struct OutputConfig {
  std::string checkpoint = "out/run.ckpt";
  std::string log = "out/run.jsonl";
  std::string run_id = "run";
};

struct SweepConfig {
  SweepAxis axis = SweepAxis::epsilon;
  std::vector<double> values;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PruneAttachConfig prune;
  DataConfig data;
  OutputConfig output;
  std::optional<SweepConfig> sweep;
};

/// Key-value-with-sections text. Unknown sections or keys are rejected;
/// defaults are materialized so the echo is complete.
RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config(const std::string& path);

/// Canonical echo: parse(echo(c)) == c, byte-stable.
std::string run_config_to_ini(const RunConfig& c);

/// Resolves the dataset described by [data], applying mean subtraction.
DatasetPair load_data(const DataConfig& d);

/// Builds and initializes the configured architecture for the dataset's input
/// geometry and class count (no PSP attachment).
Model build_model_from_config(const RunConfig& c, const DatasetPair& data);

}  // namespace psp
