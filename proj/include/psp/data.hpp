#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psp/tensor.hpp"

namespace psp {

/// In-memory dataset. Preprocessing subtracts the per-pixel mean computed
/// from the train split only.
struct Dataset {
  Tensor images;              // N x C x H x W
  std::vector<int> labels;    // in [0, num_classes)
  int num_classes = 0;
  Tensor pixel_mean;          // C x H x W, from the train split

  int64_t size() const { return images.empty() ? 0 : images.dim(0); }
};

struct SyntheticSpec {
  int num_classes = 10;
  int64_t samples = 1000;
  int64_t channels = 3;
  int64_t height = 16;
  int64_t width = 16;
  double noise = 0.3;
  double blob_amplitude = 1.0;
};

/// Train/val pair with shared preprocessing state.
struct DatasetPair {
  Dataset train;
  Dataset val;
};

/// IDX (big-endian, magic 0x00000803 images / 0x00000801 labels).
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.
Dataset load_cifar_binary(const std::vector<std::string>& paths);

/// Class-separable synthetic images: two gaussian bumps per class at seeded
/// positions plus pixel noise. Deterministic under (spec, seed).
Dataset make_synthetic(const SyntheticSpec& spec, uint64_t seed);

/// Computes the train-split mean and subtracts it from both splits.
void apply_mean_subtraction(DatasetPair& pair);

/// Writers for the binary formats (round-trip tests and fixtures).
void write_idx(const std::string& images_path, const std::string& labels_path, const Dataset& d);
void write_cifar_binary(const std::string& path, const Dataset& d);

/// Seeded horizontal flip + pad-2 random crop, one epoch's worth of
/// augmentation over a batch (train-time only; off by default in configs).
Tensor augment_batch(const Tensor& images, bool flip, bool crop, uint64_t seed);

/// Batch index plan: each epoch is a seeded permutation (or the identity when
/// shuffle is off); the last partial batch is kept.
class Batcher {
 public:
  Batcher(int64_t dataset_size, int64_t batch_size, uint64_t seed, bool shuffle);

  int64_t num_batches() const { return num_batches_; }
  /// Indices of batch b within epoch (deterministic in (seed, epoch, b)).
  std::vector<int64_t> batch_indices(int64_t epoch, int64_t b) const;

 private:
  int64_t n_, batch_size_, num_batches_;
  uint64_t seed_;
  bool shuffle_;
};

/// Assembles (images, labels) for the given sample indices.
std::pair<Tensor, std::vector<int>> gather_batch(const Dataset& d,
                                                 const std::vector<int64_t>& indices);

}  // namespace psp
