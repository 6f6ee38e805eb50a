#include "psp/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "psp/errors.hpp"
#include "psp/rng.hpp"

namespace psp {

namespace {

uint32_t read_be32(std::istream& in, const std::string& path, size_t& offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError(path + ": truncated at offset " + std::to_string(offset));
  offset += 4;
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  return in;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  size_t off = 0;
  std::ifstream imgs = open_input(images_path);
  const uint32_t magic = read_be32(imgs, images_path, off);
  if (magic != 0x00000803u)
    throw DataError(images_path + ": bad magic 0x" + std::to_string(magic) + " at offset 0");
  const uint32_t count = read_be32(imgs, images_path, off);
  const uint32_t rows = read_be32(imgs, images_path, off);
  const uint32_t cols = read_be32(imgs, images_path, off);
  if (count == 0 || rows == 0 || cols == 0)
    throw DataError(images_path + ": empty image dimensions");

  Dataset d;
  d.images = Tensor({count, 1, rows, cols});
  std::vector<unsigned char> row(static_cast<size_t>(rows) * cols);
  for (uint32_t i = 0; i < count; ++i) {
    imgs.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!imgs) throw DataError(images_path + ": truncated at offset " + std::to_string(off));
    off += row.size();
    double* dst = d.images.data() + static_cast<int64_t>(i) * rows * cols;
    for (size_t j = 0; j < row.size(); ++j) dst[j] = static_cast<double>(row[j]) / 255.0;
  }

  off = 0;
  std::ifstream labs = open_input(labels_path);
  const uint32_t lmagic = read_be32(labs, labels_path, off);
  if (lmagic != 0x00000801u)
    throw DataError(labels_path + ": bad magic 0x" + std::to_string(lmagic) + " at offset 0");
  const uint32_t lcount = read_be32(labs, labels_path, off);
  if (lcount != count)
    throw DataError(labels_path + ": label count " + std::to_string(lcount) +
                    " != image count " + std::to_string(count));
  d.labels.resize(count);
  int max_label = 0;
  for (uint32_t i = 0; i < count; ++i) {
    unsigned char b;
    labs.read(reinterpret_cast<char*>(&b), 1);
    if (!labs) throw DataError(labels_path + ": truncated at offset " + std::to_string(off));
    ++off;
    d.labels[i] = b;
    max_label = std::max(max_label, static_cast<int>(b));
  }
  d.num_classes = max_label + 1;
  return d;
}

void write_idx(const std::string& images_path, const std::string& labels_path, const Dataset& d) {
  if (d.images.dim(1) != 1) throw DataError("idx writer supports single-channel images only");
  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw DataError(images_path + ": cannot open for writing");
  write_be32(imgs, 0x00000803u);
  write_be32(imgs, static_cast<uint32_t>(d.images.dim(0)));
  write_be32(imgs, static_cast<uint32_t>(d.images.dim(2)));
  write_be32(imgs, static_cast<uint32_t>(d.images.dim(3)));
  for (int64_t i = 0; i < d.images.numel(); ++i) {
    const double v = std::min(1.0, std::max(0.0, d.images[i]));
    const auto b = static_cast<unsigned char>(std::lround(v * 255.0));
    imgs.write(reinterpret_cast<const char*>(&b), 1);
  }
  std::ofstream labs(labels_path, std::ios::binary);
  if (!labs) throw DataError(labels_path + ": cannot open for writing");
  write_be32(labs, 0x00000801u);
  write_be32(labs, static_cast<uint32_t>(d.labels.size()));
  for (int lab : d.labels) {
    const auto b = static_cast<unsigned char>(lab);
    labs.write(reinterpret_cast<const char*>(&b), 1);
  }
}

Dataset load_cifar_binary(const std::vector<std::string>& paths) {
  constexpr size_t kRecord = 1 + 3072;
  std::vector<std::vector<unsigned char>> files;
  int64_t total = 0;
  for (const std::string& path : paths) {
    std::ifstream in = open_input(path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % kRecord != 0)
      throw DataError(path + ": bad record size, " + std::to_string(bytes.size()) +
                      " bytes is not a multiple of 3073 (stray data at offset " +
                      std::to_string(bytes.size() - bytes.size() % kRecord) + ")");
    total += static_cast<int64_t>(bytes.size() / kRecord);
    files.push_back(std::move(bytes));
  }
  Dataset d;
  d.images = Tensor({total, 3, 32, 32});
  d.labels.resize(static_cast<size_t>(total));
  int64_t rec = 0;
  int max_label = 0;
  for (const auto& bytes : files) {
    for (size_t p = 0; p < bytes.size(); p += kRecord, ++rec) {
      d.labels[static_cast<size_t>(rec)] = bytes[p];
      max_label = std::max(max_label, static_cast<int>(bytes[p]));
      double* dst = d.images.data() + rec * 3072;
      for (int64_t j = 0; j < 3072; ++j)
        dst[j] = static_cast<double>(bytes[p + 1 + static_cast<size_t>(j)]) / 255.0;
    }
  }
  d.num_classes = max_label + 1;
  return d;
}

void write_cifar_binary(const std::string& path, const Dataset& d) {
  if (d.images.dim(1) != 3 || d.images.dim(2) != 32 || d.images.dim(3) != 32)
    throw DataError("cifar writer needs 3x32x32 images");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (int64_t i = 0; i < d.images.dim(0); ++i) {
    const auto lab = static_cast<unsigned char>(d.labels[static_cast<size_t>(i)]);
    out.write(reinterpret_cast<const char*>(&lab), 1);
    const double* src = d.images.data() + i * 3072;
    for (int64_t j = 0; j < 3072; ++j) {
      const double v = std::min(1.0, std::max(0.0, src[j]));
      const auto b = static_cast<unsigned char>(std::lround(v * 255.0));
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
}

Dataset make_synthetic(const SyntheticSpec& spec, uint64_t seed) {
  if (spec.num_classes < 2) throw DataError("synthetic dataset needs >= 2 classes");
  if (spec.samples < spec.num_classes)
    throw DataError("synthetic dataset smaller than class count");

  // Class templates: two gaussian bumps per class at seeded positions, with a
  // seeded sign per (blob, channel) so classes differ in every channel.
  Rng template_rng(derive_seed(seed, "synthetic.templates"));
  const int64_t chw = spec.channels * spec.height * spec.width;
  Tensor templates({spec.num_classes, spec.channels, spec.height, spec.width});
  for (int k = 0; k < spec.num_classes; ++k) {
    for (int blob = 0; blob < 2; ++blob) {
      const double cy = 1.0 + template_rng.next_double() * (static_cast<double>(spec.height) - 2.0);
      const double cx = 1.0 + template_rng.next_double() * (static_cast<double>(spec.width) - 2.0);
      const double sigma = 1.0 + template_rng.next_double() * 1.5;
      for (int64_t c = 0; c < spec.channels; ++c) {
        const double sign = template_rng.next_double() < 0.5 ? -1.0 : 1.0;
        for (int64_t y = 0; y < spec.height; ++y)
          for (int64_t x = 0; x < spec.width; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            templates.at4(k, c, y, x) +=
                sign * spec.blob_amplitude * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
          }
      }
    }
  }

  Rng sample_rng(derive_seed(seed, "synthetic.samples"));
  Dataset d;
  d.num_classes = spec.num_classes;
  d.images = Tensor({spec.samples, spec.channels, spec.height, spec.width});
  d.labels.resize(static_cast<size_t>(spec.samples));
  for (int64_t i = 0; i < spec.samples; ++i) {
    const int k = static_cast<int>(i % spec.num_classes);  // balanced classes
    d.labels[static_cast<size_t>(i)] = k;
    double* dst = d.images.data() + i * chw;
    const double* tmpl = templates.data() + static_cast<int64_t>(k) * chw;
    for (int64_t j = 0; j < chw; ++j) dst[j] = tmpl[j] + spec.noise * sample_rng.next_gaussian();
  }
  return d;
}

void apply_mean_subtraction(DatasetPair& pair) {
  if (pair.train.size() == 0) throw DataError("empty train split");
  const int64_t chw = pair.train.images.numel() / pair.train.size();
  Tensor mean({pair.train.images.dim(1), pair.train.images.dim(2), pair.train.images.dim(3)});
  for (int64_t i = 0; i < pair.train.size(); ++i) {
    const double* src = pair.train.images.data() + i * chw;
    for (int64_t j = 0; j < chw; ++j) mean[j] += src[j];
  }
  for (int64_t j = 0; j < chw; ++j) mean[j] /= static_cast<double>(pair.train.size());

  for (Dataset* d : {&pair.train, &pair.val}) {
    if (d->size() == 0) continue;
    if (d->images.numel() / d->size() != chw)
      throw DataError("val split image shape differs from train split");
    for (int64_t i = 0; i < d->size(); ++i) {
      double* dst = d->images.data() + i * chw;
      for (int64_t j = 0; j < chw; ++j) dst[j] -= mean[j];
    }
    d->pixel_mean = mean;
  }
}

Tensor augment_batch(const Tensor& images, bool flip, bool crop, uint64_t seed) {
  if (!flip && !crop) return images;
  Rng rng(seed);
  Tensor out = images;
  const int64_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  for (int64_t i = 0; i < n; ++i) {
    const bool do_flip = flip && rng.next_double() < 0.5;
    int64_t dy = 0, dx = 0;
    if (crop) {
      dy = static_cast<int64_t>(rng.next_below(5)) - 2;  // pad 2, shift in [-2, 2]
      dx = static_cast<int64_t>(rng.next_below(5)) - 2;
    }
    if (!do_flip && dy == 0 && dx == 0) continue;
    for (int64_t cc = 0; cc < c; ++cc)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const int64_t sx0 = do_flip ? w - 1 - x : x;
          const int64_t sy = y + dy, sx = sx0 + dx;
          out.at4(i, cc, y, x) =
              (sy >= 0 && sy < h && sx >= 0 && sx < w) ? images.at4(i, cc, sy, sx) : 0.0;
        }
  }
  return out;
}

Batcher::Batcher(int64_t dataset_size, int64_t batch_size, uint64_t seed, bool shuffle)
    : n_(dataset_size), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size < 1) throw DataError("batch size must be >= 1");
  if (dataset_size < 1) throw DataError("dataset is empty");
  num_batches_ = (n_ + batch_size_ - 1) / batch_size_;
}

std::vector<int64_t> Batcher::batch_indices(int64_t epoch, int64_t b) const {
  if (b < 0 || b >= num_batches_) throw std::invalid_argument("batch index out of range");
  std::vector<int64_t> perm;
  if (shuffle_) {
    Rng rng(derive_seed(seed_, "shuffle", static_cast<uint64_t>(epoch)));
    perm = rng.permutation(n_);
  } else {
    perm.resize(static_cast<size_t>(n_));
    for (int64_t i = 0; i < n_; ++i) perm[static_cast<size_t>(i)] = i;
  }
  const int64_t lo = b * batch_size_, hi = std::min(n_, lo + batch_size_);
  return {perm.begin() + lo, perm.begin() + hi};
}

std::pair<Tensor, std::vector<int>> gather_batch(const Dataset& d,
                                                 const std::vector<int64_t>& indices) {
  const int64_t chw = d.images.numel() / d.size();
  Tensor images({static_cast<int64_t>(indices.size()), d.images.dim(1), d.images.dim(2),
                 d.images.dim(3)});
  std::vector<int> labels(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const double* src = d.images.data() + indices[i] * chw;
    double* dst = images.data() + static_cast<int64_t>(i) * chw;
    std::memcpy(dst, src, sizeof(double) * static_cast<size_t>(chw));
    labels[i] = d.labels[static_cast<size_t>(indices[i])];
  }
  return {std::move(images), std::move(labels)};
}

}  // namespace psp
