#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selat/autodiff.hpp"
#include "selat/checkpoint.hpp"
#include "selat/rng.hpp"

namespace selat::data {

struct DatasetMeta {
  std::string name;
  std::size_t classes = 0;
  ad::Shape input_shape;    // per sample, e.g. {1, 28, 28}
  std::uint64_t digest = 0; // FNV-1a over the source bytes
};

/// Inputs in [0, 1], row-major N × prod(input_shape); labels in [0, classes).
struct Dataset {
  std::vector<float> inputs;
  std::vector<int> labels;
  DatasetMeta meta;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return ad::numel(meta.input_shape); }
  std::span<const float> sample(std::size_t i) const;

  /// Throws FormatError if sizes, ranges or labels are inconsistent.
  void validate() const;
  /// First `count` samples (or all, if fewer); digest is recomputed.
  Dataset head(std::size_t count) const;
};

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);

Dataset load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

enum class CifarSplit { Train, Test };

/// Reads `data_batch_{1..5}.bin` (train) or `test_batch.bin` (test) from `dir`.
Dataset load_cifar10_bin(const std::filesystem::path& dir, CifarSplit split = CifarSplit::Train);

/// Gaussian clusters around fixed centers on a circle of radius 0.3 about
/// (0.5, 0.5) in the first two coordinates (0.5 elsewhere), clamped to [0, 1].
/// Samples interleave classes: index i has label i % classes.
Dataset make_synthetic_blobs(std::size_t n_per_class, std::size_t classes, double spread, std::uint64_t seed,
                             std::size_t dim = 2);

io::Container dataset_to_container(const Dataset& ds);
Dataset dataset_from_container(const io::Container& c);

struct Batch {
  ad::Tensorf inputs;  // [B, input_shape...]
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // dataset rows
};

Batch gather(const Dataset& ds, std::span<const std::size_t> rows);

/// Deterministic pass over a dataset. The permutation depends only on
/// (seed, epoch); the final partial batch is kept.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, bool shuffle, std::uint64_t seed, std::uint64_t epoch);

  std::optional<Batch> next();
  std::size_t batch_count() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Pad-4 random crop plus horizontal flip, applied per sample of an image batch.
void augment_crop_flip(Batch& batch, Rng& rng);

}  // namespace selat::data
