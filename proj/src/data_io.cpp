#include "selat/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "selat/errors.hpp"

namespace selat::data {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::uint32_t big_endian_u32(const std::vector<unsigned char>& bytes, std::size_t offset) {
  return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
         (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08X", v);
  return buf;
}

struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset;
};

IdxHeader parse_idx(const std::vector<unsigned char>& bytes, std::uint32_t expected_magic,
                    const std::filesystem::path& path) {
  if (bytes.size() < 4) throw FormatError(path.string() + ": truncated IDX header");
  const auto magic = big_endian_u32(bytes, 0);
  if (magic != expected_magic) {
    throw FormatError(path.string() + ": IDX magic " + hex(magic) + ", expected " + hex(expected_magic));
  }
  const std::size_t rank = magic & 0xFF;
  IdxHeader h;
  h.payload_offset = 4 + 4 * rank;
  if (bytes.size() < h.payload_offset) throw FormatError(path.string() + ": truncated IDX header");
  std::size_t payload = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    h.dims.push_back(big_endian_u32(bytes, 4 + 4 * d));
    payload *= h.dims.back();
  }
  if (bytes.size() - h.payload_offset < payload) {
    throw FormatError(path.string() + ": IDX payload has " + std::to_string(bytes.size() - h.payload_offset) +
                      " bytes, header declares " + std::to_string(payload));
  }
  return h;
}

}  // namespace

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t hash) {
  for (auto b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash) {
  return fnv1a64(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()),
                 hash);
}

namespace {

std::uint64_t digest_values(const std::vector<float>& inputs, const std::vector<int>& labels) {
  auto h = fnv1a64(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(inputs.data()),
                                                  inputs.size() * sizeof(float)));
  return fnv1a64(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(labels.data()),
                                                labels.size() * sizeof(int)),
                 h);
}

}  // namespace

std::span<const float> Dataset::sample(std::size_t i) const {
  const std::size_t n = sample_size();
  return std::span<const float>(inputs).subspan(i * n, n);
}

void Dataset::validate() const {
  if (meta.input_shape.empty()) throw FormatError(meta.name + ": missing input shape");
  if (inputs.size() != labels.size() * sample_size()) {
    throw FormatError(meta.name + ": " + std::to_string(inputs.size()) + " input values for " +
                      std::to_string(labels.size()) + " labels of shape " + ad::to_string(meta.input_shape));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!(inputs[i] >= 0.0f && inputs[i] <= 1.0f)) {
      throw FormatError(meta.name + ": input value " + std::to_string(inputs[i]) + " outside [0,1] at offset " +
                        std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= meta.classes) {
      throw FormatError(meta.name + ": label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                        " outside [0, " + std::to_string(meta.classes) + ")");
    }
  }
}

Dataset Dataset::head(std::size_t count) const {
  if (count >= size()) return *this;
  Dataset out;
  out.meta = meta;
  out.meta.name = meta.name + "[:" + std::to_string(count) + "]";
  out.inputs.assign(inputs.begin(), inputs.begin() + static_cast<std::ptrdiff_t>(count * sample_size()));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count));
  out.meta.digest = fnv1a64(std::to_string(count), meta.digest);
  return out;
}

Dataset load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto image_bytes = read_file(images_path);
  const auto label_bytes = read_file(labels_path);
  const auto ih = parse_idx(image_bytes, 0x00000803, images_path);
  const auto lh = parse_idx(label_bytes, 0x00000801, labels_path);
  if (ih.dims[0] != lh.dims[0]) {
    throw FormatError(images_path.string() + ": " + std::to_string(ih.dims[0]) + " images but " +
                      labels_path.string() + " has " + std::to_string(lh.dims[0]) + " labels");
  }
  Dataset ds;
  ds.meta.name = "mnist";
  ds.meta.classes = 10;
  ds.meta.input_shape = {1, ih.dims[1], ih.dims[2]};
  const std::size_t n = ih.dims[0], pixels = std::size_t(ih.dims[1]) * ih.dims[2];
  ds.inputs.resize(n * pixels);
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    ds.inputs[i] = static_cast<float>(image_bytes[ih.payload_offset + i]) / 255.0f;
  }
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = label_bytes[lh.payload_offset + i];
  ds.meta.digest = fnv1a64(label_bytes, fnv1a64(image_bytes));
  ds.validate();
  return ds;
}

Dataset load_cifar10_bin(const std::filesystem::path& dir, CifarSplit split) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  std::vector<std::filesystem::path> files;
  if (split == CifarSplit::Train) {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  Dataset ds;
  ds.meta.name = split == CifarSplit::Train ? "cifar10-train" : "cifar10-test";
  ds.meta.classes = 10;
  ds.meta.input_shape = {3, 32, 32};
  std::uint64_t digest = 0xcbf29ce484222325ULL;
  for (const auto& file : files) {
    if (!std::filesystem::exists(file)) throw IoError("CIFAR-10 batch not found: '" + file.string() + "'");
    const auto bytes = read_file(file);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw FormatError(file.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                        std::to_string(kRecord) + "-byte record");
    }
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      const int label = bytes[off];
      if (label > 9) {
        throw FormatError(file.string() + ": label byte " + std::to_string(label) + " in record " +
                          std::to_string(off / kRecord) + " outside 0-9");
      }
      ds.labels.push_back(label);
      for (std::size_t p = 0; p < kPixels; ++p) ds.inputs.push_back(static_cast<float>(bytes[off + 1 + p]) / 255.0f);
    }
    digest = fnv1a64(bytes, digest);
  }
  ds.meta.digest = digest;
  ds.validate();
  return ds;
}

Dataset make_synthetic_blobs(std::size_t n_per_class, std::size_t classes, double spread, std::uint64_t seed,
                             std::size_t dim) {
  if (classes < 2) throw ConfigError("blobs: need at least 2 classes");
  if (dim < 2) throw ConfigError("blobs: need at least 2 dimensions");
  if (n_per_class == 0) throw ConfigError("blobs: n_per_class must be positive");
  if (spread < 0) throw ConfigError("blobs: spread must be non-negative");
  Rng rng(seed);
  Dataset ds;
  ds.meta.name = "blobs";
  ds.meta.classes = classes;
  ds.meta.input_shape = {dim};
  ds.inputs.reserve(n_per_class * classes * dim);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
      for (std::size_t d = 0; d < dim; ++d) {
        double center = 0.5;
        if (d == 0) center += 0.3 * std::cos(angle);
        if (d == 1) center += 0.3 * std::sin(angle);
        const double v = center + spread * rng.normal();
        ds.inputs.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
      }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  ds.meta.digest = digest_values(ds.inputs, ds.labels);
  ds.validate();
  return ds;
}

io::Container dataset_to_container(const Dataset& ds) {
  io::Container c;
  c.name = "dataset:" + ds.meta.name;
  io::ContainerEntry inputs{"inputs", {ds.size()}, ds.inputs};
  for (auto d : ds.meta.input_shape) inputs.dims.push_back(d);
  io::ContainerEntry labels{"labels", {ds.size()}, {}};
  labels.values.assign(ds.labels.begin(), ds.labels.end());
  io::ContainerEntry classes{"classes", {1}, {static_cast<float>(ds.meta.classes)}};
  c.entries = {std::move(inputs), std::move(labels), std::move(classes)};
  return c;
}

Dataset dataset_from_container(const io::Container& c) {
  if (c.name.rfind("dataset:", 0) != 0) throw FormatError("container '" + c.name + "' is not a dataset");
  const auto& inputs = c.entry("inputs");
  const auto& labels = c.entry("labels");
  const auto& classes = c.entry("classes");
  if (inputs.dims.size() < 2 || labels.dims.size() != 1 || inputs.dims[0] != labels.dims[0] ||
      classes.values.size() != 1) {
    throw FormatError("dataset container '" + c.name + "': inconsistent entries");
  }
  Dataset ds;
  ds.meta.name = c.name.substr(8);
  ds.meta.classes = static_cast<std::size_t>(classes.values[0]);
  ds.meta.input_shape.assign(inputs.dims.begin() + 1, inputs.dims.end());
  ds.inputs = inputs.values;
  ds.labels.reserve(labels.values.size());
  for (float v : labels.values) {
    if (v != std::floor(v)) throw FormatError("dataset container '" + c.name + "': non-integer label");
    ds.labels.push_back(static_cast<int>(v));
  }
  ds.meta.digest = fnv1a64(io::encode_container(c));
  ds.validate();
  return ds;
}

Batch gather(const Dataset& ds, std::span<const std::size_t> rows) {
  const std::size_t n = ds.sample_size();
  std::vector<float> values;
  values.reserve(rows.size() * n);
  Batch b;
  for (auto r : rows) {
    if (r >= ds.size()) throw ContractError("gather: row " + std::to_string(r) + " out of range");
    const auto s = ds.sample(r);
    values.insert(values.end(), s.begin(), s.end());
    b.labels.push_back(ds.labels[r]);
  }
  ad::Shape shape{rows.size()};
  shape.insert(shape.end(), ds.meta.input_shape.begin(), ds.meta.input_shape.end());
  b.inputs = ad::Tensorf(std::move(shape), std::move(values));
  b.indices.assign(rows.begin(), rows.end());
  return b;
}

BatchIterator::BatchIterator(const Dataset& ds, std::size_t batch_size, bool shuffle, std::uint64_t seed,
                             std::uint64_t epoch)
    : ds_(&ds), batch_size_(batch_size), order_(ds.size()) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle) {
    Rng rng = Rng(seed).split(0x5348554646ULL + epoch);
    // Fisher-Yates with our own index draws keeps the order independent of
    // the standard library's shuffle implementation.
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.index(i)]);
  }
}

std::optional<Batch> BatchIterator::next() {
  if (pos_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), pos_ + batch_size_);
  auto rows = std::span<const std::size_t>(order_).subspan(pos_, end - pos_);
  pos_ = end;
  return gather(*ds_, rows);
}

std::size_t BatchIterator::batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

void augment_crop_flip(Batch& batch, Rng& rng) {
  const auto& shape = batch.inputs.shape();
  if (shape.size() != 4) throw DimensionError("augment_crop_flip: expects [B,C,H,W], got " + ad::to_string(shape));
  const std::size_t channels = shape[1], h = shape[2], w = shape[3], pad = 4;
  auto values = batch.inputs.mutable_data();
  std::vector<float> src(channels * h * w);
  for (std::size_t b = 0; b < shape[0]; ++b) {
    float* img = values.data() + b * src.size();
    std::copy(img, img + src.size(), src.begin());
    const auto dy = static_cast<std::ptrdiff_t>(rng.index(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
    const auto dx = static_cast<std::ptrdiff_t>(rng.index(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
    const bool flip = rng.uniform() < 0.5;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
          const auto sx0 = static_cast<std::ptrdiff_t>(flip ? w - 1 - x : x) + dx;
          const bool inside = sy >= 0 && sx0 >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                              sx0 < static_cast<std::ptrdiff_t>(w);
          img[(c * h + y) * w + x] = inside ? src[(c * h + sy) * w + sx0] : 0.0f;
        }
      }
    }
  }
}

}  // namespace selat::data
