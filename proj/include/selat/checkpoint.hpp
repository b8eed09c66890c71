#pragma once

// Flat binary container shared by model checkpoints and generated datasets.
//
//   "SELAT1"                         6 bytes magic
//   u64 name length, name bytes      model descriptor or dataset name
//   u64 entry count
//   per entry:
//     u64 name length, name bytes
//     u64 rank, rank × u64 dims
//     prod(dims) × f32 values
//
// All integers are 64-bit little-endian, all scalars 32-bit little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "selat/models.hpp"

namespace selat::io {

inline constexpr std::string_view kContainerMagic = "SELAT1";

struct ContainerEntry {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> values;
};

struct Container {
  std::string name;
  std::vector<ContainerEntry> entries;

  const ContainerEntry& entry(const std::string& entry_name) const;
};

std::string encode_container(const Container& c);
Container decode_container(std::string_view bytes, const std::string& origin = "<memory>");

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

template <typename T>
Container to_container(const nn::Model<T>& model);

/// Rebuilds the architecture from the descriptor and loads every parameter.
template <typename T>
nn::Model<T> model_from_container(const Container& c);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const nn::Model<T>& model) {
  write_container(path, to_container(model));
}

template <typename T>
nn::Model<T> load_checkpoint(const std::filesystem::path& path) {
  return model_from_container<T>(read_container(path));
}

}  // namespace selat::io
