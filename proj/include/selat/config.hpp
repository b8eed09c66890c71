#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "selat/data_io.hpp"
#include "selat/models.hpp"
#include "selat/trainer.hpp"

namespace selat::config {

enum class Origin { Default, File, Override };
std::string to_string(Origin o);

/// Raw text per key, after defaults, file and overrides are layered.
struct ResolvedValues {
  std::map<std::string, std::string> values;
  std::map<std::string, Origin> origin;
};

/// Every accepted key with its default text, in a stable order.
const std::vector<std::pair<std::string, std::string>>& schema();

/// Parses a real, accepting an exact fraction such as "8/255".
double parse_real(const std::string& text, const std::string& key);
bool parse_bool(const std::string& text, const std::string& key);
std::int64_t parse_int(const std::string& text, const std::string& key);

/// `key = value` lines; `#` starts a comment. Unknown or repeated keys throw
/// ConfigError naming `origin` and the line number.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& origin = "<config>");

/// "key=value" from the command line.
std::pair<std::string, std::string> parse_override(const std::string& text);

class Resolver {
 public:
  Resolver();
  void apply_file(const std::filesystem::path& path);
  void apply_text(const std::string& text, const std::string& origin);
  void apply_pairs(const std::vector<std::pair<std::string, std::string>>& pairs, Origin origin);
  void set(const std::string& key, const std::string& value, Origin origin);
  const ResolvedValues& resolved() const { return resolved_; }

 private:
  ResolvedValues resolved_;
};

struct DataConfig {
  std::string kind = "mnist";  // mnist | cifar10 | container | blobs
  std::string dir;
  std::string train_path;
  std::string test_path;
  std::size_t train_limit = 0;  // 0 = all
  std::size_t test_limit = 0;
  std::size_t blobs_per_class = 200;
  std::size_t blobs_classes = 2;
  double blobs_spread = 0.08;
  std::size_t blobs_dim = 2;
  std::uint64_t blobs_seed = 0;
};

struct RunConfig {
  train::TrainConfig train;
  DataConfig data;
  std::string arch = "auto";
  std::vector<std::size_t> hidden;
  std::size_t width = 8;
  std::size_t conv1 = 8;
  std::size_t conv2 = 16;
  std::size_t fc_hidden = 64;
  std::vector<double> mean;
  std::vector<double> stddev;
  bool final_eval = true;
  bool selection_log = false;
  ResolvedValues values;
};

/// Typed view of the resolved values; every value is checked.
RunConfig build_run_config(const ResolvedValues& values);

struct DataSplits {
  data::Dataset train;
  data::Dataset test;
};

DataSplits load_data(const DataConfig& cfg);

/// Model spec for a dataset; "auto" picks cnn4 for images and an MLP otherwise.
nn::ModelSpec model_spec_for(const RunConfig& cfg, const data::DatasetMeta& meta);

std::string hex64(std::uint64_t v);

}  // namespace selat::config
