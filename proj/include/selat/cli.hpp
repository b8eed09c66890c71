#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "selat/config.hpp"

namespace selat::cli {

/// Exit codes: 0 success, 1 internal failure, 2 invalid configuration or
/// usage, 3 missing or malformed file.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// JSON manifest: every resolved key, its origin, seed, model and dataset digests.
std::string manifest_json(const config::RunConfig& cfg, const nn::ModelSpec& spec, const config::DataSplits& data);

/// Key/value pairs stored in a manifest's "config" object.
std::vector<std::pair<std::string, std::string>> manifest_values(const std::filesystem::path& path);

}  // namespace selat::cli
