#include "selat/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "selat/errors.hpp"

namespace selat::config {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool known_key(const std::string& key) {
  static const std::set<std::string> keys = [] {
    std::set<std::string> out;
    for (const auto& [k, _] : schema()) out.insert(k);
    return out;
  }();
  return keys.count(key) > 0;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double plain_real(const std::string& text, const std::string& key) {
  double v = 0;
  const auto t = trim(text);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw ConfigError("key '" + key + "': expected a number, got '" + text + "'");
  }
  return v;
}

std::size_t parse_count(const std::string& text, const std::string& key) {
  const auto v = parse_int(text, key);
  if (v < 0) throw ConfigError("key '" + key + "': must be >= 0, got " + text);
  return static_cast<std::size_t>(v);
}

void expect_one_of(const std::string& key, const std::string& value, std::initializer_list<const char*> allowed) {
  std::string list;
  for (const char* a : allowed) {
    if (value == a) return;
    list += (list.empty() ? "" : ", ") + std::string(a);
  }
  throw ConfigError("key '" + key + "': unknown value '" + value + "' (expected " + list + ")");
}

}  // namespace

std::string to_string(Origin o) {
  switch (o) {
    case Origin::Default: return "default";
    case Origin::File: return "file";
    case Origin::Override: return "override";
  }
  return "?";
}

const std::vector<std::pair<std::string, std::string>>& schema() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"method", "margin"},
      {"seed", "0"},
      {"epochs", "10"},
      {"batch_size", "128"},
      {"lr", "0.01"},
      {"momentum", "0.9"},
      {"weight_decay", "5e-4"},
      {"lambda", "1"},
      {"lr_schedule", "constant"},
      {"workers", "1"},
      {"attack.epsilon", "8/255"},
      {"attack.alpha", "2/255"},
      {"attack.steps", "10"},
      {"attack.random_start", "true"},
      {"attack.low", "0"},
      {"attack.high", "1"},
      {"selection.rho", "0.25"},
      {"selection.warmup_epochs", "2"},
      {"selection.eps_stab", "1e-8"},
      {"selection.delta_stab", "1e-12"},
      {"selection.grad_scope", "final_linear"},
      {"selection.replacement", "false"},
      {"eval.epsilon", "8/255"},
      {"eval.alpha", "2/255"},
      {"eval.steps", "40"},
      {"eval.random_start", "true"},
      {"eval.every", "0"},
      {"eval.batch_size", "256"},
      {"eval.seed", "0"},
      {"eval.final", "true"},
      {"data.kind", "mnist"},
      {"data.dir", ""},
      {"data.train_path", ""},
      {"data.test_path", ""},
      {"data.train_limit", "0"},
      {"data.test_limit", "0"},
      {"data.augment", "false"},
      {"data.blobs_per_class", "200"},
      {"data.blobs_classes", "2"},
      {"data.blobs_spread", "0.08"},
      {"data.blobs_dim", "2"},
      {"data.blobs_seed", "0"},
      {"model.arch", "auto"},
      {"model.hidden", "64,64"},
      {"model.width", "8"},
      {"model.conv1", "8"},
      {"model.conv2", "16"},
      {"model.fc_hidden", "64"},
      {"model.mean", ""},
      {"model.std", ""},
      {"debug.selection_log", "false"},
  };
  return keys;
}

double parse_real(const std::string& text, const std::string& key) {
  const auto t = trim(text);
  const auto slash = t.find('/');
  if (slash == std::string::npos) return plain_real(t, key);
  const double num = plain_real(t.substr(0, slash), key);
  const double den = plain_real(t.substr(slash + 1), key);
  if (den == 0.0) throw ConfigError("key '" + key + "': zero denominator in '" + text + "'");
  return num / den;
}

bool parse_bool(const std::string& text, const std::string& key) {
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + text + "'");
}

std::int64_t parse_int(const std::string& text, const std::string& key) {
  const auto t = trim(text);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + text + "'");
  }
  return v;
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& origin) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (!known_key(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": key '" + key + "' given twice");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::pair<std::string, std::string> parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + text + "'");
  auto key = trim(text.substr(0, eq));
  if (!known_key(key)) throw ConfigError("--set: unknown key '" + key + "'");
  return {key, trim(text.substr(eq + 1))};
}

Resolver::Resolver() {
  for (const auto& [k, v] : schema()) {
    resolved_.values[k] = v;
    resolved_.origin[k] = Origin::Default;
  }
}

void Resolver::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str(), path.string());
}

void Resolver::apply_text(const std::string& text, const std::string& origin) {
  apply_pairs(parse_config_text(text, origin), Origin::File);
}

void Resolver::apply_pairs(const std::vector<std::pair<std::string, std::string>>& pairs, Origin origin) {
  for (const auto& [k, v] : pairs) set(k, v, origin);
}

void Resolver::set(const std::string& key, const std::string& value, Origin origin) {
  if (!known_key(key)) throw ConfigError("unknown key '" + key + "'");
  resolved_.values[key] = value;
  resolved_.origin[key] = origin;
}

RunConfig build_run_config(const ResolvedValues& values) {
  const auto get = [&](const std::string& key) -> const std::string& {
    auto it = values.values.find(key);
    if (it == values.values.end()) throw ConfigError("missing key '" + key + "'");
    return it->second;
  };
  const auto real = [&](const std::string& key) { return parse_real(get(key), key); };
  const auto boolean = [&](const std::string& key) { return parse_bool(get(key), key); };
  const auto count = [&](const std::string& key) { return parse_count(get(key), key); };

  RunConfig rc;
  rc.values = values;
  auto& t = rc.train;
  t.method = train::parse_method(get("method"));
  t.seed = static_cast<std::uint64_t>(count("seed"));
  t.epochs = static_cast<int>(count("epochs"));
  t.batch_size = count("batch_size");
  t.lr = real("lr");
  t.momentum = real("momentum");
  t.weight_decay = real("weight_decay");
  t.lambda = real("lambda");
  expect_one_of("lr_schedule", get("lr_schedule"), {"constant", "step"});
  t.schedule = get("lr_schedule") == "step" ? train::LrSchedule::Step : train::LrSchedule::Constant;
  t.workers = static_cast<unsigned>(count("workers"));
  t.augment = boolean("data.augment");

  t.attack.epsilon = real("attack.epsilon");
  t.attack.alpha = real("attack.alpha");
  t.attack.steps = static_cast<int>(parse_int(get("attack.steps"), "attack.steps"));
  t.attack.random_start = boolean("attack.random_start");
  t.attack.low = real("attack.low");
  t.attack.high = real("attack.high");

  t.selection.rho = real("selection.rho");
  t.selection.warmup_epochs = static_cast<int>(parse_int(get("selection.warmup_epochs"), "selection.warmup_epochs"));
  t.selection.eps_stab = real("selection.eps_stab");
  t.selection.delta_stab = real("selection.delta_stab");
  t.selection.grad_scope = get("selection.grad_scope");
  expect_one_of("selection.grad_scope", t.selection.grad_scope, {"final_linear", "all"});
  t.selection.replacement = boolean("selection.replacement");

  t.eval.attack.epsilon = real("eval.epsilon");
  t.eval.attack.alpha = real("eval.alpha");
  t.eval.attack.steps = static_cast<int>(parse_int(get("eval.steps"), "eval.steps"));
  t.eval.attack.random_start = boolean("eval.random_start");
  t.eval.attack.low = t.attack.low;
  t.eval.attack.high = t.attack.high;
  t.eval.every = static_cast<int>(parse_int(get("eval.every"), "eval.every"));
  t.eval.batch_size = count("eval.batch_size");
  t.eval.seed = static_cast<std::uint64_t>(count("eval.seed"));
  rc.final_eval = boolean("eval.final");

  auto& d = rc.data;
  d.kind = get("data.kind");
  expect_one_of("data.kind", d.kind, {"mnist", "cifar10", "container", "blobs"});
  d.dir = get("data.dir");
  d.train_path = get("data.train_path");
  d.test_path = get("data.test_path");
  d.train_limit = count("data.train_limit");
  d.test_limit = count("data.test_limit");
  d.blobs_per_class = count("data.blobs_per_class");
  d.blobs_classes = count("data.blobs_classes");
  d.blobs_spread = real("data.blobs_spread");
  d.blobs_dim = count("data.blobs_dim");
  d.blobs_seed = static_cast<std::uint64_t>(count("data.blobs_seed"));

  rc.arch = get("model.arch");
  expect_one_of("model.arch", rc.arch, {"auto", "mlp", "cnn4", "resnet"});
  for (const auto& h : split_list(get("model.hidden"))) rc.hidden.push_back(parse_count(h, "model.hidden"));
  rc.width = count("model.width");
  rc.conv1 = count("model.conv1");
  rc.conv2 = count("model.conv2");
  rc.fc_hidden = count("model.fc_hidden");
  for (const auto& m : split_list(get("model.mean"))) rc.mean.push_back(parse_real(m, "model.mean"));
  for (const auto& s : split_list(get("model.std"))) rc.stddev.push_back(parse_real(s, "model.std"));
  if (rc.mean.size() != rc.stddev.size()) throw ConfigError("model.mean and model.std need the same length");
  for (double s : rc.stddev) {
    if (!(s > 0.0)) throw ConfigError("model.std entries must be > 0");
  }
  rc.selection_log = boolean("debug.selection_log");

  if (d.kind == "blobs" && (d.blobs_classes < 2 || d.blobs_per_class < 1 || d.blobs_dim < 2)) {
    throw ConfigError("blobs need data.blobs_classes >= 2, data.blobs_per_class >= 1, data.blobs_dim >= 2");
  }
  t.validate();
  return rc;
}

DataSplits load_data(const DataConfig& cfg) {
  DataSplits out;
  if (cfg.kind == "mnist") {
    if (cfg.dir.empty()) throw ConfigError("data.kind=mnist needs data.dir");
    const std::filesystem::path dir(cfg.dir);
    out.train = data::load_mnist_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    out.test = data::load_mnist_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  } else if (cfg.kind == "cifar10") {
    if (cfg.dir.empty()) throw ConfigError("data.kind=cifar10 needs data.dir");
    out.train = data::load_cifar10_bin(cfg.dir, data::CifarSplit::Train);
    out.test = data::load_cifar10_bin(cfg.dir, data::CifarSplit::Test);
  } else if (cfg.kind == "container") {
    if (cfg.train_path.empty() || cfg.test_path.empty()) {
      throw ConfigError("data.kind=container needs data.train_path and data.test_path");
    }
    out.train = data::dataset_from_container(io::read_container(cfg.train_path));
    out.test = data::dataset_from_container(io::read_container(cfg.test_path));
  } else if (cfg.kind == "blobs") {
    out.train = data::make_synthetic_blobs(cfg.blobs_per_class, cfg.blobs_classes, cfg.blobs_spread, cfg.blobs_seed,
                                           cfg.blobs_dim);
    // Held-out draw from the same clusters.
    out.test = data::make_synthetic_blobs(std::max<std::size_t>(1, cfg.blobs_per_class / 2), cfg.blobs_classes,
                                          cfg.blobs_spread, cfg.blobs_seed + 0x7e57, cfg.blobs_dim);
  } else {
    throw ConfigError("unknown data.kind '" + cfg.kind + "'");
  }
  if (cfg.train_limit > 0) out.train = out.train.head(cfg.train_limit);
  if (cfg.test_limit > 0) out.test = out.test.head(cfg.test_limit);
  if (out.train.meta.input_shape != out.test.meta.input_shape || out.train.meta.classes != out.test.meta.classes) {
    throw FormatError("train and test splits disagree on input shape or class count");
  }
  return out;
}

nn::ModelSpec model_spec_for(const RunConfig& cfg, const data::DatasetMeta& meta) {
  nn::ModelSpec spec;
  spec.input_shape = meta.input_shape;
  spec.classes = meta.classes;
  const bool image = meta.input_shape.size() == 3;
  std::string arch = cfg.arch;
  if (arch == "auto") arch = image ? "cnn4" : "mlp";
  if (arch == "mlp") {
    spec.arch = nn::Arch::Mlp;
  } else if (arch == "cnn4") {
    spec.arch = nn::Arch::Cnn4;
  } else {
    spec.arch = nn::Arch::ResNet;
  }
  if (spec.arch != nn::Arch::Mlp && !image) {
    throw ConfigError("model.arch=" + arch + " needs image data (C×H×W), dataset has rank-" +
                      std::to_string(meta.input_shape.size()) + " samples");
  }
  spec.hidden = cfg.hidden;
  spec.conv1 = cfg.conv1;
  spec.conv2 = cfg.conv2;
  spec.fc_hidden = cfg.fc_hidden;
  spec.width = cfg.width;
  if (!cfg.mean.empty()) {
    const std::size_t channels = image ? meta.input_shape[0] : 1;
    if (cfg.mean.size() != channels) {
      throw ConfigError("model.mean has " + std::to_string(cfg.mean.size()) + " entries, data has " +
                        std::to_string(channels) + " channels");
    }
    spec.mean = cfg.mean;
    spec.stddev = cfg.stddev;
  }
  return spec;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, 16);
  std::string s(buf, ptr);
  return std::string(16 - s.size(), '0') + s;
}

}  // namespace selat::config
