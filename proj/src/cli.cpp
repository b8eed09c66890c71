#include "selat/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <sstream>

#include "selat/checkpoint.hpp"
#include "selat/errors.hpp"
#include "selat/evaluation.hpp"
#include "selat/log.hpp"
#include "selat/trainer.hpp"

namespace selat::cli {

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string seed;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "key = value configuration file");
  cmd->add_option("--out", a.out_dir, "output directory");
  cmd->add_option("--seed", a.seed, "seed (overrides the config file)");
  cmd->add_option("--set", a.sets, "key=value override, repeatable")->take_all();
}

config::Resolver resolve(const CommonArgs& a, const std::string& manifest) {
  config::Resolver r;
  if (!manifest.empty()) r.apply_pairs(manifest_values(manifest), config::Origin::File);
  if (!a.config_path.empty()) r.apply_file(a.config_path);
  if (!a.seed.empty()) r.set("seed", a.seed, config::Origin::Override);
  for (const auto& s : a.sets) {
    const auto [k, v] = config::parse_override(s);
    r.set(k, v, config::Origin::Override);
  }
  return r;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

std::string read_text(const std::filesystem::path& path, const std::string& what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("missing " + what + " '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

int cmd_train(const CommonArgs& a, const std::string& manifest, std::ostream& out) {
  const auto rc = config::build_run_config(resolve(a, manifest).resolved());
  const std::filesystem::path dir = a.out_dir.empty() ? "run" : a.out_dir;
  const auto splits = config::load_data(rc.data);
  const auto spec = config::model_spec_for(rc, splits.train.meta);

  std::filesystem::create_directories(dir);
  std::ofstream selection_log;
  train::SelectionSink sink;
  if (rc.selection_log) {
    selection_log.open(dir / "selection.jsonl", std::ios::trunc);
    if (!selection_log) throw IoError("cannot write '" + (dir / "selection.jsonl").string() + "'");
    sink = [&](std::size_t batch, const select::SelectionDecision& d) { selection_log << d.to_jsonl(batch) << '\n'; };
  }

  auto result = train::train(rc.train, spec, splits.train, splits.test, sink);
  train::write_artifacts(dir, result);
  write_text(dir / "manifest.json", manifest_json(rc, spec, splits));

  eval::EvalReport report;
  report.method = train::to_string(rc.train.method);
  report.clean_acc = eval::clean_accuracy(result.model, splits.test, rc.train.eval.batch_size);
  if (rc.final_eval) {
    report.robust_acc[eval::attack_label(rc.train.eval.attack)] =
        eval::robust_accuracy(result.model, splits.test, rc.train.eval.attack, rc.train.eval.batch_size,
                              rc.train.eval.seed, rc.train.workers);
  }
  report.attack_passes_train = result.attack_passes;
  report.train_seconds = result.train_seconds;
  write_text(dir / "eval_report.csv", eval::reports_to_csv({report}));
  out << eval::compare_report({report}).text;
  out << "artifacts written to " << dir.string() << '\n';
  return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& checkpoint, const std::string& name, int steps,
             const std::string& epsilon, const std::string& alpha, std::ostream& out) {
  auto r = resolve(a, "");
  if (steps > 0) r.set("eval.steps", std::to_string(steps), config::Origin::Override);
  if (!epsilon.empty()) r.set("eval.epsilon", epsilon, config::Origin::Override);
  if (!alpha.empty()) r.set("eval.alpha", alpha, config::Origin::Override);
  const auto rc = config::build_run_config(r.resolved());

  if (!std::filesystem::exists(checkpoint)) throw IoError("missing checkpoint file '" + checkpoint + "'");
  const auto model = io::load_checkpoint<float>(checkpoint);
  const auto splits = config::load_data(rc.data);
  if (model.spec().input_shape != splits.test.meta.input_shape || model.classes() != splits.test.meta.classes) {
    throw ConfigError("checkpoint '" + checkpoint + "' does not match the dataset's input shape or class count");
  }

  const auto& ecfg = rc.train.eval;
  eval::EvalReport report;
  report.method = name;
  report.clean_acc = eval::clean_accuracy(model, splits.test, ecfg.batch_size);
  const auto label = eval::attack_label(ecfg.attack);
  report.robust_acc[label] =
      eval::robust_accuracy(model, splits.test, ecfg.attack, ecfg.batch_size, ecfg.seed, rc.train.workers);
  out << "clean_acc " << fixed2(report.clean_acc) << '\n' << label << " " << fixed2(report.robust_acc[label]) << '\n';
  if (!a.out_dir.empty()) {
    std::filesystem::create_directories(a.out_dir);
    write_text(std::filesystem::path(a.out_dir) / "eval_report.csv", eval::reports_to_csv({report}));
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out_dir, std::ostream& out) {
  std::vector<eval::EvalReport> all;
  for (const auto& d : dirs) {
    const auto path = std::filesystem::path(d) / "eval_report.csv";
    for (auto& r : eval::reports_from_csv(read_text(path, "report file"))) all.push_back(std::move(r));
  }
  const auto table = eval::compare_report(std::move(all));
  out << table.text;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_text(std::filesystem::path(out_dir) / "compare.csv", table.csv);
  }
  return 0;
}

int cmd_gendata(const std::string& kind, std::size_t per_class, std::size_t classes, double spread, std::size_t dim,
                std::uint64_t seed, const std::string& out_path, std::ostream& out) {
  if (kind != "blobs") throw ConfigError("gendata: unknown kind '" + kind + "' (expected blobs)");
  if (out_path.empty()) throw ConfigError("gendata: --out is required");
  const auto ds = data::make_synthetic_blobs(per_class, classes, spread, seed, dim);
  const auto parent = std::filesystem::path(out_path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  io::write_container(out_path, data::dataset_to_container(ds));
  out << "wrote " << ds.size() << " samples to " << out_path << " digest " << config::hex64(ds.meta.digest) << '\n';
  return 0;
}

}  // namespace

std::string manifest_json(const config::RunConfig& cfg, const nn::ModelSpec& spec, const config::DataSplits& data) {
  nlohmann::ordered_json j;
  j["format"] = "selat-manifest-1";
  j["seed"] = cfg.train.seed;
  auto& values = j["config"];
  auto& origin = j["origin"];
  for (const auto& [key, _] : config::schema()) {
    values[key] = cfg.values.values.at(key);
    origin[key] = config::to_string(cfg.values.origin.at(key));
  }
  j["model"] = spec.descriptor();
  j["dataset"] = {{"kind", cfg.data.kind},
                  {"train_name", data.train.meta.name},
                  {"train_size", data.train.size()},
                  {"train_digest", config::hex64(data.train.meta.digest)},
                  {"test_name", data.test.meta.name},
                  {"test_size", data.test.size()},
                  {"test_digest", config::hex64(data.test.meta.digest)}};
  return j.dump(2) + "\n";
}

std::vector<std::pair<std::string, std::string>> manifest_values(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path, "manifest"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("manifest '" + path.string() + "': " + e.what());
  }
  if (!j.contains("config") || !j["config"].is_object()) {
    throw FormatError("manifest '" + path.string() + "' has no config object");
  }
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, v] : j["config"].items()) {
    if (!v.is_string()) throw FormatError("manifest '" + path.string() + "': value of '" + k + "' is not a string");
    out.emplace_back(k, v.get<std::string>());
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"selective adversarial training", "selat"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false, verbose = false;
  app.add_flag("-q,--quiet", quiet, "only errors");
  app.add_flag("-v,--verbose", verbose, "per-epoch progress");

  CommonArgs train_args, eval_args;
  std::string manifest;
  auto* train_cmd = app.add_subcommand("train", "train one method arm");
  add_common(train_cmd, train_args);
  train_cmd->add_option("--manifest", manifest, "re-run from a manifest.json");

  auto* eval_cmd = app.add_subcommand("eval", "clean and PGD accuracy of a checkpoint");
  add_common(eval_cmd, eval_args);
  std::string checkpoint, name = "model", epsilon, alpha;
  int steps = 0;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint.bin")->required();
  eval_cmd->add_option("--name", name, "method label in the report");
  eval_cmd->add_option("--steps", steps, "PGD iterations (eval.steps)");
  eval_cmd->add_option("--epsilon", epsilon, "radius, e.g. 8/255 (eval.epsilon)");
  eval_cmd->add_option("--alpha", alpha, "step size (eval.alpha)");

  auto* compare_cmd = app.add_subcommand("compare", "tabulate eval reports from run directories");
  std::vector<std::string> dirs;
  std::string compare_out;
  compare_cmd->add_option("dirs", dirs, "run directories")->required();
  compare_cmd->add_option("--out", compare_out, "directory for compare.csv");

  auto* gen_cmd = app.add_subcommand("gendata", "write a synthetic dataset container");
  std::string kind = "blobs", gen_out;
  std::size_t per_class = 200, classes = 2, dim = 2;
  double spread = 0.08;
  std::uint64_t gen_seed = 0;
  gen_cmd->add_option("--kind", kind, "dataset kind (blobs)");
  gen_cmd->add_option("--out", gen_out, "output container path");
  gen_cmd->add_option("--seed", gen_seed, "seed");
  gen_cmd->add_option("--per-class", per_class, "samples per class");
  gen_cmd->add_option("--classes", classes, "class count");
  gen_cmd->add_option("--spread", spread, "cluster standard deviation");
  gen_cmd->add_option("--dim", dim, "feature count");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  log_level() = quiet ? LogLevel::Quiet : (verbose ? LogLevel::Info : LogLevel::Warning);
  try {
    if (*train_cmd) return cmd_train(train_args, manifest, out);
    if (*eval_cmd) return cmd_eval(eval_args, checkpoint, name, steps, epsilon, alpha, out);
    if (*compare_cmd) return cmd_compare(dirs, compare_out, out);
    if (*gen_cmd) return cmd_gendata(kind, per_class, classes, spread, dim, gen_seed, gen_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "file error: " << e.what() << '\n';
    return 3;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace selat::cli
