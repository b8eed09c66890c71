#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "selat/cli.hpp"
#include "selat/config.hpp"
#include "selat/errors.hpp"
#include "selat/evaluation.hpp"

using namespace selat;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "selat_tests" / "cli" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kBlobConfig =
    "# tiny blobs run\n"
    "method = margin\n"
    "epochs = 3\n"
    "batch_size = 16\n"
    "lr = 0.05\n"
    "data.kind = blobs\n"
    "data.blobs_per_class = 24\n"
    "selection.warmup_epochs = 1\n"
    "eval.steps = 5\n";

}  // namespace

TEST_SUITE("config") {

TEST_CASE("fractions parse exactly") {
  CHECK(config::parse_real("8/255", "k") == 8.0 / 255.0);
  CHECK(config::parse_real(" 0.25 ", "k") == 0.25);
  CHECK_THROWS_AS(config::parse_real("1/0", "k"), ConfigError);
  CHECK_THROWS_AS(config::parse_real("eight", "k"), ConfigError);
  CHECK(config::parse_bool("true", "k"));
  CHECK_FALSE(config::parse_bool("0", "k"));
  CHECK_THROWS_AS(config::parse_bool("maybe", "k"), ConfigError);
}

TEST_CASE("comments and blank lines are ignored") {
  const auto pairs = config::parse_config_text("# header\n\n  seed = 4   # trailing\nattack.epsilon=8/255\n", "f.cfg");
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0] == std::make_pair(std::string("seed"), std::string("4")));
  CHECK(pairs[1].second == "8/255");
}

TEST_CASE("unknown and repeated keys are rejected with a location") {
  try {
    (void)config::parse_config_text("method = margin\n\nattack.epsilonn = 1\n", "run.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("run.cfg:3") != std::string::npos);
    CHECK(msg.find("attack.epsilonn") != std::string::npos);
  }
  CHECK_THROWS_AS(config::parse_config_text("seed = 1\nseed = 2\n"), ConfigError);
  CHECK_THROWS_AS(config::parse_config_text("seed 1\n"), ConfigError);
  CHECK_THROWS_AS(config::parse_override("nope=1"), ConfigError);
}

TEST_CASE("defaults resolve to the documented training setup") {
  const auto rc = config::build_run_config(config::Resolver().resolved());
  CHECK(rc.train.method == train::Method::Margin);
  CHECK(rc.train.attack.epsilon == 8.0 / 255.0);
  CHECK(rc.train.attack.alpha == 2.0 / 255.0);
  CHECK(rc.train.attack.steps == 10);
  CHECK(rc.train.eval.attack.steps == 40);
  CHECK(rc.train.selection.rho == 0.25);
  CHECK(rc.train.selection.warmup_epochs == 2);
  CHECK(rc.train.momentum == 0.9);
  CHECK(rc.train.weight_decay == 5e-4);
  CHECK(rc.train.lambda == 1.0);
  CHECK(rc.train.workers == 1);
}

TEST_CASE("override beats file beats default") {
  config::Resolver r;
  r.apply_text("seed = 3\nepochs = 4\n", "f");
  r.set("seed", "9", config::Origin::Override);
  const auto rc = config::build_run_config(r.resolved());
  CHECK(rc.train.seed == 9);
  CHECK(rc.train.epochs == 4);
  CHECK(r.resolved().origin.at("seed") == config::Origin::Override);
  CHECK(r.resolved().origin.at("epochs") == config::Origin::File);
  CHECK(r.resolved().origin.at("lr") == config::Origin::Default);
}

TEST_CASE("invalid values are config errors naming the key") {
  const auto fails_with = [](const std::string& key, const std::string& value) {
    config::Resolver r;
    r.set(key, value, config::Origin::Override);
    try {
      (void)config::build_run_config(r.resolved());
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(fails_with("selection.rho", "0").find("rho") != std::string::npos);
  CHECK(fails_with("method", "fat").find("fat") != std::string::npos);
  CHECK(fails_with("data.kind", "imagenet").find("data.kind") != std::string::npos);
  CHECK(fails_with("batch_size", "-3").find("batch_size") != std::string::npos);
  CHECK_FALSE(fails_with("attack.steps", "zero").empty());
}

}  // TEST_SUITE

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with code 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("gendata writes a reloadable, deterministic container") {
  const auto dir = temp_dir("gendata");
  const auto a = run({"gendata", "--kind", "blobs", "--per-class", "10", "--seed", "4", "--out", (dir / "a.bin").string()});
  const auto b = run({"gendata", "--kind", "blobs", "--per-class", "10", "--seed", "4", "--out", (dir / "b.bin").string()});
  REQUIRE(a.code == 0);
  CHECK(read_text(dir / "a.bin") == read_text(dir / "b.bin"));
  const auto ds = data::dataset_from_container(io::read_container(dir / "a.bin"));
  CHECK(ds.size() == 20);
  const auto bad = run({"gendata", "--kind", "spirals", "--out", (dir / "c.bin").string()});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("spirals") != std::string::npos);
}

TEST_CASE("train writes artifacts, honours overrides and re-runs from its manifest") {
  const auto dir = temp_dir("train");
  write_text(dir / "run.cfg", kBlobConfig);
  const auto first = run({"train", "--config", (dir / "run.cfg").string(), "--out", (dir / "a").string(), "--set",
                          "epochs=2", "--seed", "5"});
  INFO(first.err);
  REQUIRE(first.code == 0);
  for (const char* f : {"checkpoint.bin", "train_record.csv", "manifest.json", "eval_report.csv"}) {
    CHECK(std::filesystem::exists(dir / "a" / f));
  }
  const auto manifest = nlohmann::json::parse(read_text(dir / "a" / "manifest.json"));
  CHECK(manifest["config"]["epochs"] == "2");
  CHECK(manifest["origin"]["epochs"] == "override");
  CHECK(manifest["config"]["seed"] == "5");
  CHECK(manifest["config"]["lr"] == "0.05");
  CHECK(manifest["config"]["attack.epsilon"] == "8/255");
  CHECK(manifest["config"].size() == config::schema().size());
  CHECK(manifest["dataset"]["train_digest"].get<std::string>().size() == 16);

  const auto again = run({"train", "--manifest", (dir / "a" / "manifest.json").string(), "--out", (dir / "b").string()});
  REQUIRE(again.code == 0);
  CHECK(read_text(dir / "a" / "checkpoint.bin") == read_text(dir / "b" / "checkpoint.bin"));
  const auto strip_seconds = [](const std::string& csv) {
    std::istringstream is(csv);
    std::string line, out;
    while (std::getline(is, line)) out += line.substr(0, line.rfind(',')) + '\n';
    return out;
  };
  CHECK(strip_seconds(read_text(dir / "a" / "train_record.csv")) ==
        strip_seconds(read_text(dir / "b" / "train_record.csv")));
}

TEST_CASE("train rejects invalid configuration with a diagnostic") {
  const auto dir = temp_dir("train-bad");
  write_text(dir / "run.cfg", std::string(kBlobConfig) + "selection.rho = 0\n");
  const auto r = run({"train", "--config", (dir / "run.cfg").string(), "--out", (dir / "a").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("rho") != std::string::npos);
  write_text(dir / "typo.cfg", "methd = margin\n");
  const auto t = run({"train", "--config", (dir / "typo.cfg").string()});
  CHECK(t.code == 2);
  CHECK(t.err.find("typo.cfg:1") != std::string::npos);
  CHECK(run({"train", "--config", (dir / "missing.cfg").string()}).code == 3);
}

TEST_CASE("eval reports PGD-K, matches clean at epsilon zero and names missing checkpoints") {
  const auto dir = temp_dir("eval");
  write_text(dir / "run.cfg", kBlobConfig);
  REQUIRE(run({"train", "--config", (dir / "run.cfg").string(), "--out", (dir / "a").string()}).code == 0);
  const auto ckpt = (dir / "a" / "checkpoint.bin").string();
  const auto e = run({"eval", "--checkpoint", ckpt, "--config", (dir / "run.cfg").string(), "--steps", "7",
                      "--out", (dir / "e").string(), "--name", "margin"});
  REQUIRE(e.code == 0);
  CHECK(e.out.find("PGD-7") != std::string::npos);
  const auto reports = eval::reports_from_csv(read_text(dir / "e" / "eval_report.csv"));
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].robust_acc.count("PGD-7") == 1);

  const auto zero = run({"eval", "--checkpoint", ckpt, "--config", (dir / "run.cfg").string(), "--epsilon", "0",
                         "--out", (dir / "z").string()});
  REQUIRE(zero.code == 0);
  const auto z = eval::reports_from_csv(read_text(dir / "z" / "eval_report.csv"))[0];
  CHECK(z.robust_acc.begin()->second == z.clean_acc);

  const auto missing = run({"eval", "--checkpoint", (dir / "none.bin").string(), "--config",
                            (dir / "run.cfg").string()});
  CHECK(missing.code == 3);
  CHECK(missing.err.find("none.bin") != std::string::npos);
}

TEST_CASE("compare aggregates run directories and names missing reports") {
  const auto dir = temp_dir("compare");
  write_text(dir / "run.cfg", kBlobConfig);
  for (const char* m : {"margin", "clean", "random_subset", "full_pgd"}) {
    REQUIRE(run({"train", "--config", (dir / "run.cfg").string(), "--set", std::string("method=") + m, "--set",
                 "epochs=1", "--out", (dir / m).string()})
                .code == 0);
  }
  const auto one = run({"compare", (dir / "margin").string()});
  REQUIRE(one.code == 0);
  const auto four = run({"compare", (dir / "margin").string(), (dir / "clean").string(),
                         (dir / "random_subset").string(), (dir / "full_pgd").string(), "--out",
                         (dir / "table").string()});
  REQUIRE(four.code == 0);
  const auto rows = eval::reports_from_csv(read_text(dir / "table" / "compare.csv"));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].method == "clean");
  CHECK(rows[3].method == "random_subset");
  const auto missing = run({"compare", (dir / "nowhere").string()});
  CHECK(missing.code == 3);
  CHECK(missing.err.find("eval_report.csv") != std::string::npos);
}

}  // TEST_SUITE
