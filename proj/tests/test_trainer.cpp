#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "selat/errors.hpp"
#include "selat/evaluation.hpp"
#include "selat/trainer.hpp"

using namespace selat;
using namespace selat::train;
using selat::testing::random_labels;
using selat::testing::random_tensor;

namespace {

nn::ModelSpec mlp_spec(std::size_t dim, std::size_t classes, std::vector<std::size_t> hidden = {16}) {
  nn::ModelSpec spec;
  spec.arch = nn::Arch::Mlp;
  spec.input_shape = {dim};
  spec.classes = classes;
  spec.hidden = std::move(hidden);
  return spec;
}

TrainConfig quick_config(Method m) {
  TrainConfig cfg;
  cfg.method = m;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.lr = 0.05;
  return cfg;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string drop_last_column(const std::string& csv) {
  std::istringstream is(csv);
  std::string line, out;
  while (std::getline(is, line)) out += line.substr(0, line.rfind(',')) + '\n';
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("method names round-trip and map to strategies") {
  for (auto m : {Method::Clean, Method::FullPgd, Method::RandomSubset, Method::Margin, Method::GradMatch}) {
    CHECK(parse_method(to_string(m)) == m);
  }
  CHECK(strategy_for(Method::Clean) == select::Strategy::None);
  CHECK(strategy_for(Method::FullPgd) == select::Strategy::Full);
  CHECK_THROWS_AS(parse_method("fat"), ConfigError);
}

TEST_CASE("config validation guards degenerate arms") {
  auto cfg = quick_config(Method::Clean);
  cfg.lambda = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config(Method::FullPgd);
  cfg.lambda = 0;  // classic full-PGD training is allowed
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config(Method::Margin);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config(Method::Margin);
  cfg.selection.rho = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("step learning-rate schedule") {
  auto cfg = quick_config(Method::Clean);
  cfg.epochs = 8;
  cfg.lr = 1.0;
  CHECK(cfg.lr_at(3) == 1.0);
  cfg.schedule = LrSchedule::Step;
  CHECK(cfg.lr_at(3) == 1.0);
  CHECK(cfg.lr_at(4) == doctest::Approx(0.1));
  CHECK(cfg.lr_at(6) == doctest::Approx(0.01));
}

TEST_CASE("sgd momentum step examples") {
  SUBCASE("plain gradient descent") {
    std::vector<double> p{1.0, -2.0}, v{0, 0};
    const std::vector<double> g{0.5, 1.0};
    sgd_momentum_step<double>(p, g, v, 0.1, 0.0, 0.0);
    CHECK(p[0] == doctest::Approx(0.95));
    CHECK(p[1] == doctest::Approx(-2.1));
  }
  SUBCASE("pure inertia") {
    std::vector<double> p{1.0}, v{2.0};
    const std::vector<double> g{0.0};
    sgd_momentum_step<double>(p, g, v, 0.1, 0.9, 0.0);
    CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.9 * 2.0));
  }
  SUBCASE("two steps on x^2/2") {
    std::vector<double> x{1.0}, v{0.0};
    for (int i = 0; i < 2; ++i) sgd_momentum_step<double>(x, std::vector<double>{x[0]}, v, 0.1, 0.9, 0.0);
    CHECK(x[0] == doctest::Approx(0.72).epsilon(1e-12));
    x = {1.0};
    v = {0.0};
    for (int i = 0; i < 2; ++i) sgd_momentum_step<double>(x, std::vector<double>{x[0]}, v, 0.1, 0.9, 5e-4);
    CHECK(x[0] == doctest::Approx(0.7198650025).epsilon(1e-9));
  }
  SUBCASE("size mismatch") {
    std::vector<double> p{1.0}, v{0.0, 0.0};
    CHECK_THROWS_AS(sgd_momentum_step<double>(p, std::vector<double>{1.0}, v, 0.1, 0.9, 0.0), DimensionError);
  }
}

TEST_CASE("optimizer keeps one velocity buffer per parameter") {
  auto model = nn::build_mlp<float>({3, 4, 2}, 0);
  SgdMomentum opt(model);
  REQUIRE(opt.velocity().size() == model.params().size());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    CHECK(opt.velocity()[i].size() == model.params()[i].value.numel());
  }
  auto other = nn::build_mlp<float>({3, 2}, 0);
  CHECK_THROWS_AS(opt.step(other, 0.1, 0.9, 0.0), DimensionError);
}

TEST_CASE("mixed loss hand computation on a 2-sample batch") {
  const ad::Tensord clean({2, 2}, {1, 2, 0, 0});
  const ad::Tensord adv({1, 2}, {2, 0});
  const std::vector<int> labels{1, 0}, adv_labels{1};
  const auto l1 = combine_losses<double>(clean, labels, adv, adv_labels, 1.0);
  CHECK(l1.total.item() == doctest::Approx(2.6301324450820567).epsilon(1e-9));
  CHECK(std::abs(l1.total.item() - 2.6301324450820567) < 1e-6);
  CHECK(l1.clean_count == 2);
  CHECK(l1.adv_count == 1);
  const auto half = combine_losses<double>(clean, labels, adv, adv_labels, 0.5);
  CHECK(std::abs(half.total.item() - 2.3785302280625147) < 1e-6);
}

TEST_CASE("mixed loss collapses to plain cross entropy") {
  Rng rng(1);
  auto model = nn::build_mlp<double>({3, 5, 3}, 1);
  const auto x = random_tensor<double>({4, 3}, rng, 0, 1);
  const auto y = random_labels(4, 3, rng);
  const double plain = ad::cross_entropy(model.forward_frozen(x), y).item();

  const std::vector<std::size_t> all{0, 1, 2, 3};
  const auto full = mixed_loss<double>(model, x, y, all, x, 0.0);
  CHECK(full.total.item() == doctest::Approx(plain).epsilon(1e-14));

  const auto clean_only = mixed_loss<double>(model, x, y, {}, ad::Tensord(), 1.0);
  CHECK(clean_only.total.item() == plain);
  CHECK(clean_only.adv_count == 0);

  CHECK_THROWS_AS(mixed_loss<double>(model, x, y, all, attack::take_rows(x, std::vector<std::size_t>{0}), 1.0),
                  ContractError);
}

TEST_CASE("adversarial rows enter the loss as constants") {
  Rng rng(2);
  auto model = nn::build_mlp<double>({3, 5, 3}, 2);
  const auto x = random_tensor<double>({4, 3}, rng, 0, 1);
  const auto y = random_labels(4, 3, rng);
  const std::vector<std::size_t> subset{1, 3};
  attack::AttackConfig acfg;
  attack::AttackCounter counter;
  const auto adv = attack::take_rows(attack::attack_subset<double>(model, x, y, subset, acfg, rng, counter), subset);

  model.zero_grad();
  mixed_loss<double>(model, x, y, subset, adv, 0.7).total.backward();
  const auto combined = model.flat_grad("all");

  model.zero_grad();
  ad::cross_entropy(model.forward(adv), std::vector<int>{y[1], y[3]}).backward();
  ad::scale(ad::cross_entropy(model.forward(x), y), 0.7).backward();
  const auto separate = model.flat_grad("all");
  REQUIRE(combined.size() == separate.size());
  for (std::size_t i = 0; i < combined.size(); ++i) CHECK(combined[i] == doctest::Approx(separate[i]).epsilon(1e-12));
  CHECK_FALSE(adv.requires_grad());
}

TEST_CASE("attack-pass accounting per arm") {
  const auto ds = data::make_synthetic_blobs(32, 2, 0.1, 3);  // 64 samples, 4 batches of 16
  const auto spec = mlp_spec(2, 2);
  const auto passes = [&](Method m, int epochs) {
    auto cfg = quick_config(m);
    cfg.epochs = epochs;
    return train::train(cfg, spec, ds, ds).attack_passes;
  };
  CHECK(passes(Method::Clean, 1) == 0);
  CHECK(passes(Method::FullPgd, 1) == 10u * 4u * 16u);
  CHECK(passes(Method::Margin, 3) == 3u * 10u * 4u * 4u);
  CHECK(passes(Method::RandomSubset, 1) == 10u * 4u * 4u);
  CHECK(passes(Method::GradMatch, 3) == 3u * 10u * 4u * 4u);
}

TEST_CASE("train record is cumulative and clean loss covers the batch") {
  const auto ds = data::make_synthetic_blobs(20, 2, 0.1, 4);
  auto cfg = quick_config(Method::Margin);
  cfg.epochs = 3;
  cfg.eval.every = 3;
  cfg.eval.attack.steps = 5;
  std::vector<std::size_t> chosen_sizes;
  const auto result = train::train(cfg, mlp_spec(2, 2), ds, ds, [&](std::size_t, const select::SelectionDecision& d) {
    chosen_sizes.push_back(d.chosen.size());
  });
  REQUIRE(result.record.epochs.size() == 3);
  for (std::size_t e = 1; e < 3; ++e) {
    CHECK(result.record.epochs[e].attack_passes_cum >= result.record.epochs[e - 1].attack_passes_cum);
  }
  CHECK_FALSE(result.record.epochs[0].robust_acc.has_value());
  CHECK(result.record.epochs[2].robust_acc.has_value());
  CHECK(chosen_sizes.size() == 3 * 3);  // 40 samples, batches 16+16+8
  CHECK(chosen_sizes.back() == 2);
  const auto csv = result.record.to_csv();
  CHECK(csv.rfind("epoch,clean_loss,adv_loss,clean_acc,robust_acc,attack_passes_cum,seconds\n", 0) == 0);
}

TEST_CASE("class count mismatch is rejected") {
  const auto ds = data::make_synthetic_blobs(4, 3, 0.1, 0);
  CHECK_THROWS_AS(train::train(quick_config(Method::Clean), mlp_spec(2, 2), ds, ds), ConfigError);
}

TEST_CASE("single-worker training is bit-reproducible") {
  const auto ds = data::make_synthetic_blobs(40, 3, 0.1, 5);
  auto cfg = quick_config(Method::GradMatch);
  cfg.epochs = 4;
  cfg.selection.warmup_epochs = 1;
  const auto dir = std::filesystem::temp_directory_path() / "selat_tests" / "determinism";
  std::filesystem::remove_all(dir);
  auto a = train::train(cfg, mlp_spec(2, 3), ds, ds);
  auto b = train::train(cfg, mlp_spec(2, 3), ds, ds);
  write_artifacts(dir / "a", a);
  write_artifacts(dir / "b", b);
  CHECK(read_file(dir / "a" / "checkpoint.bin") == read_file(dir / "b" / "checkpoint.bin"));
  CHECK(drop_last_column(read_file(dir / "a" / "train_record.csv")) ==
        drop_last_column(read_file(dir / "b" / "train_record.csv")));
  CHECK(a.record.checkpoint_path == (dir / "a" / "checkpoint.bin").string());
}

TEST_CASE("every arm fits linearly separable data") {
  const auto ds = data::make_synthetic_blobs(100, 2, 0.05, 6);
  for (auto m : {Method::Clean, Method::FullPgd, Method::RandomSubset, Method::Margin, Method::GradMatch}) {
    auto cfg = quick_config(m);
    cfg.epochs = 20;
    cfg.batch_size = 32;
    const auto result = train::train(cfg, mlp_spec(2, 2), ds, ds);
    CHECK_MESSAGE(eval::clean_accuracy(result.model, ds) >= 99.0, to_string(m));
  }
}

}  // TEST_SUITE

TEST_SUITE("trainer-toy") {

// Equal-budget comparison on two Gaussian blobs, averaged over five seeds.
TEST_CASE("margin selection beats random subsets by five robust points on a toy task") {
  const auto train_set = data::make_synthetic_blobs(200, 2, 0.15, 0);
  const auto test_set = data::make_synthetic_blobs(100, 2, 0.15, 0x7e57);
  attack::AttackConfig atk;
  atk.epsilon = 0.12;
  atk.alpha = 0.03;
  atk.steps = 10;
  auto eval_atk = atk;
  eval_atk.steps = 20;

  const auto mean_robust = [&](Method m) {
    double total = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto cfg = quick_config(m);
      cfg.epochs = 10;
      cfg.batch_size = 32;
      cfg.seed = seed;
      cfg.attack = atk;
      cfg.selection.warmup_epochs = 1;
      const auto result = train::train(cfg, mlp_spec(2, 2, {64, 64}), train_set, test_set);
      total += eval::robust_accuracy(result.model, test_set, eval_atk);
    }
    return total / 5;
  };
  const double margin = mean_robust(Method::Margin);
  const double random = mean_robust(Method::RandomSubset);
  MESSAGE("margin " << margin << "  random_subset " << random);
  CHECK(margin >= random + 5.0);
}

}  // TEST_SUITE
