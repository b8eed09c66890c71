#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "selat/attacks.hpp"
#include "selat/errors.hpp"

using namespace selat;
using selat::testing::random_labels;
using selat::testing::random_tensor;

namespace {

double linf(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_SUITE("attacks") {

TEST_CASE("config validation") {
  attack::AttackConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.epsilon = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.alpha = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.low = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("projection clamps to the ball and then to the box") {
  std::vector<double> cand{0.5, -0.2, 0.95, 0.30};
  const std::vector<double> orig{0.1, 0.1, 0.9, 0.31};
  attack::project_linf<double>(cand, orig, 0.1, 0.0, 1.0);
  CHECK(cand[0] == doctest::Approx(0.2));
  CHECK(cand[1] == doctest::Approx(0.0));
  CHECK(cand[2] == doctest::Approx(0.95));
  CHECK(cand[3] == doctest::Approx(0.30));
  std::vector<double> short_cand{0.1};
  CHECK_THROWS_AS(attack::project_linf<double>(short_cand, orig, 0.1, 0.0, 1.0), DimensionError);
}

TEST_CASE("FGSM on a linear model moves every coordinate by epsilon") {
  // Logits z = W x with W = [[1, -1], [-1, 1]]; for y = 0 the loss gradient
  // has sign (-1, +1) in x.
  auto model = nn::build_mlp<double>({2, 2}, 0);
  auto w = model.params()[0].value.mutable_data();
  w[0] = 1, w[1] = -1, w[2] = -1, w[3] = 1;
  const ad::Tensord x({1, 2}, {0.5, 0.5});
  const auto adv = attack::fgsm<double>(model, x, std::vector<int>{0}, 0.1);
  CHECK(adv.data()[0] == doctest::Approx(0.4));
  CHECK(adv.data()[1] == doctest::Approx(0.6));
}

TEST_CASE("zero gradient leaves the input in place") {
  auto model = nn::build_mlp<double>({2, 2}, 0);
  for (auto& p : model.params()) {
    for (auto& v : p.value.mutable_data()) v = 0;
  }
  const ad::Tensord x({1, 2}, {0.3, 0.7});
  attack::AttackConfig cfg;
  cfg.random_start = false;
  Rng rng(0);
  const auto adv = attack::pgd<double>(model, x, std::vector<int>{1}, cfg, rng);
  CHECK(adv.data()[0] == 0.3);
  CHECK(adv.data()[1] == 0.7);
}

TEST_CASE("epsilon zero returns the input exactly") {
  Rng rng(1);
  auto model = nn::build_mlp<float>({4, 6, 3}, 1);
  const auto x = random_tensor<float>({5, 4}, rng, 0, 1);
  attack::AttackConfig cfg;
  cfg.epsilon = 0;
  const auto adv = attack::pgd<float>(model, x, random_labels(5, 3, rng), cfg, rng);
  CHECK(std::equal(adv.data().begin(), adv.data().end(), x.data().begin()));
}

TEST_CASE("PGD with K=1 and no random start equals FGSM with epsilon = alpha") {
  Rng rng(2);
  auto model = nn::build_mlp<float>({6, 8, 3}, 2);
  const auto x = random_tensor<float>({4, 6}, rng, 0, 1);
  const auto y = random_labels(4, 3, rng);
  attack::AttackConfig cfg;
  cfg.steps = 1;
  cfg.random_start = false;
  cfg.alpha = cfg.epsilon;
  const auto a = attack::pgd<float>(model, x, y, cfg, rng);
  const auto b = attack::fgsm<float>(model, x, y, cfg.epsilon);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("PGD stays feasible and does not lower the loss on a smooth model") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto model = nn::build_mlp<double>({5, 7, 3}, static_cast<std::uint64_t>(trial));
    const auto x = random_tensor<double>({3, 5}, rng, 0, 1);
    const auto y = random_labels(3, 3, rng);
    attack::AttackConfig cfg;
    cfg.epsilon = 0.05 + 0.2 * rng.uniform();
    const auto adv = attack::pgd<double>(model, x, y, cfg, rng);
    CHECK(linf(adv.data(), x.data()) <= cfg.epsilon + 1e-12);
    for (double v : adv.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    const double clean = ad::cross_entropy(model.forward_frozen(x), y).item();
    const double attacked = ad::cross_entropy(model.forward_frozen(adv), y).item();
    CHECK(attacked >= clean - 1e-9);
  }
}

TEST_CASE("attack_subset touches only the chosen rows and counts passes") {
  Rng rng(4);
  auto model = nn::build_mlp<float>({4, 5, 3}, 4);
  const auto x = random_tensor<float>({6, 4}, rng, 0, 1);
  const auto y = random_labels(6, 3, rng);
  attack::AttackConfig cfg;
  attack::AttackCounter counter;
  const std::vector<std::size_t> subset{4, 1};
  const auto adv = attack::attack_subset<float>(model, x, y, subset, cfg, rng, counter);
  CHECK(counter.passes == 2u * 10u);
  for (std::size_t r : {0u, 2u, 3u, 5u}) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(adv.data()[r * 4 + c] == x.data()[r * 4 + c]);
  }
  bool moved = false;
  for (std::size_t c = 0; c < 4; ++c) moved |= adv.data()[4 + c] != x.data()[4 + c];
  CHECK(moved);
  const auto rows = attack::take_rows(adv, subset);
  CHECK(rows.shape() == ad::Shape{2, 4});
  CHECK(rows.data()[0] == adv.data()[16]);
}

TEST_CASE("attack_subset counter follows |S| K for a k=32 subset") {
  Rng rng(5);
  auto model = nn::build_mlp<float>({3, 3}, 5);
  const auto x = random_tensor<float>({128, 3}, rng, 0, 1);
  const auto y = random_labels(128, 3, rng);
  std::vector<std::size_t> subset(32);
  for (std::size_t i = 0; i < 32; ++i) subset[i] = 4 * i;
  attack::AttackCounter counter{7};
  attack::AttackConfig cfg;
  (void)attack::attack_subset<float>(model, x, y, subset, cfg, rng, counter);
  CHECK(counter.passes == 7u + 320u);
}

TEST_CASE("attack_subset edge cases") {
  Rng rng(6);
  auto model = nn::build_mlp<float>({3, 3}, 6);
  const auto x = random_tensor<float>({4, 3}, rng, 0, 1);
  const auto y = random_labels(4, 3, rng);
  attack::AttackConfig cfg;
  attack::AttackCounter counter;
  const auto same = attack::attack_subset<float>(model, x, y, {}, cfg, rng, counter);
  CHECK(counter.passes == 0);
  CHECK(std::equal(same.data().begin(), same.data().end(), x.data().begin()));
  const std::vector<std::size_t> dup{1, 1};
  CHECK_THROWS_AS(attack::attack_subset<float>(model, x, y, dup, cfg, rng, counter), ContractError);
  const std::vector<std::size_t> out_of_range{4};
  CHECK_THROWS_AS(attack::attack_subset<float>(model, x, y, out_of_range, cfg, rng, counter), ContractError);
}

TEST_CASE("parallel workers stay feasible and leave other rows alone") {
  Rng rng(7);
  auto model = nn::build_mlp<float>({4, 6, 3}, 7);
  const auto x = random_tensor<float>({16, 4}, rng, 0, 1);
  const auto y = random_labels(16, 3, rng);
  std::vector<std::size_t> subset{0, 2, 3, 7, 8, 9, 15};
  attack::AttackConfig cfg;
  attack::AttackCounter counter;
  const auto adv = attack::attack_subset<float>(model, x, y, subset, cfg, rng, counter, 3);
  CHECK(counter.passes == subset.size() * 10);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(adv.data()[i] - x.data()[i]) <= cfg.epsilon + 1e-6);
  }
  for (std::size_t c = 0; c < 4; ++c) CHECK(adv.data()[4 + c] == x.data()[4 + c]);
}

TEST_CASE("a fixed seed reproduces the attack") {
  auto model = nn::build_mlp<float>({4, 6, 3}, 8);
  Rng data_rng(8);
  const auto x = random_tensor<float>({5, 4}, data_rng, 0, 1);
  const auto y = random_labels(5, 3, data_rng);
  attack::AttackConfig cfg;
  Rng r1(42), r2(42);
  const auto a = attack::pgd<float>(model, x, y, cfg, r1);
  const auto b = attack::pgd<float>(model, x, y, cfg, r2);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

}  // TEST_SUITE
