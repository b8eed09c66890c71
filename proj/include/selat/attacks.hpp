#pragma once

// White-box ℓ∞ attacks: FGSM and multi-step PGD with projection onto the
// ε-ball around the clean input intersected with the valid input box.

#include <cstdint>
#include <span>
#include <vector>

#include "selat/autodiff.hpp"
#include "selat/models.hpp"
#include "selat/rng.hpp"

namespace selat::attack {

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int steps = 10;
  bool random_start = true;
  double low = 0.0;
  double high = 1.0;

  /// Throws ConfigError unless epsilon >= 0, alpha > 0, steps >= 1, low < high.
  void validate() const;
};

/// Forward-backward passes spent inside attack inner loops.
struct AttackCounter {
  std::uint64_t passes = 0;
};

/// Elementwise clamp to [orig − ε, orig + ε], then to [low, high].
template <typename T>
void project_linf(std::span<T> candidate, std::span<const T> original, double epsilon, double low, double high);

/// clamp(x + ε·sign(∇x CE), [low, high]).
template <typename T>
ad::Tensor<T> fgsm(const nn::Model<T>& model, const ad::Tensor<T>& x, std::span<const int> labels, double epsilon,
                   double low = 0.0, double high = 1.0);

/// K signed-gradient ascent steps with projection after each step.
template <typename T>
ad::Tensor<T> pgd(const nn::Model<T>& model, const ad::Tensor<T>& x, std::span<const int> labels,
                  const AttackConfig& cfg, Rng& rng);

/// Replaces the rows listed in `subset` by their PGD outputs; other rows are
/// copied bit-for-bit. Adds |subset|·K to `counter` once the call completes.
/// With workers > 1 the subset is split into contiguous chunks attacked in
/// parallel, each with its own substream of `rng`.
template <typename T>
ad::Tensor<T> attack_subset(const nn::Model<T>& model, const ad::Tensor<T>& batch, std::span<const int> labels,
                            std::span<const std::size_t> subset, const AttackConfig& cfg, Rng& rng,
                            AttackCounter& counter, unsigned workers = 1);

/// Rows `subset` of `batch` as a standalone tensor, in the given order.
template <typename T>
ad::Tensor<T> take_rows(const ad::Tensor<T>& batch, std::span<const std::size_t> rows);

}  // namespace selat::attack
