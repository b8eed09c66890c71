#pragma once

// Per-minibatch choice of the subset S that receives adversarial examples.
//
// margin:     w = 1 / (|z_y − max_{j≠y} z_j| + eps_stab)
// grad_match: w = max(cos(g_i, mean_j g_j), 0), cos with delta_stab in the denominator
// Weights are normalized to probabilities and k = round(rho·B) distinct rows
// are drawn by sequential multinomial sampling. During the first
// warmup_epochs epochs both strategies draw uniformly.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selat/autodiff.hpp"
#include "selat/models.hpp"
#include "selat/rng.hpp"

namespace selat::select {

enum class Strategy { Margin, GradMatch, Random, Full, None };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& text);

struct SelectionConfig {
  Strategy strategy = Strategy::Margin;
  double rho = 0.25;
  int warmup_epochs = 2;
  double eps_stab = 1e-8;
  double delta_stab = 1e-12;
  std::string grad_scope = "final_linear";
  bool replacement = false;

  void validate() const;
};

struct SelectionDecision {
  int epoch = 0;
  std::string strategy_used;
  std::vector<double> weights;
  std::vector<double> probs;
  std::vector<std::size_t> chosen;
  bool uniform_fallback = false;  // all weights were zero

  /// One JSON-lines record: epoch, batch, strategy_used, chosen, weight min/mean/max.
  std::string to_jsonl(std::size_t batch_index) const;
};

/// What the strategy needs from the current batch. Logits are row-major B×C.
struct BatchState {
  std::size_t batch_size = 0;
  std::optional<std::vector<double>> logits;
  std::size_t classes = 0;
  std::vector<int> labels;
  std::optional<std::vector<std::vector<double>>> gradients;
};

/// z_y − max_{j≠y} z_j per row; the correct class is masked before the max.
template <typename T>
std::vector<double> logit_margin(std::span<const T> logits, std::size_t classes, std::span<const int> labels);

std::vector<double> margin_weights(std::span<const double> margins, double eps_stab);

struct Probabilities {
  std::vector<double> probs;
  bool degenerate = false;  // Σw = 0; probs are uniform
};

Probabilities normalize_to_probs(std::span<const double> weights);

/// Parameter gradient of each sample's own CE (batch of one), flattened in
/// scope order. Leaves the scope's gradients zeroed.
template <typename T>
std::vector<std::vector<T>> per_sample_gradients(nn::Model<T>& model, const ad::Tensor<T>& batch,
                                                 std::span<const int> labels, const std::string& grad_scope);

template <typename T>
std::vector<T> batch_gradient(const std::vector<std::vector<T>>& per_sample);

template <typename T>
double cosine_alignment(std::span<const T> g, std::span<const T> g_full, double delta_stab);

std::vector<double> threshold_weights(std::span<const double> sims);

std::vector<std::size_t> sample_subset(std::span<const double> probs, std::size_t k, Rng& rng, bool replacement);

/// round(rho·B) clamped to [1, B].
std::size_t subset_size(double rho, std::size_t batch_size);

SelectionDecision select(const SelectionConfig& cfg, const BatchState& state, int epoch, Rng& rng);

}  // namespace selat::select
