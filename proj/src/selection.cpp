#include "selat/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "selat/errors.hpp"
#include "selat/log.hpp"

namespace selat::select {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Margin: return "margin";
    case Strategy::GradMatch: return "grad_match";
    case Strategy::Random: return "random";
    case Strategy::Full: return "full";
    case Strategy::None: return "none";
  }
  return "?";
}

Strategy parse_strategy(const std::string& text) {
  for (auto s : {Strategy::Margin, Strategy::GradMatch, Strategy::Random, Strategy::Full, Strategy::None}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown selection strategy '" + text + "'");
}

void SelectionConfig::validate() const {
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("selection.rho must lie in (0, 1], got " + std::to_string(rho));
  if (warmup_epochs < 0) throw ConfigError("selection.warmup_epochs must be >= 0");
  if (!(eps_stab > 0.0)) throw ConfigError("selection.eps_stab must be > 0");
  if (!(delta_stab > 0.0)) throw ConfigError("selection.delta_stab must be > 0");
}

std::string SelectionDecision::to_jsonl(std::size_t batch_index) const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["batch"] = batch_index;
  j["strategy_used"] = strategy_used;
  j["chosen"] = chosen;
  if (!weights.empty()) {
    const auto [lo, hi] = std::minmax_element(weights.begin(), weights.end());
    j["weight_min"] = *lo;
    j["weight_mean"] = std::accumulate(weights.begin(), weights.end(), 0.0) / static_cast<double>(weights.size());
    j["weight_max"] = *hi;
  } else {
    j["weight_min"] = j["weight_mean"] = j["weight_max"] = nullptr;
  }
  return j.dump();
}

template <typename T>
std::vector<double> logit_margin(std::span<const T> logits, std::size_t classes, std::span<const int> labels) {
  if (classes < 2) throw ConfigError("logit_margin: need at least 2 classes to have a competing logit");
  if (logits.size() != classes * labels.size()) throw DimensionError("logit_margin: logits do not match B×C");
  std::vector<double> margins(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InputError("logit_margin: label " + std::to_string(y) + " out of range");
    }
    const T* row = logits.data() + i * classes;
    // Mask the correct class, then take the first maximum of the rest.
    std::size_t best = classes;
    for (std::size_t j = 0; j < classes; ++j) {
      if (static_cast<int>(j) == y) continue;
      if (best == classes || row[j] > row[best]) best = j;
    }
    margins[i] = static_cast<double>(row[y]) - static_cast<double>(row[best]);
  }
  return margins;
}

std::vector<double> margin_weights(std::span<const double> margins, double eps_stab) {
  if (!(eps_stab > 0.0)) throw ConfigError("margin_weights: eps_stab must be > 0");
  std::vector<double> w(margins.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 / (std::abs(margins[i]) + eps_stab);
  return w;
}

Probabilities normalize_to_probs(std::span<const double> weights) {
  if (weights.empty()) throw ContractError("normalize_to_probs: empty weights");
  Probabilities out;
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("normalize_to_probs: weights must be finite and >= 0");
    total += w;
  }
  out.probs.resize(weights.size());
  if (total <= 0.0) {
    out.degenerate = true;
    std::fill(out.probs.begin(), out.probs.end(), 1.0 / static_cast<double>(weights.size()));
    return out;
  }
  for (std::size_t i = 0; i < weights.size(); ++i) out.probs[i] = weights[i] / total;
  return out;
}

template <typename T>
std::vector<std::vector<T>> per_sample_gradients(nn::Model<T>& model, const ad::Tensor<T>& batch,
                                                 std::span<const int> labels, const std::string& grad_scope) {
  const auto& names = model.scope(grad_scope);
  auto zero_scope = [&] {
    for (auto& p : model.params()) {
      if (std::find(names.begin(), names.end(), p.name) != names.end()) p.value.zero_grad();
    }
  };
  const std::size_t rows = batch.dim(0);
  if (labels.size() != rows) throw DimensionError("per_sample_gradients: label count does not match batch");
  std::vector<std::vector<T>> grads;
  grads.reserve(rows);
  const std::size_t stride = batch.numel() / rows;
  ad::Shape single_shape = batch.shape();
  single_shape[0] = 1;
  for (std::size_t i = 0; i < rows; ++i) {
    zero_scope();
    const auto src = batch.data().subspan(i * stride, stride);
    const ad::Tensor<T> single(single_shape, std::vector<T>(src.begin(), src.end()));
    ad::cross_entropy(model.forward_scoped(single, grad_scope), labels.subspan(i, 1)).backward();
    grads.push_back(model.flat_grad(grad_scope));
  }
  zero_scope();
  return grads;
}

template <typename T>
std::vector<T> batch_gradient(const std::vector<std::vector<T>>& per_sample) {
  if (per_sample.empty()) throw ContractError("batch_gradient: no per-sample gradients");
  const std::size_t n = per_sample.front().size();
  std::vector<double> acc(n, 0.0);
  for (const auto& g : per_sample) {
    if (g.size() != n) throw DimensionError("batch_gradient: gradient lengths differ");
    for (std::size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(g[i]);
  }
  std::vector<T> mean(n);
  const double inv = 1.0 / static_cast<double>(per_sample.size());
  for (std::size_t i = 0; i < n; ++i) mean[i] = static_cast<T>(acc[i] * inv);
  return mean;
}

template <typename T>
double cosine_alignment(std::span<const T> g, std::span<const T> g_full, double delta_stab) {
  if (g.size() != g_full.size()) throw DimensionError("cosine_alignment: length mismatch");
  double dot = 0, ng = 0, nf = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double a = g[i], b = g_full[i];
    dot += a * b;
    ng += a * a;
    nf += b * b;
  }
  return dot / (std::sqrt(ng) * std::sqrt(nf) + delta_stab);
}

std::vector<double> threshold_weights(std::span<const double> sims) {
  std::vector<double> w(sims.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::max(sims[i], 0.0);
  return w;
}

std::vector<std::size_t> sample_subset(std::span<const double> probs, std::size_t k, Rng& rng, bool replacement) {
  const std::size_t n = probs.size();
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  if (replacement) {
    if (n == 0 && k > 0) throw ContractError("sample_subset: no samples to draw from");
    std::vector<double> cdf(n);
    std::partial_sum(probs.begin(), probs.end(), cdf.begin());
    for (std::size_t d = 0; d < k; ++d) {
      const double u = rng.uniform() * cdf.back();
      auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      std::size_t idx = it == cdf.end() ? n - 1 : static_cast<std::size_t>(it - cdf.begin());
      while (probs[idx] <= 0.0 && idx > 0) --idx;  // never land on a zero-mass entry via rounding
      chosen.push_back(idx);
    }
    return chosen;
  }

  if (k > n) {
    throw ContractError("sample_subset: cannot draw " + std::to_string(k) + " distinct indices from " +
                        std::to_string(n));
  }
  std::vector<std::size_t> positive, zero;
  for (std::size_t i = 0; i < n; ++i) (probs[i] > 0.0 ? positive : zero).push_back(i);

  // Sequential draws; renormalizing after each removal is implicit in
  // drawing against the remaining mass.
  while (chosen.size() < k && !positive.empty()) {
    double mass = 0;
    for (auto i : positive) mass += probs[i];
    const double u = rng.uniform() * mass;
    double acc = 0;
    std::size_t pick = positive.size() - 1;
    for (std::size_t j = 0; j < positive.size(); ++j) {
      acc += probs[positive[j]];
      if (u < acc) {
        pick = j;
        break;
      }
    }
    chosen.push_back(positive[pick]);
    positive.erase(positive.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  while (chosen.size() < k) {
    const std::size_t j = rng.index(zero.size());
    chosen.push_back(zero[j]);
    zero.erase(zero.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return chosen;
}

std::size_t subset_size(double rho, std::size_t batch_size) {
  const auto k = static_cast<std::size_t>(std::llround(rho * static_cast<double>(batch_size)));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(batch_size, 1));
}

SelectionDecision select(const SelectionConfig& cfg, const BatchState& state, int epoch, Rng& rng) {
  cfg.validate();
  const std::size_t n = state.batch_size;
  if (n == 0) throw ContractError("select: empty batch");
  SelectionDecision d;
  d.epoch = epoch;
  const std::vector<double> uniform(n, 1.0 / static_cast<double>(n));

  switch (cfg.strategy) {
    case Strategy::None:
      d.strategy_used = "none";
      d.probs = uniform;
      return d;
    case Strategy::Full:
      d.strategy_used = "full";
      d.probs = uniform;
      d.chosen.resize(n);
      std::iota(d.chosen.begin(), d.chosen.end(), std::size_t{0});
      return d;
    default:
      break;
  }

  const std::size_t k = subset_size(cfg.rho, n);
  const bool warmup = epoch < cfg.warmup_epochs &&
                      (cfg.strategy == Strategy::Margin || cfg.strategy == Strategy::GradMatch);
  if (cfg.strategy == Strategy::Random || warmup) {
    d.strategy_used = warmup ? "uniform-warmup" : "uniform";
    d.probs = uniform;
  } else if (cfg.strategy == Strategy::Margin) {
    if (!state.logits) throw ConfigError("select: margin strategy needs the batch logits");
    if (state.labels.size() != n) throw DimensionError("select: label count does not match batch size");
    const auto margins = logit_margin<double>(*state.logits, state.classes, state.labels);
    d.weights = margin_weights(margins, cfg.eps_stab);
    d.strategy_used = "margin";
  } else {
    if (!state.gradients) throw ConfigError("select: grad_match strategy needs per-sample gradients");
    const auto& grads = *state.gradients;
    if (grads.size() != n) throw DimensionError("select: gradient count does not match batch size");
    const auto full = batch_gradient(grads);
    std::vector<double> sims(n);
    for (std::size_t i = 0; i < n; ++i) sims[i] = cosine_alignment<double>(grads[i], full, cfg.delta_stab);
    d.weights = threshold_weights(sims);
    d.strategy_used = "grad_match";
  }

  if (!d.weights.empty()) {
    auto p = normalize_to_probs(d.weights);
    if (p.degenerate) {
      log_warning("selection: all " + d.strategy_used + " weights are zero in epoch " + std::to_string(epoch) +
                  ", sampling uniformly");
      d.uniform_fallback = true;
    }
    d.probs = std::move(p.probs);
  }
  d.chosen = sample_subset(d.probs, k, rng, cfg.replacement);
  return d;
}

#define SELAT_INSTANTIATE(T)                                                                               \
  template std::vector<double> logit_margin<T>(std::span<const T>, std::size_t, std::span<const int>);     \
  template std::vector<std::vector<T>> per_sample_gradients<T>(nn::Model<T>&, const ad::Tensor<T>&,        \
                                                               std::span<const int>, const std::string&);  \
  template std::vector<T> batch_gradient<T>(const std::vector<std::vector<T>>&);                           \
  template double cosine_alignment<T>(std::span<const T>, std::span<const T>, double);

SELAT_INSTANTIATE(float)
SELAT_INSTANTIATE(double)

#undef SELAT_INSTANTIATE

}  // namespace selat::select
