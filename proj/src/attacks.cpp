#include "selat/attacks.hpp"

#include <algorithm>
#include <thread>

#include "selat/errors.hpp"

namespace selat::attack {

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("attack.epsilon must be >= 0");
  if (!(alpha > 0.0)) throw ConfigError("attack.alpha must be > 0");
  if (steps < 1) throw ConfigError("attack.steps must be >= 1");
  if (!(low < high)) throw ConfigError("attack bounds need low < high");
}

namespace {

template <typename T>
T sign(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

// ∇x of the summed CE; parameters are frozen so their gradients stay untouched.
template <typename T>
std::vector<T> input_gradient(const nn::Model<T>& model, const ad::Tensor<T>& x, std::span<const int> labels) {
  ad::Tensor<T> leaf = x.clone(true);
  ad::cross_entropy(model.forward_frozen(leaf), labels, ad::Reduction::Sum).backward();
  const auto g = leaf.grad();
  return std::vector<T>(g.begin(), g.end());
}

template <typename T>
void clamp_bounds(std::span<T> values, double low, double high) {
  const T lo = static_cast<T>(low), hi = static_cast<T>(high);
  for (auto& v : values) v = std::min(std::max(v, lo), hi);
}

}  // namespace

template <typename T>
void project_linf(std::span<T> candidate, std::span<const T> original, double epsilon, double low, double high) {
  if (candidate.size() != original.size()) throw DimensionError("project_linf: length mismatch");
  const T eps = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    candidate[i] = std::min(std::max(candidate[i], original[i] - eps), original[i] + eps);
  }
  clamp_bounds(candidate, low, high);
}

template <typename T>
ad::Tensor<T> fgsm(const nn::Model<T>& model, const ad::Tensor<T>& x, std::span<const int> labels, double epsilon,
                   double low, double high) {
  if (!(epsilon >= 0.0)) throw ConfigError("fgsm: epsilon must be >= 0");
  const auto g = input_gradient(model, x, labels);
  ad::Tensor<T> out = x.clone();
  auto v = out.mutable_data();
  const T eps = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] + eps * sign(g[i]);
  clamp_bounds(v, low, high);
  return out;
}

template <typename T>
ad::Tensor<T> pgd(const nn::Model<T>& model, const ad::Tensor<T>& x, std::span<const int> labels,
                  const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto orig = x.data();
  ad::Tensor<T> cur = x.clone();
  auto v = cur.mutable_data();
  if (cfg.random_start) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = orig[i] + static_cast<T>(cfg.epsilon * rng.symmetric());
    clamp_bounds(v, cfg.low, cfg.high);
  }
  const T alpha = static_cast<T>(cfg.alpha);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto g = input_gradient(model, cur, labels);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] + alpha * sign(g[i]);
    project_linf<T>(v, orig, cfg.epsilon, cfg.low, cfg.high);
  }
  return cur;
}

template <typename T>
ad::Tensor<T> take_rows(const ad::Tensor<T>& batch, std::span<const std::size_t> rows) {
  const std::size_t stride = batch.numel() / batch.dim(0);
  std::vector<T> values;
  values.reserve(rows.size() * stride);
  const auto src = batch.data();
  for (auto r : rows) {
    if (r >= batch.dim(0)) throw ContractError("take_rows: row " + std::to_string(r) + " out of range");
    values.insert(values.end(), src.begin() + r * stride, src.begin() + (r + 1) * stride);
  }
  ad::Shape shape = batch.shape();
  shape[0] = rows.size();
  return ad::Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
ad::Tensor<T> attack_subset(const nn::Model<T>& model, const ad::Tensor<T>& batch, std::span<const int> labels,
                            std::span<const std::size_t> subset, const AttackConfig& cfg, Rng& rng,
                            AttackCounter& counter, unsigned workers) {
  cfg.validate();
  const std::size_t rows = batch.dim(0);
  if (labels.size() != rows) throw DimensionError("attack_subset: label count does not match batch");
  std::vector<std::size_t> chosen(subset.begin(), subset.end());
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    if (chosen[i] >= rows) {
      throw ContractError("attack_subset: index " + std::to_string(chosen[i]) + " outside batch of " +
                          std::to_string(rows));
    }
    if (i > 0 && chosen[i] == chosen[i - 1]) {
      throw ContractError("attack_subset: duplicate index " + std::to_string(chosen[i]));
    }
  }
  ad::Tensor<T> out = batch.clone();
  if (chosen.empty()) return out;

  const std::size_t stride = batch.numel() / rows;
  auto run_chunk = [&](std::span<const std::size_t> part, Rng& stream) {
    std::vector<int> part_labels;
    for (auto r : part) part_labels.push_back(labels[r]);
    const auto adv = pgd(model, take_rows(batch, part), part_labels, cfg, stream);
    auto dst = out.mutable_data();
    const auto src = adv.data();
    for (std::size_t j = 0; j < part.size(); ++j) {
      std::copy(src.begin() + j * stride, src.begin() + (j + 1) * stride, dst.begin() + part[j] * stride);
    }
  };

  const std::size_t chunks = std::min<std::size_t>(std::max(1u, workers), chosen.size());
  if (chunks == 1) {
    run_chunk(chosen, rng);
  } else {
    const std::span<const std::size_t> all(chosen);
    std::vector<Rng> streams;
    for (std::size_t c = 0; c < chunks; ++c) streams.push_back(rng.split(c));
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
      const std::size_t begin = c * all.size() / chunks, end = (c + 1) * all.size() / chunks;
      pool.emplace_back([&, c, begin, end] {
        try {
          run_chunk(all.subspan(begin, end - begin), streams[c]);
        } catch (...) {
          errors[c] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    rng.engine().discard(chunks);
  }
  counter.passes += static_cast<std::uint64_t>(chosen.size()) * static_cast<std::uint64_t>(cfg.steps);
  return out;
}

#define SELAT_INSTANTIATE(T)                                                                                    \
  template void project_linf<T>(std::span<T>, std::span<const T>, double, double, double);                      \
  template ad::Tensor<T> fgsm<T>(const nn::Model<T>&, const ad::Tensor<T>&, std::span<const int>, double, double, \
                                 double);                                                                       \
  template ad::Tensor<T> pgd<T>(const nn::Model<T>&, const ad::Tensor<T>&, std::span<const int>,                \
                                const AttackConfig&, Rng&);                                                     \
  template ad::Tensor<T> take_rows<T>(const ad::Tensor<T>&, std::span<const std::size_t>);                      \
  template ad::Tensor<T> attack_subset<T>(const nn::Model<T>&, const ad::Tensor<T>&, std::span<const int>,      \
                                          std::span<const std::size_t>, const AttackConfig&, Rng&,              \
                                          AttackCounter&, unsigned);

SELAT_INSTANTIATE(float)
SELAT_INSTANTIATE(double)

#undef SELAT_INSTANTIATE

}  // namespace selat::attack
