#pragma once

// Central-difference gradient oracle. Uses forward evaluations only, so it
// stays independent of the backward rules it is used to check.

#include <cmath>
#include <functional>
#include <stdexcept>

#include "selat/autodiff.hpp"
#include "selat/errors.hpp"

namespace selat::ad {

template <typename T>
Tensor<T> finite_diff_gradient(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw ContractError("finite_diff_gradient: step must be positive");
  Tensor<T> probe = x.clone();
  auto values = probe.mutable_data();
  std::vector<T> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T original = values[i];
    values[i] = original + h;
    const T up = f(probe);
    values[i] = original - h;
    const T down = f(probe);
    values[i] = original;
    grad[i] = (up - down) / (T(2) * h);
  }
  return Tensor<T>(x.shape(), std::move(grad));
}

// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
template <typename T>
double relative_error(std::span<const T> a, std::span<const T> b, double floor = 1e-12) {
  if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    diff += d * d;
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace selat::ad
