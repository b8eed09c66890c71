#pragma once

#include <cmath>
#include <vector>

#include "selat/autodiff.hpp"
#include "selat/rng.hpp"

namespace selat::testing {

template <typename T>
ad::Tensor<T> random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return ad::Tensor<T>(std::move(shape), std::move(v), grad);
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<int> out(n);
  for (auto& y : out) y = static_cast<int>(rng.index(classes));
  return out;
}

// Reference −log softmax(z)_y evaluated in long double.
inline double reference_ce(const std::vector<double>& z, int y) {
  long double m = z[0];
  for (double v : z) m = std::max<long double>(m, v);
  long double s = 0;
  for (double v : z) s += std::exp(static_cast<long double>(v) - m);
  return static_cast<double>(std::log(s) + m - z[static_cast<std::size_t>(y)]);
}

}  // namespace selat::testing

#include "selat/gradcheck.hpp"
#include "selat/models.hpp"

namespace selat::testing {

struct ModelGradCheck {
  double worst_param = 0;  // largest relative error over parameter tensors
  double input = 0;        // relative error of the input gradient
};

// Analytic gradients of mean CE wrt every parameter and the input, compared
// against central differences of the frozen forward.
inline ModelGradCheck check_model_gradients(nn::Model<double>& model, const ad::Tensord& x,
                                            const std::vector<int>& labels, double h = 1e-6) {
  const auto loss_at = [&](const ad::Tensord& in) {
    return ad::cross_entropy(model.forward_frozen(in), labels).item();
  };
  ModelGradCheck out;
  model.zero_grad();
  auto leaf = x.clone(true);
  ad::cross_entropy(model.forward(leaf), labels).backward();

  for (auto& p : model.params()) {
    const std::vector<double> analytic(p.value.grad().begin(), p.value.grad().end());
    auto values = p.value.mutable_data();
    std::vector<double> numeric(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = loss_at(x);
      values[i] = orig - h;
      const double down = loss_at(x);
      values[i] = orig;
      numeric[i] = (up - down) / (2 * h);
    }
    out.worst_param = std::max(out.worst_param, ad::relative_error<double>(analytic, numeric));
  }
  const std::function<double(const ad::Tensord&)> f = loss_at;
  const auto numeric_x = ad::finite_diff_gradient<double>(f, x, h);
  out.input = ad::relative_error<double>(leaf.grad(), numeric_x.data());
  model.zero_grad();
  return out;
}

}  // namespace selat::testing
