#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "selat/autodiff.hpp"

namespace selat::nn {

enum class Arch { Mlp, Cnn4, ResNet };

/// Everything needed to rebuild a classifier. Round-trips through the
/// descriptor string stored as the model name, e.g.
/// `cnn4;in=1x28x28;classes=10;c1=8;c2=16;hidden=64;mean=0.1307;std=0.3081`.
struct ModelSpec {
  Arch arch = Arch::Cnn4;
  ad::Shape input_shape;      // per-sample shape, e.g. {1, 28, 28}
  std::size_t classes = 10;
  std::vector<std::size_t> hidden;  // MLP hidden widths
  std::size_t conv1 = 8;            // cnn4 channel widths
  std::size_t conv2 = 16;
  std::size_t fc_hidden = 64;
  std::size_t width = 8;            // residual stem width
  std::vector<double> mean;         // per-channel input normalization; empty = none
  std::vector<double> stddev;

  std::string descriptor() const;
  static ModelSpec parse(const std::string& descriptor);
};

template <typename T>
struct NamedParam {
  std::string name;
  ad::Tensor<T> value;
};

template <typename T>
class Model {
 public:
  using ForwardFn = std::function<ad::Tensor<T>(std::span<const ad::Tensor<T>>, const ad::Tensor<T>&)>;

  Model(ModelSpec spec, std::vector<NamedParam<T>> params, ForwardFn forward);

  const std::string& name() const { return name_; }
  const ModelSpec& spec() const { return spec_; }
  std::size_t classes() const { return spec_.classes; }

  const std::vector<NamedParam<T>>& params() const { return params_; }
  std::vector<NamedParam<T>>& params() { return params_; }
  const ad::Tensor<T>& param(const std::string& name) const;
  std::size_t parameter_count() const;

  /// Labels: "all" and "final_linear". Unknown labels throw ConfigError.
  const std::vector<std::string>& scope(const std::string& label) const;
  const std::map<std::string, std::vector<std::string>>& scopes() const { return scopes_; }

  /// Logits with every parameter recorded for backward.
  ad::Tensor<T> forward(const ad::Tensor<T>& x) const;
  /// Logits with parameters treated as constants (input gradients only).
  ad::Tensor<T> forward_frozen(const ad::Tensor<T>& x) const;
  /// Only parameters in `scope_label` receive gradients.
  ad::Tensor<T> forward_scoped(const ad::Tensor<T>& x, const std::string& scope_label) const;

  void zero_grad();
  /// Concatenated gradients of the scope's parameters, in scope order.
  std::vector<T> flat_grad(const std::string& scope_label) const;

  /// Deep copy with independent parameter storage.
  Model clone() const;

 private:
  std::vector<ad::Tensor<T>> bind(const std::vector<bool>& trainable) const;

  ModelSpec spec_;
  std::string name_;
  std::vector<NamedParam<T>> params_;
  std::map<std::string, std::vector<std::string>> scopes_;
  ForwardFn forward_;
};

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
template <typename T>
Model<T> build_mlp(const std::vector<std::size_t>& layer_sizes, std::uint64_t seed);

/// conv(3×3)+relu+pool, conv(3×3)+relu+pool, affine+relu, affine.
template <typename T>
Model<T> build_cnn4(const ad::Shape& input_shape, std::size_t classes, std::uint64_t seed);

/// Stem conv, two residual blocks with identity skips separated by a pool and
/// a widening conv, then a pool and a linear head: six conv layers in total.
template <typename T>
Model<T> build_small_resnet(const ad::Shape& input_shape, std::size_t classes, std::size_t width,
                            std::uint64_t seed);

template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed);

}  // namespace selat::nn
