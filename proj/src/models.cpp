#include "selat/models.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "selat/errors.hpp"
#include "selat/rng.hpp"

namespace selat::nn {

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(text);
  while (std::getline(is, cur, sep)) parts.push_back(cur);
  return parts;
}

std::size_t parse_size(const std::string& text, const std::string& what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("model descriptor: bad integer '" + text + "' for " + what);
  }
  return v;
}

double parse_real(const std::string& text, const std::string& what) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("model descriptor: bad number '" + text + "' for " + what);
  }
  return v;
}

std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

template <typename Seq, typename Fmt>
std::string join(const Seq& values, char sep, Fmt fmt) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += fmt(values[i]);
  }
  return out;
}

const char* arch_name(Arch a) {
  switch (a) {
    case Arch::Mlp: return "mlp";
    case Arch::Cnn4: return "cnn4";
    case Arch::ResNet: return "resnet";
  }
  return "?";
}

// Parameter factory shared by the builders; draws happen in declaration order.
template <typename T>
class ParamBuilder {
 public:
  explicit ParamBuilder(std::uint64_t seed) : rng_(seed) {}

  std::size_t he(const std::string& name, ad::Shape shape, std::size_t fan_in) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> data(ad::numel(shape));
    for (auto& v : data) v = static_cast<T>(rng_.normal() * std);
    return add(name, std::move(shape), std::move(data));
  }

  std::size_t zeros(const std::string& name, ad::Shape shape) {
    std::vector<T> data(ad::numel(shape), T(0));
    return add(name, std::move(shape), std::move(data));
  }

  std::vector<NamedParam<T>> take() { return std::move(params_); }

 private:
  std::size_t add(const std::string& name, ad::Shape shape, std::vector<T> data) {
    params_.push_back({name, ad::Tensor<T>(std::move(shape), std::move(data), true)});
    return params_.size() - 1;
  }

  Rng rng_;
  std::vector<NamedParam<T>> params_;
};

template <typename T>
ad::Tensor<T> normalize_input(const ModelSpec& spec, const ad::Tensor<T>& x) {
  if (spec.mean.empty()) return x;
  std::vector<T> mean(spec.mean.begin(), spec.mean.end());
  std::vector<T> stddev(spec.stddev.begin(), spec.stddev.end());
  return ad::normalize_channels<T>(x, mean, stddev);
}

void check_input_shape(const ModelSpec& spec) {
  if (spec.arch != Arch::Mlp && spec.input_shape.size() != 3) {
    throw ConfigError(std::string(arch_name(spec.arch)) + ": input shape must be C×H×W, got " +
                      ad::to_string(spec.input_shape));
  }
  if (spec.classes < 2) throw ConfigError("model: need at least 2 classes");
  if (!spec.mean.empty()) {
    const std::size_t channels = spec.input_shape.empty() ? 0 : spec.input_shape[0];
    if (spec.mean.size() != channels || spec.stddev.size() != channels) {
      throw ConfigError("model: normalization needs one mean and stddev per input channel");
    }
  }
}

}  // namespace

std::string ModelSpec::descriptor() const {
  auto size_fmt = [](std::size_t v) { return std::to_string(v); };
  std::ostringstream os;
  os << arch_name(arch) << ";in=" << join(input_shape, 'x', size_fmt) << ";classes=" << classes;
  switch (arch) {
    case Arch::Mlp: os << ";hidden=" << join(hidden, '-', size_fmt); break;
    case Arch::Cnn4: os << ";c1=" << conv1 << ";c2=" << conv2 << ";hidden=" << fc_hidden; break;
    case Arch::ResNet: os << ";width=" << width; break;
  }
  if (!mean.empty()) {
    os << ";mean=" << join(mean, ',', format_real) << ";std=" << join(stddev, ',', format_real);
  }
  return os.str();
}

ModelSpec ModelSpec::parse(const std::string& descriptor) {
  const auto parts = split(descriptor, ';');
  if (parts.empty()) throw ConfigError("model descriptor: empty");
  ModelSpec spec;
  if (parts[0] == "mlp") {
    spec.arch = Arch::Mlp;
  } else if (parts[0] == "cnn4") {
    spec.arch = Arch::Cnn4;
  } else if (parts[0] == "resnet") {
    spec.arch = Arch::ResNet;
  } else {
    throw ConfigError("model descriptor: unknown architecture '" + parts[0] + "'");
  }
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string::npos) throw ConfigError("model descriptor: expected key=value, got '" + parts[i] + "'");
    const std::string key = parts[i].substr(0, eq), value = parts[i].substr(eq + 1);
    if (key == "in") {
      spec.input_shape.clear();
      for (const auto& d : split(value, 'x')) spec.input_shape.push_back(parse_size(d, key));
    } else if (key == "classes") {
      spec.classes = parse_size(value, key);
    } else if (key == "hidden" && spec.arch == Arch::Mlp) {
      spec.hidden.clear();
      if (!value.empty()) {
        for (const auto& d : split(value, '-')) spec.hidden.push_back(parse_size(d, key));
      }
    } else if (key == "hidden") {
      spec.fc_hidden = parse_size(value, key);
    } else if (key == "c1") {
      spec.conv1 = parse_size(value, key);
    } else if (key == "c2") {
      spec.conv2 = parse_size(value, key);
    } else if (key == "width") {
      spec.width = parse_size(value, key);
    } else if (key == "mean") {
      spec.mean.clear();
      for (const auto& d : split(value, ',')) spec.mean.push_back(parse_real(d, key));
    } else if (key == "std") {
      spec.stddev.clear();
      for (const auto& d : split(value, ',')) spec.stddev.push_back(parse_real(d, key));
    } else {
      throw ConfigError("model descriptor: unknown key '" + key + "'");
    }
  }
  return spec;
}

// ---------------------------------------------------------------- Model

template <typename T>
Model<T>::Model(ModelSpec spec, std::vector<NamedParam<T>> params, ForwardFn forward)
    : spec_(std::move(spec)), name_(spec_.descriptor()), params_(std::move(params)), forward_(std::move(forward)) {
  auto& all = scopes_["all"];
  for (const auto& p : params_) all.push_back(p.name);
  // The last two parameters are always the head's weight and bias.
  if (params_.size() >= 2) {
    scopes_["final_linear"] = {params_[params_.size() - 2].name, params_.back().name};
  }
}

template <typename T>
const ad::Tensor<T>& Model<T>::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw ConfigError("model " + name_ + ": no parameter named '" + name + "'");
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
const std::vector<std::string>& Model<T>::scope(const std::string& label) const {
  auto it = scopes_.find(label);
  if (it == scopes_.end()) throw ConfigError("unknown parameter scope '" + label + "'");
  return it->second;
}

template <typename T>
std::vector<ad::Tensor<T>> Model<T>::bind(const std::vector<bool>& trainable) const {
  std::vector<ad::Tensor<T>> bound;
  bound.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    bound.push_back(trainable[i] ? params_[i].value : params_[i].value.detach());
  }
  return bound;
}

template <typename T>
ad::Tensor<T> Model<T>::forward(const ad::Tensor<T>& x) const {
  return forward_(bind(std::vector<bool>(params_.size(), true)), x);
}

template <typename T>
ad::Tensor<T> Model<T>::forward_frozen(const ad::Tensor<T>& x) const {
  return forward_(bind(std::vector<bool>(params_.size(), false)), x);
}

template <typename T>
ad::Tensor<T> Model<T>::forward_scoped(const ad::Tensor<T>& x, const std::string& scope_label) const {
  const auto& names = scope(scope_label);
  std::vector<bool> trainable(params_.size(), false);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    trainable[i] = std::find(names.begin(), names.end(), params_[i].name) != names.end();
  }
  return forward_(bind(trainable), x);
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
std::vector<T> Model<T>::flat_grad(const std::string& scope_label) const {
  std::vector<T> out;
  for (const auto& name : scope(scope_label)) {
    const auto& t = param(name);
    const auto g = t.grad();
    if (g.empty()) {
      out.insert(out.end(), t.numel(), T(0));
    } else {
      out.insert(out.end(), g.begin(), g.end());
    }
  }
  return out;
}

template <typename T>
Model<T> Model<T>::clone() const {
  std::vector<NamedParam<T>> copy;
  copy.reserve(params_.size());
  for (const auto& p : params_) copy.push_back({p.name, p.value.clone(true)});
  return Model(spec_, std::move(copy), forward_);
}

// ---------------------------------------------------------------- builders

template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  check_input_shape(spec);
  ParamBuilder<T> pb(seed);
  typename Model<T>::ForwardFn forward;

  switch (spec.arch) {
    case Arch::Mlp: {
      std::vector<std::size_t> sizes{ad::numel(spec.input_shape)};
      sizes.insert(sizes.end(), spec.hidden.begin(), spec.hidden.end());
      sizes.push_back(spec.classes);
      for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        pb.he("fc" + std::to_string(l + 1) + ".weight", {sizes[l + 1], sizes[l]}, sizes[l]);
        pb.zeros("fc" + std::to_string(l + 1) + ".bias", {sizes[l + 1]});
      }
      forward = [spec](std::span<const ad::Tensor<T>> p, const ad::Tensor<T>& x) {
        auto h = ad::flatten(normalize_input(spec, x));
        const std::size_t layers = p.size() / 2;
        for (std::size_t l = 0; l < layers; ++l) {
          h = ad::affine(h, p[2 * l], p[2 * l + 1]);
          if (l + 1 < layers) h = ad::relu(h);
        }
        return h;
      };
      break;
    }
    case Arch::Cnn4: {
      const std::size_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
      if (h < 4 || w < 4) throw ConfigError("cnn4: input must be at least 4×4");
      const std::size_t flat = spec.conv2 * (h / 4) * (w / 4);
      pb.he("conv1.weight", {spec.conv1, c, 3, 3}, c * 9);
      pb.zeros("conv1.bias", {spec.conv1});
      pb.he("conv2.weight", {spec.conv2, spec.conv1, 3, 3}, spec.conv1 * 9);
      pb.zeros("conv2.bias", {spec.conv2});
      pb.he("fc1.weight", {spec.fc_hidden, flat}, flat);
      pb.zeros("fc1.bias", {spec.fc_hidden});
      pb.he("fc2.weight", {spec.classes, spec.fc_hidden}, spec.fc_hidden);
      pb.zeros("fc2.bias", {spec.classes});
      forward = [spec](std::span<const ad::Tensor<T>> p, const ad::Tensor<T>& x) {
        auto a = normalize_input(spec, x);
        a = ad::maxpool2x2(ad::relu(ad::conv2d(a, p[0], p[1])));
        a = ad::maxpool2x2(ad::relu(ad::conv2d(a, p[2], p[3])));
        a = ad::relu(ad::affine(ad::flatten(a), p[4], p[5]));
        return ad::affine(a, p[6], p[7]);
      };
      break;
    }
    case Arch::ResNet: {
      const std::size_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
      const std::size_t k = spec.width;
      if (h < 4 || w < 4) throw ConfigError("resnet: input must be at least 4×4");
      if (k == 0) throw ConfigError("resnet: width must be positive");
      pb.he("stem.weight", {k, c, 3, 3}, c * 9);
      pb.zeros("stem.bias", {k});
      pb.he("block1.conv1.weight", {k, k, 3, 3}, k * 9);
      pb.zeros("block1.conv1.bias", {k});
      pb.he("block1.conv2.weight", {k, k, 3, 3}, k * 9);
      pb.zeros("block1.conv2.bias", {k});
      pb.he("widen.weight", {2 * k, k, 3, 3}, k * 9);
      pb.zeros("widen.bias", {2 * k});
      pb.he("block2.conv1.weight", {2 * k, 2 * k, 3, 3}, 2 * k * 9);
      pb.zeros("block2.conv1.bias", {2 * k});
      pb.he("block2.conv2.weight", {2 * k, 2 * k, 3, 3}, 2 * k * 9);
      pb.zeros("block2.conv2.bias", {2 * k});
      const std::size_t flat = 2 * k * (h / 4) * (w / 4);
      pb.he("fc.weight", {spec.classes, flat}, flat);
      pb.zeros("fc.bias", {spec.classes});
      forward = [spec](std::span<const ad::Tensor<T>> p, const ad::Tensor<T>& x) {
        auto block = [&](const ad::Tensor<T>& in, std::size_t i) {
          auto r = ad::relu(ad::conv2d(in, p[i], p[i + 1]));
          r = ad::conv2d(r, p[i + 2], p[i + 3]);
          return ad::relu(ad::add(in, r));
        };
        auto a = ad::relu(ad::conv2d(normalize_input(spec, x), p[0], p[1]));
        a = ad::maxpool2x2(block(a, 2));
        a = ad::relu(ad::conv2d(a, p[6], p[7]));
        a = ad::maxpool2x2(block(a, 8));
        return ad::affine(ad::flatten(a), p[12], p[13]);
      };
      break;
    }
  }
  return Model<T>(spec, pb.take(), std::move(forward));
}

template <typename T>
Model<T> build_mlp(const std::vector<std::size_t>& layer_sizes, std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw ConfigError("build_mlp: need at least input and output sizes");
  ModelSpec spec;
  spec.arch = Arch::Mlp;
  spec.input_shape = {layer_sizes.front()};
  spec.classes = layer_sizes.back();
  spec.hidden.assign(layer_sizes.begin() + 1, layer_sizes.end() - 1);
  return build_model<T>(spec, seed);
}

template <typename T>
Model<T> build_cnn4(const ad::Shape& input_shape, std::size_t classes, std::uint64_t seed) {
  ModelSpec spec;
  spec.arch = Arch::Cnn4;
  spec.input_shape = input_shape;
  spec.classes = classes;
  return build_model<T>(spec, seed);
}

template <typename T>
Model<T> build_small_resnet(const ad::Shape& input_shape, std::size_t classes, std::size_t width,
                            std::uint64_t seed) {
  ModelSpec spec;
  spec.arch = Arch::ResNet;
  spec.input_shape = input_shape;
  spec.classes = classes;
  spec.width = width;
  return build_model<T>(spec, seed);
}

#define SELAT_INSTANTIATE(T)                                                                              \
  template class Model<T>;                                                                                \
  template Model<T> build_model<T>(const ModelSpec&, std::uint64_t);                                      \
  template Model<T> build_mlp<T>(const std::vector<std::size_t>&, std::uint64_t);                         \
  template Model<T> build_cnn4<T>(const ad::Shape&, std::size_t, std::uint64_t);                          \
  template Model<T> build_small_resnet<T>(const ad::Shape&, std::size_t, std::size_t, std::uint64_t);

SELAT_INSTANTIATE(float)
SELAT_INSTANTIATE(double)

#undef SELAT_INSTANTIATE

}  // namespace selat::nn
