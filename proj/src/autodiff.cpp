#include "selat/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "selat/errors.hpp"

namespace selat::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapVec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CMapVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

[[noreturn]] void dimension_error(const char* op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

template <typename T>
NodePtr<T> make_leaf(Shape shape, Buffer<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in shape " + to_string(shape));
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->storage = std::make_shared<Buffer<T>>(std::move(data));
  node->requires_grad = requires_grad;
  return node;
}

// Output node of a primitive. History is only kept if some input needs a gradient.
template <typename T>
NodePtr<T> make_result(const char* op, Shape shape, Buffer<T> data,
                       std::vector<NodePtr<T>> inputs) {
  auto node = make_leaf<T>(std::move(shape), std::move(data), false);
  node->op = op;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n->requires_grad; });
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
  }
  return node;
}

template <typename T>
const NodePtr<T>& require(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  return t.node();
}

}  // namespace

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(make_leaf<T>(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad)) {}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  Buffer<T> data(ad::numel(shape), value);
  return Tensor(make_leaf<T>(std::move(shape), std::move(data), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return require(*this, "shape")->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("dim: axis out of range for shape " + to_string(s));
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return require(*this, "numel")->storage->size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return *require(*this, "data")->storage;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  return *require(*this, "mutable_data")->storage;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return data()[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return require(*this, "requires_grad")->requires_grad;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return require(*this, "is_leaf")->inputs.empty();
}

template <typename T>
bool Tensor<T>::has_grad() const {
  const auto& n = require(*this, "has_grad");
  return n->grad.size() == n->storage->size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) return {};
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return require(*this, "mutable_grad")->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& g = require(*this, "zero_grad")->grad;
  std::fill(g.begin(), g.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  const auto& src = require(*this, "detach");
  auto node = std::make_shared<Node<T>>();
  node->shape = src->shape;
  node->storage = src->storage;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return Tensor(make_leaf<T>(shape(), Buffer<T>(data().begin(), data().end()), requires_grad));
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + to_string(shape()));
  }
  GradGraph<T>::trace(*this).backward();
}

// ---------------------------------------------------------------- GradGraph

template <typename T>
GradGraph<T> GradGraph<T>::trace(const Tensor<T>& root) {
  GradGraph g;
  g.root_ = require(root, "trace");
  if (!g.root_->requires_grad) return g;

  // Iterative post-order DFS.
  std::unordered_set<const Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{g.root_.get(), 0}};
  visited.insert(g.root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      g.order_.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

template <typename T>
std::vector<std::string> GradGraph<T>::op_names() const {
  std::vector<std::string> names;
  for (const auto* n : order_) names.emplace_back(n->op);
  return names;
}

template <typename T>
void GradGraph<T>::backward() {
  if (order_.empty()) return;
  // Interior gradients are per-pass scratch; leaves accumulate.
  for (auto* n : order_) {
    if (!n->inputs.empty()) {
      n->grad_buffer();
      std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
  }
  auto& seed = root_->grad_buffer();
  for (auto& v : seed) v += T(1);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    if ((*it)->backward_rule) (*it)->backward_rule(**it);
  }
}

// ---------------------------------------------------------------- primitives

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const auto& xn = require(x, "affine");
  const auto& wn = require(weight, "affine");
  const auto& bn = require(bias, "affine");
  if (xn->shape.size() != 2 || wn->shape.size() != 2 || bn->shape.size() != 1 ||
      xn->shape[1] != wn->shape[1] || bn->shape[0] != wn->shape[0]) {
    dimension_error("affine", "x " + to_string(xn->shape) + ", weight " + to_string(wn->shape) +
                                  ", bias " + to_string(bn->shape));
  }
  const std::size_t batch = xn->shape[0], in = xn->shape[1], out = wn->shape[0];
  Buffer<T> y(batch * out);
  MapMat<T> ym(y.data(), batch, out);
  CMapMat<T> xm(xn->storage->data(), batch, in);
  CMapMat<T> wm(wn->storage->data(), out, in);
  CMapVec<T> bv(bn->storage->data(), out);
  ym.noalias() = xm * wm.transpose();
  ym.rowwise() += bv.transpose();

  auto node = make_result<T>("affine", {batch, out}, std::move(y), {xn, wn, bn});
  if (node->requires_grad) {
    node->backward_rule = [batch, in, out](Node<T>& self) {
      auto& xi = *self.inputs[0];
      auto& wi = *self.inputs[1];
      auto& bi = *self.inputs[2];
      CMapMat<T> gy(self.grad.data(), batch, out);
      if (xi.requires_grad) {
        MapMat<T> gx(xi.grad_buffer().data(), batch, in);
        gx.noalias() += gy * CMapMat<T>(wi.storage->data(), out, in);
      }
      if (wi.requires_grad) {
        MapMat<T> gw(wi.grad_buffer().data(), out, in);
        gw.noalias() += gy.transpose() * CMapMat<T>(xi.storage->data(), batch, in);
      }
      if (bi.requires_grad) {
        MapVec<T> gb(bi.grad_buffer().data(), out);
        gb += gy.colwise().sum().transpose();
      }
    };
  }
  return Tensor<T>(std::move(node));
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width, out_channels, kh, kw, pad_h, pad_w, out_h, out_w;
  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ki) - static_cast<std::ptrdiff_t>(g.pad_h);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox + kj) - static_cast<std::ptrdiff_t>(g.pad_w);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            dst[oy * g.out_w + ox] = inside ? image[(c * g.height + iy) * g.width + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ki) - static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox + kj) - static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            image[(c * g.height + iy) * g.width + ix] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Padding padding) {
  const auto& xn = require(x, "conv2d");
  const auto& wn = require(weight, "conv2d");
  const auto& bn = require(bias, "conv2d");
  const auto shapes = [&] {
    return "x " + to_string(xn->shape) + ", weight " + to_string(wn->shape) + ", bias " + to_string(bn->shape);
  };
  if (xn->shape.size() != 4 || wn->shape.size() != 4 || bn->shape.size() != 1 ||
      xn->shape[1] != wn->shape[1] || bn->shape[0] != wn->shape[0]) {
    dimension_error("conv2d", shapes());
  }
  ConvGeometry g{};
  g.batch = xn->shape[0];
  g.channels = xn->shape[1];
  g.height = xn->shape[2];
  g.width = xn->shape[3];
  g.out_channels = wn->shape[0];
  g.kh = wn->shape[2];
  g.kw = wn->shape[3];
  if (padding == Padding::Same) {
    if (g.kh % 2 == 0 || g.kw % 2 == 0) dimension_error("conv2d", "same padding needs odd kernel, " + shapes());
    g.pad_h = g.kh / 2;
    g.pad_w = g.kw / 2;
    g.out_h = g.height;
    g.out_w = g.width;
  } else {
    if (g.kh > g.height || g.kw > g.width) dimension_error("conv2d", "kernel larger than input, " + shapes());
    g.out_h = g.height - g.kh + 1;
    g.out_w = g.width - g.kw + 1;
  }

  const std::size_t rows = g.col_rows(), cols = g.col_cols();
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * cols;
  const bool keep_cols = wn->requires_grad;

  Buffer<T> y(g.batch * out_stride);
  Buffer<T> saved(keep_cols ? g.batch * rows * cols : 0);
  Buffer<T> scratch(keep_cols ? 0 : rows * cols);
  CMapMat<T> wm(wn->storage->data(), g.out_channels, rows);
  CMapVec<T> bv(bn->storage->data(), g.out_channels);
  for (std::size_t b = 0; b < g.batch; ++b) {
    T* col = keep_cols ? saved.data() + b * rows * cols : scratch.data();
    im2col(xn->storage->data() + b * in_stride, g, col);
    MapMat<T> ym(y.data() + b * out_stride, g.out_channels, cols);
    ym.noalias() = wm * CMapMat<T>(col, rows, cols);
    ym.colwise() += bv;
  }

  auto node = make_result<T>("conv2d", {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(y), {xn, wn, bn});
  if (node->requires_grad) {
    node->backward_rule = [g, cols_saved = std::move(saved)](Node<T>& self) {
      auto& xi = *self.inputs[0];
      auto& wi = *self.inputs[1];
      auto& bi = *self.inputs[2];
      const std::size_t rows = g.col_rows(), cols = g.col_cols();
      const std::size_t in_stride = g.channels * g.height * g.width;
      const std::size_t out_stride = g.out_channels * cols;
      CMapMat<T> wm(wi.storage->data(), g.out_channels, rows);
      Buffer<T> dcol(xi.requires_grad ? rows * cols : 0);
      for (std::size_t b = 0; b < g.batch; ++b) {
        CMapMat<T> gy(self.grad.data() + b * out_stride, g.out_channels, cols);
        if (wi.requires_grad) {
          MapMat<T> gw(wi.grad_buffer().data(), g.out_channels, rows);
          gw.noalias() += gy * CMapMat<T>(cols_saved.data() + b * rows * cols, rows, cols).transpose();
        }
        if (bi.requires_grad) {
          MapVec<T> gb(bi.grad_buffer().data(), g.out_channels);
          gb += gy.rowwise().sum();
        }
        if (xi.requires_grad) {
          MapMat<T> dc(dcol.data(), rows, cols);
          dc.noalias() = wm.transpose() * gy;
          col2im_add(dcol.data(), g, xi.grad_buffer().data() + b * in_stride);
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
  const auto& xn = require(x, "maxpool2x2");
  if (xn->shape.size() != 4 || xn->shape[2] < 2 || xn->shape[3] < 2) {
    dimension_error("maxpool2x2", "expects [B,C,H,W] with H,W >= 2, got " + to_string(xn->shape));
  }
  const std::size_t planes = xn->shape[0] * xn->shape[1];
  const std::size_t h = xn->shape[2], w = xn->shape[3], oh = h / 2, ow = w / 2;
  Buffer<T> y(planes * oh * ow);
  std::vector<std::size_t> argmax(y.size());
  const T* src = xn->storage->data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = p * h * w + (2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + i) * ow + j;
        y[o] = src[best];
        argmax[o] = best;
      }
    }
  }
  auto node = make_result<T>("maxpool2x2", {xn->shape[0], xn->shape[1], oh, ow}, std::move(y), {xn});
  if (node->requires_grad) {
    node->backward_rule = [argmax = std::move(argmax)](Node<T>& self) {
      auto& gx = self.inputs[0]->grad_buffer();
      for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[o];
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const auto& xn = require(x, "relu");
  const auto& src = *xn->storage;
  Buffer<T> y(src.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = src[i] > T(0) ? src[i] : T(0);
  auto node = make_result<T>("relu", xn->shape, std::move(y), {xn});
  if (node->requires_grad) {
    node->backward_rule = [](Node<T>& self) {
      auto& in = *self.inputs[0];
      auto& gx = in.grad_buffer();
      const auto& v = *in.storage;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (v[i] > T(0)) gx[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  const auto& xn = require(x, "flatten");
  if (xn->shape.empty()) dimension_error("flatten", "needs a batch axis, got " + to_string(xn->shape));
  const Shape shape{xn->shape[0], xn->storage->size() / xn->shape[0]};
  if (!xn->requires_grad) {
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->storage = xn->storage;
    node->op = "flatten";
    return Tensor<T>(std::move(node));
  }
  auto node = make_result<T>("flatten", shape, *xn->storage, {xn});
  node->backward_rule = [](Node<T>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  };
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& an = require(a, "add");
  const auto& bn = require(b, "add");
  if (an->shape != bn->shape) dimension_error("add", to_string(an->shape) + " vs " + to_string(bn->shape));
  Buffer<T> y(*an->storage);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += (*bn->storage)[i];
  auto node = make_result<T>("add", an->shape, std::move(y), {an, bn});
  if (node->requires_grad) {
    node->backward_rule = [](Node<T>& self) {
      for (auto& in : self.inputs) {
        if (!in->requires_grad) continue;
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& an = require(a, "mul");
  const auto& bn = require(b, "mul");
  if (an->shape != bn->shape) dimension_error("mul", to_string(an->shape) + " vs " + to_string(bn->shape));
  Buffer<T> y(*an->storage);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= (*bn->storage)[i];
  auto node = make_result<T>("mul", an->shape, std::move(y), {an, bn});
  if (node->requires_grad) {
    node->backward_rule = [](Node<T>& self) {
      auto& l = *self.inputs[0];
      auto& r = *self.inputs[1];
      if (l.requires_grad) {
        auto& g = l.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*r.storage)[i];
      }
      if (r.requires_grad) {
        auto& g = r.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*l.storage)[i];
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const auto& an = require(a, "scale");
  Buffer<T> y(*an->storage);
  for (auto& v : y) v *= factor;
  auto node = make_result<T>("scale", an->shape, std::move(y), {an});
  if (node->requires_grad) {
    node->backward_rule = [factor](Node<T>& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto& an = require(a, "sum");
  T total = 0;
  for (auto v : *an->storage) total += v;
  auto node = make_result<T>("sum", {1}, {total}, {an});
  if (node->requires_grad) {
    node->backward_rule = [](Node<T>& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (auto& v : g) v += self.grad[0];
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& x, std::span<const T> mean, std::span<const T> stddev) {
  const auto& xn = require(x, "normalize_channels");
  if (xn->shape.size() < 2 || mean.size() != xn->shape[1] || stddev.size() != xn->shape[1]) {
    dimension_error("normalize_channels", "x " + to_string(xn->shape) + " with " + std::to_string(mean.size()) +
                                              " means and " + std::to_string(stddev.size()) + " deviations");
  }
  const std::size_t channels = xn->shape[1];
  const std::size_t inner = xn->storage->size() / (xn->shape[0] * channels);
  std::vector<T> inv(channels);
  for (std::size_t c = 0; c < channels; ++c) inv[c] = T(1) / stddev[c];
  Buffer<T> y(*xn->storage);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t c = (i / inner) % channels;
    y[i] = (y[i] - mean[c]) * inv[c];
  }
  auto node = make_result<T>("normalize_channels", xn->shape, std::move(y), {xn});
  if (node->requires_grad) {
    node->backward_rule = [inv = std::move(inv), inner, channels](Node<T>& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * inv[(i / inner) % channels];
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Reduction reduction) {
  const auto& ln = require(logits, "cross_entropy");
  if (ln->shape.size() != 2 || ln->shape[0] != labels.size()) {
    dimension_error("cross_entropy", "logits " + to_string(ln->shape) + " with " + std::to_string(labels.size()) +
                                         " labels");
  }
  const std::size_t batch = ln->shape[0], classes = ln->shape[1];
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw InputError("cross_entropy: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
  }
  const T* z = ln->storage->data();
  Buffer<T> probs(batch * classes);
  T total = 0;
  for (std::size_t i = 0; i < batch; ++i) {
    const T* row = z + i * classes;
    const std::size_t top = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
    const T m = row[top];
    T rest = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      const T e = std::exp(row[j] - m);
      probs[i * classes + j] = e;
      if (j != top) rest += e;
    }
    const T denom = T(1) + rest;
    for (std::size_t j = 0; j < classes; ++j) probs[i * classes + j] /= denom;
    total += (m - row[labels[i]]) + std::log1p(rest);
  }
  const T factor = reduction == Reduction::Mean ? T(1) / static_cast<T>(batch) : T(1);
  auto node = make_result<T>("cross_entropy", {1}, {total * factor}, {ln});
  if (node->requires_grad) {
    std::vector<int> y(labels.begin(), labels.end());
    node->backward_rule = [probs = std::move(probs), y = std::move(y), classes, factor](Node<T>& self) {
      auto& g = self.inputs[0]->grad_buffer();
      const T upstream = self.grad[0] * factor;
      for (std::size_t i = 0; i < y.size(); ++i) {
        for (std::size_t j = 0; j < classes; ++j) {
          const T onehot = static_cast<int>(j) == y[i] ? T(1) : T(0);
          g[i * classes + j] += upstream * (probs[i * classes + j] - onehot);
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

#define SELAT_INSTANTIATE(T)                                                                        \
  template class Tensor<T>;                                                                         \
  template class GradGraph<T>;                                                                      \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Padding);         \
  template Tensor<T> maxpool2x2(const Tensor<T>&);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                        \
  template Tensor<T> flatten(const Tensor<T>&);                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                    \
  template Tensor<T> sum(const Tensor<T>&);                                                         \
  template Tensor<T> normalize_channels(const Tensor<T>&, std::span<const T>, std::span<const T>);  \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>, Reduction);

SELAT_INSTANTIATE(float)
SELAT_INSTANTIATE(double)

#undef SELAT_INSTANTIATE

}  // namespace selat::ad
