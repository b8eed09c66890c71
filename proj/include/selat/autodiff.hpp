#pragma once

// Minimal dense tensor with reverse-mode differentiation.
//
// Tensors are handles onto a shared graph node. Primitives record a node with
// a local backward rule whenever any input requires a gradient; `backward()`
// on a scalar walks the recorded graph in reverse topological order.
// Gradients of leaves accumulate across calls until `zero_grad()`.
//
// Instantiated for float (training) and double (gradient checks).

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace selat::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Every buffer starts on a 64-byte boundary. Vectorised kernels pick their
// code path from the base address, so a fixed alignment keeps results
// bit-identical between processes whose heaps are laid out differently.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<Buffer<T>> storage;
  Buffer<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_rule;

  Buffer<T>& grad_buffer() {
    if (grad.size() != storage->size()) grad.assign(storage->size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  // Writes go to the shared storage: views made by `detach` see them.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  // Same storage, no graph history, no gradient.
  Tensor detach() const;
  // Independent copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  void backward() const;

  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Topologically ordered view of the nodes that lead to a root tensor.
/// Only nodes that require a gradient are recorded.
template <typename T>
class GradGraph {
 public:
  static GradGraph trace(const Tensor<T>& root);

  std::size_t size() const { return order_.size(); }
  std::vector<std::string> op_names() const;

  // Seeds the root gradient with ones and runs every backward rule once.
  void backward();

 private:
  std::shared_ptr<detail::Node<T>> root_;
  std::vector<detail::Node<T>*> order_;  // inputs before consumers
};

enum class Padding { Valid, Same };
enum class Reduction { Mean, Sum };

// y = x·Wᵀ + b with x [B, in], W [out, in], b [out].
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Stride-1 convolution: x [B, C, H, W], weight [O, C, kh, kw], bias [O].
// Same padding requires odd kernel sizes.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Padding padding = Padding::Same);

// Non-overlapping 2×2 max over the last two axes of [B, C, H, W]; odd trailing
// rows/columns are dropped. Ties resolve to the first element in row-major order.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// [B, ...] -> [B, prod(...)]
template <typename T>
Tensor<T> flatten(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

// Fixed (x - mean[c]) / stddev[c] along axis 1.
template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& x, std::span<const T> mean, std::span<const T> stddev);

// −log softmax(logits)_y per row, reduced over the batch. Labels must lie in [0, C).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                        Reduction reduction = Reduction::Mean);

}  // namespace selat::ad
