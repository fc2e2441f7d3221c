// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap shared handle onto a node (shape, values, optional
// gradient). Operations record a backward closure on the calling thread's
// active Tape when any operand requires a gradient; without an active tape
// every operation is a plain forward evaluation.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lbm {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::function<void(const Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  /// Throws ShapeError on size mismatch and NumericError on non-finite data.
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node().data.size(); }

  std::span<const T> data() const { return node().data; }
  /// Direct write access for optimizers and test harnesses; bypasses the tape.
  std::span<T> mutable_data() { return node().data; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool flag) { node().requires_grad = flag; }
  bool has_grad() const { return node().grad.size() == node().data.size() && !node().data.empty(); }
  std::span<const T> grad() const { return node().grad; }
  std::span<T> mutable_grad() { return node().grad_buffer(); }
  void zero_grad() { node().grad.clear(); }

  /// Deep copy without graph history.
  Tensor clone() const;

  detail::Node<T>& node() const;
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

/// Records differentiable operations executed on this thread while a
/// TapeScope holds it active. Backward visits nodes once, newest first.
template <class T>
class Tape {
 public:
  void record(std::shared_ptr<detail::Node<T>> node);
  /// Throws TapeError if called twice without reset() or on a non-scalar loss.
  void backward(const Tensor<T>& loss);
  void reset();
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  bool consumed_ = false;
};

template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording on this thread (inference inside a training scope).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops accept a second operand whose shape is
// either identical or a trailing suffix of the first (leading-batch broadcast).

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T factor);

/// [M,K]x[K,N], [B,M,K]x[B,K,N] or [B,M,K]x[K,N].
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> relu(const Tensor<T>& a);
/// Exact form x * Phi(x).
template <class T> Tensor<T> gelu(const Tensor<T>& a);
template <class T> Tensor<T> sigmoid(const Tensor<T>& a);

/// Normalizes over the last axis, then applies gain and bias of that length.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));
template <class T> Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12));

template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
/// Stacks equally shaped tensors along a new axis.
template <class T> Tensor<T> stack(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <class T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// Swaps the last two axes.
template <class T> Tensor<T> transpose(const Tensor<T>& a);
template <class T> Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Inserts a new axis of length `count` at `axis`, repeating the values.
template <class T> Tensor<T> expand(const Tensor<T>& a, std::size_t axis, std::size_t count);
/// Clamps each row of an [..., 2] point tensor to [0, x_max] x [0, y_max].
template <class T> Tensor<T> clamp_points(const Tensor<T>& points, T x_max, T y_max);
template <class T> Tensor<T> detach(const Tensor<T>& a);

template <class T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);
template <class T> Tensor<T> sum(const Tensor<T>& a);
template <class T> Tensor<T> mean(const Tensor<T>& a);

/// Samples a C x H x W map at N continuous (x, y) locations -> N x C.
/// Locations are clamped to [0, W-1] x [0, H-1]; integer coordinates hit
/// cells exactly. Differentiable w.r.t. both the map and the locations.
template <class T> Tensor<T> bilinear_sample(const Tensor<T>& featmap, const Tensor<T>& coords);

/// x: Cin x H x W, weight: Cout x Cin x k x k, bias: Cout. Zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding);
/// Upsamples C x h x w by an integer factor with output cell u reading input
/// coordinate u / factor (clamped), matching the stride-2 convolution grid.
template <class T> Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor, std::size_t out_h,
                                               std::size_t out_w);

// Loss kernels. Masks select contributing rows; a mask that selects nothing
// yields an exact zero with zero gradient.

/// Softmax cross-entropy of N x C logits against class indices.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);
/// Binary cross-entropy of sigmoid(logits) against targets in [0, 1].
template <class T>
Tensor<T> binary_cross_entropy(const Tensor<T>& logits, std::span<const T> targets, std::span<const std::uint8_t> mask);
/// Mean absolute error over the elements of masked leading rows.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target, std::span<const std::uint8_t> mask);

}  // namespace lbm
