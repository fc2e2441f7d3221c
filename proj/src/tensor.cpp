#include "lbm/tensor.hpp"

#include <sstream>

#include "tensor_impl.hpp"

namespace lbm {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (const std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  detail::require_finite(values, "Tensor::from");
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <class T>
detail::Node<T>& Tensor<T>::node() const {
  if (!node_) throw std::logic_error("Tensor: access to an undefined tensor");
  return *node_;
}

template <class T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("Tensor::dim: axis out of range for " + shape_str(shape()));
  return shape()[axis];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("Tensor::item: tensor has " + std::to_string(numel()) + " values");
  return node().data[0];
}

template <class T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("Tensor::at: rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (const std::size_t i : index) {
    if (i >= s[axis]) throw ShapeError("Tensor::at: index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node().data[flat];
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape();
  node->data = this->node().data;
  node->requires_grad = requires_grad();
  return Tensor(std::move(node));
}

template <class T>
void Tape<T>::record(std::shared_ptr<detail::Node<T>> node) {
  if (consumed_) throw TapeError("Tape::record: tape already consumed; call reset()");
  nodes_.push_back(std::move(node));
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw TapeError("Tape::backward: called twice without reset()");
  if (loss.numel() != 1) throw TapeError("Tape::backward: loss must be a scalar, got " + shape_str(loss.shape()));
  consumed_ = true;
  if (!loss.requires_grad()) return;
  loss.node().grad_buffer()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node<T>& node = **it;
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
  }
}

template <class T>
void Tape<T>::reset() {
  nodes_.clear();
  consumed_ = false;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace lbm
