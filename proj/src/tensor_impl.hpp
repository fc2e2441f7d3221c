// Internal helpers shared by the kernel translation units.
#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "lbm/tensor.hpp"

namespace lbm::detail {

template <class T>
void require_finite(const std::vector<T>& values, const char* op) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value");
  }
}

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Wraps a freshly computed value; when recording, attaches `backward` and
/// registers the node on the active tape.
template <class T, class Backward>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  require_finite(values, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  Tape<T>* tape = active_tape<T>();
  if (tape != nullptr && any_requires_grad<T>(inputs)) {
    node->requires_grad = true;
    node->backward = std::forward<Backward>(backward);
    tape->record(node);
  }
  return Tensor<T>(std::move(node));
}

/// Accumulates into a parent's gradient only when it participates.
template <class T>
std::vector<T>* grad_of(const std::shared_ptr<Node<T>>& node) {
  return node->requires_grad ? &node->grad_buffer() : nullptr;
}

}  // namespace lbm::detail
