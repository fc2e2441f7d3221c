#include "lbm/nn.hpp"

#include <cmath>
#include <numbers>

namespace lbm {

template <class T>
Linear<T>::Linear(std::size_t in, std::size_t out, Rng& rng, double gain) {
  std::vector<T> w(in * out);
  const double stddev = gain / std::sqrt(static_cast<double>(in));
  for (auto& x : w) x = static_cast<T>(rng.normal(0.0, stddev));
  weight = Tensor<T>::from({in, out}, std::move(w), true);
  bias = Tensor<T>::zeros({out}, true);
}

template <class T>
Linear<T> Linear<T>::zeros(std::size_t in, std::size_t out) {
  Linear l;
  l.weight = Tensor<T>::zeros({in, out}, true);
  l.bias = Tensor<T>::zeros({out}, true);
  return l;
}

template <class T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  return add(matmul(x, weight), bias);
}

template <class T>
void Linear<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(prefix + ".weight", weight);
  f(prefix + ".bias", bias);
}

template <class T>
LayerNorm<T>::LayerNorm(std::size_t dim)
    : gain(Tensor<T>::full({dim}, T(1), true)), bias(Tensor<T>::zeros({dim}, true)) {}

template <class T>
Tensor<T> LayerNorm<T>::operator()(const Tensor<T>& x) const {
  return layer_norm(x, gain, bias);
}

template <class T>
void LayerNorm<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(prefix + ".gain", gain);
  f(prefix + ".bias", bias);
}

template <class T>
Mlp<T>::Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, bool zero_output)
    : fc1(in, hidden, rng), fc2(zero_output ? Linear<T>::zeros(hidden, out) : Linear<T>(hidden, out, rng)) {}

template <class T>
Tensor<T> Mlp<T>::operator()(const Tensor<T>& x) const {
  return fc2(gelu(fc1(x)));
}

template <class T>
void Mlp<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  fc1.visit(prefix + ".fc1", f);
  fc2.visit(prefix + ".fc2", f);
}

namespace {

// Initial sampling pattern: a centered unit-spaced square grid when the point
// count is a perfect square, otherwise a unit circle.
std::vector<double> offset_pattern(std::size_t points) {
  std::vector<double> xy(points * 2);
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(points))));
  if (side * side == points) {
    const double c = (static_cast<double>(side) - 1.0) / 2.0;
    for (std::size_t i = 0; i < points; ++i) {
      xy[2 * i] = static_cast<double>(i % side) - c;
      xy[2 * i + 1] = static_cast<double>(i / side) - c;
    }
  } else {
    for (std::size_t i = 0; i < points; ++i) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(points);
      xy[2 * i] = std::cos(a);
      xy[2 * i + 1] = std::sin(a);
    }
  }
  return xy;
}

}  // namespace

template <class T>
DeformAttn<T>::DeformAttn(std::size_t query_dim, std::size_t map_channels, std::size_t dim, std::size_t points_,
                          Rng& rng)
    : points(points_),
      query(query_dim, dim, rng),
      offset(Linear<T>::zeros(dim, points_ * 2)),
      weight(Linear<T>::zeros(dim, points_)),
      value(map_channels, dim, rng),
      output(dim, dim, rng) {
  const std::vector<double> pattern = offset_pattern(points);
  auto b = offset.bias.mutable_data();
  for (std::size_t i = 0; i < pattern.size(); ++i) b[i] = static_cast<T>(pattern[i]);
}

template <class T>
DeformAttnResult<T> DeformAttn<T>::operator()(const Tensor<T>& q_in, const Tensor<T>& base, const Tensor<T>& map) const {
  if (q_in.rank() != 3 || base.rank() != 3 || base.dim(2) != 2 || base.dim(0) != q_in.dim(0) ||
      base.dim(1) != q_in.dim(1)) {
    throw ShapeError("DeformAttn: query " + shape_str(q_in.shape()) + " and base " + shape_str(base.shape()) +
                     " disagree");
  }
  const std::size_t n = q_in.dim(0);
  const std::size_t k = q_in.dim(1);
  const std::size_t total = k * points;
  const std::size_t dim = output.out_dim();

  DeformAttnResult<T> r;
  const Tensor<T> q = query(q_in);
  const Tensor<T> offsets = reshape(offset(q), {n * total, 2});
  const Tensor<T> anchors = reshape(expand(base, 2, points), {n * total, 2});
  r.locations = add(anchors, offsets);
  r.samples = bilinear_sample(map, r.locations);
  r.values = reshape(value(r.samples), {n, total, dim});
  r.weights = softmax(reshape(weight(q), {n, total}), 1);
  r.aggregate = reshape(matmul(reshape(r.weights, {n, 1, total}), r.values), {n, dim});
  r.output = output(r.aggregate);
  return r;
}

template <class T>
void DeformAttn<T>::zero_offsets() {
  for (auto& x : offset.weight.mutable_data()) x = T(0);
  for (auto& x : offset.bias.mutable_data()) x = T(0);
}

template <class T>
void DeformAttn<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  query.visit(prefix + ".query", f);
  offset.visit(prefix + ".offset", f);
  weight.visit(prefix + ".weight", f);
  value.visit(prefix + ".value", f);
  output.visit(prefix + ".output", f);
}

template <class T>
CrossAttn<T>::CrossAttn(std::size_t dim, Rng& rng) : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), norm(dim) {}

template <class T>
Tensor<T> CrossAttn<T>::operator()(const Tensor<T>& query, const Tensor<T>& memory, Tensor<T>* weights) const {
  if (query.rank() != 2 || memory.rank() != 3 || memory.dim(0) != query.dim(0) || memory.dim(2) != query.dim(1)) {
    throw ShapeError("CrossAttn: query " + shape_str(query.shape()) + " and memory " + shape_str(memory.shape()) +
                     " disagree");
  }
  const std::size_t n = query.dim(0);
  const std::size_t d = query.dim(1);
  const std::size_t m = memory.dim(1);
  if (m == 0) {
    if (weights) *weights = Tensor<T>::zeros({n, 0});
    return query;
  }
  const Tensor<T> qv = reshape(q(query), {n, 1, d});
  const Tensor<T> scores = scale(matmul(qv, transpose(k(memory))), T(1) / std::sqrt(T(d)));
  const Tensor<T> w = softmax(scores, 2);
  if (weights) *weights = reshape(w, {n, m});
  const Tensor<T> attended = reshape(matmul(w, v(memory)), {n, d});
  return norm(add(query, o(attended)));
}

template <class T>
void CrossAttn<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  q.visit(prefix + ".q", f);
  k.visit(prefix + ".k", f);
  v.visit(prefix + ".v", f);
  o.visit(prefix + ".o", f);
  norm.visit(prefix + ".norm", f);
}

template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct Mlp<float>;
template struct Mlp<double>;
template struct DeformAttn<float>;
template struct DeformAttn<double>;
template struct CrossAttn<float>;
template struct CrossAttn<double>;

}  // namespace lbm
