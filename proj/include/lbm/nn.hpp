// Parameterized building blocks shared by the encoder and the tracker.
#pragma once

#include <functional>
#include <string>

#include "lbm/rng.hpp"
#include "lbm/tensor.hpp"

namespace lbm {

template <class T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

/// y = x W + b with W stored in x out.
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  /// Normal init with std = gain / sqrt(in); zero bias.
  Linear(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
  static Linear zeros(std::size_t in, std::size_t out);

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
  Tensor<T> operator()(const Tensor<T>& x) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <class T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

/// Two-layer perceptron with gelu. `zero_output` starts the second layer at
/// zero so a residual branch is the identity at initialization.
template <class T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, bool zero_output);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <class T>
struct DeformAttnResult {
  Tensor<T> output;     // N x d
  Tensor<T> weights;    // N x (K*P), softmax over the last axis
  Tensor<T> locations;  // (N*K*P) x 2 sampling locations
  Tensor<T> samples;    // (N*K*P) x C raw features at the locations
  Tensor<T> values;     // N x (K*P) x d projected samples
  Tensor<T> aggregate;  // N x d weighted value sum before the output projection
};

/// Deformable attention over a C x H x W map. Each of the K base locations of
/// a query predicts P offsets and P weight logits from its own query vector;
/// the softmax runs jointly over all K*P points of the query.
template <class T>
struct DeformAttn {
  std::size_t points = 0;
  Linear<T> query;
  Linear<T> offset;
  Linear<T> weight;
  Linear<T> value;
  Linear<T> output;

  DeformAttn() = default;
  DeformAttn(std::size_t query_dim, std::size_t map_channels, std::size_t dim, std::size_t points, Rng& rng);

  /// query: N x K x Dq, base: N x K x 2 in feature-grid units.
  DeformAttnResult<T> operator()(const Tensor<T>& query, const Tensor<T>& base, const Tensor<T>& map) const;
  /// Zeroes the offset predictor entirely (weights and the grid bias).
  void zero_offsets();
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

/// Single-head scaled dot-product cross-attention with residual and
/// layer-norm: LN(q + Wo softmax(Wq q . Wk m / sqrt(d)) Wv m).
template <class T>
struct CrossAttn {
  Linear<T> q;
  Linear<T> k;
  Linear<T> v;
  Linear<T> o;
  LayerNorm<T> norm;

  CrossAttn() = default;
  CrossAttn(std::size_t dim, Rng& rng);

  /// query: N x d, memory: N x M x d. With M == 0 the query is returned as is.
  /// When `weights` is given it receives the N x M attention weights.
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& memory, Tensor<T>* weights = nullptr) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

}  // namespace lbm
