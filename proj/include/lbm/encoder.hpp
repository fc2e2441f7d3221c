// Three-stage convolutional encoder fused to a stride-4 feature map.
#pragma once

#include "lbm/nn.hpp"

namespace lbm {

struct EncoderConfig {
  std::size_t channels = 16;     // c; stages carry c, 2c, 4c channels
  std::size_t feature_dim = 64;  // d; divisible by 4
};

template <class T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  /// He-normal weights, zero bias; padding k/2.
  Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <class T>
struct Encoder {
  EncoderConfig config;
  Conv2d<T> stem1, stem2, stage1;
  Conv2d<T> down2, stage2;
  Conv2d<T> down3, stage3;
  Conv2d<T> proj1, proj2, proj3;
  Conv2d<T> fuse;

  Encoder() = default;
  Encoder(const EncoderConfig& config, Rng& rng);

  /// image: 3 x H x W in [0,1], H and W divisible by 16 -> d x H/4 x W/4.
  Tensor<T> operator()(const Tensor<T>& image) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

}  // namespace lbm
