#include "lbm/encoder.hpp"

#include <cmath>

namespace lbm {

template <class T>
Conv2d<T>::Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride_, Rng& rng)
    : stride(stride_), padding(kernel / 2) {
  const std::size_t fan_in = cin * kernel * kernel;
  const double stddev = kernel > 1 ? std::sqrt(2.0 / static_cast<double>(fan_in)) : 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> w(cout * fan_in);
  for (auto& x : w) x = static_cast<T>(rng.normal(0.0, stddev));
  weight = Tensor<T>::from({cout, cin, kernel, kernel}, std::move(w), true);
  bias = Tensor<T>::zeros({cout}, true);
}

template <class T>
Tensor<T> Conv2d<T>::operator()(const Tensor<T>& x) const {
  return conv2d(x, weight, bias, stride, padding);
}

template <class T>
void Conv2d<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(prefix + ".weight", weight);
  f(prefix + ".bias", bias);
}

template <class T>
Encoder<T>::Encoder(const EncoderConfig& cfg, Rng& rng) : config(cfg) {
  const std::size_t c = cfg.channels;
  const std::size_t d = cfg.feature_dim;
  if (c == 0 || d == 0 || d % 4 != 0) throw std::invalid_argument("Encoder: feature_dim must be a positive multiple of 4");
  stem1 = Conv2d<T>(3, c, 3, 2, rng);
  stem2 = Conv2d<T>(c, c, 3, 2, rng);
  stage1 = Conv2d<T>(c, c, 3, 1, rng);
  down2 = Conv2d<T>(c, 2 * c, 3, 2, rng);
  stage2 = Conv2d<T>(2 * c, 2 * c, 3, 1, rng);
  down3 = Conv2d<T>(2 * c, 4 * c, 3, 2, rng);
  stage3 = Conv2d<T>(4 * c, 4 * c, 3, 1, rng);
  proj1 = Conv2d<T>(c, d / 2, 1, 1, rng);
  proj2 = Conv2d<T>(2 * c, d / 4, 1, 1, rng);
  proj3 = Conv2d<T>(4 * c, d / 4, 1, 1, rng);
  fuse = Conv2d<T>(d, d, 1, 1, rng);
}

template <class T>
Tensor<T> Encoder<T>::operator()(const Tensor<T>& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("Encoder: expected 3 x H x W image, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  if (h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0) {
    throw ShapeError("Encoder: image " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by 16");
  }
  const Tensor<T> s1 = relu(stage1(relu(stem2(relu(stem1(image))))));
  const Tensor<T> s2 = relu(stage2(relu(down2(s1))));
  const Tensor<T> s3 = relu(stage3(relu(down3(s2))));
  const std::size_t fh = h / 4;
  const std::size_t fw = w / 4;
  const Tensor<T> cat = concat<T>({proj1(s1), upsample_bilinear(proj2(s2), 2, fh, fw), upsample_bilinear(proj3(s3), 4, fh, fw)}, 0);
  return fuse(cat);
}

template <class T>
void Encoder<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  stem1.visit(prefix + ".stem1", f);
  stem2.visit(prefix + ".stem2", f);
  stage1.visit(prefix + ".stage1", f);
  down2.visit(prefix + ".down2", f);
  stage2.visit(prefix + ".stage2", f);
  down3.visit(prefix + ".down3", f);
  stage3.visit(prefix + ".stage3", f);
  proj1.visit(prefix + ".proj1", f);
  proj2.visit(prefix + ".proj2", f);
  proj3.visit(prefix + ".proj3", f);
  fuse.visit(prefix + ".fuse", f);
}

template struct Conv2d<float>;
template struct Conv2d<double>;
template struct Encoder<float>;
template struct Encoder<double>;

}  // namespace lbm
