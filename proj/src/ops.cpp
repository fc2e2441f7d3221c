#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lbm/tensor.hpp"
#include "tensor_impl.hpp"

namespace lbm {
namespace {

using detail::grad_of;
using detail::make_result;
using detail::Node;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

/// Number of repeats of `b` inside `a` under trailing-suffix broadcasting.
std::size_t broadcast_repeats(const Shape& a, const Shape& b, const char* op) {
  const bool ok = b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin());
  if (!ok) throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  const std::size_t nb = numel_of(b);
  return nb == 0 ? 0 : numel_of(a) / nb;
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) throw ShapeError(std::string(op) + ": axis out of range for " + shape_str(s));
  AxisSplit out;
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  out.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  const auto& x = a.node().data;
  std::vector<T> y(x.size());
  std::transform(x.begin(), x.end(), y.begin(), fwd);
  auto pa = a.node_ptr();
  return make_result<T>(op, a.shape(), std::move(y), {&a}, [pa, deriv](const Node<T>& self) {
    if (auto* ga = grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * deriv(pa->data[i], self.data[i]);
    }
  });
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  broadcast_repeats(a.shape(), b.shape(), "add");
  const auto& x = a.node().data;
  const auto& z = b.node().data;
  const std::size_t nb = z.size();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + z[i % nb];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>("add", a.shape(), std::move(y), {&a, &b}, [pa, pb](const Node<T>& self) {
    if (auto* ga = grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
    if (auto* gb = grad_of(pb)) {
      const std::size_t n = gb->size();
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % n] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  broadcast_repeats(a.shape(), b.shape(), "sub");
  const auto& x = a.node().data;
  const auto& z = b.node().data;
  const std::size_t nb = z.size();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - z[i % nb];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>("sub", a.shape(), std::move(y), {&a, &b}, [pa, pb](const Node<T>& self) {
    if (auto* ga = grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
    if (auto* gb = grad_of(pb)) {
      const std::size_t n = gb->size();
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % n] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  broadcast_repeats(a.shape(), b.shape(), "mul");
  const auto& x = a.node().data;
  const auto& z = b.node().data;
  const std::size_t nb = z.size();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * z[i % nb];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>("mul", a.shape(), std::move(y), {&a, &b}, [pa, pb](const Node<T>& self) {
    const std::size_t n = pb->data.size();
    if (auto* ga = grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * pb->data[i % n];
    }
    if (auto* gb = grad_of(pb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % n] += self.grad[i] * pa->data[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      "scale", a, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  std::size_t batch = 1;
  bool shared_rhs = true;
  if (sa.size() == 2 && sb.size() == 2) {
  } else if (sa.size() == 3 && sb.size() == 2) {
  } else if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0]) {
    batch = sa[0];
    shared_rhs = false;
  } else {
    throw ShapeError("matmul: unsupported shapes " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  const std::size_t kb = sb[sb.size() - 2];
  if (k != kb) throw ShapeError("matmul: inner dims differ in " + shape_str(sa) + " x " + shape_str(sb));
  // Rows of the left operand per batch entry.
  const std::size_t m = shared_rhs ? numel_of(sa) / std::max<std::size_t>(k, 1) : sa[1];

  Shape out_shape = sa;
  out_shape.back() = n;
  std::vector<T> y(batch * m * n);
  const T* pa_data = a.node().data.data();
  const T* pb_data = b.node().data.data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    ConstMap<T> lhs(pa_data + bi * m * k, m, k);
    ConstMap<T> rhs(pb_data + (shared_rhs ? 0 : bi * k * n), k, n);
    MutMap<T> out(y.data() + bi * m * n, m, n);
    out.noalias() = lhs * rhs;
  }
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>(
      "matmul", out_shape, std::move(y), {&a, &b}, [pa, pb, batch, m, k, n, shared_rhs](const Node<T>& self) {
        auto* ga = grad_of(pa);
        auto* gb = grad_of(pb);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          ConstMap<T> g(self.grad.data() + bi * m * n, m, n);
          const std::size_t rhs_off = shared_rhs ? 0 : bi * k * n;
          if (ga) {
            ConstMap<T> rhs(pb->data.data() + rhs_off, k, n);
            MutMap<T> out(ga->data() + bi * m * k, m, k);
            out.noalias() += g * rhs.transpose();
          }
          if (gb) {
            ConstMap<T> lhs(pa->data.data() + bi * m * k, m, k);
            MutMap<T> out(gb->data() + rhs_off, k, n);
            out.noalias() += lhs.transpose() * g;
          }
        }
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      "relu", a, [](T v) { return v > T(0) ? v : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary<T>(
      "gelu", a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(
      "sigmoid", a, [](T x) { return stable_sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  const auto& in = x.node().data;
  const auto& g = gain.node().data;
  const auto& bv = bias.node().data;
  std::vector<T> y(in.size());
  std::vector<T> xhat(in.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= T(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (row[i] - mu) * inv;
      xhat[r * d + i] = h;
      y[r * d + i] = h * g[i] + bv[i];
    }
  }
  auto px = x.node_ptr();
  auto pg = gain.node_ptr();
  auto pb = bias.node_ptr();
  return make_result<T>("layer_norm", x.shape(), std::move(y), {&x, &gain, &bias},
                        [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](const Node<T>& self) {
                          auto* gx = grad_of(px);
                          auto* gg = grad_of(pg);
                          auto* gb = grad_of(pb);
                          std::vector<T> dxhat(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* go = self.grad.data() + r * d;
                            const T* h = xhat.data() + r * d;
                            T sum_dh = 0;
                            T sum_dh_h = 0;
                            for (std::size_t i = 0; i < d; ++i) {
                              if (gg) (*gg)[i] += go[i] * h[i];
                              if (gb) (*gb)[i] += go[i];
                              dxhat[i] = go[i] * pg->data[i];
                              sum_dh += dxhat[i];
                              sum_dh_h += dxhat[i] * h[i];
                            }
                            if (gx) {
                              const T k = inv_std[r] / T(d);
                              for (std::size_t i = 0; i < d; ++i) {
                                (*gx)[r * d + i] += k * (T(d) * dxhat[i] - sum_dh - h[i] * sum_dh_h);
                              }
                            }
                          }
                        });
}

template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  if (x.rank() == 0) throw ShapeError("l2_normalize: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  const auto& in = x.node().data;
  std::vector<T> y(in.size());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = eps;
    for (std::size_t i = 0; i < d; ++i) s += in[r * d + i] * in[r * d + i];
    norms[r] = std::sqrt(s);
    for (std::size_t i = 0; i < d; ++i) y[r * d + i] = in[r * d + i] / norms[r];
  }
  auto px = x.node_ptr();
  return make_result<T>("l2_normalize", x.shape(), std::move(y), {&x},
                        [px, norms = std::move(norms), d, rows](const Node<T>& self) {
                          auto* gx = grad_of(px);
                          if (!gx) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* go = self.grad.data() + r * d;
                            const T* yo = self.data.data() + r * d;
                            T dot = 0;
                            for (std::size_t i = 0; i < d; ++i) dot += go[i] * yo[i];
                            for (std::size_t i = 0; i < d; ++i) (*gx)[r * d + i] += (go[i] - yo[i] * dot) / norms[r];
                          }
                        });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const AxisSplit out_split = split_at(out_shape, axis, "concat");
  std::vector<T> y(numel_of(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * out_split.inner;
    const auto& src = p.node().data;
    for (std::size_t o = 0; o < out_split.outer; ++o) {
      std::copy_n(src.begin() + o * w, w, y.begin() + o * out_split.len * out_split.inner + offset);
    }
    offset += w;
    widths.push_back(w);
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  const std::size_t row = out_split.len * out_split.inner;
  const std::size_t outer = out_split.outer;
  auto backward = [nodes, widths, row, outer](const Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
      if (auto* g = grad_of(nodes[pi])) {
        const std::size_t w = widths[pi];
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < w; ++i) (*g)[o * w + i] += self.grad[o * row + off + i];
        }
      }
      off += widths[pi];
    }
  };
  // Recording is decided by requires_grad() of the listed inputs, so one
  // participating part stands in for all of them.
  const Tensor<T>* witness = &parts.front();
  for (const auto& p : parts) {
    if (p.requires_grad()) {
      witness = &p;
      break;
    }
  }
  return make_result<T>("concat", out_shape, std::move(y), {witness}, std::move(backward));
}

template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& first = parts.front().shape();
  if (axis > first.size()) throw ShapeError("stack: axis out of range");
  std::vector<Tensor<T>> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != first) throw ShapeError("stack: shapes differ");
    Shape s = first;
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(reshape(p, s));
  }
  return concat(expanded, axis);
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> y = a.node().data;
  auto pa = a.node_ptr();
  return make_result<T>("reshape", std::move(shape), std::move(y), {&a}, [pa](const Node<T>& self) {
    if (auto* ga = grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw ShapeError("transpose: rank < 2");
  const std::size_t m = s[s.size() - 2];
  const std::size_t n = s.back();
  const std::size_t batch = (m * n == 0) ? 0 : a.numel() / (m * n);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape.back());
  const auto& x = a.node().data;
  std::vector<T> y(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) y[b * m * n + j * m + i] = x[b * m * n + i * n + j];
    }
  }
  auto pa = a.node_ptr();
  return make_result<T>("transpose", out_shape, std::move(y), {&a}, [pa, batch, m, n](const Node<T>& self) {
    if (auto* ga = grad_of(pa)) {
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) (*ga)[b * m * n + i * n + j] += self.grad[b * m * n + j * m + i];
        }
      }
    }
  });
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit sp = split_at(a.shape(), axis, "slice");
  if (begin > end || end > sp.len) throw ShapeError("slice: range out of bounds for " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t w = (end - begin) * sp.inner;
  const auto& x = a.node().data;
  std::vector<T> y(sp.outer * w);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.begin() + (o * sp.len + begin) * sp.inner, w, y.begin() + o * w);
  }
  auto pa = a.node_ptr();
  return make_result<T>("slice", out_shape, std::move(y), {&a}, [pa, sp, begin, w](const Node<T>& self) {
    if (auto* ga = grad_of(pa)) {
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < w; ++i) (*ga)[(o * sp.len + begin) * sp.inner + i] += self.grad[o * w + i];
      }
    }
  });
}

template <class T>
Tensor<T> expand(const Tensor<T>& a, std::size_t axis, std::size_t count) {
  const Shape& s = a.shape();
  if (axis > s.size()) throw ShapeError("expand: axis out of range");
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
  const auto& x = a.node().data;
  std::vector<T> y(outer * count * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < count; ++c) std::copy_n(x.begin() + o * inner, inner, y.begin() + (o * count + c) * inner);
  }
  auto pa = a.node_ptr();
  return make_result<T>("expand", out_shape, std::move(y), {&a}, [pa, outer, count, inner](const Node<T>& self) {
    if (auto* ga = grad_of(pa)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < count; ++c) {
          for (std::size_t i = 0; i < inner; ++i) (*ga)[o * inner + i] += self.grad[(o * count + c) * inner + i];
        }
      }
    }
  });
}

template <class T>
Tensor<T> clamp_points(const Tensor<T>& points, T x_max, T y_max) {
  if (points.rank() == 0 || points.shape().back() != 2) throw ShapeError("clamp_points: expected [..., 2]");
  const auto& x = points.node().data;
  std::vector<T> y(x.size());
  std::vector<char> pass(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T hi = (i % 2 == 0) ? x_max : y_max;
    y[i] = std::clamp(x[i], T(0), hi);
    pass[i] = (x[i] >= T(0) && x[i] <= hi) ? 1 : 0;
  }
  auto pa = points.node_ptr();
  return make_result<T>("clamp_points", points.shape(), std::move(y), {&points},
                        [pa, pass = std::move(pass)](const Node<T>& self) {
                          if (auto* ga = grad_of(pa)) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              if (pass[i]) (*ga)[i] += self.grad[i];
                            }
                          }
                        });
}

template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::from(a.shape(), a.node().data);
}

template <class T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit sp = split_at(a.shape(), axis, "softmax");
  if (sp.len == 0) throw ShapeError("softmax: empty axis");
  const auto& x = a.node().data;
  std::vector<T> y(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mx = x[base];
      for (std::size_t k = 1; k < sp.len; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      T total = 0;
      for (std::size_t k = 0; k < sp.len; ++k) {
        const T e = std::exp(x[base + k * sp.inner] - mx);
        y[base + k * sp.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < sp.len; ++k) y[base + k * sp.inner] /= total;
    }
  }
  auto pa = a.node_ptr();
  return make_result<T>("softmax", a.shape(), std::move(y), {&a}, [pa, sp](const Node<T>& self) {
    auto* ga = grad_of(pa);
    if (!ga) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < sp.len; ++k) dot += self.grad[base + k * sp.inner] * self.data[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.len; ++k) {
          const std::size_t j = base + k * sp.inner;
          (*ga)[j] += self.data[j] * (self.grad[j] - dot);
        }
      }
    }
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto& x = a.node().data;
  const T total = std::accumulate(x.begin(), x.end(), T(0));
  auto pa = a.node_ptr();
  return make_result<T>("sum", Shape{}, std::vector<T>{total}, {&a}, [pa](const Node<T>& self) {
    if (auto* ga = grad_of(pa)) {
      for (auto& g : *ga) g += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / T(a.numel()));
}

template <class T>
Tensor<T> bilinear_sample(const Tensor<T>& featmap, const Tensor<T>& coords) {
  require_rank(featmap.shape(), 3, "bilinear_sample");
  if (featmap.numel() == 0) throw ShapeError("bilinear_sample: empty feature map");
  if (coords.rank() != 2 || coords.dim(1) != 2) throw ShapeError("bilinear_sample: coords must be N x 2");
  const std::size_t c = featmap.dim(0);
  const std::size_t h = featmap.dim(1);
  const std::size_t w = featmap.dim(2);
  const std::size_t n = coords.dim(0);
  const std::size_t plane = h * w;

  struct Tap {
    std::size_t i00, i01, i10, i11;
    T tx, ty;
    bool in_x, in_y;
  };
  std::vector<Tap> taps(n);
  const auto& xy = coords.node().data;
  for (std::size_t k = 0; k < n; ++k) {
    const T cx = xy[2 * k];
    const T cy = xy[2 * k + 1];
    const T xmax = T(w - 1);
    const T ymax = T(h - 1);
    const T x = std::clamp(cx, T(0), xmax);
    const T y = std::clamp(cy, T(0), ymax);
    std::size_t x0 = static_cast<std::size_t>(std::floor(x));
    std::size_t y0 = static_cast<std::size_t>(std::floor(y));
    if (w > 1 && x0 >= w - 1) x0 = w - 2;
    if (h > 1 && y0 >= h - 1) y0 = h - 2;
    const std::size_t x1 = std::min(x0 + 1, w - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    Tap& t = taps[k];
    t.tx = x - T(x0);
    t.ty = y - T(y0);
    t.i00 = y0 * w + x0;
    t.i01 = y0 * w + x1;
    t.i10 = y1 * w + x0;
    t.i11 = y1 * w + x1;
    t.in_x = cx >= T(0) && cx <= xmax && w > 1;
    t.in_y = cy >= T(0) && cy <= ymax && h > 1;
  }
  const auto& f = featmap.node().data;
  std::vector<T> out(n * c);
  for (std::size_t k = 0; k < n; ++k) {
    const Tap& t = taps[k];
    const T w00 = (T(1) - t.tx) * (T(1) - t.ty);
    const T w01 = t.tx * (T(1) - t.ty);
    const T w10 = (T(1) - t.tx) * t.ty;
    const T w11 = t.tx * t.ty;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = f.data() + ch * plane;
      out[k * c + ch] = w00 * p[t.i00] + w01 * p[t.i01] + w10 * p[t.i10] + w11 * p[t.i11];
    }
  }
  auto pf = featmap.node_ptr();
  auto pc = coords.node_ptr();
  return make_result<T>(
      "bilinear_sample", Shape{n, c}, std::move(out), {&featmap, &coords},
      [pf, pc, taps = std::move(taps), n, c, plane](const Node<T>& self) {
        auto* gf = grad_of(pf);
        auto* gc = grad_of(pc);
        const auto& fv = pf->data;
        for (std::size_t k = 0; k < n; ++k) {
          const Tap& t = taps[k];
          const T w00 = (T(1) - t.tx) * (T(1) - t.ty);
          const T w01 = t.tx * (T(1) - t.ty);
          const T w10 = (T(1) - t.tx) * t.ty;
          const T w11 = t.tx * t.ty;
          T dx = 0;
          T dy = 0;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T g = self.grad[k * c + ch];
            const std::size_t base = ch * plane;
            if (gf) {
              (*gf)[base + t.i00] += g * w00;
              (*gf)[base + t.i01] += g * w01;
              (*gf)[base + t.i10] += g * w10;
              (*gf)[base + t.i11] += g * w11;
            }
            if (gc) {
              const T f00 = fv[base + t.i00];
              const T f01 = fv[base + t.i01];
              const T f10 = fv[base + t.i10];
              const T f11 = fv[base + t.i11];
              dx += g * ((T(1) - t.ty) * (f01 - f00) + t.ty * (f11 - f10));
              dy += g * ((T(1) - t.tx) * (f10 - f00) + t.tx * (f11 - f01));
            }
          }
          if (gc) {
            if (t.in_x) (*gc)[2 * k] += dx;
            if (t.in_y) (*gc)[2 * k + 1] += dy;
          }
        }
      });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  require_rank(x.shape(), 3, "conv2d");
  require_rank(weight.shape(), 4, "conv2d");
  const std::size_t cin = x.dim(0);
  const std::size_t h = x.dim(1);
  const std::size_t w = x.dim(2);
  const std::size_t cout = weight.dim(0);
  const std::size_t kh = weight.dim(2);
  const std::size_t kw = weight.dim(3);
  if (weight.dim(1) != cin) throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " channels");
  if (bias.shape() != Shape{cout}) throw ShapeError("conv2d: bias must be [Cout]");
  if (stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw) throw ShapeError("conv2d: invalid geometry");
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t patch = cin * kh * kw;
  const std::size_t cells = ho * wo;

  std::vector<T> cols(patch * cells, T(0));
  const auto& in = x.node().data;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* dst = cols.data() + ((ci * kh + ky) * kw + kx) * cells;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dst[oy * wo + ox] = in[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
  std::vector<T> out(cout * cells);
  {
    ConstMap<T> wm(weight.node().data.data(), cout, patch);
    ConstMap<T> cm(cols.data(), patch, cells);
    MutMap<T> om(out.data(), cout, cells);
    om.noalias() = wm * cm;
    const auto& b = bias.node().data;
    for (std::size_t co = 0; co < cout; ++co) om.row(co).array() += b[co];
  }
  auto px = x.node_ptr();
  auto pw = weight.node_ptr();
  auto pb = bias.node_ptr();
  return make_result<T>(
      "conv2d", Shape{cout, ho, wo}, std::move(out), {&x, &weight, &bias},
      [px, pw, pb, cols = std::move(cols), cin, h, w, cout, kh, kw, ho, wo, stride, padding, patch,
       cells](const Node<T>& self) {
        ConstMap<T> g(self.grad.data(), cout, cells);
        if (auto* gw = grad_of(pw)) {
          ConstMap<T> cm(cols.data(), patch, cells);
          MutMap<T> gwm(gw->data(), cout, patch);
          gwm.noalias() += g * cm.transpose();
        }
        if (auto* gb = grad_of(pb)) {
          for (std::size_t co = 0; co < cout; ++co) (*gb)[co] += g.row(co).sum();
        }
        if (auto* gx = grad_of(px)) {
          ConstMap<T> wm(pw->data.data(), cout, patch);
          RowMat<T> gcols = wm.transpose() * g;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const T* src = gcols.data() + ((ci * kh + ky) * kw + kx) * cells;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    (*gx)[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                        src[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      });
}

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor, std::size_t out_h, std::size_t out_w) {
  require_rank(x.shape(), 3, "upsample_bilinear");
  if (factor == 0) throw ShapeError("upsample_bilinear: zero factor");
  const std::size_t c = x.dim(0);
  const std::size_t h = x.dim(1);
  const std::size_t w = x.dim(2);
  if (h == 0 || w == 0) throw ShapeError("upsample_bilinear: empty input");

  struct Axis {
    std::size_t lo, hi;
    T t;
  };
  auto make_axis = [factor](std::size_t out_len, std::size_t in_len) {
    std::vector<Axis> axis(out_len);
    for (std::size_t u = 0; u < out_len; ++u) {
      const T src = std::min(T(u) / T(factor), T(in_len - 1));
      std::size_t lo = static_cast<std::size_t>(std::floor(src));
      if (in_len > 1 && lo >= in_len - 1) lo = in_len - 2;
      const std::size_t hi = std::min(lo + 1, in_len - 1);
      axis[u] = {lo, hi, src - T(lo)};
    }
    return axis;
  };
  std::vector<Axis> ay = make_axis(out_h, h);
  std::vector<Axis> ax = make_axis(out_w, w);
  const auto& in = x.node().data;
  std::vector<T> out(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* p = in.data() + ch * h * w;
    for (std::size_t u = 0; u < out_h; ++u) {
      const Axis& a = ay[u];
      for (std::size_t v = 0; v < out_w; ++v) {
        const Axis& b = ax[v];
        const T top = (T(1) - b.t) * p[a.lo * w + b.lo] + b.t * p[a.lo * w + b.hi];
        const T bot = (T(1) - b.t) * p[a.hi * w + b.lo] + b.t * p[a.hi * w + b.hi];
        out[(ch * out_h + u) * out_w + v] = (T(1) - a.t) * top + a.t * bot;
      }
    }
  }
  auto px = x.node_ptr();
  return make_result<T>("upsample_bilinear", Shape{c, out_h, out_w}, std::move(out), {&x},
                        [px, ay = std::move(ay), ax = std::move(ax), c, h, w, out_h, out_w](const Node<T>& self) {
                          auto* gx = grad_of(px);
                          if (!gx) return;
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            T* g = gx->data() + ch * h * w;
                            for (std::size_t u = 0; u < out_h; ++u) {
                              const Axis& a = ay[u];
                              for (std::size_t v = 0; v < out_w; ++v) {
                                const Axis& b = ax[v];
                                const T go = self.grad[(ch * out_h + u) * out_w + v];
                                g[a.lo * w + b.lo] += go * (T(1) - a.t) * (T(1) - b.t);
                                g[a.lo * w + b.hi] += go * (T(1) - a.t) * b.t;
                                g[a.hi * w + b.lo] += go * a.t * (T(1) - b.t);
                                g[a.hi * w + b.hi] += go * a.t * b.t;
                              }
                            }
                          }
                        });
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t n = logits.dim(0);
  const std::size_t c = logits.dim(1);
  if (targets.size() != n || mask.size() != n) throw ShapeError("cross_entropy: targets/mask length mismatch");
  const auto& z = logits.node().data;
  std::vector<T> probs(n * c, T(0));
  T total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                              std::to_string(c) + ")");
    }
    const T* row = z.data() + r * c;
    const T mx = *std::max_element(row, row + c);
    T s = 0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(row[k] - mx);
    const T lse = mx + std::log(s);
    total += lse - row[targets[r]];
    for (std::size_t k = 0; k < c; ++k) probs[r * c + k] = std::exp(row[k] - lse);
    ++count;
  }
  const T loss = count ? total / T(count) : T(0);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  auto pz = logits.node_ptr();
  return make_result<T>("cross_entropy", Shape{}, std::vector<T>{loss}, {&logits},
                        [pz, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk), n, c,
                         count](const Node<T>& self) {
                          auto* gz = grad_of(pz);
                          if (!gz || count == 0) return;
                          const T k = self.grad[0] / T(count);
                          for (std::size_t r = 0; r < n; ++r) {
                            if (!msk[r]) continue;
                            for (std::size_t j = 0; j < c; ++j) (*gz)[r * c + j] += k * probs[r * c + j];
                            (*gz)[r * c + static_cast<std::size_t>(tgt[r])] -= k;
                          }
                        });
}

template <class T>
Tensor<T> binary_cross_entropy(const Tensor<T>& logits, std::span<const T> targets, std::span<const std::uint8_t> mask) {
  const std::size_t n = logits.numel();
  if (targets.size() != n || mask.size() != n) throw ShapeError("binary_cross_entropy: length mismatch");
  const auto& z = logits.node().data;
  T total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    total += softplus(z[i]) - targets[i] * z[i];
    ++count;
  }
  const T loss = count ? total / T(count) : T(0);
  std::vector<T> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  auto pz = logits.node_ptr();
  return make_result<T>("binary_cross_entropy", Shape{}, std::vector<T>{loss}, {&logits},
                        [pz, tgt = std::move(tgt), msk = std::move(msk), count](const Node<T>& self) {
                          auto* gz = grad_of(pz);
                          if (!gz || count == 0) return;
                          const T k = self.grad[0] / T(count);
                          for (std::size_t i = 0; i < tgt.size(); ++i) {
                            if (msk[i]) (*gz)[i] += k * (stable_sigmoid(pz->data[i]) - tgt[i]);
                          }
                        });
}

template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target, std::span<const std::uint8_t> mask) {
  if (pred.shape() != target.shape()) throw ShapeError("l1_loss: shape mismatch");
  if (pred.rank() == 0) throw ShapeError("l1_loss: scalar input");
  const std::size_t rows = pred.dim(0);
  if (mask.size() != rows) throw ShapeError("l1_loss: mask length mismatch");
  const std::size_t per_row = rows == 0 ? 0 : pred.numel() / rows;
  const auto& a = pred.node().data;
  const auto& b = target.node().data;
  T total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    for (std::size_t i = 0; i < per_row; ++i) total += std::abs(a[r * per_row + i] - b[r * per_row + i]);
    count += per_row;
  }
  const T loss = count ? total / T(count) : T(0);
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  auto pa = pred.node_ptr();
  auto pb = target.node_ptr();
  return make_result<T>("l1_loss", Shape{}, std::vector<T>{loss}, {&pred, &target},
                        [pa, pb, msk = std::move(msk), per_row, count](const Node<T>& self) {
                          if (count == 0) return;
                          auto* ga = grad_of(pa);
                          auto* gb = grad_of(pb);
                          const T k = self.grad[0] / T(count);
                          for (std::size_t r = 0; r < msk.size(); ++r) {
                            if (!msk[r]) continue;
                            for (std::size_t i = 0; i < per_row; ++i) {
                              const std::size_t j = r * per_row + i;
                              const T diff = pa->data[j] - pb->data[j];
                              const T s = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
                              if (ga) (*ga)[j] += k * s;
                              if (gb) (*gb)[j] -= k * s;
                            }
                          }
                        });
}

#define LBM_INSTANTIATE_OPS(T)                                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> relu(const Tensor<T>&);                                                                    \
  template Tensor<T> gelu(const Tensor<T>&);                                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                 \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                       \
  template Tensor<T> l2_normalize(const Tensor<T>&, T);                                                         \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                        \
  template Tensor<T> stack(const std::vector<Tensor<T>>&, std::size_t);                                         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                          \
  template Tensor<T> transpose(const Tensor<T>&);                                                               \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                            \
  template Tensor<T> expand(const Tensor<T>&, std::size_t, std::size_t);                                        \
  template Tensor<T> clamp_points(const Tensor<T>&, T, T);                                                      \
  template Tensor<T> detach(const Tensor<T>&);                                                                  \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                    \
  template Tensor<T> sum(const Tensor<T>&);                                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                                    \
  template Tensor<T> bilinear_sample(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);    \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>, std::span<const std::uint8_t>);       \
  template Tensor<T> binary_cross_entropy(const Tensor<T>&, std::span<const T>, std::span<const std::uint8_t>);  \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>);

LBM_INSTANTIATE_OPS(float)
LBM_INSTANTIATE_OPS(double)

}  // namespace lbm
