// Helpers shared by the suite implementations.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "checks.hpp"
#include "lbm/tracker.hpp"

namespace lbm::checks {

using TD = Tensor<double>;

inline TD random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD::from(std::move(shape), std::move(v));
}

/// Scalar readout sum(out * w) with fixed random weights w.
inline TD readout(const TD& out, const TD& w) {
  return sum(mul(out, w));
}

template <class... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Adds noise to every parameter so no layer sits at its special init.
template <class T>
void perturb_params(TrackerParams<T>& params, Rng& rng, double sigma) {
  params.visit([&](const std::string&, Tensor<T>& t) {
    for (auto& x : t.mutable_data()) x = T(double(x) + rng.normal(0.0, sigma));
  });
}

/// Small tracker for the gradient and contract suites.
inline TrackerConfig micro_config() {
  TrackerConfig c;
  c.feature_dim = 8;
  c.encoder_channels = 2;
  c.num_layers = 3;
  c.memory_length = 2;
  c.collision_points = 9;
  c.update_offsets = 4;
  c.head_points = 9;
  c.mlp_ratio = 2;
  return c;
}

}  // namespace lbm::checks
