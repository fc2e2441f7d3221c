// Deterministic synthetic clips: textured star-shaped sprites and occluders
// moving over a drifting background, with exact point tracks and visibility.
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "lbm/supervision.hpp"

namespace lbm {

enum class SpriteKind { Polygon, Blob, Mixed };

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t height = 48;
  std::size_t width = 64;
  std::size_t frames = 12;
  std::size_t sprites = 3;
  SpriteKind kind = SpriteKind::Mixed;
  std::size_t occluders = 1;
  double max_speed = 2.0;       // px/frame bound on every tracked point, per axis
  double deform_amplitude = 1.5;
  double deform_frequency = 0.5;  // rad/frame
  double background_drift_x = 0.5;
  double background_drift_y = 0.25;
  std::size_t pool = 32;  // tracked points, all visible at frame 0

  void validate() const;
};

struct PlaneWave {
  double kx = 0, ky = 0, phase = 0;
  std::array<double, 3> amplitude{};
};

struct Texture {
  std::array<double, 3> base{};
  std::vector<PlaneWave> waves;
  double shading_sigma = 0;  // > 0 adds Gaussian radial shading

  std::array<double, 3> color(double u, double v) const;
};

/// Star-shaped polygon around a moving center. Vertex k sits at angle
/// angle[k] and radius radius[k] + amplitude * sin(frequency * t + phase[k]).
struct Sprite {
  double cx = 0, cy = 0;  // center at frame 0
  double vx = 0, vy = 0;
  std::vector<double> angle;  // strictly increasing, spanning less than 2 pi
  std::vector<double> radius;
  std::vector<double> phase;
  double amplitude = 0;
  double frequency = 0;
  double depth = 0;  // smaller is nearer
  bool occluder = false;
  Texture texture;

  std::size_t vertices() const { return angle.size(); }
  std::array<double, 2> center(double t) const { return {cx + vx * t, cy + vy * t}; }
  /// Vertex offset from the center at time t.
  std::array<double, 2> vertex_offset(std::size_t k, double t) const;
  std::vector<std::array<double, 2>> polygon(double t) const;
};

/// A material point: fan triangle (center, vertex k, vertex k+1) with
/// barycentric weights on the two outer vertices.
struct SurfacePoint {
  std::size_t shape = 0;
  std::size_t sector = 0;
  double b = 0, c = 0;
};

struct Scene {
  SceneSpec spec;
  std::vector<Sprite> shapes;
  Texture background;
  std::vector<SurfacePoint> points;

  std::array<double, 2> position(const SurfacePoint& p, double t) const;
  /// Sprite index of the nearest surface covering (x, y) at time t, or -1.
  int top_shape(double x, double y, double t, std::array<double, 2>* rest = nullptr) const;
  bool visible(const SurfacePoint& p, double t) const;
};

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;  // 3 x H x W, values in [0, 1]

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  template <class T>
  Tensor<T> tensor() const {
    return Tensor<T>::from({3, height, width}, std::vector<T>(data.begin(), data.end()));
  }
};

struct Clip {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Image> frames;
  TrackTable tracks;  // every pool point; frame 0 is the query frame
};

Scene make_scene(const SceneSpec& spec);
Clip render_clip(const Scene& scene);
Clip generate_clip(const SceneSpec& spec);

/// Uniform sample of n pool points, ascending indices; deterministic per seed.
std::vector<std::size_t> sample_queries(const Clip& clip, std::size_t n, std::uint64_t seed);
TrackTable select_tracks(const TrackTable& tracks, const std::vector<std::size_t>& indices);
FrameGT frame_gt(const TrackTable& tracks, std::size_t frame);

template <class T>
Tensor<T> query_points(const TrackTable& tracks) {
  std::vector<T> q(tracks.queries * 2);
  for (std::size_t i = 0; i < tracks.queries; ++i) {
    q[2 * i] = static_cast<T>(tracks.x[tracks.at(0, i)]);
    q[2 * i + 1] = static_cast<T>(tracks.y[tracks.at(0, i)]);
  }
  return Tensor<T>::from({tracks.queries, 2}, std::move(q));
}

}  // namespace lbm
