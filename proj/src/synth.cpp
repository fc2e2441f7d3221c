#include "lbm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "lbm/rng.hpp"

namespace lbm {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

Texture random_texture(Rng& rng, double lo, double hi, std::size_t waves, double kmin, double kmax, double amp) {
  Texture tex;
  for (auto& b : tex.base) b = rng.uniform(lo, hi);
  for (std::size_t i = 0; i < waves; ++i) {
    PlaneWave w;
    const double k = rng.uniform(kmin, kmax);
    const double dir = rng.uniform(0.0, kTwoPi);
    w.kx = k * std::cos(dir);
    w.ky = k * std::sin(dir);
    w.phase = rng.uniform(0.0, kTwoPi);
    for (auto& a : w.amplitude) a = rng.uniform(-amp, amp);
    tex.waves.push_back(w);
  }
  return tex;
}

std::vector<double> spread_angles(Rng& rng, std::size_t n) {
  const double start = rng.uniform(0.0, kTwoPi);
  std::vector<double> a(n);
  for (std::size_t k = 0; k < n; ++k) a[k] = start + kTwoPi * (double(k) + rng.uniform(-0.3, 0.3)) / double(n);
  return a;
}

Sprite random_sprite(Rng& rng, const SceneSpec& spec, bool blob) {
  Sprite s;
  const double r = rng.uniform(6.0, 10.0);
  const std::size_t n = blob ? 16 : 5 + rng.index(4);
  s.angle = spread_angles(rng, n);
  if (blob) {
    const double minor = r * rng.uniform(0.6, 1.0);
    const double tilt = rng.uniform(0.0, std::numbers::pi);
    for (const double a : s.angle) {
      const double c = std::cos(a - tilt);
      const double d = std::sin(a - tilt);
      s.radius.push_back(r * minor / std::sqrt(minor * minor * c * c + r * r * d * d));
    }
  } else {
    for (std::size_t k = 0; k < n; ++k) s.radius.push_back(r * rng.uniform(0.6, 1.0));
  }
  for (std::size_t k = 0; k < n; ++k) s.phase.push_back(rng.uniform(0.0, kTwoPi));
  s.amplitude = spec.deform_amplitude;
  s.frequency = spec.deform_frequency;
  s.cx = rng.uniform(r, double(spec.width - 1) - r);
  s.cy = rng.uniform(r, double(spec.height - 1) - r);
  const double vmax = std::max(0.0, spec.max_speed - spec.deform_amplitude * spec.deform_frequency);
  s.vx = rng.uniform(-vmax, vmax);
  s.vy = rng.uniform(-vmax, vmax);
  s.texture = random_texture(rng, 0.15, 0.85, 3, 0.35, 1.0, 0.25);
  if (blob) s.texture.shading_sigma = 0.6 * r;
  return s;
}

Sprite random_occluder(Rng& rng, const SceneSpec& spec) {
  Sprite s;
  const double r = rng.uniform(5.0, 8.0);
  const std::size_t n = 5 + rng.index(4);
  s.angle = spread_angles(rng, n);
  for (std::size_t k = 0; k < n; ++k) {
    s.radius.push_back(r * rng.uniform(0.7, 1.0));
    s.phase.push_back(0.0);
  }
  s.cx = rng.uniform(0.0, double(spec.width - 1));
  s.cy = rng.uniform(0.0, double(spec.height - 1));
  s.vx = rng.uniform(-spec.max_speed, spec.max_speed);
  s.vy = rng.uniform(-0.5 * spec.max_speed, 0.5 * spec.max_speed);
  s.occluder = true;
  s.texture = random_texture(rng, 0.05, 0.35, 2, 0.3, 0.8, 0.1);
  return s;
}

// Locates (x, y) in the fan triangulation; returns false outside the shape.
bool locate(const Sprite& s, double x, double y, double t, SurfacePoint* out) {
  const auto c = s.center(t);
  const double dx = x - c[0];
  const double dy = y - c[1];
  const std::size_t n = s.vertices();
  if (dx == 0.0 && dy == 0.0) {
    if (out) *out = {0, 0, 0.0, 0.0};
    return true;
  }
  double rel = std::atan2(dy, dx) - s.angle[0];
  rel -= kTwoPi * std::floor(rel / kTwoPi);
  std::size_t k = 0;
  while (k + 1 < n && s.angle[k + 1] - s.angle[0] <= rel) ++k;
  const auto a = s.vertex_offset(k, t);
  const auto b = s.vertex_offset((k + 1) % n, t);
  const double det = a[0] * b[1] - a[1] * b[0];
  if (det == 0.0) return false;
  const double wb = (dx * b[1] - dy * b[0]) / det;
  const double wc = (a[0] * dy - a[1] * dx) / det;
  if (wb < 0.0 || wc < 0.0 || wb + wc > 1.0) return false;
  if (out) *out = {0, k, wb, wc};
  return true;
}

}  // namespace

void SceneSpec::validate() const {
  if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0) {
    throw std::invalid_argument("SceneSpec: resolution must be a positive multiple of 16");
  }
  if (frames < 2) throw std::invalid_argument("SceneSpec: at least 2 frames are required");
  if (sprites == 0 && pool > 0) throw std::invalid_argument("SceneSpec: tracked points need at least one sprite");
  if (max_speed < 0 || deform_amplitude < 0 || deform_frequency < 0) {
    throw std::invalid_argument("SceneSpec: speeds and deformation must be nonnegative");
  }
}

std::array<double, 3> Texture::color(double u, double v) const {
  std::array<double, 3> rgb = base;
  for (const PlaneWave& w : waves) {
    const double s = std::cos(w.kx * u + w.ky * v + w.phase);
    for (int ch = 0; ch < 3; ++ch) rgb[ch] += w.amplitude[ch] * s;
  }
  if (shading_sigma > 0) {
    const double g = 0.55 + 0.45 * std::exp(-(u * u + v * v) / (2.0 * shading_sigma * shading_sigma));
    for (auto& x : rgb) x *= g;
  }
  for (auto& x : rgb) x = std::clamp(x, 0.0, 1.0);
  return rgb;
}

std::array<double, 2> Sprite::vertex_offset(std::size_t k, double t) const {
  const double r = radius[k] + amplitude * std::sin(frequency * t + phase[k]);
  return {r * std::cos(angle[k]), r * std::sin(angle[k])};
}

std::vector<std::array<double, 2>> Sprite::polygon(double t) const {
  const auto c = center(t);
  std::vector<std::array<double, 2>> pts;
  for (std::size_t k = 0; k < vertices(); ++k) {
    const auto o = vertex_offset(k, t);
    pts.push_back({c[0] + o[0], c[1] + o[1]});
  }
  return pts;
}

std::array<double, 2> Scene::position(const SurfacePoint& p, double t) const {
  const Sprite& s = shapes[p.shape];
  const auto c = s.center(t);
  const auto a = s.vertex_offset(p.sector, t);
  const auto b = s.vertex_offset((p.sector + 1) % s.vertices(), t);
  return {c[0] + (p.b * a[0] + p.c * b[0]), c[1] + (p.b * a[1] + p.c * b[1])};
}

int Scene::top_shape(double x, double y, double t, std::array<double, 2>* rest) const {
  int best = -1;
  SurfacePoint best_loc;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (best >= 0 && shapes[i].depth >= shapes[std::size_t(best)].depth) continue;
    SurfacePoint loc;
    if (locate(shapes[i], x, y, t, &loc)) {
      best = int(i);
      best_loc = loc;
    }
  }
  if (best >= 0 && rest) {
    const Sprite& s = shapes[std::size_t(best)];
    const std::size_t k1 = (best_loc.sector + 1) % s.vertices();
    const double ra = s.radius[best_loc.sector];
    const double rb = s.radius[k1];
    (*rest)[0] = best_loc.b * ra * std::cos(s.angle[best_loc.sector]) + best_loc.c * rb * std::cos(s.angle[k1]);
    (*rest)[1] = best_loc.b * ra * std::sin(s.angle[best_loc.sector]) + best_loc.c * rb * std::sin(s.angle[k1]);
  }
  return best;
}

bool Scene::visible(const SurfacePoint& p, double t) const {
  const auto pos = position(p, t);
  if (pos[0] < 0.0 || pos[1] < 0.0 || pos[0] > double(spec.width - 1) || pos[1] > double(spec.height - 1)) return false;
  const double depth = shapes[p.shape].depth;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (i == p.shape || shapes[i].depth >= depth) continue;
    if (locate(shapes[i], pos[0], pos[1], t, nullptr)) return false;
  }
  return true;
}

Scene make_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Scene scene;
  scene.spec = spec;
  scene.background = random_texture(rng, 0.3, 0.7, 4, 0.15, 0.6, 0.15);

  std::vector<double> depths(spec.sprites);
  std::iota(depths.begin(), depths.end(), 1.0);
  for (std::size_t i = depths.size(); i > 1; --i) std::swap(depths[i - 1], depths[rng.index(i)]);
  for (std::size_t i = 0; i < spec.sprites; ++i) {
    const bool blob = spec.kind == SpriteKind::Blob || (spec.kind == SpriteKind::Mixed && rng.uniform() < 0.5);
    Sprite s = random_sprite(rng, spec, blob);
    s.depth = depths[i];
    scene.shapes.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < spec.occluders; ++i) {
    Sprite s = random_occluder(rng, spec);
    s.depth = -1.0 - double(i);
    scene.shapes.push_back(std::move(s));
  }

  const std::size_t max_attempts = 1000 * std::max<std::size_t>(spec.pool, 1);
  for (std::size_t attempt = 0; scene.points.size() < spec.pool; ++attempt) {
    if (attempt >= max_attempts) throw std::runtime_error("make_scene: could not place enough visible points");
    SurfacePoint p;
    p.shape = rng.index(spec.sprites);
    const Sprite& s = scene.shapes[p.shape];
    // Sector chosen by rest-frame area so points are uniform over the surface.
    std::vector<double> area(s.vertices());
    for (std::size_t k = 0; k < s.vertices(); ++k) {
      const auto a = s.vertex_offset(k, 0.0);
      const auto b = s.vertex_offset((k + 1) % s.vertices(), 0.0);
      area[k] = 0.5 * std::abs(a[0] * b[1] - a[1] * b[0]);
    }
    std::discrete_distribution<std::size_t> pick(area.begin(), area.end());
    p.sector = pick(rng.engine());
    double u = rng.uniform();
    double v = rng.uniform();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    p.b = u;
    p.c = v;
    if (scene.visible(p, 0.0)) scene.points.push_back(p);
  }
  return scene;
}

Clip render_clip(const Scene& scene) {
  const SceneSpec& spec = scene.spec;
  Clip clip;
  clip.height = spec.height;
  clip.width = spec.width;
  clip.tracks = TrackTable(spec.frames, scene.points.size());
  for (std::size_t f = 0; f < spec.frames; ++f) {
    const double t = double(f);
    Image img;
    img.height = spec.height;
    img.width = spec.width;
    img.data.resize(3 * spec.height * spec.width);
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        std::array<double, 2> rest{};
        const int top = scene.top_shape(double(x), double(y), t, &rest);
        const std::array<double, 3> rgb =
            top >= 0 ? scene.shapes[std::size_t(top)].texture.color(rest[0], rest[1])
                     : scene.background.color(double(x) - spec.background_drift_x * t,
                                              double(y) - spec.background_drift_y * t);
        for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(rgb[c]);
      }
    }
    clip.frames.push_back(std::move(img));
    for (std::size_t i = 0; i < scene.points.size(); ++i) {
      const auto pos = scene.position(scene.points[i], t);
      const std::size_t at = clip.tracks.at(f, i);
      clip.tracks.x[at] = pos[0];
      clip.tracks.y[at] = pos[1];
      clip.tracks.visible[at] = scene.visible(scene.points[i], t) ? 1 : 0;
    }
  }
  return clip;
}

Clip generate_clip(const SceneSpec& spec) {
  return render_clip(make_scene(spec));
}

std::vector<std::size_t> sample_queries(const Clip& clip, std::size_t n, std::uint64_t seed) {
  const std::size_t pool = clip.tracks.queries;
  if (n > pool) {
    throw std::invalid_argument("sample_queries: " + std::to_string(n) + " queries requested from a pool of " +
                                std::to_string(pool));
  }
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.index(pool - i)]);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

TrackTable select_tracks(const TrackTable& tracks, const std::vector<std::size_t>& indices) {
  TrackTable out(tracks.frames, indices.size());
  for (std::size_t f = 0; f < tracks.frames; ++f) {
    for (std::size_t j = 0; j < indices.size(); ++j) {
      if (indices[j] >= tracks.queries) throw std::out_of_range("select_tracks: index outside the pool");
      const std::size_t src = tracks.at(f, indices[j]);
      const std::size_t dst = out.at(f, j);
      out.x[dst] = tracks.x[src];
      out.y[dst] = tracks.y[src];
      out.visible[dst] = tracks.visible[src];
    }
  }
  return out;
}

FrameGT frame_gt(const TrackTable& tracks, std::size_t frame) {
  FrameGT gt;
  for (std::size_t q = 0; q < tracks.queries; ++q) {
    const std::size_t i = tracks.at(frame, q);
    gt.x.push_back(tracks.x[i]);
    gt.y.push_back(tracks.y[i]);
    gt.visible.push_back(tracks.visible[i]);
  }
  return gt;
}

}  // namespace lbm
