#include "lbm/assoc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace lbm {

std::vector<Point2> sample_in_box(const Box& box, std::size_t n, Rng& rng) {
  if (!(box.x2 > box.x1 && box.y2 > box.y1)) throw std::invalid_argument("sample_in_box: box has zero area");
  std::vector<Point2> pts;
  pts.reserve(n);
  while (pts.size() < n) {
    const double x = rng.uniform(box.x1, box.x2);
    const double y = rng.uniform(box.y1, box.y2);
    if (box.strictly_contains(x, y)) pts.push_back({x, y});
  }
  return pts;
}

TrackedInstance spawn(const Detection& det, std::size_t n_px, Rng& rng, int id) {
  TrackedInstance inst;
  inst.id = id;
  inst.box = det.box;
  inst.label = det.label;
  inst.score = det.score;
  inst.pixels = sample_in_box(det.box, n_px, rng);
  inst.visible.assign(n_px, 1);
  inst.outlier.assign(n_px, 0);
  return inst;
}

double similarity(const TrackedInstance& inst, const Detection& det, bool label_penalty, bool score_weight) {
  std::size_t in = 0;
  std::size_t out = 0;
  for (std::size_t i = 0; i < inst.pixels.size(); ++i) {
    if (!inst.visible[i]) continue;
    if (det.box.contains(inst.pixels[i][0], inst.pixels[i][1])) {
      ++in;
    } else {
      ++out;
    }
  }
  if (in + out == 0) return 0.0;
  double s = std::min(1.0, inst.area() / det.box.area()) * double(in) / double(in + out);
  if (label_penalty) s *= inst.label == det.label ? 1.0 : 0.5;
  if (score_weight) s *= det.score;
  return s;
}

std::vector<double> aggregate(const std::vector<double>& s, std::size_t m, std::size_t n) {
  if (s.size() != m * n) throw std::invalid_argument("aggregate: matrix size mismatch");
  std::vector<double> row(m * n), col(m * n), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, s[i * n + j]);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += row[i * n + j] = std::exp(s[i * n + j] - mx);
    for (std::size_t j = 0; j < n; ++j) row[i * n + j] /= z;
  }
  for (std::size_t j = 0; j < n; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) mx = std::max(mx, s[i * n + j]);
    double z = 0;
    for (std::size_t i = 0; i < m; ++i) z += col[i * n + j] = std::exp(s[i * n + j] - mx);
    for (std::size_t i = 0; i < m; ++i) col[i * n + j] /= z;
  }
  for (std::size_t k = 0; k < m * n; ++k) out[k] = 0.5 * (row[k] + col[k]);
  return out;
}

namespace {

bool permitted(const std::vector<std::uint8_t>& allowed, std::size_t k) {
  return allowed.empty() || allowed[k] != 0;
}

void fill_unmatched(MatchResult& r, std::size_t m, std::size_t n) {
  std::vector<std::uint8_t> rows(m, 0), cols(n, 0);
  for (const auto& [i, j] : r.pairs) {
    rows[i] = 1;
    cols[j] = 1;
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (!rows[i]) r.unmatched_rows.push_back(i);
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (!cols[j]) r.unmatched_cols.push_back(j);
  }
}

}  // namespace

MatchResult greedy_match(const std::vector<double>& s_agg, std::size_t m, std::size_t n, double threshold,
                         const std::vector<std::uint8_t>& allowed) {
  if (s_agg.size() != m * n || (!allowed.empty() && allowed.size() != m * n)) {
    throw std::invalid_argument("greedy_match: matrix size mismatch");
  }
  MatchResult r;
  std::vector<std::uint8_t> row_used(m, 0), col_used(n, 0);
  while (true) {
    double best = threshold;
    std::size_t bi = m;
    std::size_t bj = n;
    for (std::size_t i = 0; i < m; ++i) {
      if (row_used[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = i * n + j;
        if (col_used[j] || !permitted(allowed, k)) continue;
        if (s_agg[k] > best) {
          best = s_agg[k];
          bi = i;
          bj = j;
        }
      }
    }
    if (bi == m) break;
    r.pairs.emplace_back(bi, bj);
    row_used[bi] = 1;
    col_used[bj] = 1;
  }
  fill_unmatched(r, m, n);
  return r;
}

MatchResult hungarian_match(const std::vector<double>& s_agg, std::size_t m, std::size_t n, double threshold,
                            const std::vector<std::uint8_t>& allowed) {
  if (s_agg.size() != m * n || (!allowed.empty() && allowed.size() != m * n)) {
    throw std::invalid_argument("hungarian_match: matrix size mismatch");
  }
  // Square min-cost assignment (potentials method) on negated eligible scores.
  const std::size_t sz = std::max(m, n);
  auto cost = [&](std::size_t i, std::size_t j) {
    if (i >= m || j >= n) return 0.0;
    const std::size_t k = i * n + j;
    return (permitted(allowed, k) && s_agg[k] > threshold) ? -s_agg[k] : 0.0;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(sz + 1, 0), v(sz + 1, 0);
  std::vector<std::size_t> p(sz + 1, 0), way(sz + 1, 0);
  for (std::size_t i = 1; i <= sz; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(sz + 1, inf);
    std::vector<std::uint8_t> used(sz + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= sz; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= sz; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  MatchResult r;
  for (std::size_t j = 1; j <= sz; ++j) {
    const std::size_t i = p[j] - 1;
    if (i < m && j - 1 < n && cost(i, j - 1) < 0.0) r.pairs.emplace_back(i, j - 1);
  }
  std::sort(r.pairs.begin(), r.pairs.end());
  fill_unmatched(r, m, n);
  return r;
}

LifecycleResult lifecycle_update(TrackedInstance& inst, const Detection* matched, const AssocConfig& cfg, Rng& rng) {
  LifecycleResult r;
  if (!matched) {
    ++inst.frames_since_matched;
    r.terminated = inst.frames_since_matched >= cfg.max_lost;
    return r;
  }
  const Box& box = matched->box;
  for (std::size_t i = 0; i < inst.pixels.size(); ++i) {
    if (!inst.visible[i]) continue;
    if (box.contains(inst.pixels[i][0], inst.pixels[i][1])) {
      inst.outlier[i] = 0;
    } else {
      ++inst.outlier[i];
    }
    if (inst.outlier[i] > cfg.timeout) r.removed.push_back(i);
  }
  const std::vector<Point2> fresh = sample_in_box(box, r.removed.size(), rng);
  for (std::size_t k = 0; k < r.removed.size(); ++k) {
    const std::size_t i = r.removed[k];
    inst.pixels[i] = fresh[k];
    inst.visible[i] = 1;
    inst.outlier[i] = 0;
  }
  inst.box = box;
  inst.label = matched->label;
  inst.score = matched->score;
  inst.frames_since_matched = 0;
  return r;
}

LbmPointPredictor::LbmPointPredictor(const TrackerParams<float>& params) : params_(params) {}

void LbmPointPredictor::advance(const Image& frame) {
  NoGradScope<float> no_grad;
  const Tensor<float> o = params_.encoder(frame.tensor<float>());
  height_ = frame.height;
  width_ = frame.width;
  for (Group& g : groups_) {
    if (g.live == 0) continue;
    const TrackOutput<float> out = step(params_, g.state, o);
    const auto p = out.p_out.data();
    for (std::size_t i = 0; i < g.handles.size(); ++i) {
      auto it = points_.find(g.handles[i]);
      if (it == points_.end()) continue;
      it->second.position = {double(p[2 * i]), double(p[2 * i + 1])};
      it->second.visible = out.v[i] > 0.5f;
    }
  }
  features_ = o;
}

std::vector<std::size_t> LbmPointPredictor::add_points(const std::vector<Point2>& points) {
  if (!features_.defined()) throw std::logic_error("LbmPointPredictor: add_points before the first frame");
  if (points.empty()) return {};
  NoGradScope<float> no_grad;
  std::vector<float> q;
  for (const Point2& pt : points) {
    q.push_back(std::clamp(float(pt[0]), 0.0f, float(width_ - 1)));
    q.push_back(std::clamp(float(pt[1]), 0.0f, float(height_ - 1)));
  }
  Group g;
  g.state = init_queries(params_, features_, Tensor<float>::from({points.size(), 2}, q), height_, width_);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const std::size_t h = next_++;
    g.handles.push_back(h);
    points_[h] = {{double(q[2 * i]), double(q[2 * i + 1])}, true};
    group_of_[h] = groups_.size();
  }
  g.live = points.size();
  groups_.push_back(std::move(g));
  return groups_.back().handles;
}

void LbmPointPredictor::remove_points(const std::vector<std::size_t>& handles) {
  for (const std::size_t h : handles) {
    auto it = group_of_.find(h);
    if (it == group_of_.end()) continue;
    Group& g = groups_[it->second];
    --g.live;
    if (g.live == 0) g.state = QueryState<float>();
    group_of_.erase(it);
    points_.erase(h);
  }
}

PointPredictor::Observation LbmPointPredictor::observe(std::size_t handle) const {
  auto it = points_.find(handle);
  if (it == points_.end()) throw std::out_of_range("LbmPointPredictor: unknown point handle");
  return it->second;
}

void ScriptedPointPredictor::advance(const Image&) {
  if (started_) {
    ++frame_;
  } else {
    started_ = true;
  }
  for (auto& [h, p] : points_) p.now = motion_(p.start, p.start_frame, frame_);
}

std::vector<std::size_t> ScriptedPointPredictor::add_points(const std::vector<Point2>& points) {
  std::vector<std::size_t> handles;
  for (const Point2& pt : points) {
    const std::size_t h = next_++;
    points_[h] = {pt, frame_, {pt, true}};
    handles.push_back(h);
  }
  return handles;
}

void ScriptedPointPredictor::remove_points(const std::vector<std::size_t>& handles) {
  for (const std::size_t h : handles) points_.erase(h);
}

PointPredictor::Observation ScriptedPointPredictor::observe(std::size_t handle) const {
  auto it = points_.find(handle);
  if (it == points_.end()) throw std::out_of_range("ScriptedPointPredictor: unknown point handle");
  return it->second.now;
}

namespace {

std::string format(const char* fmt, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

std::string box_text(const Box& b) {
  return format("%.3f,%.3f,%.3f,%.3f", b.x1, b.y1, b.x2, b.y2);
}

}  // namespace

ObjectTracker::ObjectTracker(const AssocConfig& cfg, PointPredictor& predictor)
    : cfg_(cfg), predictor_(predictor), rng_(cfg.seed) {
  if (cfg.pixels == 0) throw std::invalid_argument("ObjectTracker: at least one pixel per instance");
}

void ObjectTracker::refresh_pixels(TrackedInstance& inst) {
  for (std::size_t i = 0; i < inst.handles.size(); ++i) {
    const PointPredictor::Observation o = predictor_.observe(inst.handles[i]);
    inst.pixels[i] = o.position;
    inst.visible[i] = o.visible ? 1 : 0;
  }
}

std::vector<AssocEvent> ObjectTracker::process(const Image& frame, const std::vector<Detection>& detections) {
  for (const Detection& d : detections) {
    if (!(d.box.x2 > d.box.x1 && d.box.y2 > d.box.y1)) throw std::invalid_argument("ObjectTracker: degenerate detection box");
  }
  std::vector<AssocEvent> out;
  predictor_.advance(frame);
  for (TrackedInstance& inst : instances_) refresh_pixels(inst);

  const std::size_t m = instances_.size();
  const std::size_t n = detections.size();
  last_s_.assign(m * n, 0.0);
  std::vector<std::uint8_t> allowed(m * n, 0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      last_s_[i * n + j] = similarity(instances_[i], detections[j], cfg_.label_penalty, cfg_.score_weight);
      allowed[i * n + j] = last_s_[i * n + j] > 0.0 ? 1 : 0;
    }
  }
  MatchResult match;
  std::vector<double> agg;
  if (m > 0 && n > 0) {
    agg = aggregate(last_s_, m, n);
    match = cfg_.hungarian ? hungarian_match(agg, m, n, cfg_.match_threshold, allowed)
                           : greedy_match(agg, m, n, cfg_.match_threshold, allowed);
  } else {
    for (std::size_t i = 0; i < m; ++i) match.unmatched_rows.push_back(i);
    for (std::size_t j = 0; j < n; ++j) match.unmatched_cols.push_back(j);
  }
  std::vector<long> det_of(m, -1);
  for (const auto& [i, j] : match.pairs) det_of[i] = long(j);

  std::vector<TrackedInstance> alive;
  for (std::size_t i = 0; i < m; ++i) {
    TrackedInstance& inst = instances_[i];
    if (det_of[i] >= 0) {
      const auto j = std::size_t(det_of[i]);
      const LifecycleResult lr = lifecycle_update(inst, &detections[j], cfg_, rng_);
      out.push_back({frame_, "match", inst.id, format("det=%zu sim=%.6f agg=%.6f", j, last_s_[i * n + j], agg[i * n + j])});
      if (!lr.removed.empty()) {
        std::vector<std::size_t> old;
        std::vector<Point2> fresh;
        for (const std::size_t k : lr.removed) {
          old.push_back(inst.handles[k]);
          fresh.push_back(inst.pixels[k]);
        }
        predictor_.remove_points(old);
        const std::vector<std::size_t> handles = predictor_.add_points(fresh);
        for (std::size_t k = 0; k < lr.removed.size(); ++k) inst.handles[lr.removed[k]] = handles[k];
        out.push_back({frame_, "prune", inst.id, format("count=%zu", lr.removed.size())});
      }
      alive.push_back(std::move(inst));
    } else {
      const LifecycleResult lr = lifecycle_update(inst, nullptr, cfg_, rng_);
      if (lr.terminated) {
        predictor_.remove_points(inst.handles);
        out.push_back({frame_, "terminate", inst.id, format("lost=%d", inst.frames_since_matched)});
      } else {
        alive.push_back(std::move(inst));
      }
    }
  }
  instances_ = std::move(alive);

  for (const std::size_t j : match.unmatched_cols) {
    const Detection& d = detections[j];
    if (d.score < cfg_.spawn_threshold) continue;
    TrackedInstance inst = spawn(d, cfg_.pixels, rng_, next_id_++);
    inst.handles = predictor_.add_points(inst.pixels);
    out.push_back({frame_, "spawn", inst.id, format("det=%zu label=%d score=%.6f box=", j, d.label, d.score) + box_text(d.box)});
    instances_.push_back(std::move(inst));
  }
  ++frame_;
  events_.insert(events_.end(), out.begin(), out.end());
  return out;
}

std::vector<AssocEvent> track_objects(const std::vector<Image>& frames, const std::vector<std::vector<Detection>>& detections,
                                      PointPredictor& predictor, const AssocConfig& cfg,
                                      std::vector<std::vector<TrackedInstance>>* states) {
  if (frames.size() != detections.size()) {
    throw std::invalid_argument("track_objects: " + std::to_string(frames.size()) + " frames but " +
                                std::to_string(detections.size()) + " detection lists");
  }
  ObjectTracker tracker(cfg, predictor);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    tracker.process(frames[t], detections[t]);
    if (states) states->push_back(tracker.instances());
  }
  return tracker.events();
}

std::vector<std::vector<Detection>> scene_detections(const Scene& scene, double score) {
  const double w = double(scene.spec.width - 1), h = double(scene.spec.height - 1);
  std::vector<std::vector<Detection>> out(scene.spec.frames);
  for (std::size_t t = 0; t < scene.spec.frames; ++t) {
    for (std::size_t k = 0; k < scene.shapes.size(); ++k) {
      const Sprite& s = scene.shapes[k];
      if (s.occluder) continue;
      Box b{std::numeric_limits<double>::max(), std::numeric_limits<double>::max(), std::numeric_limits<double>::lowest(),
            std::numeric_limits<double>::lowest()};
      for (const auto& v : s.polygon(double(t))) {
        b.x1 = std::min(b.x1, v[0]);
        b.y1 = std::min(b.y1, v[1]);
        b.x2 = std::max(b.x2, v[0]);
        b.y2 = std::max(b.y2, v[1]);
      }
      b = {std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w), std::clamp(b.y2, 0.0, h)};
      if (b.x2 - b.x1 < 2 || b.y2 - b.y1 < 2) continue;
      out[t].push_back({b, int(k), score});
    }
  }
  return out;
}

void write_events(std::ostream& out, const std::vector<AssocEvent>& events) {
  out << "frame\tevent\tid\tpayload\n";
  for (const AssocEvent& e : events) out << e.frame << '\t' << e.kind << '\t' << e.id << '\t' << e.payload << '\n';
}

}  // namespace lbm
