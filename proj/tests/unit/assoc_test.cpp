#include <cmath>
#include <sstream>

#include "doctest.h"
#include "lbm/assoc.hpp"

using namespace lbm;

namespace {

TrackedInstance with_pixels(const Box& box, int label, std::vector<Point2> px) {
  TrackedInstance inst;
  inst.box = box;
  inst.label = label;
  inst.visible.assign(px.size(), 1);
  inst.outlier.assign(px.size(), 0);
  inst.pixels = std::move(px);
  return inst;
}

std::vector<Point2> grid_in(const Box& b, std::size_t n) {
  std::vector<Point2> px;
  for (std::size_t i = 0; i < n; ++i) px.push_back({b.x1 + (b.x2 - b.x1) * (double(i) + 0.5) / double(n), (b.y1 + b.y2) / 2});
  return px;
}

}  // namespace

TEST_SUITE("assoc") {

TEST_CASE("spawn samples strictly inside the box") {
  Rng rng(1);
  const Detection det{{10, 20, 30, 25}, 2, 0.9};
  const TrackedInstance inst = spawn(det, 16, rng, 4);
  CHECK(inst.id == 4);
  CHECK(inst.pixels.size() == 16);
  for (const Point2& p : inst.pixels) CHECK(det.box.strictly_contains(p[0], p[1]));
  CHECK(spawn(det, 1, rng).pixels.size() == 1);
  CHECK_THROWS(spawn(Detection{{5, 5, 5, 9}, 0, 1}, 4, rng));
}

TEST_CASE("spawned pixels are uniform over the box") {
  Rng rng(2);
  const Box box{0, 0, 40, 20};
  const std::vector<Point2> pts = sample_in_box(box, 1000, rng);
  std::vector<double> count(16, 0.0);
  for (const Point2& p : pts) count[std::size_t(p[1] / 5) * 4 + std::size_t(p[0] / 10)] += 1;
  double chi2 = 0;
  for (double c : count) chi2 += (c - 62.5) * (c - 62.5) / 62.5;
  // 15 degrees of freedom, alpha = 0.01
  CHECK(chi2 < 30.578);
}

TEST_CASE("similarity examples") {
  const Box b{0, 0, 10, 10};
  const TrackedInstance inst = with_pixels(b, 1, grid_in(b, 16));
  CHECK(similarity(inst, Detection{b, 1, 1.0}) == 1.0);
  CHECK(similarity(inst, Detection{b, 2, 1.0}) == 0.5);

  TrackedInstance half = with_pixels({0, 0, 10, 5}, 1, grid_in({0, 0, 16, 10}, 16));  // A_i = 50
  const double s = similarity(half, Detection{{0, 0, 12, 100.0 / 12}, 1, 0.8});       // A_j = 100, 12 of 16 inside
  CHECK(std::abs(s - 0.3) < 1e-12);

  TrackedInstance hidden = inst;
  std::fill(hidden.visible.begin(), hidden.visible.end(), 0);
  CHECK(similarity(hidden, Detection{b, 1, 1.0}) == 0.0);
  CHECK(similarity(inst, Detection{b, 2, 1.0}, false) == 1.0);
  CHECK(similarity(inst, Detection{b, 1, 0.25}, true, false) == 1.0);
}

TEST_CASE("aggregation examples") {
  CHECK(aggregate({0.7}, 1, 1) == std::vector<double>{1.0});
  for (double v : aggregate({0.2, 0.2, 0.2, 0.2}, 2, 2)) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  const std::vector<double> s{0.1, 0.9, 0.4, 0.3, 0.8, 0.0};
  const std::vector<double> a = aggregate(s, 3, 2);
  for (std::size_t i = 0; i < 3; ++i) {
    const double zr = std::exp(s[2 * i]) + std::exp(s[2 * i + 1]);
    for (std::size_t j = 0; j < 2; ++j) {
      double zc = 0;
      for (std::size_t k = 0; k < 3; ++k) zc += std::exp(s[2 * k + j]);
      const double want = 0.5 * (std::exp(s[2 * i + j]) / zr + std::exp(s[2 * i + j]) / zc);
      CHECK(a[2 * i + j] == doctest::Approx(want).epsilon(1e-14));
    }
  }
}

TEST_CASE("greedy matching examples") {
  const MatchResult id = greedy_match({0.9, 0.2, 0.1, 0.8}, 2, 2, 0.3);
  CHECK(id.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}});
  const MatchResult none = greedy_match({0.1, 0.2, 0.25, 0.05}, 2, 2, 0.3);
  CHECK(none.pairs.empty());
  CHECK(none.unmatched_rows.size() == 2);
  CHECK(none.unmatched_cols.size() == 2);
  // Ties resolve to the lowest row, then column.
  const MatchResult tie = greedy_match({0.6, 0.6, 0.6, 0.6}, 2, 2, 0.3);
  CHECK(tie.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}});
  const MatchResult h = hungarian_match({0.9, 0.8, 0.85, 0.1}, 2, 2, 0.3);
  CHECK(h.pairs.size() == 2);
}

TEST_CASE("lifecycle examples") {
  Rng rng(3);
  AssocConfig cfg;
  const Box box{0, 0, 10, 10};
  const Detection det{box, 0, 0.9};
  SUBCASE("all inside: no counters, no removal") {
    TrackedInstance inst = with_pixels(box, 0, grid_in(box, 16));
    const LifecycleResult r = lifecycle_update(inst, &det, cfg, rng);
    CHECK(r.removed.empty());
    for (int c : inst.outlier) CHECK(c == 0);
  }
  SUBCASE("one pixel outside for three matched frames is replaced on the third") {
    TrackedInstance inst = with_pixels(box, 0, grid_in(box, 16));
    inst.pixels[5] = {20, 20};
    for (int f = 1; f <= 3; ++f) {
      const LifecycleResult r = lifecycle_update(inst, &det, cfg, rng);
      CHECK(inst.pixels.size() == 16);
      if (f < 3) {
        CHECK(r.removed.empty());
        CHECK(inst.outlier[5] == f);
      } else {
        CHECK(r.removed == std::vector<std::size_t>{5});
        CHECK(box.strictly_contains(inst.pixels[5][0], inst.pixels[5][1]));
        CHECK(inst.outlier[5] == 0);
      }
    }
  }
  SUBCASE("termination after max_lost unmatched frames") {
    TrackedInstance inst = with_pixels(box, 0, grid_in(box, 4));
    inst.outlier[0] = 1;
    for (int f = 1; f < cfg.max_lost; ++f) CHECK_FALSE(lifecycle_update(inst, nullptr, cfg, rng).terminated);
    CHECK(inst.outlier[0] == 1);
    CHECK(lifecycle_update(inst, nullptr, cfg, rng).terminated);
  }
}

TEST_CASE("scripted single object: one spawn then matches") {
  const std::size_t T = 8;
  std::vector<Image> frames(T, Image{16, 16, std::vector<float>(3 * 16 * 16, 0.f)});
  std::vector<std::vector<Detection>> dets;
  for (std::size_t t = 0; t < T; ++t) dets.push_back({Detection{{double(t), 2, double(t) + 8, 10}, 3, 0.9}});
  ScriptedPointPredictor pred([](const Point2& p, std::size_t s, std::size_t t) {
    return PointPredictor::Observation{{p[0] + double(t - s), p[1]}, true};
  });
  AssocConfig cfg;
  const std::vector<AssocEvent> ev = track_objects(frames, dets, pred, cfg);
  std::size_t spawns = 0, matches = 0, prunes = 0;
  for (const AssocEvent& e : ev) {
    spawns += e.kind == "spawn";
    matches += e.kind == "match";
    prunes += e.kind == "prune";
    CHECK(e.id == 1);
  }
  CHECK(spawns == 1);
  CHECK(matches == T - 1);
  CHECK(prunes == 0);
  std::ostringstream a, b;
  write_events(a, ev);
  write_events(b, ev);
  CHECK(a.str() == b.str());
  CHECK(a.str().rfind("frame\tevent\tid\tpayload\n0\tspawn\t1\t", 0) == 0);
}

TEST_CASE("misaligned streams are rejected") {
  std::vector<Image> frames(3, Image{16, 16, std::vector<float>(3 * 16 * 16, 0.f)});
  std::vector<std::vector<Detection>> dets(2);
  ScriptedPointPredictor pred([](const Point2& p, std::size_t, std::size_t) { return PointPredictor::Observation{p, true}; });
  CHECK_THROWS(track_objects(frames, dets, pred, AssocConfig{}));
}

}
