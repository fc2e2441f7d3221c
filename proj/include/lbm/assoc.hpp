// Object tracking by points: instances carry a small set of tracked pixels,
// and detections are associated through where those pixels land.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "lbm/rng.hpp"
#include "lbm/synth.hpp"
#include "lbm/tracker.hpp"

namespace lbm {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double area() const { return (x2 - x1) * (y2 - y1); }
  bool contains(double x, double y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }
  bool strictly_contains(double x, double y) const { return x > x1 && x < x2 && y > y1 && y < y2; }
};

struct Detection {
  Box box;
  int label = 0;
  double score = 1.0;
};

using Point2 = std::array<double, 2>;

struct TrackedInstance {
  int id = 0;
  Box box;
  int label = 0;
  double score = 0;
  std::vector<Point2> pixels;
  std::vector<std::uint8_t> visible;
  std::vector<int> outlier;  // consecutive matched frames spent outside the box
  std::vector<std::size_t> handles;  // point-predictor handles, parallel to pixels
  int frames_since_matched = 0;

  double area() const { return box.area(); }
};

struct AssocConfig {
  std::size_t pixels = 16;
  int timeout = 2;
  int max_lost = 10;
  double match_threshold = 0.3;
  double spawn_threshold = 0.5;
  bool label_penalty = true;
  bool score_weight = true;
  bool hungarian = false;
  std::uint64_t seed = 0;
};

/// n points uniform strictly inside the box. Throws on an empty box.
std::vector<Point2> sample_in_box(const Box& box, std::size_t n, Rng& rng);
TrackedInstance spawn(const Detection& det, std::size_t n_px, Rng& rng, int id = 0);

/// s_j (0.5 + 0.5 [l_i == l_j]) min(1, A_i / A_j) N_in / (N_in + N_out) over
/// the instance's visible pixels; 0 without visible pixels.
double similarity(const TrackedInstance& inst, const Detection& det, bool label_penalty = true, bool score_weight = true);

/// 0.5 (row softmax + column softmax), row-major M x N.
std::vector<double> aggregate(const std::vector<double>& s, std::size_t m, std::size_t n);

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, col) in selection order
  std::vector<std::size_t> unmatched_rows;
  std::vector<std::size_t> unmatched_cols;
};

/// Greedy: repeatedly takes the largest entry above the threshold (ties by
/// lowest row, then column) whose `allowed` flag is set, striking its row and column.
MatchResult greedy_match(const std::vector<double>& s_agg, std::size_t m, std::size_t n, double threshold,
                         const std::vector<std::uint8_t>& allowed = {});
/// Maximum-total assignment, keeping pairs above the threshold.
MatchResult hungarian_match(const std::vector<double>& s_agg, std::size_t m, std::size_t n, double threshold,
                            const std::vector<std::uint8_t>& allowed = {});

struct LifecycleResult {
  std::vector<std::size_t> removed;  // pixel slots that were pruned and refilled
  bool terminated = false;
};

/// With a match: outlier streaks advance for visible pixels outside the box
/// and reset inside; streaks beyond the timeout are refilled inside the box.
/// Without a match only frames_since_matched advances.
LifecycleResult lifecycle_update(TrackedInstance& inst, const Detection* matched, const AssocConfig& cfg, Rng& rng);

/// Source of per-frame pixel positions for registered points.
class PointPredictor {
 public:
  struct Observation {
    Point2 position{};
    bool visible = false;
  };
  virtual ~PointPredictor() = default;
  /// Moves to the next frame; all live points now report that frame.
  virtual void advance(const Image& frame) = 0;
  /// Registers points located in the most recent frame.
  virtual std::vector<std::size_t> add_points(const std::vector<Point2>& points) = 0;
  virtual void remove_points(const std::vector<std::size_t>& handles) = 0;
  virtual Observation observe(std::size_t handle) const = 0;
};

/// Runs the point tracker online, one query group per add_points call.
class LbmPointPredictor : public PointPredictor {
 public:
  explicit LbmPointPredictor(const TrackerParams<float>& params);
  void advance(const Image& frame) override;
  std::vector<std::size_t> add_points(const std::vector<Point2>& points) override;
  void remove_points(const std::vector<std::size_t>& handles) override;
  Observation observe(std::size_t handle) const override;

 private:
  struct Group {
    QueryState<float> state;
    std::vector<std::size_t> handles;
    std::size_t live = 0;
  };
  const TrackerParams<float>& params_;
  Tensor<float> features_;
  std::size_t height_ = 0, width_ = 0;
  std::vector<Group> groups_;
  std::map<std::size_t, Observation> points_;
  std::map<std::size_t, std::size_t> group_of_;
  std::size_t next_ = 0;
};

/// Positions from a closed-form motion model: fn(start point, start frame, frame).
class ScriptedPointPredictor : public PointPredictor {
 public:
  using Motion = std::function<Observation(const Point2&, std::size_t, std::size_t)>;
  explicit ScriptedPointPredictor(Motion motion) : motion_(std::move(motion)) {}
  void advance(const Image& frame) override;
  std::vector<std::size_t> add_points(const std::vector<Point2>& points) override;
  void remove_points(const std::vector<std::size_t>& handles) override;
  Observation observe(std::size_t handle) const override;
  std::size_t frame() const { return frame_; }

 private:
  struct Point {
    Point2 start;
    std::size_t start_frame;
    Observation now;
  };
  Motion motion_;
  std::map<std::size_t, Point> points_;
  std::size_t frame_ = 0;
  bool started_ = false;
  std::size_t next_ = 0;
};

struct AssocEvent {
  std::size_t frame = 0;
  std::string kind;  // spawn, match, prune, terminate
  int id = 0;
  std::string payload;
};

class ObjectTracker {
 public:
  ObjectTracker(const AssocConfig& cfg, PointPredictor& predictor);

  /// Processes one frame with its detections; returns the events it produced.
  std::vector<AssocEvent> process(const Image& frame, const std::vector<Detection>& detections);
  const std::vector<TrackedInstance>& instances() const { return instances_; }
  const std::vector<AssocEvent>& events() const { return events_; }
  /// Last similarity matrices (instances x detections, row-major).
  const std::vector<double>& last_similarity() const { return last_s_; }

 private:
  void refresh_pixels(TrackedInstance& inst);
  AssocConfig cfg_;
  PointPredictor& predictor_;
  Rng rng_;
  std::vector<TrackedInstance> instances_;
  std::vector<AssocEvent> events_;
  std::vector<double> last_s_;
  std::size_t frame_ = 0;
  int next_id_ = 1;
};

/// Whole-stream driver; detections[t] belongs to frames[t].
std::vector<AssocEvent> track_objects(const std::vector<Image>& frames, const std::vector<std::vector<Detection>>& detections,
                                      PointPredictor& predictor, const AssocConfig& cfg,
                                      std::vector<std::vector<TrackedInstance>>* states = nullptr);

/// Per-frame boxes of the scene's sprites (occluders excluded), clipped to
/// the image; the label is the sprite index. Boxes thinner than 2 px are dropped.
std::vector<std::vector<Detection>> scene_detections(const Scene& scene, double score = 0.9);

void write_events(std::ostream& out, const std::vector<AssocEvent>& events);

}  // namespace lbm
