// Training losses on tracker outputs and point-tracking metrics.
#pragma once

#include <array>
#include <vector>

#include "lbm/tracker.hpp"

namespace lbm {

/// Ground truth for N queries at one frame, image pixels.
struct FrameGT {
  std::vector<double> x;
  std::vector<double> y;
  std::vector<std::uint8_t> visible;

  std::size_t size() const { return x.size(); }
};

template <class T>
struct LossBreakdown {
  Tensor<T> cls;
  Tensor<T> reg;
  Tensor<T> vis;
  Tensor<T> conf;
  Tensor<T> conf_ref;
  Tensor<T> total;
};

struct LossValues {
  double cls = 0, reg = 0, vis = 0, conf = 0, conf_ref = 0, total = 0;

  LossValues& operator+=(const LossValues& o);
  LossValues scaled(double k) const;
};

template <class T>
LossValues values_of(const LossBreakdown<T>& l);

/// Distance under which a prediction counts as confident: 8 px at width 512.
double confidence_threshold(std::size_t image_w);

/// Cross-entropy over the h*w cells per layer against the cell floor(p_gt / 4),
/// averaged over visible queries and summed over layers.
template <class T>
Tensor<T> cls_loss(const std::vector<LayerOutput<T>>& layers, const FrameGT& gt, std::size_t image_h,
                   std::size_t image_w);

/// Mean L1 over visible queries of delta - (p_gt / 4 - r_last).
template <class T>
Tensor<T> reg_loss(const Tensor<T>& delta, const Tensor<T>& r_last, const FrameGT& gt);

template <class T>
Tensor<T> vis_loss(const Tensor<T>& v_logit, const FrameGT& gt);

/// Target 1 iff ||p_out - p_gt|| < threshold and the point is visible.
template <class T>
Tensor<T> conf_loss(const Tensor<T>& rho_logit, const Tensor<T>& p_out, const FrameGT& gt, std::size_t image_w);

/// Sum over layers of the mean BCE of rho_r against 1[||4 r - p_gt|| < threshold].
template <class T>
Tensor<T> conf_ref_loss(const std::vector<LayerOutput<T>>& layers, const FrameGT& gt, std::size_t image_w);

template <class T>
LossBreakdown<T> frame_losses(const TrackOutput<T>& out, const FrameGT& gt, std::size_t image_h, std::size_t image_w,
                              double lambda_cls = 1.0);

/// Dense [frame][query] table of positions and visibility flags.
struct TrackTable {
  std::size_t frames = 0;
  std::size_t queries = 0;
  std::vector<double> x, y;
  std::vector<std::uint8_t> visible;

  TrackTable() = default;
  TrackTable(std::size_t frames, std::size_t queries);
  std::size_t at(std::size_t frame, std::size_t query) const { return frame * queries + query; }
};

/// Thresholds of the 256 x 256 reference frame.
inline constexpr std::array<double, 5> kMetricThresholds{1, 2, 4, 8, 16};

struct Metrics {
  std::array<double, 5> delta{};
  std::array<double, 5> jaccard{};
  double delta_avg = 0;
  double aj = 0;
  double oa = 0;
};

/// Scores frames [first_frame, frames) after rescaling to 256 x 256. Ratios
/// with an empty denominator count as 1.
Metrics compute_metrics(const TrackTable& pred, const TrackTable& gt, std::size_t image_h, std::size_t image_w,
                        std::size_t first_frame = 0);

/// Element-wise mean of several reports.
Metrics mean_metrics(const std::vector<Metrics>& all);

TrackTable to_table(const PointTrack& track, double vis_threshold = 0.5);

}  // namespace lbm
