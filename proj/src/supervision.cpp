#include "lbm/supervision.hpp"

#include <cmath>
#include <stdexcept>

namespace lbm {

LossValues& LossValues::operator+=(const LossValues& o) {
  cls += o.cls;
  reg += o.reg;
  vis += o.vis;
  conf += o.conf;
  conf_ref += o.conf_ref;
  total += o.total;
  return *this;
}

LossValues LossValues::scaled(double k) const {
  return {cls * k, reg * k, vis * k, conf * k, conf_ref * k, total * k};
}

template <class T>
LossValues values_of(const LossBreakdown<T>& l) {
  return {static_cast<double>(l.cls.item()),  static_cast<double>(l.reg.item()),
          static_cast<double>(l.vis.item()),  static_cast<double>(l.conf.item()),
          static_cast<double>(l.conf_ref.item()), static_cast<double>(l.total.item())};
}

double confidence_threshold(std::size_t image_w) {
  return 8.0 * static_cast<double>(image_w) / 512.0;
}

namespace {

void require_queries(const FrameGT& gt, std::size_t n, const char* op) {
  if (gt.x.size() != n || gt.y.size() != n || gt.visible.size() != n) {
    throw ShapeError(std::string(op) + ": ground truth has " + std::to_string(gt.x.size()) + " queries, expected " +
                     std::to_string(n));
  }
}

}  // namespace

template <class T>
Tensor<T> cls_loss(const std::vector<LayerOutput<T>>& layers, const FrameGT& gt, std::size_t image_h,
                   std::size_t image_w) {
  if (layers.empty()) throw std::invalid_argument("cls_loss: no layers");
  const std::size_t n = layers.front().correlation.dim(0);
  require_queries(gt, n, "cls_loss");
  const std::size_t gw = image_w / 4;
  const std::size_t cells = layers.front().correlation.dim(1);
  std::vector<int> target(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!gt.visible[i]) continue;
    if (!(gt.x[i] >= 0 && gt.y[i] >= 0 && gt.x[i] <= double(image_w - 1) && gt.y[i] <= double(image_h - 1))) {
      throw std::out_of_range("cls_loss: visible ground-truth point " + std::to_string(i) + " outside the image");
    }
    const auto cx = static_cast<std::size_t>(std::floor(gt.x[i] / 4.0));
    const auto cy = static_cast<std::size_t>(std::floor(gt.y[i] / 4.0));
    target[i] = static_cast<int>(cy * gw + cx);
    if (static_cast<std::size_t>(target[i]) >= cells) throw std::out_of_range("cls_loss: grid does not match image size");
  }
  Tensor<T> total;
  for (const auto& layer : layers) {
    Tensor<T> ce = cross_entropy(layer.correlation, std::span<const int>(target), std::span<const std::uint8_t>(gt.visible));
    total = total.defined() ? add(total, ce) : ce;
  }
  return total;
}

template <class T>
Tensor<T> reg_loss(const Tensor<T>& delta, const Tensor<T>& r_last, const FrameGT& gt) {
  const std::size_t n = delta.dim(0);
  require_queries(gt, n, "reg_loss");
  std::vector<T> target(n * 2);
  const auto r = r_last.data();
  for (std::size_t i = 0; i < n; ++i) {
    target[2 * i] = static_cast<T>(gt.x[i] / 4.0) - r[2 * i];
    target[2 * i + 1] = static_cast<T>(gt.y[i] / 4.0) - r[2 * i + 1];
  }
  return l1_loss(delta, Tensor<T>::from({n, 2}, std::move(target)), std::span<const std::uint8_t>(gt.visible));
}

template <class T>
Tensor<T> vis_loss(const Tensor<T>& v_logit, const FrameGT& gt) {
  const std::size_t n = v_logit.numel();
  require_queries(gt, n, "vis_loss");
  std::vector<T> target(n);
  for (std::size_t i = 0; i < n; ++i) target[i] = gt.visible[i] ? T(1) : T(0);
  const std::vector<std::uint8_t> all(n, 1);
  return binary_cross_entropy(v_logit, std::span<const T>(target), std::span<const std::uint8_t>(all));
}

template <class T>
Tensor<T> conf_loss(const Tensor<T>& rho_logit, const Tensor<T>& p_out, const FrameGT& gt, std::size_t image_w) {
  const std::size_t n = rho_logit.numel();
  require_queries(gt, n, "conf_loss");
  const double thr = confidence_threshold(image_w);
  const auto p = p_out.data();
  std::vector<T> target(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dist = std::hypot(double(p[2 * i]) - gt.x[i], double(p[2 * i + 1]) - gt.y[i]);
    target[i] = (dist < thr && gt.visible[i]) ? T(1) : T(0);
  }
  const std::vector<std::uint8_t> all(n, 1);
  return binary_cross_entropy(rho_logit, std::span<const T>(target), std::span<const std::uint8_t>(all));
}

template <class T>
Tensor<T> conf_ref_loss(const std::vector<LayerOutput<T>>& layers, const FrameGT& gt, std::size_t image_w) {
  if (layers.empty()) throw std::invalid_argument("conf_ref_loss: no layers");
  const double thr = confidence_threshold(image_w);
  Tensor<T> total;
  for (const auto& layer : layers) {
    const std::size_t n = layer.refs.r.dim(0);
    const std::size_t k = layer.refs.k;
    require_queries(gt, n, "conf_ref_loss");
    const auto r = layer.refs.r.data();
    std::vector<T> target(n * k);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t idx = i * k + j;
        const double dist = std::hypot(4.0 * double(r[2 * idx]) - gt.x[i], 4.0 * double(r[2 * idx + 1]) - gt.y[i]);
        target[idx] = dist < thr ? T(1) : T(0);
      }
    }
    const std::vector<std::uint8_t> all(n * k, 1);
    Tensor<T> bce = binary_cross_entropy(reshape(layer.refs.rho_r, {n * k}), std::span<const T>(target),
                                         std::span<const std::uint8_t>(all));
    total = total.defined() ? add(total, bce) : bce;
  }
  return total;
}

template <class T>
LossBreakdown<T> frame_losses(const TrackOutput<T>& out, const FrameGT& gt, std::size_t image_h, std::size_t image_w,
                              double lambda_cls) {
  LossBreakdown<T> l;
  l.cls = cls_loss(out.layers, gt, image_h, image_w);
  l.reg = reg_loss(out.delta, out.r_last, gt);
  l.vis = vis_loss(out.v_logit, gt);
  l.conf = conf_loss(out.rho_logit, out.p_out, gt, image_w);
  l.conf_ref = conf_ref_loss(out.layers, gt, image_w);
  l.total = add(add(add(add(scale(l.cls, static_cast<T>(lambda_cls)), l.reg), l.vis), l.conf), l.conf_ref);
  return l;
}

TrackTable::TrackTable(std::size_t frames_, std::size_t queries_)
    : frames(frames_), queries(queries_), x(frames_ * queries_), y(frames_ * queries_), visible(frames_ * queries_) {}

Metrics compute_metrics(const TrackTable& pred, const TrackTable& gt, std::size_t image_h, std::size_t image_w,
                        std::size_t first_frame) {
  if (pred.frames != gt.frames || pred.queries != gt.queries || pred.x.size() != gt.x.size() ||
      pred.visible.size() != gt.visible.size()) {
    throw ShapeError("compute_metrics: prediction and ground truth differ in length");
  }
  if (first_frame >= gt.frames || gt.queries == 0) throw std::invalid_argument("compute_metrics: nothing to score");
  if (image_h == 0 || image_w == 0) throw std::invalid_argument("compute_metrics: empty image");
  const double sx = 256.0 / double(image_w);
  const double sy = 256.0 / double(image_h);

  std::array<std::size_t, 5> within{}, tp{}, fp{}, fn{};
  std::size_t gt_visible = 0;
  std::size_t pairs = 0;
  std::size_t correct_vis = 0;
  for (std::size_t t = first_frame; t < gt.frames; ++t) {
    for (std::size_t q = 0; q < gt.queries; ++q) {
      const std::size_t i = gt.at(t, q);
      const bool gv = gt.visible[i] != 0;
      const bool pv = pred.visible[i] != 0;
      ++pairs;
      if (gv == pv) ++correct_vis;
      if (gv) ++gt_visible;
      const double err = std::hypot((pred.x[i] - gt.x[i]) * sx, (pred.y[i] - gt.y[i]) * sy);
      for (std::size_t k = 0; k < kMetricThresholds.size(); ++k) {
        const bool close = err < kMetricThresholds[k];
        if (gv && close) ++within[k];
        if (gv && pv && close) ++tp[k];
        if (pv && (!gv || !close)) ++fp[k];
        if (gv && (!pv || !close)) ++fn[k];
      }
    }
  }
  Metrics m;
  for (std::size_t k = 0; k < kMetricThresholds.size(); ++k) {
    m.delta[k] = gt_visible ? double(within[k]) / double(gt_visible) : 1.0;
    const std::size_t denom = tp[k] + fp[k] + fn[k];
    m.jaccard[k] = denom ? double(tp[k]) / double(denom) : 1.0;
    m.delta_avg += m.delta[k] / double(kMetricThresholds.size());
    m.aj += m.jaccard[k] / double(kMetricThresholds.size());
  }
  m.oa = double(correct_vis) / double(pairs);
  return m;
}

Metrics mean_metrics(const std::vector<Metrics>& all) {
  if (all.empty()) throw std::invalid_argument("mean_metrics: no reports");
  Metrics m;
  const double k = 1.0 / double(all.size());
  for (const Metrics& r : all) {
    for (std::size_t i = 0; i < 5; ++i) {
      m.delta[i] += r.delta[i] * k;
      m.jaccard[i] += r.jaccard[i] * k;
    }
    m.delta_avg += r.delta_avg * k;
    m.aj += r.aj * k;
    m.oa += r.oa * k;
  }
  return m;
}

TrackTable to_table(const PointTrack& track, double vis_threshold) {
  const std::size_t frames = track.x.size();
  const std::size_t queries = frames ? track.x[0].size() : 0;
  TrackTable t(frames, queries);
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t q = 0; q < queries; ++q) {
      const std::size_t i = t.at(f, q);
      t.x[i] = track.x[f][q];
      t.y[i] = track.y[f][q];
      t.visible[i] = track.v[f][q] > vis_threshold ? 1 : 0;
    }
  }
  return t;
}

#define LBM_INSTANTIATE_SUPERVISION(T)                                                                         \
  template LossValues values_of(const LossBreakdown<T>&);                                                      \
  template Tensor<T> cls_loss(const std::vector<LayerOutput<T>>&, const FrameGT&, std::size_t, std::size_t);    \
  template Tensor<T> reg_loss(const Tensor<T>&, const Tensor<T>&, const FrameGT&);                             \
  template Tensor<T> vis_loss(const Tensor<T>&, const FrameGT&);                                               \
  template Tensor<T> conf_loss(const Tensor<T>&, const Tensor<T>&, const FrameGT&, std::size_t);               \
  template Tensor<T> conf_ref_loss(const std::vector<LayerOutput<T>>&, const FrameGT&, std::size_t);           \
  template LossBreakdown<T> frame_losses(const TrackOutput<T>&, const FrameGT&, std::size_t, std::size_t, double);

LBM_INSTANTIATE_SUPERVISION(float)
LBM_INSTANTIATE_SUPERVISION(double)

}  // namespace lbm
