#include "lbm/trainer.hpp"

#include <cmath>
#include <future>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace lbm {

std::size_t TrainConfig::total_steps() const {
  return batch == 0 ? 0 : epochs * dataset_size / batch;
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (!(warmup >= 0 && warmup < 1)) throw std::invalid_argument("TrainConfig: warmup must lie in [0, 1)");
  if (batch == 0) throw std::invalid_argument("TrainConfig: batch must be >= 1");
  if (queries == 0) throw std::invalid_argument("TrainConfig: queries must be >= 1");
  if (queries > clip.pool) throw std::invalid_argument("TrainConfig: more queries than tracked points per clip");
  if (total_steps() == 0) throw std::invalid_argument("TrainConfig: schedule has no steps");
  clip.validate();
  model.validate();
}

double lr_at(std::size_t step, std::size_t total, const TrainConfig& cfg) {
  if (total == 0) throw std::invalid_argument("lr_at: total steps is zero");
  if (step > total) throw std::out_of_range("lr_at: step beyond schedule");
  const double warm = cfg.warmup * double(total);
  const double s = double(step);
  if (s < warm) return cfg.lr * s / warm;
  const double span = double(total) - warm;
  const double progress = span > 0 ? (s - warm) / span : 1.0;
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Sample make_sample(const SceneSpec& spec, std::size_t queries, std::uint64_t query_seed) {
  const Clip clip = generate_clip(spec);
  Sample s;
  for (const Image& img : clip.frames) s.frames.push_back(img.tensor<float>());
  s.gt = select_tracks(clip.tracks, sample_queries(clip, queries, query_seed));
  return s;
}

std::uint64_t training_clip_seed(const TrainConfig& cfg, std::size_t index) {
  return splitmix64(cfg.seed * 0x100000001b3ULL + index);
}

std::uint64_t heldout_clip_seed(const TrainConfig& cfg, std::size_t index) {
  return splitmix64(~(cfg.seed * 0x100000001b3ULL) - index);
}

Sample training_sample(const TrainConfig& cfg, std::uint64_t clip_seed) {
  SceneSpec spec = cfg.clip;
  spec.seed = clip_seed;
  return make_sample(spec, cfg.queries, splitmix64(clip_seed));
}

template <class T>
LossBreakdown<T> clip_losses(const TrackerParams<T>& params, const std::vector<Tensor<T>>& frames, const TrackTable& gt,
                             double lambda_cls) {
  if (frames.size() < 2 || gt.frames != frames.size()) throw std::invalid_argument("clip_losses: frames and ground truth disagree");
  const std::size_t h = frames[0].dim(1);
  const std::size_t w = frames[0].dim(2);
  QueryState<T> state = init_queries(params, params.encoder(frames[0]), query_points<T>(gt), h, w);
  LossBreakdown<T> sum;
  auto acc = [](Tensor<T>& a, const Tensor<T>& b) { a = a.defined() ? add(a, b) : b; };
  for (std::size_t t = 1; t < frames.size(); ++t) {
    const TrackOutput<T> out = step(params, state, params.encoder(frames[t]));
    const LossBreakdown<T> l = frame_losses(out, frame_gt(gt, t), h, w, lambda_cls);
    acc(sum.cls, l.cls);
    acc(sum.reg, l.reg);
    acc(sum.vis, l.vis);
    acc(sum.conf, l.conf);
    acc(sum.conf_ref, l.conf_ref);
    acc(sum.total, l.total);
  }
  const T k = T(1) / T(frames.size() - 1);
  return {scale(sum.cls, k), scale(sum.reg, k), scale(sum.vis, k), scale(sum.conf, k), scale(sum.conf_ref, k),
          scale(sum.total, k)};
}

template LossBreakdown<float> clip_losses(const TrackerParams<float>&, const std::vector<Tensor<float>>&,
                                          const TrackTable&, double);
template LossBreakdown<double> clip_losses(const TrackerParams<double>&, const std::vector<Tensor<double>>&,
                                           const TrackTable&, double);

LossValues clip_backward(TrackerParams<float>& params, const Sample& sample, double lambda_cls, float weight) {
  Tape<float> tape;
  TapeScope<float> scope(tape);
  const LossBreakdown<float> l = clip_losses(params, sample.frames, sample.gt, lambda_cls);
  const LossValues values = values_of(l);
  if (!std::isfinite(values.total)) throw NumericError("clip_backward: non-finite loss");
  tape.backward(scale(l.total, weight));
  return values;
}

AdamW::AdamW(TrackerParams<float>& params) {
  params.visit([this](const std::string&, Tensor<float>& t) {
    m_.emplace_back(t.numel(), 0.0f);
    v_.emplace_back(t.numel(), 0.0f);
  });
}

void AdamW::update(TrackerParams<float>& params, double lr, double weight_decay) {
  constexpr double b1 = 0.9;
  constexpr double b2 = 0.999;
  constexpr double eps = 1e-8;
  ++step_;
  const double c1 = 1.0 - std::pow(b1, double(step_));
  const double c2 = 1.0 - std::pow(b2, double(step_));
  std::size_t i = 0;
  params.visit([&](const std::string& name, Tensor<float>& t) {
    if (i >= m_.size() || m_[i].size() != t.numel()) throw std::logic_error("AdamW: parameter layout changed at " + name);
    auto data = t.mutable_data();
    const bool has = t.has_grad();
    const auto g = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double gj = has ? double(g[j]) : 0.0;
      m[j] = float(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = float(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      const double p = data[j];
      data[j] = float(p - lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p));
    }
    ++i;
  });
}

double clip_gradients(TrackerParams<float>& params, double max_norm) {
  double sq = 0;
  params.visit([&sq](const std::string&, Tensor<float>& t) {
    if (!t.has_grad()) return;
    for (const float g : t.grad()) sq += double(g) * double(g);
  });
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const float k = float(max_norm / norm);
    params.visit([k](const std::string&, Tensor<float>& t) {
      if (!t.has_grad()) return;
      for (auto& g : t.mutable_grad()) g *= k;
    });
  }
  return norm;
}

namespace {

struct ClipResult {
  TrackerParams<float> params;
  LossValues loss;
};

ClipResult run_clip(const TrackerParams<float>& shared, const Sample& sample, double lambda_cls) {
  ClipResult r{shared.clone(), {}};
  r.loss = clip_backward(r.params, sample, lambda_cls);
  return r;
}

std::size_t worker_count(const TrainConfig& cfg) {
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  return cfg.threads ? cfg.threads : hw;
}

}  // namespace

LossValues train_step(TrackerParams<float>& params, AdamW& opt, const std::vector<Sample>& batch, double lr,
                      const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::vector<ClipResult> results;
  results.reserve(batch.size());
  const std::size_t workers = std::min(worker_count(cfg), batch.size());
  if (workers <= 1) {
    for (const Sample& s : batch) results.push_back(run_clip(params, s, cfg.lambda_cls));
  } else {
    for (std::size_t begin = 0; begin < batch.size(); begin += workers) {
      std::vector<std::future<ClipResult>> jobs;
      for (std::size_t i = begin; i < std::min(batch.size(), begin + workers); ++i) {
        jobs.push_back(std::async(std::launch::async, run_clip, std::cref(params), std::cref(batch[i]), cfg.lambda_cls));
      }
      for (auto& j : jobs) results.push_back(j.get());
    }
  }

  // Ordered reduction into the shared parameters.
  std::vector<std::vector<Tensor<float>>> per_clip;
  for (auto& r : results) {
    std::vector<Tensor<float>> ts;
    r.params.visit([&ts](const std::string&, Tensor<float>& t) { ts.push_back(t); });
    per_clip.push_back(std::move(ts));
  }
  const float inv = 1.0f / float(batch.size());
  std::size_t i = 0;
  params.visit([&](const std::string&, Tensor<float>& t) {
    t.zero_grad();
    auto g = t.mutable_grad();
    for (const auto& clip : per_clip) {
      if (!clip[i].has_grad()) continue;
      const auto cg = clip[i].grad();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += cg[j];
    }
    for (auto& x : g) x *= inv;
    ++i;
  });

  LossValues mean;
  for (const auto& r : results) mean += r.loss;
  mean = mean.scaled(1.0 / double(batch.size()));
  if (!std::isfinite(mean.total)) throw NumericError("train_step: non-finite loss");
  clip_gradients(params, cfg.clip_norm);
  opt.update(params, lr, cfg.weight_decay);
  params.visit([](const std::string&, Tensor<float>& t) { t.zero_grad(); });
  return mean;
}

EvalReport evaluate(const TrackerParams<float>& params, const std::vector<std::uint64_t>& seeds, const TrainConfig& cfg) {
  if (seeds.empty()) throw std::invalid_argument("evaluate: no held-out clips");
  std::vector<Metrics> all;
  for (const std::uint64_t seed : seeds) {
    const Sample s = training_sample(cfg, seed);
    const PointTrack track = track_clip(params, s.frames, query_points<float>(s.gt));
    all.push_back(compute_metrics(to_table(track), s.gt, cfg.clip.height, cfg.clip.width, 1));
  }
  return {mean_metrics(all), seeds.size()};
}

Trainer::Trainer(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  params_ = TrackerParams<float>(cfg_.model, splitmix64(cfg_.seed ^ 0x5eedULL));
  opt_ = AdamW(params_);
  total_ = cfg_.total_steps();
}

LossValues Trainer::step() {
  if (done()) throw std::logic_error("Trainer::step: schedule finished");
  std::vector<Sample> batch;
  for (std::size_t b = 0; b < cfg_.batch; ++b) {
    const std::size_t index = (step_ * cfg_.batch + b) % cfg_.dataset_size;
    batch.push_back(training_sample(cfg_, training_clip_seed(cfg_, index)));
  }
  const double lr = lr_at(step_ + 1, total_, cfg_);
  LossValues l;
  try {
    l = train_step(params_, opt_, batch, lr, cfg_);
  } catch (const NumericError& e) {
    throw NumericError("training step " + std::to_string(step_) + ": " + e.what());
  }
  ++step_;
  return l;
}

void Trainer::run(std::ostream* log, const std::function<void(std::size_t, const LossValues&)>& progress) {
  if (log && step_ == 0) write_log_header(*log);
  while (!done()) {
    const double lr = lr_at(step_ + 1, total_, cfg_);
    const LossValues l = step();
    if (log) write_log_line(*log, step_, lr, l);
    if (progress) progress(step_, l);
  }
}

void write_log_header(std::ostream& out) {
  out << "step\tlr\ttotal\tcls\treg\tvis\tconf\tconf_ref\n";
}

void write_log_line(std::ostream& out, std::size_t step, double lr, const LossValues& l) {
  out << step << '\t' << std::scientific << std::setprecision(6) << lr << std::defaultfloat << std::fixed
      << std::setprecision(6) << '\t' << l.total << '\t' << l.cls << '\t' << l.reg << '\t' << l.vis << '\t' << l.conf
      << '\t' << l.conf_ref << std::defaultfloat << '\n';
}

}  // namespace lbm
