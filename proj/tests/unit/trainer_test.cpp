#include <cmath>
#include <numbers>
#include <set>

#include "doctest.h"
#include "lbm/trainer.hpp"

using namespace lbm;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.seed = 3;
  cfg.dataset_size = 4;
  cfg.batch = 2;
  cfg.queries = 4;
  cfg.clip.frames = 4;
  cfg.clip.height = 32;
  cfg.clip.width = 32;
  cfg.clip.pool = 8;
  cfg.model.feature_dim = 16;
  cfg.model.encoder_channels = 4;
  cfg.model.memory_length = 3;
  cfg.threads = 1;
  return cfg;
}

std::vector<std::vector<float>> snapshot(TrackerParams<float>& p) {
  std::vector<std::vector<float>> out;
  p.visit([&out](const std::string&, Tensor<float>& t) { out.emplace_back(t.data().begin(), t.data().end()); });
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  const std::size_t total = 2000;
  CHECK(lr_at(0, total, cfg) == 0.0);
  CHECK(lr_at(100, total, cfg) == cfg.lr);
  CHECK(std::abs(lr_at(total, total, cfg)) < 1e-12);
  CHECK(lr_at(50, total, cfg) == doctest::Approx(cfg.lr / 2).epsilon(1e-15));
  for (std::size_t s : {250u, 1000u, 1700u}) {
    const double progress = (double(s) - 100.0) / 1900.0;
    CHECK(lr_at(s, total, cfg) == doctest::Approx(cfg.lr * 0.5 * (1 + std::cos(std::numbers::pi * progress))).epsilon(1e-12));
  }
  CHECK_THROWS(lr_at(0, 0, cfg));
  CHECK_THROWS(lr_at(total + 1, total, cfg));
}

TEST_CASE("a zero learning rate leaves parameters bit-unchanged") {
  const TrainConfig cfg = tiny_config();
  TrackerParams<float> params(cfg.model, 1);
  AdamW opt(params);
  const auto before = snapshot(params);
  std::vector<Sample> batch{training_sample(cfg, training_clip_seed(cfg, 0)), training_sample(cfg, training_clip_seed(cfg, 1))};
  const LossValues l = train_step(params, opt, batch, 0.0, cfg);
  CHECK(std::isfinite(l.total));
  CHECK(snapshot(params) == before);
}

TEST_CASE("AdamW descends a separable quadratic") {
  TrackerConfig mc = tiny_config().model;
  TrackerParams<float> params(mc, 2);
  AdamW opt(params);
  // Minimum at 0.5 for every entry; gradients written directly.
  auto loss_and_grad = [&params] {
    double loss = 0;
    params.visit([&loss](const std::string&, Tensor<float>& t) {
      auto g = t.mutable_grad();
      const auto x = t.data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = double(x[i]) - 0.5;
        loss += d * d;
        g[i] = float(2 * d);
      }
    });
    return loss;
  };
  double prev = loss_and_grad();
  const double first = prev;
  bool monotone = true;
  for (int i = 0; i < 100; ++i) {
    opt.update(params, 1e-2, 0.0);
    const double now = loss_and_grad();
    monotone = monotone && now < prev;
    prev = now;
  }
  CHECK(monotone);
  CHECK(prev < 0.5 * first);
}

TEST_CASE("gradient clipping caps the global norm") {
  TrackerParams<float> params(tiny_config().model, 3);
  params.visit([](const std::string&, Tensor<float>& t) {
    for (auto& g : t.mutable_grad()) g = 1.0f;
  });
  const double before = clip_gradients(params, 1.0);
  CHECK(before == doctest::Approx(std::sqrt(double(params.parameter_count()))).epsilon(1e-6));
  double sq = 0;
  params.visit([&sq](const std::string&, Tensor<float>& t) {
    for (float g : t.grad()) sq += double(g) * g;
  });
  CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("clip losses equal the mean of the per-frame components") {
  const TrainConfig cfg = tiny_config();
  const TrackerParams<double> params(cfg.model, 4);
  const Sample s = training_sample(cfg, 77);
  std::vector<Tensor<double>> frames;
  for (const auto& f : s.frames) frames.push_back(Tensor<double>::from(f.shape(), std::vector<double>(f.data().begin(), f.data().end())));
  const LossBreakdown<double> l = clip_losses(params, frames, s.gt, 0.5);
  const double want = 0.5 * l.cls.item() + l.reg.item() + l.vis.item() + l.conf.item() + l.conf_ref.item();
  CHECK(std::abs(l.total.item() - want) < 1e-12);

  QueryState<double> st = init_queries(params, params.encoder(frames[0]), query_points<double>(s.gt), cfg.clip.height, cfg.clip.width);
  double cls = 0;
  for (std::size_t t = 1; t < frames.size(); ++t) {
    const TrackOutput<double> out = step(params, st, params.encoder(frames[t]));
    cls += cls_loss(out.layers, frame_gt(s.gt, t), cfg.clip.height, cfg.clip.width).item();
  }
  CHECK(l.cls.item() == doctest::Approx(cls / double(frames.size() - 1)).epsilon(1e-12));
}

TEST_CASE("evaluation") {
  const TrainConfig cfg = tiny_config();
  const TrackerParams<float> params(cfg.model, 5);
  const std::vector<std::uint64_t> seeds{heldout_clip_seed(cfg, 0), heldout_clip_seed(cfg, 1)};
  const EvalReport a = evaluate(params, seeds, cfg), b = evaluate(params, seeds, cfg);
  CHECK(a.clips == 2);
  CHECK(a.metrics.aj == b.metrics.aj);
  CHECK(a.metrics.delta_avg == b.metrics.delta_avg);
  CHECK(a.metrics.oa == b.metrics.oa);
  CHECK_THROWS_AS(evaluate(params, {}, cfg), std::invalid_argument);
}

TEST_CASE("training and held-out seeds are disjoint") {
  const TrainConfig cfg;
  std::set<std::uint64_t> train;
  for (std::size_t i = 0; i < 500; ++i) train.insert(training_clip_seed(cfg, i));
  for (std::size_t i = 0; i < 50; ++i) CHECK(train.count(heldout_clip_seed(cfg, i)) == 0);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.lr = 0;
  CHECK_THROWS(cfg.validate());
  cfg = TrainConfig{};
  cfg.warmup = 1.0;
  CHECK_THROWS(cfg.validate());
  cfg = TrainConfig{};
  cfg.batch = 0;
  CHECK_THROWS(cfg.validate());
}

}
