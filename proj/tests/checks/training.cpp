#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "lbm/io.hpp"
#include "support.hpp"

namespace lbm::checks {

namespace {

double window_mean(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  end = std::min(end, v.size());
  if (begin >= end) return 0;
  return std::accumulate(v.begin() + long(begin), v.begin() + long(end), 0.0) / double(end - begin);
}

std::vector<std::uint64_t> heldout_seeds(const TrainConfig& cfg, std::size_t n) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < n; ++i) seeds.push_back(heldout_clip_seed(cfg, i));
  return seeds;
}

}  // namespace

Criterion learnability(const LearnOptions& options) {
  Stopwatch sw;
  Criterion c;
  c.id = 6;
  c.title = "desk-scale learnability";
  TrainConfig cfg;
  cfg.seed = options.seed;
  cfg.threads = options.threads;
  if (options.max_steps) cfg.dataset_size = std::min(cfg.dataset_size, options.max_steps * cfg.batch);
  Trainer trainer(cfg);
  const std::vector<std::uint64_t> seeds = heldout_seeds(cfg, options.heldout);
  const Metrics base = evaluate(trainer.params(), seeds, cfg).metrics;
  if (options.progress) {
    *options.progress << fmt("  untrained: delta_avg %.4f AJ %.4f OA %.4f", base.delta_avg, base.aj, base.oa) << std::endl;
  }

  Stopwatch train_clock;
  std::vector<double> losses;
  if (options.log) write_log_header(*options.log);
  while (!trainer.done()) {
    const double lr = lr_at(trainer.current_step() + 1, trainer.total_steps(), cfg);
    const LossValues l = trainer.step();
    losses.push_back(l.total);
    if (options.log) write_log_line(*options.log, trainer.current_step(), lr, l);
    if (options.progress && trainer.current_step() % 100 == 0) {
      *options.progress << fmt("  step %zu/%zu loss %.4f (%.0fs)", trainer.current_step(), trainer.total_steps(),
                               window_mean(losses, losses.size() - 100, losses.size()), train_clock.seconds())
                        << std::endl;
    }
  }
  const double train_seconds = train_clock.seconds();
  const Metrics m = evaluate(trainer.params(), seeds, cfg).metrics;

  // Loss level around step 50 (steps 41..60) against the final 20 steps.
  const double early = window_mean(losses, 40, 60);
  const double late = window_mean(losses, losses.size() >= 20 ? losses.size() - 20 : 0, losses.size());
  const double drop = early > 0 ? 1.0 - late / early : 0.0;
  const double ratio = base.delta_avg > 0 ? m.delta_avg / base.delta_avg : 0.0;

  c.add("training finishes within 30 minutes", train_seconds <= 1800.0,
        fmt("%zu steps in %.0fs on %u hardware threads", trainer.total_steps(), train_seconds, std::thread::hardware_concurrency()));
  c.add("held-out delta_avg >= 3x the untrained checkpoint", ratio >= 3.0,
        fmt("%.4f vs %.4f (x%.2f) on %zu clips", m.delta_avg, base.delta_avg, ratio, seeds.size()));
  c.add("held-out OA >= 0.75", m.oa >= 0.75, fmt("%.4f", m.oa));
  c.add("loss falls >= 50% from step 50 to the end", drop >= 0.5, fmt("%.4f -> %.4f (-%.1f%%)", early, late, 100 * drop));
  c.seconds = sw.seconds();
  c.summary = fmt("delta_avg %.3f (x%.2f), AJ %.3f, OA %.3f, loss -%.0f%%", m.delta_avg, ratio, m.aj, m.oa, 100 * drop);
  return c;
}

Criterion reproducibility(std::uint64_t seed) {
  Stopwatch sw;
  Criterion c;
  c.id = 9;
  c.title = "reproducibility";
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.dataset_size = 12;
  cfg.batch = 3;

  auto train = [](TrainConfig tc) {
    Trainer t(tc);
    t.run(nullptr);
    return encode_checkpoint(t.params(), t.config());
  };
  cfg.threads = 1;
  const std::string a = train(cfg);
  const std::string b = train(cfg);
  cfg.threads = 3;
  const std::string d = train(cfg);
  c.add("identical config and seed: checkpoints byte-identical", a == b, fmt("%zu bytes", a.size()));
  c.add("checkpoint independent of the worker count", a == d);

  LoadedCheckpoint ck = decode_checkpoint(a);
  c.add("checkpoint save/load/save byte-identical", encode_checkpoint(ck.params, ck.config) == a);

  SceneSpec spec = cfg.clip;
  spec.seed = seed + 11;
  const Clip clip = generate_clip(spec);
  const Clip clip2 = generate_clip(spec);
  bool same_clip = clip.tracks.x == clip2.tracks.x && clip.tracks.visible == clip2.tracks.visible;
  for (std::size_t t = 0; t < clip.frames.size(); ++t) same_clip = same_clip && clip.frames[t].data == clip2.frames[t].data;
  c.add("synthetic clip generation deterministic", same_clip);

  const std::vector<std::size_t> q = sample_queries(clip, 8, seed);
  const TrackTable gt = select_tracks(clip.tracks, q);
  std::vector<Tensor<float>> frames;
  for (const Image& im : clip.frames) frames.push_back(im.tensor<float>());
  auto track_file = [&] {
    TrackFile tf = TrackFile::from_prediction(track_clip(ck.params, frames, query_points<float>(gt)), clip.height, clip.width);
    tf.indices = q;
    return encode_track_file(tf);
  };
  const std::string t1 = track_file(), t2 = track_file();
  c.add("track file byte-identical across runs", t1 == t2, fmt("%zu bytes", t1.size()));

  const std::vector<std::vector<Detection>> dets = scene_detections(make_scene(spec));
  auto events = [&] {
    LbmPointPredictor pred(ck.params);
    AssocConfig ac;
    ac.seed = seed;
    std::ostringstream out;
    write_events(out, track_objects(clip.frames, dets, pred, ac));
    return out.str();
  };
  const std::string e1 = events(), e2 = events();
  c.add("association event log byte-identical across runs", e1 == e2 && e1.find("spawn") != std::string::npos,
        fmt("%zu bytes", e1.size()));
  c.seconds = sw.seconds();
  return c;
}

}  // namespace lbm::checks
