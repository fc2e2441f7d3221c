// Training loop: AdamW with warm-up + cosine schedule over fresh synthetic
// clips, backpropagating through each fully unrolled clip.
#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "lbm/synth.hpp"
#include "lbm/tracker.hpp"

namespace lbm {

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 1e-5;
  double warmup = 0.05;
  std::size_t epochs = 1;
  std::size_t dataset_size = 8000;  // clips per epoch
  std::size_t batch = 4;
  std::size_t queries = 8;
  double lambda_cls = 1.0;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: hardware concurrency
  SceneSpec clip;
  TrackerConfig model;

  std::size_t total_steps() const;
  void validate() const;
};

/// Linear warm-up to the peak over the first `warmup` fraction, then cosine to 0.
double lr_at(std::size_t step, std::size_t total, const TrainConfig& cfg);

struct Sample {
  std::vector<Tensor<float>> frames;
  TrackTable gt;  // selected queries only
};

Sample make_sample(const SceneSpec& spec, std::size_t queries, std::uint64_t query_seed);
/// Seed of the i-th training clip and of the i-th held-out clip.
std::uint64_t training_clip_seed(const TrainConfig& cfg, std::size_t index);
std::uint64_t heldout_clip_seed(const TrainConfig& cfg, std::size_t index);
Sample training_sample(const TrainConfig& cfg, std::uint64_t clip_seed);

/// Losses of one unrolled clip averaged over frames 1..T-1.
template <class T>
LossBreakdown<T> clip_losses(const TrackerParams<T>& params, const std::vector<Tensor<T>>& frames, const TrackTable& gt,
                             double lambda_cls);

/// Runs forward and backward for one clip on `params` (whose grads receive
/// d(weight * loss)/d(param)) and reports the unweighted losses.
LossValues clip_backward(TrackerParams<float>& params, const Sample& sample, double lambda_cls, float weight = 1.0f);

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(TrackerParams<float>& params);

  /// Decoupled weight decay; bias-corrected moments.
  void update(TrackerParams<float>& params, double lr, double weight_decay);
  std::size_t steps() const { return step_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }

 private:
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::size_t step_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_gradients(TrackerParams<float>& params, double max_norm);

/// One optimizer step on a batch: per-clip gradients on private parameter
/// copies, reduced in batch order, averaged, clipped, then applied.
LossValues train_step(TrackerParams<float>& params, AdamW& opt, const std::vector<Sample>& batch, double lr,
                      const TrainConfig& cfg);

struct EvalReport {
  Metrics metrics;
  std::size_t clips = 0;
};

/// Online tracking on held-out clips; metrics averaged over clips.
EvalReport evaluate(const TrackerParams<float>& params, const std::vector<std::uint64_t>& seeds, const TrainConfig& cfg);

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  /// Performs the next optimizer step.
  LossValues step();
  bool done() const { return step_ >= total_; }
  std::size_t current_step() const { return step_; }
  std::size_t total_steps() const { return total_; }
  TrackerParams<float>& params() { return params_; }
  const TrainConfig& config() const { return cfg_; }

  /// Runs all remaining steps, writing one metrics line per step.
  void run(std::ostream* log, const std::function<void(std::size_t, const LossValues&)>& progress = {});

 private:
  TrainConfig cfg_;
  TrackerParams<float> params_;
  AdamW opt_;
  std::size_t step_ = 0;
  std::size_t total_ = 0;
};

void write_log_header(std::ostream& out);
void write_log_line(std::ostream& out, std::size_t step, double lr, const LossValues& l);

}  // namespace lbm
