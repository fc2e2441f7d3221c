// Online point tracker: distribution initialization, streaming/collision
// memory, predict-update layers and the track/visibility heads.
//
// Coordinates: the feature grid has stride 4, so feature cell (x, y) is image
// pixel (4x, 4y). Queries and outputs are in image pixels; the state p and
// reference points live on the feature grid.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lbm/encoder.hpp"
#include "lbm/nn.hpp"

namespace lbm {

struct TrackerConfig {
  std::size_t feature_dim = 64;
  std::size_t encoder_channels = 16;
  std::size_t num_layers = 3;
  std::size_t memory_length = 12;  // N_s
  std::size_t collision_points = 9;
  std::size_t update_offsets = 4;  // S, sampling points per reference in the update step
  std::size_t head_points = 9;
  std::size_t mlp_ratio = 2;
  bool cosine_correlation = false;
  bool cross_attention_every_layer = false;

  /// Top-k per layer: 9 first, 1 last, 4 in between.
  std::vector<std::size_t> k_schedule() const;
  EncoderConfig encoder() const { return {encoder_channels, feature_dim}; }
  void validate() const;
};

template <class T>
struct LayerParams {
  CrossAttn<T> phi_s;  // defined on layer 0, or on every layer when configured
  CrossAttn<T> phi_c;
  Mlp<T> predict_mlp;
  DeformAttn<T> psi;
  LayerNorm<T> update_norm;
  Mlp<T> update_mlp;
  Mlp<T> ref_conf;

  bool has_cross_attention() const { return phi_s.q.weight.defined(); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <class T>
struct TrackerParams {
  TrackerConfig config;
  Encoder<T> encoder;
  std::vector<LayerParams<T>> layers;
  DeformAttn<T> collision;
  DeformAttn<T> track_attn;
  Mlp<T> track_mlp;
  DeformAttn<T> vis_attn;
  Mlp<T> vis_mlp;

  TrackerParams() = default;
  TrackerParams(const TrackerConfig& config, std::uint64_t seed);

  /// Visits every parameter in a fixed order with a stable dotted name.
  void visit(const ParamVisitor<T>& f);
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters();
  /// Deep copy with fresh parameter nodes.
  TrackerParams clone() const;
  std::size_t parameter_count();
};

/// Streaming state for N queries. Memories are fixed ring buffers of N_s
/// slots; a slot takes part in attention only while its flag is set.
template <class T>
struct QueryState {
  Tensor<T> f_init;  // N x d
  Tensor<T> f;       // N x d
  Tensor<T> p;       // N x 2, feature grid
  std::vector<Tensor<T>> f_s;  // N_s slots of N x d
  std::vector<Tensor<T>> f_c;
  std::vector<std::uint8_t> mem_valid;
  std::size_t t = 0;
  std::size_t image_h = 0;
  std::size_t image_w = 0;

  bool initialized() const { return f_init.defined(); }
  std::size_t size() const { return f_init.dim(0); }
  /// Valid slots stacked oldest to newest: N x M x d.
  Tensor<T> streaming_memory() const;
  Tensor<T> collision_memory() const;
  /// Slot indices of the valid entries, oldest first.
  std::vector<std::size_t> valid_slots() const;
};

template <class T>
struct ReferenceSet {
  std::vector<std::size_t> index;  // N*K flat cell indices (row-major)
  Tensor<T> r;                     // N x K x 2 cell coordinates, no gradient
  Tensor<T> rho_r;                 // N x K logits
  std::size_t k = 0;
};

template <class T>
struct LayerOutput {
  Tensor<T> correlation;  // N x (h*w)
  ReferenceSet<T> refs;
};

template <class T>
struct TrackOutput {
  Tensor<T> p_out;      // N x 2 image pixels
  Tensor<T> delta;      // N x 2 feature-grid offset from r_last
  Tensor<T> r_last;     // N x 2 feature grid
  Tensor<T> v_logit;    // N
  Tensor<T> rho_logit;  // N
  std::vector<T> v;     // sigmoid(v_logit)
  std::vector<T> rho;
  std::vector<LayerOutput<T>> layers;
};

/// Instrumentation filled by step() on request.
struct StepTrace {
  struct Attention {
    std::string name;
    std::vector<std::vector<double>> rows;  // one weight vector per query
    std::vector<std::uint8_t> support;      // empty = every column is support
  };
  std::vector<std::size_t> k_per_layer;
  std::size_t collision_points = 0;
  std::vector<std::vector<double>> layer1_query;  // rows fed to the first layer's phi_s
  std::vector<Attention> attention;
};

struct StepOptions {
  /// Per layer, N*K cell indices used instead of top-k selection.
  const std::vector<std::vector<std::size_t>>* forced_refs = nullptr;
  StepTrace* trace = nullptr;
};

/// f_init = bilinear_sample(o, q / 4); q is N x 2 in image pixels.
template <class T>
QueryState<T> init_queries(const TrackerParams<T>& params, const Tensor<T>& o, const Tensor<T>& q,
                           std::size_t image_h, std::size_t image_w);

/// c[n, y*w + x] = <f[n], o[:, y, x]> / sqrt(d), or the cosine when configured.
template <class T>
Tensor<T> correlation(const Tensor<T>& f, const Tensor<T>& o, bool cosine = false);

/// Top-k cells per row of c (ties: lowest flat index) as (x, y) coordinates.
template <class T>
ReferenceSet<T> select_references(const Tensor<T>& c, std::size_t k, std::size_t grid_w);

template <class T>
DeformAttnResult<T> collision(const DeformAttn<T>& params, const Tensor<T>& f, const Tensor<T>& o, const Tensor<T>& p);

/// Memory-conditioned prediction for one layer: phi_s then phi_c (when the
/// layer runs cross-attention) followed by the residual MLP.
template <class T>
Tensor<T> predict(const LayerParams<T>& layer, const Tensor<T>& query, const QueryState<T>& state,
                  StepTrace* trace = nullptr);

template <class T>
TrackOutput<T> step(const TrackerParams<T>& params, QueryState<T>& state, const Tensor<T>& o,
                    const StepOptions& options = {});

/// Per-frame predictions for a whole clip with queries at frame 0.
struct PointTrack {
  std::vector<std::vector<float>> x, y, v, rho;  // [frame][query]
};

template <class T>
PointTrack track_clip(const TrackerParams<T>& params, const std::vector<Tensor<T>>& frames, const Tensor<T>& queries);

}  // namespace lbm
