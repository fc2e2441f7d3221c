#include "lbm/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lbm {

std::vector<std::size_t> TrackerConfig::k_schedule() const {
  std::vector<std::size_t> ks(num_layers, 4);
  if (num_layers == 0) return ks;
  ks.front() = 9;
  ks.back() = 1;
  return ks;
}

void TrackerConfig::validate() const {
  if (num_layers < 1) throw std::invalid_argument("TrackerConfig: num_layers must be >= 1");
  if (feature_dim == 0 || feature_dim % 4 != 0) throw std::invalid_argument("TrackerConfig: feature_dim must be a positive multiple of 4");
  if (memory_length == 0) throw std::invalid_argument("TrackerConfig: memory_length must be >= 1");
  if (collision_points == 0 || update_offsets == 0 || head_points == 0 || mlp_ratio == 0 || encoder_channels == 0) {
    throw std::invalid_argument("TrackerConfig: point counts, mlp_ratio and encoder_channels must be >= 1");
  }
}

template <class T>
void LayerParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  if (has_cross_attention()) {
    phi_s.visit(prefix + ".phi_s", f);
    phi_c.visit(prefix + ".phi_c", f);
  }
  predict_mlp.visit(prefix + ".predict_mlp", f);
  psi.visit(prefix + ".psi", f);
  update_norm.visit(prefix + ".update_norm", f);
  update_mlp.visit(prefix + ".update_mlp", f);
  ref_conf.visit(prefix + ".ref_conf", f);
}

template <class T>
TrackerParams<T>::TrackerParams(const TrackerConfig& cfg, std::uint64_t seed) : config(cfg) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.feature_dim;
  const std::size_t hidden = d * cfg.mlp_ratio;
  encoder = Encoder<T>(cfg.encoder(), rng);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    LayerParams<T> layer;
    if (l == 0 || cfg.cross_attention_every_layer) {
      layer.phi_s = CrossAttn<T>(d, rng);
      layer.phi_c = CrossAttn<T>(d, rng);
    }
    layer.predict_mlp = Mlp<T>(d, hidden, d, rng, true);
    layer.psi = DeformAttn<T>(2 * d, d, d, cfg.update_offsets, rng);
    layer.update_norm = LayerNorm<T>(d);
    layer.update_mlp = Mlp<T>(d, hidden, d, rng, true);
    layer.ref_conf = Mlp<T>(2 * d, d, 1, rng, false);
    layers.push_back(std::move(layer));
  }
  collision = DeformAttn<T>(d, d, d, cfg.collision_points, rng);
  track_attn = DeformAttn<T>(2 * d, d, d, cfg.head_points, rng);
  track_mlp = Mlp<T>(2 * d, hidden, 2, rng, true);
  vis_attn = DeformAttn<T>(2 * d, d, d, cfg.head_points, rng);
  vis_mlp = Mlp<T>(2 * d, hidden, 2, rng, false);
}

template <class T>
void TrackerParams<T>::visit(const ParamVisitor<T>& f) {
  encoder.visit("encoder", f);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit("layer" + std::to_string(l), f);
  collision.visit("collision", f);
  track_attn.visit("track_head.attn", f);
  track_mlp.visit("track_head.mlp", f);
  vis_attn.visit("vis_head.attn", f);
  vis_mlp.visit("vis_head.mlp", f);
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> TrackerParams<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  visit([&out](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <class T>
TrackerParams<T> TrackerParams<T>::clone() const {
  TrackerParams copy = *this;
  copy.visit([](const std::string&, Tensor<T>& t) { t = t.clone(); });
  return copy;
}

template <class T>
std::size_t TrackerParams<T>::parameter_count() {
  std::size_t n = 0;
  visit([&n](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <class T>
std::vector<std::size_t> QueryState<T>::valid_slots() const {
  const std::size_t cap = mem_valid.size();
  const std::size_t count = std::min(t, cap);
  const std::size_t start = t >= cap ? t % cap : 0;
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t s = (start + i) % cap;
    if (mem_valid[s]) slots.push_back(s);
  }
  return slots;
}

namespace {

template <class T>
Tensor<T> stack_slots(const std::vector<Tensor<T>>& slots, const std::vector<std::size_t>& order, std::size_t n,
                      std::size_t d) {
  if (order.empty()) return Tensor<T>::zeros({n, 0, d});
  std::vector<Tensor<T>> parts;
  parts.reserve(order.size());
  for (const std::size_t s : order) parts.push_back(slots[s]);
  return stack(parts, 1);
}

template <class T>
std::vector<std::vector<double>> rows_of(const Tensor<T>& t) {
  const std::size_t n = t.dim(0);
  const std::size_t m = n == 0 ? 0 : t.numel() / n;
  std::vector<std::vector<double>> rows(n, std::vector<double>(m));
  const auto data = t.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) rows[i][j] = static_cast<double>(data[i * m + j]);
  }
  return rows;
}

// Spreads weights over the valid slots back onto all N_s ring slots.
template <class T>
StepTrace::Attention slot_attention(const std::string& name, const Tensor<T>& w, const QueryState<T>& state) {
  StepTrace::Attention a;
  a.name = name;
  const std::vector<std::size_t> order = state.valid_slots();
  const auto dense = rows_of(w);
  a.support = state.mem_valid;
  a.rows.assign(dense.size(), std::vector<double>(state.mem_valid.size(), 0.0));
  for (std::size_t i = 0; i < dense.size(); ++i) {
    for (std::size_t j = 0; j < order.size(); ++j) a.rows[i][order[j]] = dense[i][j];
  }
  return a;
}

template <class T>
void record(StepTrace* trace, const std::string& name, const Tensor<T>& weights) {
  if (trace) trace->attention.push_back({name, rows_of(weights), {}});
}

template <class T>
T sigmoid_scalar(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace

template <class T>
Tensor<T> QueryState<T>::streaming_memory() const {
  return stack_slots(f_s, valid_slots(), size(), f_init.dim(1));
}

template <class T>
Tensor<T> QueryState<T>::collision_memory() const {
  return stack_slots(f_c, valid_slots(), size(), f_init.dim(1));
}

template <class T>
QueryState<T> init_queries(const TrackerParams<T>& params, const Tensor<T>& o, const Tensor<T>& q,
                           std::size_t image_h, std::size_t image_w) {
  if (q.rank() != 2 || q.dim(1) != 2) throw ShapeError("init_queries: q must be N x 2");
  if (q.dim(0) == 0) throw std::invalid_argument("init_queries: no query points");
  if (o.rank() != 3 || o.dim(0) != params.config.feature_dim) throw ShapeError("init_queries: feature map " + shape_str(o.shape()));
  const auto qd = q.data();
  for (std::size_t i = 0; i < q.dim(0); ++i) {
    const T x = qd[2 * i];
    const T y = qd[2 * i + 1];
    if (x < T(0) || y < T(0) || x > T(image_w - 1) || y > T(image_h - 1)) {
      throw std::out_of_range("init_queries: query " + std::to_string(i) + " lies outside the image");
    }
  }
  QueryState<T> s;
  const Tensor<T> grid_q = scale(q, T(0.25));
  s.f_init = bilinear_sample(o, grid_q);
  s.f = s.f_init;
  s.p = detach(grid_q);
  const std::size_t n = q.dim(0);
  const std::size_t d = params.config.feature_dim;
  const std::size_t cap = params.config.memory_length;
  s.f_s.assign(cap, Tensor<T>::zeros({n, d}));
  s.f_c.assign(cap, Tensor<T>::zeros({n, d}));
  s.mem_valid.assign(cap, 0);
  s.t = 0;
  s.image_h = image_h;
  s.image_w = image_w;
  return s;
}

template <class T>
Tensor<T> correlation(const Tensor<T>& f, const Tensor<T>& o, bool cosine) {
  if (o.rank() != 3 || f.rank() != 2 || f.dim(1) != o.dim(0)) {
    throw ShapeError("correlation: f " + shape_str(f.shape()) + " vs o " + shape_str(o.shape()));
  }
  const std::size_t d = o.dim(0);
  const Tensor<T> flat = reshape(o, {d, o.dim(1) * o.dim(2)});
  if (cosine) {
    const Tensor<T> cells = transpose(l2_normalize(transpose(flat)));
    return scale(matmul(l2_normalize(f), cells), std::sqrt(T(d)));
  }
  return scale(matmul(f, flat), T(1) / std::sqrt(T(d)));
}

template <class T>
ReferenceSet<T> select_references(const Tensor<T>& c, std::size_t k, std::size_t grid_w) {
  if (c.rank() != 2) throw ShapeError("select_references: c must be N x cells");
  const std::size_t n = c.dim(0);
  const std::size_t cells = c.dim(1);
  if (k < 1 || k > cells) throw std::invalid_argument("select_references: k out of range");
  const auto data = c.data();
  ReferenceSet<T> refs;
  refs.k = k;
  refs.index.resize(n * k);
  std::vector<std::size_t> order(cells);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = data.data() + i * cells;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    std::copy_n(order.begin(), k, refs.index.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  std::vector<T> xy(n * k * 2);
  for (std::size_t j = 0; j < n * k; ++j) {
    xy[2 * j] = T(refs.index[j] % grid_w);
    xy[2 * j + 1] = T(refs.index[j] / grid_w);
  }
  refs.r = Tensor<T>::from({n, k, 2}, std::move(xy));
  return refs;
}

template <class T>
DeformAttnResult<T> collision(const DeformAttn<T>& params, const Tensor<T>& f, const Tensor<T>& o, const Tensor<T>& p) {
  const std::size_t n = f.dim(0);
  return params(reshape(f, {n, 1, f.dim(1)}), reshape(p, {n, 1, 2}), o);
}

template <class T>
Tensor<T> predict(const LayerParams<T>& layer, const Tensor<T>& query, const QueryState<T>& state, StepTrace* trace) {
  Tensor<T> h = query;
  if (layer.has_cross_attention()) {
    Tensor<T> ws;
    Tensor<T> wc;
    h = layer.phi_s(h, state.streaming_memory(), &ws);
    h = layer.phi_c(h, state.collision_memory(), &wc);
    if (trace && ws.dim(1) > 0) {
      trace->attention.push_back(slot_attention("phi_s", ws, state));
      trace->attention.push_back(slot_attention("phi_c", wc, state));
    }
  }
  return add(h, layer.predict_mlp(h));
}

namespace {

template <class T>
ReferenceSet<T> forced_references(const std::vector<std::size_t>& index, std::size_t n, std::size_t k,
                                  std::size_t grid_w, std::size_t cells) {
  if (index.size() != n * k) throw std::invalid_argument("step: forced reference count mismatch");
  ReferenceSet<T> refs;
  refs.k = k;
  refs.index = index;
  std::vector<T> xy(n * k * 2);
  for (std::size_t j = 0; j < n * k; ++j) {
    if (index[j] >= cells) throw std::out_of_range("step: forced reference outside the grid");
    xy[2 * j] = T(index[j] % grid_w);
    xy[2 * j + 1] = T(index[j] / grid_w);
  }
  refs.r = Tensor<T>::from({n, k, 2}, std::move(xy));
  return refs;
}

// Query for attention anchored at `points` (N x K x 2): [f, o(point)].
template <class T>
Tensor<T> anchored_query(const Tensor<T>& f, const Tensor<T>& o, const Tensor<T>& points) {
  const std::size_t n = points.dim(0);
  const std::size_t k = points.dim(1);
  const std::size_t d = f.dim(1);
  const Tensor<T> sampled = reshape(bilinear_sample(o, reshape(points, {n * k, 2})), {n, k, d});
  return concat<T>({expand(f, 1, k), sampled}, 2);
}

}  // namespace

template <class T>
TrackOutput<T> step(const TrackerParams<T>& params, QueryState<T>& state, const Tensor<T>& o, const StepOptions& options) {
  if (!state.initialized()) throw std::logic_error("step: query state is not initialized");
  const TrackerConfig& cfg = params.config;
  if (o.rank() != 3 || o.dim(0) != cfg.feature_dim) throw ShapeError("step: feature map " + shape_str(o.shape()));
  const std::size_t n = state.size();
  const std::size_t gh = o.dim(1);
  const std::size_t gw = o.dim(2);
  const std::vector<std::size_t> ks = cfg.k_schedule();
  StepTrace* trace = options.trace;
  if (options.forced_refs && options.forced_refs->size() != cfg.num_layers) {
    throw std::invalid_argument("step: forced references must cover every layer");
  }

  TrackOutput<T> out;
  Tensor<T> f = state.f_init;
  if (trace) {
    trace->collision_points = params.collision.points;
    trace->layer1_query = rows_of(f);
  }
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const LayerParams<T>& layer = params.layers[l];
    f = predict(layer, f, state, trace);

    LayerOutput<T> lo;
    lo.correlation = correlation(f, o, cfg.cosine_correlation);
    const std::size_t k = std::min(ks[l], gh * gw);
    lo.refs = options.forced_refs ? forced_references<T>((*options.forced_refs)[l], n, k, gw, gh * gw)
                                  : select_references(lo.correlation, k, gw);
    const Tensor<T> query = anchored_query(f, o, lo.refs.r);
    lo.refs.rho_r = reshape(layer.ref_conf(query), {n, k});
    const DeformAttnResult<T> att = layer.psi(query, lo.refs.r, o);
    const Tensor<T> g = layer.update_norm(add(f, att.output));
    f = add(g, layer.update_mlp(g));
    if (trace) {
      trace->k_per_layer.push_back(k);
      record(trace, "psi" + std::to_string(l), att.weights);
    }
    out.layers.push_back(std::move(lo));
  }

  out.r_last = reshape(out.layers.back().refs.r, {n, 2});
  const Tensor<T> anchor = reshape(out.r_last, {n, 1, 2});
  const Tensor<T> head_query = anchored_query(f, o, anchor);
  const DeformAttnResult<T> ta = params.track_attn(head_query, anchor, o);
  out.delta = params.track_mlp(concat<T>({f, ta.output}, 1));
  const DeformAttnResult<T> va = params.vis_attn(head_query, anchor, o);
  const Tensor<T> logits = params.vis_mlp(concat<T>({f, va.output}, 1));
  out.rho_logit = reshape(slice(logits, 1, 0, 1), {n});
  out.v_logit = reshape(slice(logits, 1, 1, 2), {n});
  for (std::size_t i = 0; i < n; ++i) {
    out.v.push_back(sigmoid_scalar(out.v_logit.data()[i]));
    out.rho.push_back(sigmoid_scalar(out.rho_logit.data()[i]));
  }
  const Tensor<T> p_raw = add(out.r_last, out.delta);
  out.p_out = clamp_points(scale(p_raw, T(4)), T(state.image_w - 1), T(state.image_h - 1));
  state.p = clamp_points(p_raw, T(gw - 1), T(gh - 1));
  state.f = f;

  const DeformAttnResult<T> col = collision(params.collision, f, o, state.p);
  const std::size_t slot = state.t % state.mem_valid.size();
  state.f_s[slot] = f;
  state.f_c[slot] = col.output;
  state.mem_valid[slot] = 1;
  ++state.t;
  if (trace) {
    record(trace, "track_head", ta.weights);
    record(trace, "vis_head", va.weights);
    record(trace, "collision", col.weights);
  }
  return out;
}

template <class T>
PointTrack track_clip(const TrackerParams<T>& params, const std::vector<Tensor<T>>& frames, const Tensor<T>& queries) {
  if (frames.empty()) throw std::invalid_argument("track_clip: no frames");
  NoGradScope<T> no_grad;
  const std::size_t h = frames[0].dim(1);
  const std::size_t w = frames[0].dim(2);
  const std::size_t n = queries.dim(0);
  PointTrack track;
  QueryState<T> state = init_queries(params, params.encoder(frames[0]), queries, h, w);
  const auto qd = queries.data();
  std::vector<float> x(n), y(n), ones(n, 1.0f);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = static_cast<float>(qd[2 * i]);
    y[i] = static_cast<float>(qd[2 * i + 1]);
  }
  track.x.push_back(x);
  track.y.push_back(y);
  track.v.push_back(ones);
  track.rho.push_back(ones);
  for (std::size_t t = 1; t < frames.size(); ++t) {
    const TrackOutput<T> out = step(params, state, params.encoder(frames[t]));
    const auto p = out.p_out.data();
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<float>(p[2 * i]);
      y[i] = static_cast<float>(p[2 * i + 1]);
    }
    track.x.push_back(x);
    track.y.push_back(y);
    track.v.emplace_back(out.v.begin(), out.v.end());
    track.rho.emplace_back(out.rho.begin(), out.rho.end());
  }
  return track;
}

#define LBM_INSTANTIATE_TRACKER(T)                                                                              \
  template struct LayerParams<T>;                                                                               \
  template struct TrackerParams<T>;                                                                             \
  template struct QueryState<T>;                                                                                \
  template QueryState<T> init_queries(const TrackerParams<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                                      std::size_t);                                                             \
  template Tensor<T> correlation(const Tensor<T>&, const Tensor<T>&, bool);                                     \
  template ReferenceSet<T> select_references(const Tensor<T>&, std::size_t, std::size_t);                       \
  template DeformAttnResult<T> collision(const DeformAttn<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                         const Tensor<T>&);                                                     \
  template Tensor<T> predict(const LayerParams<T>&, const Tensor<T>&, const QueryState<T>&, StepTrace*);        \
  template TrackOutput<T> step(const TrackerParams<T>&, QueryState<T>&, const Tensor<T>&, const StepOptions&);  \
  template PointTrack track_clip(const TrackerParams<T>&, const std::vector<Tensor<T>>&, const Tensor<T>&);

LBM_INSTANTIATE_TRACKER(float)
LBM_INSTANTIATE_TRACKER(double)

}  // namespace lbm
