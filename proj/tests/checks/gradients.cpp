#include <numeric>

#include "lbm/synth.hpp"
#include "support.hpp"

namespace lbm::checks {

namespace {

constexpr double kOpTol = 1e-4;
constexpr double kModelTol = 1e-3;
constexpr int kInstances = 5;

struct Case {
  std::function<TD()> loss;
  std::vector<TD> inputs;
  std::size_t max_entries = 0;
};

using Fn = std::function<TD(const std::vector<TD>&)>;

Case readout_case(Rng& rng, std::vector<TD> inputs, Fn fn) {
  const TD out = fn(inputs);
  const TD w = random_tensor(rng, out.shape());
  return {[=] { return readout(fn(inputs), w); }, inputs};
}

void run(Criterion& c, const std::string& name, Rng& rng, const std::function<Case(Rng&)>& make, double tol = kOpTol) {
  GradReport worst;
  bool ok = true;
  for (int i = 0; i < kInstances; ++i) {
    Case k = make(rng);
    const GradReport r = grad_check(k.loss, k.inputs, tol, rng, k.max_entries);
    ok = ok && r.ok() && r.entries > 0;
    worst.max_rel = std::max(worst.max_rel, r.max_rel);
    worst.entries += r.entries;
    worst.bad += r.bad;
  }
  c.add("grad " + name, ok, fmt("%d instances, %zu entries, max rel %.2e", kInstances, worst.entries, worst.max_rel));
}

// Values bounded away from zero by `gap`.
TD away_from_zero(Rng& rng, Shape shape, double gap = 0.05) {
  TD t = random_tensor(rng, std::move(shape));
  for (auto& x : t.mutable_data()) x = x < 0 ? x - gap : x + gap;
  return t;
}

// Coordinates in [0, extent - 1] whose fractional part stays in [0.05, 0.95].
double smooth_coord(Rng& rng, std::size_t extent) {
  const double cell = double(rng.index(extent - 1));
  return cell + rng.uniform(0.05, 0.95);
}

std::vector<TD> module_inputs(const std::vector<TD>& extra, const std::function<void(const ParamVisitor<double>&)>& visit) {
  std::vector<TD> all = extra;
  visit([&all](const std::string&, TD& t) { all.push_back(t); });
  return all;
}

void op_cases(Criterion& c, Rng& rng) {
  auto dims = [&rng](std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); };

  run(c, "add", rng, [&](Rng& r) {
    const std::size_t m = dims(1, 4), n = dims(1, 5);
    const bool bcast = r.index(2) == 0;
    return readout_case(r, {random_tensor(r, {m, n}), random_tensor(r, bcast ? Shape{n} : Shape{m, n})},
                        [](const std::vector<TD>& x) { return add(x[0], x[1]); });
  });
  run(c, "sub", rng, [&](Rng& r) {
    const std::size_t m = dims(1, 4), n = dims(1, 5);
    return readout_case(r, {random_tensor(r, {m, n}), random_tensor(r, {n})},
                        [](const std::vector<TD>& x) { return sub(x[0], x[1]); });
  });
  run(c, "mul", rng, [&](Rng& r) {
    const std::size_t b = dims(1, 3), m = dims(1, 4), n = dims(1, 4);
    const bool bcast = r.index(2) == 0;
    return readout_case(r, {random_tensor(r, {b, m, n}), random_tensor(r, bcast ? Shape{m, n} : Shape{b, m, n})},
                        [](const std::vector<TD>& x) { return mul(x[0], x[1]); });
  });
  run(c, "scale", rng, [&](Rng& r) {
    const double k = r.uniform(-2, 2);
    return readout_case(r, {random_tensor(r, {dims(1, 4), dims(1, 4)})},
                        [k](const std::vector<TD>& x) { return scale(x[0], k); });
  });
  run(c, "matmul", rng, [&](Rng& r) {
    const std::size_t b = dims(1, 3), m = dims(1, 4), k = dims(1, 4), n = dims(1, 4);
    switch (r.index(3)) {
      case 0: return readout_case(r, {random_tensor(r, {m, k}), random_tensor(r, {k, n})},
                                  [](const std::vector<TD>& x) { return matmul(x[0], x[1]); });
      case 1: return readout_case(r, {random_tensor(r, {b, m, k}), random_tensor(r, {b, k, n})},
                                  [](const std::vector<TD>& x) { return matmul(x[0], x[1]); });
      default: return readout_case(r, {random_tensor(r, {b, m, k}), random_tensor(r, {k, n})},
                                   [](const std::vector<TD>& x) { return matmul(x[0], x[1]); });
    }
  });
  run(c, "relu", rng, [&](Rng& r) {
    return readout_case(r, {away_from_zero(r, {dims(1, 4), dims(1, 6)})}, [](const std::vector<TD>& x) { return relu(x[0]); });
  });
  run(c, "gelu", rng, [&](Rng& r) {
    return readout_case(r, {random_tensor(r, {dims(1, 4), dims(1, 6)}, -3, 3)}, [](const std::vector<TD>& x) { return gelu(x[0]); });
  });
  run(c, "sigmoid", rng, [&](Rng& r) {
    return readout_case(r, {random_tensor(r, {dims(1, 4), dims(1, 6)}, -4, 4)},
                        [](const std::vector<TD>& x) { return sigmoid(x[0]); });
  });
  run(c, "layer_norm", rng, [&](Rng& r) {
    const std::size_t m = dims(1, 4), n = dims(2, 7);
    return readout_case(r, {random_tensor(r, {m, n}), random_tensor(r, {n}, 0.5, 1.5), random_tensor(r, {n})},
                        [](const std::vector<TD>& x) { return layer_norm(x[0], x[1], x[2]); });
  });
  run(c, "l2_normalize", rng, [&](Rng& r) {
    return readout_case(r, {random_tensor(r, {dims(1, 4), dims(2, 6)})}, [](const std::vector<TD>& x) { return l2_normalize(x[0]); });
  });
  run(c, "concat", rng, [&](Rng& r) {
    const std::size_t axis = r.index(2);
    const std::size_t m = dims(1, 3), n = dims(1, 3);
    std::vector<TD> parts;
    const std::size_t count = dims(2, 3);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t len = dims(1, 3);
      parts.push_back(random_tensor(r, axis == 0 ? Shape{len, n} : Shape{m, len}));
    }
    return readout_case(r, parts, [axis](const std::vector<TD>& x) { return concat(x, axis); });
  });
  run(c, "stack", rng, [&](Rng& r) {
    const std::size_t axis = r.index(3);
    const Shape s{dims(1, 3), dims(1, 3)};
    return readout_case(r, {random_tensor(r, s), random_tensor(r, s), random_tensor(r, s)},
                        [axis](const std::vector<TD>& x) { return stack(x, axis); });
  });
  run(c, "reshape", rng, [&](Rng& r) {
    const std::size_t a = dims(1, 3), b = dims(1, 3), cc = dims(1, 3);
    return readout_case(r, {random_tensor(r, {a, b, cc})}, [a, b, cc](const std::vector<TD>& x) { return reshape(x[0], {a * b, cc}); });
  });
  run(c, "transpose", rng, [&](Rng& r) {
    const bool batched = r.index(2) == 0;
    const Shape s = batched ? Shape{dims(1, 3), dims(1, 4), dims(1, 4)} : Shape{dims(1, 4), dims(1, 4)};
    return readout_case(r, {random_tensor(r, s)}, [](const std::vector<TD>& x) { return transpose(x[0]); });
  });
  run(c, "slice", rng, [&](Rng& r) {
    const Shape s{dims(2, 4), dims(2, 5), dims(1, 3)};
    const std::size_t axis = r.index(3);
    const std::size_t begin = r.index(s[axis]);
    const std::size_t end = begin + 1 + r.index(s[axis] - begin);
    return readout_case(r, {random_tensor(r, s)}, [=](const std::vector<TD>& x) { return slice(x[0], axis, begin, end); });
  });
  run(c, "expand", rng, [&](Rng& r) {
    const std::size_t axis = r.index(3);
    const std::size_t count = dims(1, 4);
    return readout_case(r, {random_tensor(r, {dims(1, 3), dims(1, 3)})},
                        [=](const std::vector<TD>& x) { return expand(x[0], axis, count); });
  });
  run(c, "clamp_points", rng, [&](Rng& r) {
    const std::size_t n = dims(2, 6);
    TD p = TD::zeros({n, 2});
    auto d = p.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double lim = i % 2 == 0 ? 7.0 : 5.0;
      switch (r.index(3)) {
        case 0: d[i] = -r.uniform(0.1, 2.0); break;
        case 1: d[i] = lim + r.uniform(0.1, 2.0); break;
        default: d[i] = r.uniform(0.1, lim - 0.1); break;
      }
    }
    return readout_case(r, {p}, [](const std::vector<TD>& x) { return clamp_points(x[0], 7.0, 5.0); });
  });
  run(c, "softmax", rng, [&](Rng& r) {
    const bool three = r.index(2) == 0;
    const Shape s = three ? Shape{dims(1, 3), dims(1, 3), dims(2, 5)} : Shape{dims(2, 4), dims(2, 5)};
    const std::size_t axis = r.index(s.size());
    return readout_case(r, {random_tensor(r, s, -3, 3)}, [axis](const std::vector<TD>& x) { return softmax(x[0], axis); });
  });
  run(c, "sum", rng, [&](Rng& r) {
    return readout_case(r, {random_tensor(r, {dims(1, 4), dims(1, 4)})}, [](const std::vector<TD>& x) { return sum(x[0]); });
  });
  run(c, "mean", rng, [&](Rng& r) {
    return readout_case(r, {random_tensor(r, {dims(1, 4), dims(1, 4)})}, [](const std::vector<TD>& x) { return mean(x[0]); });
  });
  run(c, "bilinear_sample", rng, [&](Rng& r) {
    const std::size_t ch = dims(1, 4), h = dims(2, 6), w = dims(2, 6), n = dims(1, 8);
    TD coords = TD::zeros({n, 2});
    auto d = coords.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      if (r.index(5) == 0) {  // outside the map: clamped, zero coordinate gradient
        d[2 * i] = r.index(2) ? -r.uniform(0.2, 2.0) : double(w - 1) + r.uniform(0.2, 2.0);
        d[2 * i + 1] = smooth_coord(r, h);
      } else {
        d[2 * i] = smooth_coord(r, w);
        d[2 * i + 1] = smooth_coord(r, h);
      }
    }
    return readout_case(r, {random_tensor(r, {ch, h, w}), coords},
                        [](const std::vector<TD>& x) { return bilinear_sample(x[0], x[1]); });
  });
  run(c, "conv2d", rng, [&](Rng& r) {
    const std::size_t cin = dims(1, 3), cout = dims(1, 3), k = r.index(2) ? 3 : 1, stride = dims(1, 2);
    const std::size_t h = dims(3, 6), w = dims(3, 6);
    return readout_case(r, {random_tensor(r, {cin, h, w}), random_tensor(r, {cout, cin, k, k}), random_tensor(r, {cout})},
                        [stride, k](const std::vector<TD>& x) { return conv2d(x[0], x[1], x[2], stride, k / 2); });
  });
  run(c, "upsample_bilinear", rng, [&](Rng& r) {
    const std::size_t ch = dims(1, 3), h = dims(1, 4), w = dims(1, 4), f = r.index(2) ? 2 : 4;
    return readout_case(r, {random_tensor(r, {ch, h, w})},
                        [=](const std::vector<TD>& x) { return upsample_bilinear(x[0], f, h * f, w * f); });
  });
  run(c, "cross_entropy", rng, [&](Rng& r) {
    const std::size_t n = dims(1, 5), cls = dims(2, 6);
    std::vector<int> targets(n);
    std::vector<std::uint8_t> mask(n);
    for (std::size_t i = 0; i < n; ++i) {
      targets[i] = int(r.index(cls));
      mask[i] = r.index(3) != 0;
    }
    mask[0] = 1;
    TD logits = random_tensor(r, {n, cls}, -3, 3);
    return Case{[=] { return cross_entropy(logits, std::span<const int>(targets), std::span<const std::uint8_t>(mask)); }, {logits}};
  });
  run(c, "binary_cross_entropy", rng, [&](Rng& r) {
    const std::size_t n = dims(1, 6);
    std::vector<double> targets(n);
    std::vector<std::uint8_t> mask(n);
    for (std::size_t i = 0; i < n; ++i) {
      targets[i] = r.index(3) == 0 ? r.uniform() : double(r.index(2));
      mask[i] = r.index(3) != 0;
    }
    mask[0] = 1;
    TD logits = random_tensor(r, {n}, -4, 4);
    return Case{[=] { return binary_cross_entropy(logits, std::span<const double>(targets), std::span<const std::uint8_t>(mask)); },
                {logits}};
  });
  run(c, "l1_loss", rng, [&](Rng& r) {
    const std::size_t n = dims(1, 5), m = dims(1, 3);
    std::vector<std::uint8_t> mask(n);
    for (auto& v : mask) v = r.index(3) != 0;
    mask[0] = 1;
    TD target = random_tensor(r, {n, m});
    TD pred = away_from_zero(r, {n, m});
    for (std::size_t i = 0; i < pred.numel(); ++i) pred.mutable_data()[i] += target.data()[i];
    return Case{[=] { return l1_loss(pred, target, std::span<const std::uint8_t>(mask)); }, {pred, target}};
  });
}

void module_cases(Criterion& c, Rng& rng) {
  run(c, "deformable attention", rng, [](Rng& r) {
    const std::size_t n = 1 + r.index(3), k = 1 + r.index(3), qd = 3 + r.index(4), ch = 2 + r.index(3), dim = 2 + r.index(4);
    const std::size_t points = 1 + r.index(5), h = 4 + r.index(3), w = 4 + r.index(3);
    auto att = std::make_shared<DeformAttn<double>>(qd, ch, dim, points, r);
    for (auto& x : att->offset.weight.mutable_data()) x = r.normal(0, 0.3);
    for (auto& x : att->weight.weight.mutable_data()) x = r.normal(0, 0.5);
    TD base = TD::zeros({n, k, 2});
    for (std::size_t i = 0; i < n * k; ++i) {
      base.mutable_data()[2 * i] = r.uniform(1.2, double(w) - 2.2);
      base.mutable_data()[2 * i + 1] = r.uniform(1.2, double(h) - 2.2);
    }
    TD query = random_tensor(r, {n, k, qd});
    TD map = random_tensor(r, {ch, h, w});
    const TD wout = random_tensor(r, {n, dim});
    auto inputs = module_inputs({query, base, map}, [&](const ParamVisitor<double>& f) { att->visit("attn", f); });
    return Case{[=] { return readout((*att)(query, base, map).output, wout); }, inputs};
  });
  run(c, "cross-attention", rng, [](Rng& r) {
    const std::size_t n = 1 + r.index(3), m = 1 + r.index(4), dim = 2 + r.index(5);
    auto att = std::make_shared<CrossAttn<double>>(dim, r);
    for (auto& x : att->norm.gain.mutable_data()) x = r.uniform(0.5, 1.5);
    for (auto& x : att->norm.bias.mutable_data()) x = r.uniform(-0.5, 0.5);
    TD query = random_tensor(r, {n, dim});
    TD memory = random_tensor(r, {n, m, dim});
    const TD wout = random_tensor(r, {n, dim});
    auto inputs = module_inputs({query, memory}, [&](const ParamVisitor<double>& f) { att->visit("attn", f); });
    return Case{[=] { return readout((*att)(query, memory), wout); }, inputs};
  });
  run(c, "encoder", rng, [](Rng& r) {
    auto enc = std::make_shared<Encoder<double>>(EncoderConfig{2, 8}, r);
    enc->visit("enc", [&r](const std::string&, TD& t) {
      for (auto& x : t.mutable_data()) x += r.normal(0, 0.05);
    });
    TD image = random_tensor(r, {3, 16, 16}, 0, 1);
    const TD wout = random_tensor(r, {8, 4, 4});
    auto inputs = module_inputs({image}, [&](const ParamVisitor<double>& f) { enc->visit("enc", f); });
    return Case{[=] { return readout((*enc)(image), wout); }, inputs, 300};
  });
}

FrameGT random_gt(Rng& r, std::size_t n, std::size_t h, std::size_t w) {
  FrameGT gt;
  for (std::size_t i = 0; i < n; ++i) {
    gt.x.push_back(r.uniform(0, double(w - 1)));
    gt.y.push_back(r.uniform(0, double(h - 1)));
    gt.visible.push_back(r.index(4) != 0);
  }
  gt.visible[0] = 1;
  return gt;
}

void loss_cases(Criterion& c, Rng& rng) {
  constexpr std::size_t H = 16, W = 16;  // 4 x 4 cells
  run(c, "cls loss", rng, [](Rng& r) {
    const std::size_t n = 1 + r.index(4), layers = 1 + r.index(3);
    const FrameGT gt = random_gt(r, n, H, W);
    std::vector<LayerOutput<double>> outs(layers);
    std::vector<TD> inputs;
    for (auto& lo : outs) {
      lo.correlation = random_tensor(r, {n, 16}, -2, 2);
      inputs.push_back(lo.correlation);
    }
    return Case{[=] { return cls_loss(outs, gt, H, W); }, inputs};
  });
  run(c, "reg loss", rng, [](Rng& r) {
    const std::size_t n = 1 + r.index(4);
    const FrameGT gt = random_gt(r, n, H, W);
    TD r_last = random_tensor(r, {n, 2}, 0, 3);
    TD delta = away_from_zero(r, {n, 2}, 0.05);
    for (std::size_t i = 0; i < n; ++i) {
      delta.mutable_data()[2 * i] += gt.x[i] / 4 - r_last.data()[2 * i];
      delta.mutable_data()[2 * i + 1] += gt.y[i] / 4 - r_last.data()[2 * i + 1];
    }
    return Case{[=] { return reg_loss(delta, r_last, gt); }, {delta}};  // r_last is a constant reference
  });
  run(c, "visibility loss", rng, [](Rng& r) {
    const std::size_t n = 1 + r.index(5);
    const FrameGT gt = random_gt(r, n, H, W);
    TD logit = random_tensor(r, {n}, -3, 3);
    return Case{[=] { return vis_loss(logit, gt); }, {logit}};
  });
  run(c, "confidence loss", rng, [](Rng& r) {
    const std::size_t n = 1 + r.index(5);
    const FrameGT gt = random_gt(r, n, H, W);
    TD logit = random_tensor(r, {n}, -3, 3);
    TD p = TD::zeros({n, 2});
    for (std::size_t i = 0; i < n; ++i) {  // half near the ground truth, half far
      const double off = r.index(2) ? 0.05 : 3.0;
      p.mutable_data()[2 * i] = gt.x[i] + off;
      p.mutable_data()[2 * i + 1] = gt.y[i];
    }
    return Case{[=] { return conf_loss(logit, p, gt, W); }, {logit}};
  });
  run(c, "reference confidence loss", rng, [](Rng& r) {
    const std::size_t n = 1 + r.index(3), layers = 1 + r.index(3);
    const FrameGT gt = random_gt(r, n, H, W);
    std::vector<LayerOutput<double>> outs(layers);
    std::vector<TD> inputs;
    for (auto& lo : outs) {
      const std::size_t k = 1 + r.index(4);
      lo.refs.k = k;
      std::vector<double> xy(n * k * 2);
      for (auto& v : xy) v = double(r.index(4));
      lo.refs.r = TD::from({n, k, 2}, xy);
      lo.refs.rho_r = random_tensor(r, {n, k}, -3, 3);
      inputs.push_back(lo.refs.rho_r);
    }
    return Case{[=] { return conf_ref_loss(outs, gt, W); }, inputs};
  });
}

// Whole tracker on T frames with the top-k choices frozen to those of the
// unperturbed forward pass.
void end_to_end(Criterion& c, Rng& rng, std::size_t frames, double* max_rel) {
  constexpr std::size_t H = 16, W = 16, N = 2;
  TrackerParams<double> params(micro_config(), rng.bits());
  perturb_params(params, rng, 0.1);
  std::vector<TD> images;
  for (std::size_t t = 0; t < frames; ++t) images.push_back(random_tensor(rng, {3, H, W}, 0, 1));
  TrackTable gt(frames, N);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      gt.x[gt.at(t, i)] = rng.uniform(0.5, W - 1.5);
      gt.y[gt.at(t, i)] = rng.uniform(0.5, H - 1.5);
      gt.visible[gt.at(t, i)] = t == 0 || rng.index(3) != 0;
    }
  }
  const TD q = query_points<double>(gt);

  std::vector<std::vector<std::vector<std::size_t>>> forced(frames);
  {
    QueryState<double> s = init_queries(params, params.encoder(images[0]), q, H, W);
    for (std::size_t t = 1; t < frames; ++t) {
      const TrackOutput<double> out = step(params, s, params.encoder(images[t]));
      for (const auto& lo : out.layers) forced[t].push_back(lo.refs.index);
    }
  }
  auto loss = [&params, &images, &gt, &forced, q, frames]() {
    QueryState<double> s = init_queries(params, params.encoder(images[0]), q, H, W);
    TD total;
    for (std::size_t t = 1; t < frames; ++t) {
      StepOptions opt;
      opt.forced_refs = &forced[t];
      const TrackOutput<double> out = step(params, s, params.encoder(images[t]), opt);
      const TD l = frame_losses(out, frame_gt(gt, t), H, W, 1.0).total;
      total = total.defined() ? add(total, l) : l;
    }
    return total;
  };
  std::vector<TD> inputs;
  params.visit([&inputs](const std::string&, TD& t) { inputs.push_back(t); });
  const GradReport r = grad_check(loss, inputs, kModelTol, rng, 600);
  *max_rel = std::max(*max_rel, r.max_rel);
  c.add(fmt("grad end-to-end %zu-frame micro-model", frames), r.ok() && r.nonzero * 2 > r.entries,
        fmt("%zu of %zu parameters probed, %zu nonzero, max rel %.2e, max abs %.2e", r.entries, params.parameter_count(),
            r.nonzero, r.max_rel, r.max_abs));
}

}  // namespace

Criterion gradient_suite(std::uint64_t seed) {
  Stopwatch sw;
  Criterion c;
  c.id = 1;
  c.title = "gradient suite";
  Rng rng(seed);
  op_cases(c, rng);
  module_cases(c, rng);
  loss_cases(c, rng);
  double e2e = 0;
  end_to_end(c, rng, 2, &e2e);
  end_to_end(c, rng, 3, &e2e);
  c.seconds = sw.seconds();
  c.add("runtime under 2 minutes", c.seconds < 120.0, fmt("%.1fs", c.seconds));
  c.summary = fmt("end-to-end max rel %.2e", e2e);
  return c;
}

}  // namespace lbm::checks
