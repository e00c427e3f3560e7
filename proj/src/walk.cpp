#include "insetopt/walk.hpp"

#include <cmath>

namespace insetopt {

namespace {

LayeredLatent lerp_latent(const LayeredLatent& a, const LayeredLatent& b, double f) {
  LayeredLatent out = a;
  for (std::size_t i = 0; i < out.base.size(); ++i)
    out.base[i] = (1.0 - f) * a.base[i] + f * b.base[i];
  for (int l = 0; l < out.n_layers(); ++l)
    for (std::size_t i = 0; i < out.deltas[l].size(); ++i)
      out.deltas[l][i] = (1.0 - f) * a.deltas[l][i] + f * b.deltas[l][i];
  return out;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) s += std::fabs(da[i] - db[i]);
  return s / static_cast<double>(da.size());
}

std::vector<double> flat_latent(const LayeredLatent& l) {
  std::vector<double> f = l.base;
  for (const auto& d : l.deltas) f.insert(f.end(), d.begin(), d.end());
  return f;
}

void set_from_flat(LayeredLatent& l, const std::vector<double>& f) {
  const int d = l.dim();
  std::copy(f.begin(), f.begin() + d, l.base.begin());
  for (int i = 0; i < l.n_layers(); ++i)
    std::copy(f.begin() + d + static_cast<std::size_t>(i) * d,
              f.begin() + d + static_cast<std::size_t>(i + 1) * d, l.deltas[i].begin());
}

Tensor crop_to_inset(const Tensor& color, const BBox& box, int r) {
  return resize_bilinear(crop(color, box), r, r);
}

}  // namespace

LayeredLatent walk_frame_latent(const LayeredLatent& w_prev, const LayeredLatent& w_end, int i,
                                int n) {
  if (i < 0 || i >= n)
    throw std::invalid_argument("walk_frame_latent: need 0 <= i < n, got i=" + std::to_string(i) +
                                " n=" + std::to_string(n));
  const double f = 1.0 / static_cast<double>(n - i);
  return lerp_latent(w_prev, w_end, f);
}

LayeredLatent optimize_frame(const LayeredLatent& w_next, const Tensor& canvas_frame,
                             const BBox& bbox_f, const LayeredLatent& w_frame_start,
                             const Tensor& prev_composite, int budget,
                             const GeneratorSpec& inset_spec, const FeatureExtractor& fx,
                             const LambdaTable& lambdas, double lr) {
  if (budget <= 0) return w_next;
  const int r = inset_spec.out_resolution();
  Tensor color = canvas_frame.dim(0) > 3 ? slice_channels(canvas_frame, 0, 3) : canvas_frame;

  const Tensor crop64 = crop_to_inset(color, bbox_f, r);
  const BBox full{0, 0, r, r};
  const Tensor border_mask = Region::border(full).mask(3, r, r);
  const Tensor interior_mask = Region::interior(full).mask(3, r, r);
  double interior_count = 0.0;
  for (double v : interior_mask.data()) interior_count += v;

  const Tensor anchor = generate_image(w_frame_start, inset_spec);
  const auto anchor_masked_stack = fx.extract(mul(anchor, interior_mask));
  const auto crop_masked_stack = fx.extract(mul(crop64, border_mask));
  const Tensor crop_border = border_region(crop64, kBorderWidth);
  const Tensor prev_border =
      border_region(crop_to_inset(prev_composite, bbox_f, r), kBorderWidth);

  // (a) edge coherence with the canvas frame, (b) identity preservation
  // against the frame's starting point, (c) minimal border change against
  // the previous frame
  auto build_loss = [&](const Tensor& img) {
    Tensor img_border = border_region(img, kBorderWidth);
    Tensor loss = mul_scalar(l1_mean(crop_border, img_border), lambdas.l4_face);
    loss = add(loss, mul_scalar(perceptual_distance(mul(img, border_mask), crop_masked_stack, fx),
                                lambdas.l3));
    loss = add(loss, mul_scalar(mul_scalar(sum(mul(abs(sub(img, anchor)), interior_mask)),
                                           1.0 / interior_count),
                                lambdas.l7));
    loss = add(loss, mul_scalar(
                         perceptual_distance(mul(img, interior_mask), anchor_masked_stack, fx),
                         lambdas.l8));
    return add(loss, mul_scalar(l1_mean(img_border, prev_border), lambdas.l4_face / 2.0));
  };

  LayeredLatent w = w_next;
  LayeredLatent best = w;
  double best_loss = std::numeric_limits<double>::infinity();
  AdamState adam = AdamState::for_size(flat_latent(w).size());

  for (int it = 0; it < budget; ++it) {
    Tape tape;
    LatentNodes nodes = bind_latent(tape, w);
    Tensor loss = build_loss(generate(nodes, inset_spec));
    const double value = loss.value();
    if (std::isnan(value)) throw std::runtime_error("walk frame optimization produced NaN");
    if (value < best_loss) {
      best_loss = value;
      best = w;
    }
    std::vector<Tensor> grads = tape.gradients(loss, {nodes.base, nodes.deltas});
    std::vector<double> g(grads[0].data().begin(), grads[0].data().end());
    g.insert(g.end(), grads[1].data().begin(), grads[1].data().end());
    std::vector<double> p = flat_latent(w);
    adam_update(adam, {p.data(), p.size()}, {g.data(), g.size()}, lr);
    set_from_flat(w, p);
  }
  // the final iterate wins only if it improved on the best seen
  if (build_loss(generate_image(w, inset_spec)).value() < best_loss) best = w;
  return best;
}

WalkResult render_walk(const WalkPlan& plan, const GeneratorSpec& canvas_spec,
                       const GeneratorSpec& inset_spec, const FeatureExtractor& fx,
                       const LambdaTable& lambdas, double lr_inset, int budget_override) {
  if (plan.keyframes.size() < 2)
    throw std::invalid_argument("render_walk: need at least two keyframes");
  if (plan.frames_per_segment < 2)
    throw std::invalid_argument("render_walk: frames_per_segment must be >= 2");
  const int n = plan.frames_per_segment;
  const int budget = budget_override >= 0 ? budget_override : plan.budget;

  std::vector<Keyframe> keys = plan.keyframes;
  if (plan.cyclic) keys.push_back(keys.front());

  const int r = inset_spec.out_resolution();
  WalkResult res;

  auto keyframe_composite = [&](const Keyframe& k, Tensor* color_out) {
    Tensor color = slice_channels(generate_image(k.w_canvas, canvas_spec), 0, 3);
    if (color_out) *color_out = color;
    return compose(color, generate_image(k.w_inset, inset_spec), k.bbox);
  };

  auto emit = [&](Tensor composite, const BBox& box, const Tensor& crop64,
                  const Tensor& inset_img) {
    WalkFrame f;
    f.bbox = box;
    f.border_l1 = border_l1_value(crop64, inset_img);
    if (!res.frames.empty())
      f.temporal_delta = mean_abs_diff(composite, res.frames.back().composite);
    f.composite = std::move(composite);
    res.frames.push_back(std::move(f));
  };

  for (std::size_t s = 0; s + 1 < keys.size(); ++s) {
    const Keyframe& ka = keys[s];
    const Keyframe& kb = keys[s + 1];
    Tensor color_a;
    Tensor comp_a = keyframe_composite(ka, &color_a);
    if (s == 0)
      emit(std::move(comp_a), ka.bbox, crop_to_inset(color_a, ka.bbox, r),
           generate_image(ka.w_inset, inset_spec));

    LayeredLatent w_prev = ka.w_inset;
    Tensor prev_comp = res.frames.back().composite;
    for (int i = 1; i < n; ++i) {
      const double f = static_cast<double>(i) / (n - 1);
      if (i == n - 1) {
        // keyframes are emitted as-is
        Tensor color_b;
        Tensor comp_b = keyframe_composite(kb, &color_b);
        emit(std::move(comp_b), kb.bbox, crop_to_inset(color_b, kb.bbox, r),
             generate_image(kb.w_inset, inset_spec));
        break;
      }
      LayeredLatent w_next = walk_frame_latent(w_prev, kb.w_inset, i, n);
      const LayeredLatent w_canvas_f = [&] {
        LayeredLatent l = ka.w_canvas;
        for (std::size_t x = 0; x < l.base.size(); ++x)
          l.base[x] = (1.0 - f) * ka.w_canvas.base[x] + f * kb.w_canvas.base[x];
        for (int lay = 0; lay < l.n_layers(); ++lay)
          for (std::size_t x = 0; x < l.deltas[lay].size(); ++x)
            l.deltas[lay][x] =
                (1.0 - f) * ka.w_canvas.deltas[lay][x] + f * kb.w_canvas.deltas[lay][x];
        return l;
      }();
      const BBox bbox_f = lerp_bbox(ka.bbox, kb.bbox, f);
      Tensor canvas_frame = generate_image(w_canvas_f, canvas_spec);
      Tensor color = slice_channels(canvas_frame, 0, 3);
      LayeredLatent w_opt = optimize_frame(w_next, canvas_frame, bbox_f, w_next, prev_comp,
                                           budget, inset_spec, fx, lambdas, lr_inset);
      Tensor inset_img = generate_image(w_opt, inset_spec);
      Tensor comp = compose(color, inset_img, bbox_f);
      prev_comp = comp;
      emit(std::move(comp), bbox_f, crop_to_inset(color, bbox_f, r), inset_img);
      w_prev = w_opt;
    }
  }

  // aggregate metrics
  double border_sum = 0.0, temporal_sum = 0.0, border_delta_sum = 0.0;
  for (std::size_t i = 0; i < res.frames.size(); ++i) {
    border_sum += res.frames[i].border_l1;
    if (i > 0) {
      temporal_sum += res.frames[i].temporal_delta;
      Tensor ba = border_region(crop(res.frames[i - 1].composite, res.frames[i].bbox),
                                kBorderWidth);
      Tensor bb =
          border_region(crop(res.frames[i].composite, res.frames[i].bbox), kBorderWidth);
      border_delta_sum += l1_mean(ba, bb).value();
    }
  }
  const double nf = static_cast<double>(res.frames.size());
  res.mean_border_l1 = border_sum / nf;
  if (res.frames.size() > 1) {
    res.mean_temporal_delta = temporal_sum / (nf - 1.0);
    res.mean_border_delta = border_delta_sum / (nf - 1.0);
  }
  return res;
}

}  // namespace insetopt
