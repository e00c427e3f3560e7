#include "insetopt/composer.hpp"

#include <cmath>
#include <cstring>

namespace insetopt {

std::string mode_name(ObjectiveMode mode) {
  switch (mode) {
    case ObjectiveMode::refine_inset: return "refine_inset";
    case ObjectiveMode::joint_refine: return "joint_refine";
    case ObjectiveMode::body_for_face: return "body_for_face";
    case ObjectiveMode::montage: return "montage";
    case ObjectiveMode::multi_inset: return "multi_inset";
  }
  return "?";
}

ObjectiveMode mode_from_name(const std::string& name) {
  for (ObjectiveMode m : {ObjectiveMode::refine_inset, ObjectiveMode::joint_refine,
                          ObjectiveMode::body_for_face, ObjectiveMode::montage,
                          ObjectiveMode::multi_inset})
    if (mode_name(m) == name) return m;
  throw std::invalid_argument("unknown objective mode: " + name);
}

std::vector<std::string> ObjectiveSpec::term_names() const {
  switch (mode) {
    case ObjectiveMode::refine_inset: return {"coarse_appearance", "border"};
    case ObjectiveMode::joint_refine:
      return {"coarse_appearance", "border", "latent_reg", "body_preserve"};
    case ObjectiveMode::body_for_face:
      return {"coarse_appearance", "border", "latent_reg", "face_identity"};
    case ObjectiveMode::montage:
      return {"coarse_appearance", "border", "latent_reg", "face_identity", "body_preserve"};
    case ObjectiveMode::multi_inset:
      return {"coarse_appearance", "border", "latent_reg"};
  }
  return {};
}

int bbox_reeval_until(ObjectiveMode mode, const ScheduleConfig& cfg) {
  const bool face_side =
      mode == ObjectiveMode::refine_inset || mode == ObjectiveMode::joint_refine;
  return face_side ? cfg.bbox_reeval_until_face : cfg.bbox_reeval_until_body;
}

bool should_stop(const OptState& state, const ScheduleConfig& cfg) {
  if (state.iteration >= cfg.max_iters) return true;
  if (state.border_l1.empty()) return false;
  for (double b : state.border_l1)
    if (!(b < cfg.stop_border_l1)) return false;
  return true;
}

std::vector<std::string> trace_columns(int n_insets) {
  std::vector<std::string> cols = {"iteration", "phase", "bbox_reeval"};
  auto per_inset = [&](const std::string& name) {
    for (int k = 0; k < n_insets; ++k) cols.push_back(name + "_" + std::to_string(k));
  };
  per_inset("l1_coarse");
  per_inset("percep_coarse");
  per_inset("l1_border");
  per_inset("percep_border");
  cols.push_back("reg_canvas");
  per_inset("reg_inset");
  cols.push_back("l1_exterior");
  cols.push_back("percep_exterior");
  per_inset("l1_interior");
  per_inset("percep_interior");
  cols.push_back("phase_total");
  cols.push_back("total");
  per_inset("bbox_row");
  per_inset("bbox_col");
  per_inset("bbox_h");
  per_inset("bbox_w");
  cols.push_back("upd_canvas");
  per_inset("upd_inset");
  return cols;
}

std::vector<double> trace_values(const TraceRow& row) {
  std::vector<double> v = {static_cast<double>(row.iteration),
                           row.phase == "canvas" ? 0.0 : 1.0 + std::stod(row.phase.substr(5)),
                           row.bbox_reeval ? 1.0 : 0.0};
  auto push = [&](const std::vector<double>& xs) { v.insert(v.end(), xs.begin(), xs.end()); };
  push(row.l1_coarse);
  push(row.percep_coarse);
  push(row.l1_border);
  push(row.percep_border);
  v.push_back(row.reg_canvas);
  push(row.reg_inset);
  v.push_back(row.l1_exterior);
  v.push_back(row.percep_exterior);
  push(row.l1_interior);
  push(row.percep_interior);
  v.push_back(row.phase_total);
  v.push_back(row.total);
  for (const BBox& b : row.bboxes) v.push_back(b.row);
  for (const BBox& b : row.bboxes) v.push_back(b.col);
  for (const BBox& b : row.bboxes) v.push_back(b.height);
  for (const BBox& b : row.bboxes) v.push_back(b.width);
  v.push_back(row.upd_canvas);
  push(row.upd_inset);
  return v;
}

Tensor compose(const Tensor& canvas, const Tensor& inset, const BBox& bbox) {
  if (canvas.rank() != 3 || canvas.dim(0) < 3)
    throw std::invalid_argument("compose: canvas must be [>=3,h,w]");
  if (inset.rank() != 3 || inset.dim(0) < 3)
    throw std::invalid_argument("compose: inset must be [>=3,h,w]");
  const int h = canvas.dim(1), w = canvas.dim(2);
  if (bbox.row < 0 || bbox.col < 0 || bbox.height <= 0 || bbox.width <= 0 ||
      bbox.row_end() > h || bbox.col_end() > w)
    throw std::invalid_argument("compose: bbox (" + std::to_string(bbox.row) + "," +
                                std::to_string(bbox.col) + "," + std::to_string(bbox.height) +
                                "," + std::to_string(bbox.width) + ") outside " +
                                shape_str(canvas.shape()));
  Tensor out(Shape{3, h, w});
  const double* src = canvas.data().data();
  double* dst = out.data().data();
  for (int c = 0; c < 3; ++c)
    std::memcpy(dst + static_cast<std::int64_t>(c) * h * w,
                src + static_cast<std::int64_t>(c) * h * w,
                sizeof(double) * static_cast<std::size_t>(h) * w);
  Tensor color = inset;
  if (inset.dim(0) != 3)
    color = Tensor(Shape{3, inset.dim(1), inset.dim(2)},
                   std::vector<double>(inset.data().begin(),
                                       inset.data().begin() + 3 * inset.dim(1) * inset.dim(2)));
  Tensor patch = (color.dim(1) == bbox.height && color.dim(2) == bbox.width)
                     ? color
                     : resize_bilinear(color, bbox.height, bbox.width);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < bbox.height; ++i)
      std::memcpy(
          dst + (static_cast<std::int64_t>(c) * h + bbox.row + i) * w + bbox.col,
          patch.data().data() + (static_cast<std::int64_t>(c) * bbox.height + i) * bbox.width,
          sizeof(double) * bbox.width);
  return out;
}

namespace {

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

double plain_reg(const LayeredLatent& l, const std::vector<double>& w_avg, double r1, double r2) {
  double base_norm = 0.0;
  for (std::size_t i = 0; i < l.base.size(); ++i) {
    const double d = l.base[i] - w_avg[i];
    base_norm += d * d;
  }
  double delta_sum = 0.0;
  for (const auto& row : l.deltas) {
    double ss = 0.0;
    for (double x : row) ss += x * x;
    delta_sum += std::sqrt(ss);
  }
  return r1 * std::sqrt(base_norm) + r2 * delta_sum;
}

double masked_l1_plain(const Tensor& a, const Tensor& b, const Tensor& mask, double count) {
  double s = 0.0;
  auto da = a.data(), db = b.data(), dm = mask.data();
  for (std::size_t i = 0; i < da.size(); ++i) s += std::fabs(da[i] - db[i]) * dm[i];
  return s / count;
}

Tensor detached(const Tensor& t) {
  return Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

// State and caches for one alternating optimization job. One instance runs
// one job start to finish; nothing is shared between jobs.
class Engine {
 public:
  Engine(const ObjectiveSpec& obj, const ComposerInputs& io, const ScheduleConfig& cfg,
         const LayeredLatent& w_canvas_init, const std::vector<LayeredLatent>& w_insets_init,
         bool canvas_fixed, Tensor fixed_canvas)
      : obj_(obj),
        io_(io),
        cfg_(cfg),
        k_(static_cast<int>(w_insets_init.size())),
        canvas_fixed_(canvas_fixed),
        fixed_canvas_(std::move(fixed_canvas)),
        w_canvas_(w_canvas_init),
        w_insets_(w_insets_init) {
    if (k_ < 1) throw std::invalid_argument("optimization needs at least one inset latent");
    if (static_cast<int>(io_.inset_specs.size()) != k_)
      throw std::invalid_argument("one generator spec per inset latent required");
    if (has_body_preserve() && !obj_.ref_body.defined())
      throw std::invalid_argument(mode_name(obj_.mode) + ": ref_body image required");
    if (has_face_identity() && !obj_.ref_face.defined())
      throw std::invalid_argument(mode_name(obj_.mode) + ": ref_face image required");

    state_.adam.push_back(AdamState::for_size(flat_latent(w_canvas_).size()));
    for (const auto& wi : w_insets_) state_.adam.push_back(AdamState::for_size(flat_latent(wi).size()));
    state_.face_snapshots.resize(k_);
    terms_.resize(k_);
    inset_img_.resize(k_);
    inset_stack_.resize(k_);
    inset_masked_stack_.resize(k_);
    crop64_.resize(k_);
    crop64_stack_.resize(k_);
    crop64_masked_stack_.resize(k_);
    border_mask_.resize(k_);
    interior_mask_.resize(k_);
    interior_count_.assign(k_, 0.0);
  }

  OptResult run() {
    refresh_canvas();
    detect_boxes();  // initial detection failure propagates to the caller
    for (int j = 0; j < k_; ++j) refresh_inset(j);
    refresh_crops();
    for (int j = 0; j < k_; ++j) refresh_plain_terms(j);
    refresh_body_preserve();

    OptResult res;
    res.init_border_l1 = max_border();
    state_.border_l1 = border_values();
    state_.best_total = canonical_total();
    state_.best_iteration = -1;
    state_.best_composite = current_composite();
    best_canvas_ = w_canvas_;
    best_insets_ = w_insets_;
    best_boxes_ = state_.bboxes;
    best_border_ = max_border();
    res.init_seam_energy = seam_for(state_.best_composite, state_.bboxes);

    int iter = 0;
    for (;; ++iter) {
      state_.iteration = iter;
      if (should_stop(state_, cfg_)) break;
      run_iteration(iter);
    }

    res.iterations_run = iter;
    res.stopped_early = iter < cfg_.max_iters;
    res.w_canvas = best_canvas_;
    res.w_insets = best_insets_;
    res.composite = state_.best_composite;
    res.bboxes = best_boxes_;
    res.best_total = state_.best_total;
    res.best_iteration = state_.best_iteration;
    res.final_border_l1 = best_border_;
    res.final_seam_energy = seam_for(state_.best_composite, best_boxes_);
    res.trace = std::move(trace_);
    return res;
  }

 private:
  struct InsetTerms {
    double l1_coarse = 0.0, percep_coarse = 0.0;
    double l1_border = 0.0, percep_border = 0.0;
    double l1_interior = 0.0, percep_interior = 0.0;
  };

  bool has_reg() const { return obj_.mode != ObjectiveMode::refine_inset; }
  bool has_body_preserve() const {
    return obj_.mode == ObjectiveMode::joint_refine || obj_.mode == ObjectiveMode::montage;
  }
  bool has_face_identity() const {
    return obj_.mode == ObjectiveMode::body_for_face || obj_.mode == ObjectiveMode::montage;
  }
  bool snapshot_active() const {
    return obj_.mode == ObjectiveMode::refine_inset && state_.face_snapshots[0].defined();
  }

  int phase_at(int iter) const {
    if (canvas_fixed_) return 1;
    std::vector<int> cycle;
    switch (obj_.mode) {
      case ObjectiveMode::joint_refine:
        cycle = {1, 0};
        break;
      case ObjectiveMode::body_for_face:
        if (iter < cfg_.canvas_head_start) return 0;
        iter -= cfg_.canvas_head_start;
        cycle = {1, 0};
        break;
      case ObjectiveMode::montage:
      case ObjectiveMode::multi_inset:
        cycle.push_back(0);
        for (int j = 0; j < k_; ++j) cycle.push_back(1 + j);
        break;
      case ObjectiveMode::refine_inset:
        return 1;
    }
    return cycle[(iter / cfg_.switch_every) % cycle.size()];
  }

  void refresh_canvas() {
    canvas_img_ = canvas_fixed_ ? fixed_canvas_ : generate_image(w_canvas_, *io_.canvas_spec);
    canvas_color_ = detached(slice_channels(canvas_img_, 0, 3));
  }

  void detect_boxes() {
    std::vector<BBox> boxes = detect_bboxes(canvas_img_);
    if (static_cast<int>(boxes.size()) < k_) throw NoInsetRegion();
    if (k_ == 1 && boxes.size() > 1) {
      // single-inset contract: keep the largest component
      std::sort(boxes.begin(), boxes.end(),
                [](const BBox& a, const BBox& b) { return a.area() > b.area(); });
    }
    boxes.resize(k_);
    state_.bboxes = boxes;
    if (has_body_preserve()) {
      if (obj_.ref_body.shape() != canvas_color_.shape())
        throw std::invalid_argument("ref_body resolution does not match the canvas generator");
      exterior_mask_ =
          Region::exterior(state_.bboxes[0]).mask(3, canvas_color_.dim(1), canvas_color_.dim(2));
      exterior_count_ = 0.0;
      for (double v : exterior_mask_.data()) exterior_count_ += v;
      ref_body_masked_stack_ = io_.fx->extract(mul(obj_.ref_body, exterior_mask_));
    }
  }

  void refresh_inset(int j) {
    inset_img_[j] = generate_image(w_insets_[j], *io_.inset_specs[j]);
    ensure_inset_masks(j);
    inset_stack_[j] = io_.fx->extract(inset_img_[j]);
    inset_masked_stack_[j] = io_.fx->extract(mul(inset_img_[j], border_mask_[j]));
  }

  void refresh_crops() {
    for (int j = 0; j < k_; ++j) {
      const int r = io_.inset_specs[j]->out_resolution();
      ensure_inset_masks(j);
      crop64_[j] = detached(resize_bilinear(crop(canvas_color_, state_.bboxes[j]), r, r));
      crop64_stack_[j] = io_.fx->extract(crop64_[j]);
      crop64_masked_stack_[j] = io_.fx->extract(mul(crop64_[j], border_mask_[j]));
    }
  }

  void ensure_inset_masks(int j) {
    if (border_mask_[j].defined()) return;
    const int r = io_.inset_specs[j]->out_resolution();
    const BBox full{0, 0, r, r};
    border_mask_[j] = Region::border(full).mask(3, r, r);
    interior_mask_[j] = Region::interior(full).mask(3, r, r);
    interior_count_[j] = 0.0;
    for (double v : interior_mask_[j].data()) interior_count_[j] += v;
    if (has_face_identity()) {
      if (obj_.ref_face.dim(1) != r || obj_.ref_face.dim(2) != r)
        throw std::invalid_argument("ref_face resolution does not match the inset generator");
      ref_face_masked_stack_ = io_.fx->extract(mul(obj_.ref_face, interior_mask_[j]));
    }
  }

  void refresh_plain_terms(int j) {
    InsetTerms& t = terms_[j];
    t.l1_coarse = l1_mean(crop64_[j], inset_img_[j]).value();
    t.percep_coarse = perceptual_distance(crop64_[j], inset_stack_[j], *io_.fx).value();
    t.l1_border = border_l1_value(crop64_[j], inset_img_[j]);
    t.percep_border =
        perceptual_distance(mul(crop64_[j], border_mask_[j]), inset_masked_stack_[j], *io_.fx)
            .value();
    if (has_face_identity()) {
      t.l1_interior =
          masked_l1_plain(inset_img_[j], obj_.ref_face, interior_mask_[j], interior_count_[j]);
      t.percep_interior = perceptual_distance(mul(inset_img_[j], interior_mask_[j]),
                                              ref_face_masked_stack_, *io_.fx)
                              .value();
    } else if (snapshot_active()) {
      t.l1_interior = masked_l1_plain(inset_img_[j], state_.face_snapshots[j], interior_mask_[j],
                                      interior_count_[j]);
      t.percep_interior = perceptual_distance(mul(inset_img_[j], interior_mask_[j]),
                                              snapshot_masked_stack_, *io_.fx)
                              .value();
    }
  }

  void refresh_body_preserve() {
    if (!has_body_preserve()) return;
    l1_exterior_ = masked_l1_plain(canvas_color_, obj_.ref_body, exterior_mask_, exterior_count_);
    percep_exterior_ = perceptual_distance(mul(canvas_color_, exterior_mask_),
                                           ref_body_masked_stack_, *io_.fx)
                           .value();
  }

  std::vector<double> border_values() const {
    std::vector<double> b(k_);
    for (int j = 0; j < k_; ++j) b[j] = terms_[j].l1_border;
    return b;
  }
  double max_border() const {
    double m = 0.0;
    for (const auto& t : terms_) m = std::max(m, t.l1_border);
    return m;
  }

  Tensor current_composite() const {
    Tensor out = canvas_color_;
    for (int j = 0; j < k_; ++j) out = compose(out, inset_img_[j], state_.bboxes[j]);
    return out;
  }

  double seam_for(const Tensor& composite, const std::vector<BBox>& boxes) const {
    double s = 0.0;
    for (const BBox& b : boxes) s += seam_energy(composite, b);
    return s / static_cast<double>(boxes.size());
  }

  // Single scalar used for best-so-far tracking and the trace "total"
  // column: the mode objective with each term at its defining weight column
  // (seam terms at the face column, preservation and regularization terms at
  // their own columns).
  double canonical_total() const {
    const LambdaTable& L = obj_.lambdas;
    double t = 0.0;
    for (const auto& tm : terms_) {
      t += L.l1 * tm.l1_coarse + L.l2 * tm.percep_coarse;
      t += L.l4_face * tm.l1_border + L.l3 * tm.percep_border;
    }
    if (has_reg()) {
      t += plain_reg(w_canvas_, io_.w_avg_canvas, L.r1_body, L.r2);
      for (int j = 0; j < k_; ++j)
        t += plain_reg(w_insets_[j], io_.w_avg_insets[j], L.r1_face, L.r2);
    }
    if (has_body_preserve()) t += L.l5 * l1_exterior_ + L.l6 * percep_exterior_;
    if (has_face_identity() || snapshot_active())
      for (const auto& tm : terms_) t += L.l7 * tm.l1_interior + L.l8 * tm.percep_interior;
    return t;
  }

  void run_iteration(int iter) {
    const int until = bbox_reeval_until(obj_.mode, cfg_);
    bool reeval = iter == 0;  // initial detection happened at setup
    if (!canvas_fixed_ && iter > 0 && iter % cfg_.bbox_reeval_every == 0 && iter < until) {
      try {
        detect_boxes();
      } catch (const NoInsetRegion&) {
        throw OptimizationAbort(iter, "inset region lost during optimization", std::move(trace_));
      }
      refresh_crops();
      for (int j = 0; j < k_; ++j) refresh_plain_terms(j);
      refresh_body_preserve();
      reeval = true;
    }

    const int phase = phase_at(iter);
    state_.phase = phase;
    const LambdaTable& L = obj_.lambdas;

    Tape tape;
    Tensor phase_loss;
    LatentNodes nodes;
    Tensor live_color;  // canvas phase
    Tensor live_inset;  // inset phase
    auto add_term = [&](Tensor term, double weight) {
      Tensor wt = mul_scalar(std::move(term), weight);
      phase_loss = phase_loss.defined() ? add(phase_loss, wt) : wt;
    };

    if (phase == 0) {
      nodes = bind_latent(tape, w_canvas_);
      Tensor img = generate(nodes, *io_.canvas_spec);
      live_color = slice_channels(img, 0, 3);
      for (int j = 0; j < k_; ++j) {
        const int r = io_.inset_specs[j]->out_resolution();
        Tensor c64 = resize_bilinear(crop(live_color, state_.bboxes[j]), r, r);
        Tensor l1c = l1_mean(c64, inset_img_[j]);
        Tensor pc = perceptual_distance(c64, inset_stack_[j], *io_.fx);
        Tensor l1b =
            l1_mean(border_region(c64, kBorderWidth), border_region(inset_img_[j], kBorderWidth));
        terms_[j].l1_coarse = l1c.value();
        terms_[j].percep_coarse = pc.value();
        terms_[j].l1_border = l1b.value();
        // zero-weight on the canvas side; refresh the logged value off-tape
        terms_[j].percep_border =
            perceptual_distance(mul(detached(c64), border_mask_[j]), inset_masked_stack_[j],
                                *io_.fx)
                .value();
        add_term(std::move(l1c), L.l1);
        add_term(std::move(pc), L.l2);
        add_term(std::move(l1b), L.l4_body);
      }
      if (has_reg()) add_term(latent_regularizer(nodes, io_.w_avg_canvas, L.r1_body, L.r2), 1.0);
      if (has_body_preserve()) {
        Tensor l1e = mul_scalar(sum(mul(abs(sub(live_color, obj_.ref_body)), exterior_mask_)),
                                1.0 / exterior_count_);
        Tensor pe =
            perceptual_distance(mul(live_color, exterior_mask_), ref_body_masked_stack_, *io_.fx);
        l1_exterior_ = l1e.value();
        percep_exterior_ = pe.value();
        add_term(std::move(l1e), L.l5);
        add_term(std::move(pe), L.l6);
      }
    } else {
      const int j = phase - 1;
      nodes = bind_latent(tape, w_insets_[j]);
      live_inset = generate(nodes, *io_.inset_specs[j]);
      Tensor l1c = l1_mean(crop64_[j], live_inset);
      Tensor pc = perceptual_distance(live_inset, crop64_stack_[j], *io_.fx);
      Tensor l1b =
          l1_mean(border_region(crop64_[j], kBorderWidth), border_region(live_inset, kBorderWidth));
      Tensor pb =
          perceptual_distance(mul(live_inset, border_mask_[j]), crop64_masked_stack_[j], *io_.fx);
      terms_[j].l1_coarse = l1c.value();
      terms_[j].percep_coarse = pc.value();
      terms_[j].l1_border = l1b.value();
      terms_[j].percep_border = pb.value();
      add_term(std::move(l1c), L.l1);
      add_term(std::move(pc), L.l2);
      add_term(std::move(l1b), L.l4_face);
      add_term(std::move(pb), L.l3);
      if (has_reg())
        add_term(latent_regularizer(nodes, io_.w_avg_insets[j], L.r1_face, L.r2), 1.0);
      const Tensor* identity_ref = nullptr;
      const FeatureExtractor::Stack* identity_stack = nullptr;
      if (has_face_identity()) {
        identity_ref = &obj_.ref_face;
        identity_stack = &ref_face_masked_stack_;
      } else if (snapshot_active()) {
        identity_ref = &state_.face_snapshots[j];
        identity_stack = &snapshot_masked_stack_;
      }
      if (identity_ref) {
        Tensor l1i = mul_scalar(sum(mul(abs(sub(live_inset, *identity_ref)), interior_mask_[j])),
                                1.0 / interior_count_[j]);
        Tensor pi =
            perceptual_distance(mul(live_inset, interior_mask_[j]), *identity_stack, *io_.fx);
        terms_[j].l1_interior = l1i.value();
        terms_[j].percep_interior = pi.value();
        add_term(std::move(l1i), L.l7);
        add_term(std::move(pi), L.l8);
      }
    }

    const double phase_value = phase_loss.value();
    if (std::isnan(phase_value) || std::isinf(phase_value))
      throw OptimizationAbort(iter, "non-finite loss", std::move(trace_));

    // report the full phase-column objective, constants included
    double phase_total = phase_value;
    if (phase == 0) {
      for (int j = 0; j < k_; ++j) {
        if (has_reg()) phase_total += plain_reg(w_insets_[j], io_.w_avg_insets[j], L.r1_face, L.r2);
        if (has_face_identity() || snapshot_active())
          phase_total += L.l7 * terms_[j].l1_interior + L.l8 * terms_[j].percep_interior;
      }
    } else {
      if (has_reg()) phase_total += plain_reg(w_canvas_, io_.w_avg_canvas, L.r1_body, L.r2);
      if (has_body_preserve()) phase_total += L.l5 * l1_exterior_ + L.l6 * percep_exterior_;
      for (int j = 0; j < k_; ++j) {
        if (j == phase - 1) continue;
        phase_total += L.l1 * terms_[j].l1_coarse + L.l2 * terms_[j].percep_coarse +
                       L.l4_face * terms_[j].l1_border + L.l3 * terms_[j].percep_border;
        if (has_face_identity())
          phase_total += L.l7 * terms_[j].l1_interior + L.l8 * terms_[j].percep_interior;
      }
    }

    const double total = canonical_total();
    if (std::isnan(total) || std::isinf(total))
      throw OptimizationAbort(iter, "non-finite loss", std::move(trace_));

    Tensor composite;
    {
      Tensor base_color = (phase == 0) ? detached(live_color) : canvas_color_;
      composite = base_color;
      for (int j = 0; j < k_; ++j) {
        Tensor ins = (phase == 1 + j) ? detached(live_inset) : inset_img_[j];
        composite = compose(composite, ins, state_.bboxes[j]);
      }
    }

    TraceRow row;
    row.iteration = iter;
    row.phase = (phase == 0) ? "canvas" : ("inset" + std::to_string(phase - 1));
    row.bbox_reeval = reeval;
    for (int j = 0; j < k_; ++j) {
      row.l1_coarse.push_back(terms_[j].l1_coarse);
      row.percep_coarse.push_back(terms_[j].percep_coarse);
      row.l1_border.push_back(terms_[j].l1_border);
      row.percep_border.push_back(terms_[j].percep_border);
      row.l1_interior.push_back(terms_[j].l1_interior);
      row.percep_interior.push_back(terms_[j].percep_interior);
      row.reg_inset.push_back(
          has_reg() ? plain_reg(w_insets_[j], io_.w_avg_insets[j], L.r1_face, L.r2) : 0.0);
    }
    row.reg_canvas = has_reg() ? plain_reg(w_canvas_, io_.w_avg_canvas, L.r1_body, L.r2) : 0.0;
    row.l1_exterior = l1_exterior_;
    row.percep_exterior = percep_exterior_;
    row.phase_total = phase_total;
    row.total = total;
    row.bboxes = state_.bboxes;
    row.upd_inset.assign(k_, 0.0);

    state_.border_l1 = border_values();
    if (total < state_.best_total) {
      state_.best_total = total;
      state_.best_iteration = iter;
      state_.best_composite = composite;
      best_canvas_ = w_canvas_;
      best_insets_ = w_insets_;
      best_boxes_ = state_.bboxes;
      best_border_ = max_border();
    }

    // when the border threshold is already met, stop without stepping
    bool stopping = true;
    for (double b : state_.border_l1)
      if (!(b < cfg_.stop_border_l1)) stopping = false;

    if (!stopping) {
      std::vector<Tensor> grads = tape.gradients(phase_loss, {nodes.base, nodes.deltas});
      std::vector<double> g(grads[0].data().begin(), grads[0].data().end());
      g.insert(g.end(), grads[1].data().begin(), grads[1].data().end());
      LayeredLatent& target = (phase == 0) ? w_canvas_ : w_insets_[phase - 1];
      std::vector<double> p = flat_latent(target);
      const std::vector<double> before = p;
      adam_update(state_.adam[phase], {p.data(), p.size()}, {g.data(), g.size()},
                  phase == 0 ? cfg_.lr_canvas : cfg_.lr_inset);
      set_from_flat(target, p);
      double upd = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - before[i];
        upd += d * d;
      }
      if (phase == 0)
        row.upd_canvas = std::sqrt(upd);
      else
        row.upd_inset[phase - 1] = std::sqrt(upd);

      // sync caches when this latent's phase block ends (cheaper than per
      // iteration; the taped forward recomputes the live side anyway)
      const int next_phase = phase_at(iter + 1);
      const bool reeval_next = !canvas_fixed_ && (iter + 1) % cfg_.bbox_reeval_every == 0 &&
                               (iter + 1) < until;
      const bool snapshot_due = obj_.mode == ObjectiveMode::refine_inset &&
                                iter + 1 == cfg_.snapshot_after &&
                                !state_.face_snapshots[0].defined();
      if (phase == 0) {
        if (next_phase != 0 || reeval_next) {
          refresh_canvas();
          refresh_crops();
          for (int j = 0; j < k_; ++j) refresh_plain_terms(j);
          refresh_body_preserve();
        }
      } else {
        const int j = phase - 1;
        if (next_phase != phase || reeval_next || snapshot_due) {
          refresh_inset(j);
          refresh_plain_terms(j);
        }
        if (snapshot_due) {
          state_.face_snapshots[0] = inset_img_[0];
          snapshot_masked_stack_ = io_.fx->extract(mul(inset_img_[0], interior_mask_[0]));
          refresh_plain_terms(0);
        }
      }
    }

    trace_.push_back(std::move(row));
  }

  const ObjectiveSpec& obj_;
  const ComposerInputs& io_;
  const ScheduleConfig& cfg_;
  int k_;
  bool canvas_fixed_;
  Tensor fixed_canvas_;

  LayeredLatent w_canvas_;
  std::vector<LayeredLatent> w_insets_;
  LayeredLatent best_canvas_;
  std::vector<LayeredLatent> best_insets_;
  std::vector<BBox> best_boxes_;
  double best_border_ = 0.0;

  OptState state_;
  std::vector<TraceRow> trace_;
  std::vector<InsetTerms> terms_;
  double l1_exterior_ = 0.0, percep_exterior_ = 0.0;

  Tensor canvas_img_, canvas_color_;
  Tensor exterior_mask_;
  double exterior_count_ = 0.0;
  FeatureExtractor::Stack ref_body_masked_stack_{}, ref_face_masked_stack_{},
      snapshot_masked_stack_{};
  std::vector<Tensor> inset_img_;
  std::vector<FeatureExtractor::Stack> inset_stack_, inset_masked_stack_;
  std::vector<Tensor> crop64_;
  std::vector<FeatureExtractor::Stack> crop64_stack_, crop64_masked_stack_;
  std::vector<Tensor> border_mask_, interior_mask_;
  std::vector<double> interior_count_;
};

}  // namespace

OptResult refine_inset_on(const Tensor& canvas_img, const LayeredLatent& w_inset,
                          const ComposerInputs& io, const ObjectiveSpec& obj,
                          const ScheduleConfig& cfg) {
  if (obj.mode != ObjectiveMode::refine_inset)
    throw std::invalid_argument("refine_inset requires mode refine_inset");
  LayeredLatent placeholder =
      LayeredLatent::flat(std::vector<double>(io.inset_specs[0]->latent_dim(), 0.0), 1);
  Engine engine(obj, io, cfg, placeholder, {w_inset}, /*canvas_fixed=*/true, canvas_img);
  return engine.run();
}

OptResult refine_inset(const LayeredLatent& w_canvas, const LayeredLatent& w_inset,
                       const ComposerInputs& io, const ObjectiveSpec& obj,
                       const ScheduleConfig& cfg) {
  Tensor canvas_img = generate_image(w_canvas, *io.canvas_spec);
  OptResult res = refine_inset_on(canvas_img, w_inset, io, obj, cfg);
  res.w_canvas = w_canvas;
  return res;
}

OptResult joint_optimize(const ObjectiveSpec& obj, const ComposerInputs& io,
                         const LayeredLatent& w_canvas_init,
                         const std::vector<LayeredLatent>& w_insets_init,
                         const ScheduleConfig& cfg) {
  if (obj.mode == ObjectiveMode::refine_inset)
    throw std::invalid_argument("joint_optimize: use refine_inset() for one-way refinement");
  Engine engine(obj, io, cfg, w_canvas_init, w_insets_init, /*canvas_fixed=*/false, Tensor());
  return engine.run();
}

}  // namespace insetopt
