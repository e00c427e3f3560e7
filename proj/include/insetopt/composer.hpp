#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "insetopt/detector.hpp"
#include "insetopt/generator.hpp"
#include "insetopt/losses.hpp"
#include "insetopt/tensor.hpp"

namespace insetopt {

enum class ObjectiveMode { refine_inset, joint_refine, body_for_face, montage, multi_inset };

std::string mode_name(ObjectiveMode mode);
ObjectiveMode mode_from_name(const std::string& name);

// Declarative objective: which composition of loss terms is optimized, with
// optional reference images for the preservation terms.
struct ObjectiveSpec {
  ObjectiveMode mode = ObjectiveMode::refine_inset;
  LambdaTable lambdas;
  Tensor ref_face;  // [3, inset_res, inset_res]; face_identity target
  Tensor ref_body;  // [3, canvas_res, canvas_res]; body preservation target

  // Constituent loss ids, for auditing that each mode assembles exactly its
  // published term list.
  std::vector<std::string> term_names() const;
};

// Alternation schedule and stopping rules. Defaults are the published
// values: two optimizers switching every 50 iterations, lr 0.05 / 0.002,
// bbox re-evaluation every 25 iterations for 150 (body generation) or 75
// (face refinement) iterations, stop at border L1 < 0.09 or 1000 iterations.
struct ScheduleConfig {
  double lr_canvas = 0.05;
  double lr_inset = 0.002;
  int switch_every = 50;
  int bbox_reeval_every = 25;
  int bbox_reeval_until_body = 150;
  int bbox_reeval_until_face = 75;
  double stop_border_l1 = 0.09;
  int max_iters = 1000;
  int snapshot_after = 100;     // refine: freeze the inset interior after n iters
  int canvas_head_start = 150;  // body_for_face: leading canvas-only iterations
  bool operator==(const ScheduleConfig&) const = default;
};

int bbox_reeval_until(ObjectiveMode mode, const ScheduleConfig& cfg);

// One optimization step per row; raw (unweighted) term values at the current
// iterate, before the update is applied.
struct TraceRow {
  int iteration = 0;
  std::string phase;  // "canvas" or "inset<k>"
  bool bbox_reeval = false;
  std::vector<double> l1_coarse, percep_coarse;  // per inset
  std::vector<double> l1_border, percep_border;  // per inset; l1_border is the stop metric
  double reg_canvas = 0.0;
  std::vector<double> reg_inset;
  double l1_exterior = 0.0, percep_exterior = 0.0;
  std::vector<double> l1_interior, percep_interior;
  double phase_total = 0.0;  // objective actually optimized this iteration
  double total = 0.0;        // canonical mode objective (best-so-far metric)
  std::vector<BBox> bboxes;
  double upd_canvas = 0.0;  // L2 norm of the applied parameter change
  std::vector<double> upd_inset;
};

std::vector<std::string> trace_columns(int n_insets);
std::vector<double> trace_values(const TraceRow& row);

struct OptState {
  int iteration = 0;
  int phase = 0;  // 0 = canvas, 1 + k = inset k
  std::vector<AdamState> adam;
  std::vector<BBox> bboxes;
  std::vector<double> border_l1;
  double best_total = std::numeric_limits<double>::infinity();
  int best_iteration = -1;
  Tensor best_composite;
  std::vector<Tensor> face_snapshots;
};

// true iff all insets' unweighted border L1 fell below the stop threshold,
// or the iteration cap is reached.
bool should_stop(const OptState& state, const ScheduleConfig& cfg);

struct OptimizationAbort : std::runtime_error {
  OptimizationAbort(int iter, const std::string& why, std::vector<TraceRow> partial)
      : std::runtime_error("optimization aborted at iteration " + std::to_string(iter) + ": " +
                           why),
        iteration(iter),
        trace(std::move(partial)) {}
  int iteration;
  std::vector<TraceRow> trace;
};

struct OptResult {
  LayeredLatent w_canvas;
  std::vector<LayeredLatent> w_insets;
  Tensor composite;  // best-so-far composite, [3,h,w]
  std::vector<BBox> bboxes;
  double best_total = 0.0;
  int best_iteration = -1;
  int iterations_run = 0;
  bool stopped_early = false;
  double init_border_l1 = 0.0, final_border_l1 = 0.0;
  double init_seam_energy = 0.0, final_seam_energy = 0.0;
  std::vector<TraceRow> trace;
};

struct ComposerInputs {
  const GeneratorSpec* canvas_spec = nullptr;
  std::vector<const GeneratorSpec*> inset_specs;
  const FeatureExtractor* fx = nullptr;
  std::vector<double> w_avg_canvas;
  std::vector<std::vector<double>> w_avg_insets;
};

// Paste `inset` (bilinearly resized to the box) into the canvas color
// channels. Pixels outside the box are byte-identical to the canvas.
Tensor compose(const Tensor& canvas, const Tensor& inset, const BBox& bbox);

// One-way refinement: the canvas latent stays fixed, the inset latent is
// optimized against the detected crop. After `snapshot_after` iterations the
// inset interior is frozen and held by an identity term.
OptResult refine_inset(const LayeredLatent& w_canvas, const LayeredLatent& w_inset,
                       const ComposerInputs& io, const ObjectiveSpec& obj,
                       const ScheduleConfig& cfg);
// Same, with a caller-provided canvas image (must carry a marker channel).
OptResult refine_inset_on(const Tensor& canvas_img, const LayeredLatent& w_inset,
                          const ComposerInputs& io, const ObjectiveSpec& obj,
                          const ScheduleConfig& cfg);

// Alternating two-optimizer schedule over one canvas latent and >= 1 inset
// latents, with bbox re-evaluation while the canvas is still moving.
OptResult joint_optimize(const ObjectiveSpec& obj, const ComposerInputs& io,
                         const LayeredLatent& w_canvas_init,
                         const std::vector<LayeredLatent>& w_insets_init,
                         const ScheduleConfig& cfg);

}  // namespace insetopt
