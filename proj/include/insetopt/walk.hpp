#pragma once

#include <vector>

#include "insetopt/composer.hpp"

namespace insetopt {

// An optimized canvas/inset latent pair, as produced by a converged
// composer job.
struct Keyframe {
  LayeredLatent w_canvas;
  LayeredLatent w_inset;
  BBox bbox;
};

// Cyclic interpolation plan. `frames_per_segment` counts both endpoint
// keyframes, so a segment contributes frames_per_segment - 2 interpolated
// frames; with cyclic closure the first keyframe is replicated as the last.
struct WalkPlan {
  std::vector<Keyframe> keyframes;
  int frames_per_segment = 22;
  int budget = 100;
  bool cyclic = true;
};

// Recurrence step: f = 1/(n-i), w_next = (1-f)*w_prev + f*w_end. Iterating
// i = 1..n-1 from w_start telescopes to exact linear interpolation and lands
// on w_end.
LayeredLatent walk_frame_latent(const LayeredLatent& w_prev, const LayeredLatent& w_end, int i,
                                int n);

// Per-frame refinement of the interpolated inset latent: edge coherence with
// the canvas frame, identity preservation against the frame's starting
// point, and minimal border change against the previous frame's composite.
LayeredLatent optimize_frame(const LayeredLatent& w_next, const Tensor& canvas_frame,
                             const BBox& bbox_f, const LayeredLatent& w_frame_start,
                             const Tensor& prev_composite, int budget,
                             const GeneratorSpec& inset_spec, const FeatureExtractor& fx,
                             const LambdaTable& lambdas, double lr);

struct WalkFrame {
  Tensor composite;
  BBox bbox;
  double border_l1 = 0.0;
  double temporal_delta = 0.0;  // mean |pixel change| vs the previous frame
};

struct WalkResult {
  std::vector<WalkFrame> frames;
  double mean_border_l1 = 0.0;
  double mean_temporal_delta = 0.0;
  double mean_border_delta = 0.0;  // mean inter-frame change of border pixels
};

// Renders every segment; keyframes are emitted as-is, so segment endpoints
// equal the keyframe composites bit-exactly. budget_override < 0 keeps the
// plan's per-frame budget (0 disables per-frame optimization).
WalkResult render_walk(const WalkPlan& plan, const GeneratorSpec& canvas_spec,
                       const GeneratorSpec& inset_spec, const FeatureExtractor& fx,
                       const LambdaTable& lambdas, double lr_inset, int budget_override = -1);

}  // namespace insetopt
