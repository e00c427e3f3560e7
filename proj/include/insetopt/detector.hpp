#pragma once

#include <stdexcept>
#include <vector>

#include "insetopt/tensor.hpp"

namespace insetopt {

inline constexpr int kMinBoxSize = 8;  // two border widths

// Raised when no marker pixel clears the threshold; signals a degenerate
// latent to the caller.
struct NoInsetRegion : std::runtime_error {
  NoInsetRegion() : std::runtime_error("no inset region: marker channel has no superthreshold pixels") {}
};

// Tight box around marker pixels above threshold, expanded to the minimum
// box size and clipped to image bounds. Reads only the marker channel.
BBox detect_bbox(const Tensor& canvas, double threshold = 0.5);

// All disjoint marker components, left-to-right by column. Used when one
// canvas carries several inset blobs.
std::vector<BBox> detect_bboxes(const Tensor& canvas, double threshold = 0.5);

// Componentwise linear interpolation, rounded to nearest; f in [0,1].
BBox lerp_bbox(const BBox& b_start, const BBox& b_end, double f);

}  // namespace insetopt
