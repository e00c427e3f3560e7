#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "insetopt/generator.hpp"
#include "insetopt/tensor.hpp"

namespace insetopt {

inline constexpr int kBorderWidth = 8;

// Loss term weights; defaults follow the montage weight table, with separate
// columns for the body/canvas-side and face/inset-side objectives.
struct LambdaTable {
  double l1 = 500.0;    // L1 on downsampled crops
  double l2 = 0.05;     // perceptual on downsampled crops
  double l3 = 0.1;      // perceptual on border (face side only)
  double l4_body = 2500.0;
  double l4_face = 10000.0;  // L1 on border
  double r1_body = 25000.0;
  double r1_face = 0.0;  // base-latent regularizer
  double r2 = 1.0;       // per-layer offset regularizer
  double l5 = 9000.0;    // L1 outside bbox vs reference body
  double l6 = 0.1;       // perceptual outside bbox
  double l7 = 5000.0;    // L1 on crop interior vs reference face
  double l8 = 1.75;      // perceptual on crop interior
  bool operator==(const LambdaTable&) const = default;
};

// Pixel region selector over an image, anchored at a bbox. interior and
// border (of the given width) partition the crop; exterior is everything
// outside the bbox.
struct Region {
  enum class Kind { interior, exterior, border, full };
  Kind kind = Kind::full;
  BBox box;
  int width = kBorderWidth;

  static Region interior(const BBox& b, int width = kBorderWidth) {
    return {Kind::interior, b, width};
  }
  static Region exterior(const BBox& b) { return {Kind::exterior, b, 0}; }
  static Region border(const BBox& b, int width = kBorderWidth) {
    return {Kind::border, b, width};
  }
  static Region full(const BBox& b) { return {Kind::full, b, 0}; }

  // 0/1 mask replicated over `channels`; throws if the region is empty or
  // does not fit the image.
  Tensor mask(int channels, int h, int w) const;
};

// Frozen random convolutional pyramid standing in for a learned perceptual
// metric: three stages of conv3x3 -> smooth leaky activation -> 2x average
// pool, with channel-normalized stage outputs.
class FeatureExtractor {
 public:
  static FeatureExtractor make(std::uint64_t seed, int channels = 6);

  using Stack = std::array<Tensor, 3>;
  Stack extract(const Tensor& img) const;

  std::uint64_t seed() const { return seed_; }
  int channels() const { return channels_; }
  int feature_dim() const { return 3 * channels_; }

 private:
  std::uint64_t seed_ = 0;
  int channels_ = 6;
  std::vector<double> w1_, b1_, w2_, b2_, w3_, b3_;
};

// Flattened border frame of width x; shape [c, 2x(h+w) - 4x^2], deterministic
// order (top rows, bottom rows, left columns, right columns).
Tensor border_region(const Tensor& img, int x);

// Sum over stages of the mean squared difference of channel-normalized
// features; symmetric, zero on identical inputs.
Tensor perceptual_distance(const Tensor& a, const Tensor& b, const FeatureExtractor& fx);
Tensor perceptual_distance(const Tensor& a, const FeatureExtractor::Stack& b_stack,
                           const FeatureExtractor& fx);

// Mean absolute difference; the plain L1 used throughout.
Tensor l1_mean(const Tensor& a, const Tensor& b);

// lambda1 * L1 + lambda2 * percep on crops downsampled to 64x64 (inputs
// already at 64 pass through).
Tensor coarse_appearance_loss(const Tensor& canvas_crop, const Tensor& inset, double lambda1,
                              double lambda2, const FeatureExtractor& fx);

// lambda4 * L1 over the width-8 border frame + lambda3 * percep on
// border-masked images; inputs must share the inset resolution.
Tensor border_loss(const Tensor& canvas_crop, const Tensor& inset, double lambda3,
                   double lambda4, const FeatureExtractor& fx);

// Unweighted border L1; this is the value the stop rule thresholds.
double border_l1_value(const Tensor& canvas_crop, const Tensor& inset);

// lambda_r1 * ||w* - w_avg||_2 + lambda_r2 * sum_i ||delta_i||_2
Tensor latent_regularizer(const LatentNodes& w, const std::vector<double>& w_avg,
                          double lambda_r1, double lambda_r2);

// lambda_a * L1 + lambda_b * percep restricted to the region; gradients
// vanish identically outside it.
Tensor region_preservation_loss(const Tensor& img, const Tensor& ref, const Region& region,
                                double lambda_a, double lambda_b, const FeatureExtractor& fx);

// Mean absolute across-seam difference at the bbox boundary, color channels
// only. Diagnostic; not differentiated.
double seam_energy(const Tensor& composite, const BBox& bbox);

}  // namespace insetopt
