#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "insetopt/tensor.hpp"

namespace insetopt {

inline constexpr int kDefaultLayers = 18;
inline constexpr int kDefaultLatentDim = 32;
inline constexpr int kBaseResolution = 4;

// Layer-wise truncation strengths for an 18-layer generator; middle layers
// are truncated hardest, late layers barely at all.
extern const std::array<double, 18> kAdaptiveTruncation;

// w+ code decomposed into a shared base latent plus one offset per layer.
struct LayeredLatent {
  std::vector<double> base;
  std::vector<std::vector<double>> deltas;

  static LayeredLatent flat(std::vector<double> base_latent, int n_layers);
  int n_layers() const { return static_cast<int>(deltas.size()); }
  int dim() const { return static_cast<int>(base.size()); }
  std::vector<double> layer_code(int i) const;
  bool operator==(const LayeredLatent&) const = default;
};

struct AverageLatent {
  std::vector<double> w_avg;
  int sample_count = 0;
};

// Analytic marker blob parameters, in pixels.
struct BlobGeometry {
  double row = 0.0;
  double col = 0.0;
  double r_row = 1.0;
  double r_col = 1.0;
};

// Frozen, procedurally weighted layered generator. All weights are drawn
// once from the seeded stream at construction and never change; identical
// seeds give bit-identical weights and therefore bit-identical images.
class GeneratorSpec {
 public:
  static GeneratorSpec make(std::uint64_t seed, int out_resolution, int out_channels,
                            int n_layers = kDefaultLayers, int latent_dim = kDefaultLatentDim,
                            int n_blobs = 1, int hidden_channels = 8);
  static GeneratorSpec canvas(std::uint64_t seed, int out_resolution = 256, int n_blobs = 1);
  static GeneratorSpec inset(std::uint64_t seed, int out_resolution = 64);

  std::uint64_t seed() const { return seed_; }
  int n_layers() const { return n_layers_; }
  int latent_dim() const { return latent_dim_; }
  int out_resolution() const { return out_resolution_; }
  int out_channels() const { return out_channels_; }
  int hidden_channels() const { return hidden_; }
  int n_blobs() const { return n_blobs_; }
  bool has_marker() const { return out_channels_ > 3; }
  int layer_resolution(int i) const;

  void save(const std::string& path) const;
  static GeneratorSpec load(const std::string& path);
  bool operator==(const GeneratorSpec& other) const;

  // frozen parameters (read by the synthesis and mapping routines)
  struct Layer {
    std::vector<double> mod_w;       // [2C x d]
    std::vector<double> mod_b;       // [2C]
    std::vector<double> dw;          // [C x 9]
    std::vector<double> mix;         // [C x C]
    std::vector<double> bias;        // [C x r x r], pre-scaled
    std::vector<double> prof_scale;  // [C x r x r] smooth modulation profiles
    std::vector<double> prof_shift;
    double norm = 1.0;  // frozen activation normalizer
  };
  const std::vector<Layer>& layers() const { return layers_; }
  const std::vector<double>& map_w1() const { return map_w1_; }
  const std::vector<double>& map_b1() const { return map_b1_; }
  const std::vector<double>& map_w2() const { return map_w2_; }
  const std::vector<double>& map_b2() const { return map_b2_; }
  const std::vector<double>& base_const() const { return base_const_; }
  const std::vector<double>& color_w() const { return color_w_; }
  const std::vector<double>& color_b() const { return color_b_; }
  const std::vector<double>& blob_w(int j) const { return blob_w_[j]; }
  const std::vector<double>& blob_b(int j) const { return blob_b_[j]; }
  // Squashed-affine ranges for blob j, as fractions of the resolution:
  // {row_lo, row_span, col_lo, col_span, rad_lo, rad_span}.
  std::array<double, 6> blob_ranges(int j) const;

 private:
  GeneratorSpec() = default;
  std::uint64_t seed_ = 0;
  int n_layers_ = kDefaultLayers;
  int latent_dim_ = kDefaultLatentDim;
  int out_resolution_ = 256;
  int out_channels_ = 3;
  int hidden_ = 8;
  int n_blobs_ = 0;
  std::vector<Layer> layers_;
  std::vector<double> map_w1_, map_b1_, map_w2_, map_b2_;
  std::vector<double> base_const_;
  std::vector<double> color_w_, color_b_;
  std::vector<std::vector<double>> blob_w_, blob_b_;
};

// Latent bound as differentiable tensors: base {d} and deltas {n,d}.
struct LatentNodes {
  Tensor base;
  Tensor deltas;
  Tensor layer_code(int i) const { return add(base, row(deltas, i)); }
};

LatentNodes bind_latent(Tape& tape, const LayeredLatent& latent);
LatentNodes constant_latent(const LayeredLatent& latent);
LayeredLatent to_layered(const Tensor& base, const Tensor& deltas);

std::vector<double> map_latent(const std::vector<double>& z, const GeneratorSpec& spec);
AverageLatent average_latent(const GeneratorSpec& spec, int n_samples, std::uint64_t seed);

std::vector<double> truncate(const std::vector<double>& w, double t,
                             const std::vector<double>& w_avg);
LayeredLatent truncate_adaptive(const LayeredLatent& w_plus, const std::vector<double>& t_vec,
                                const std::vector<double>& w_avg);

LayeredLatent init_latent_average(const GeneratorSpec& spec, const AverageLatent& avg);
// w_trunc = w_rand * (1 - alpha) + w_avg * alpha
LayeredLatent init_latent_truncated_random(const GeneratorSpec& spec, const AverageLatent& avg,
                                           double alpha, std::uint64_t seed);

// Deterministic differentiable synthesis; [out_channels, r, r] in (0,1).
Tensor generate(const LatentNodes& w, const GeneratorSpec& spec);
Tensor generate_image(const LayeredLatent& w, const GeneratorSpec& spec);

std::vector<BlobGeometry> marker_geometry(const LayeredLatent& w, const GeneratorSpec& spec);

}  // namespace insetopt
