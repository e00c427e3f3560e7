#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace insetopt {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Dense row-major tensor of 64-bit floats. Value semantics; the payload is
// shared, and no operation mutates its inputs. A tensor is either detached
// (plain data) or bound to a tape node, in which case every primitive applied
// to it records a backward closure on that tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor full(Shape shape, double v);
  static Tensor from_vector(const std::vector<double>& v);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i); }
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  // Scalar access; rejects non-scalar tensors.
  double value() const;

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  std::span<double> data() { return {data_->data(), data_->size()}; }
  const std::shared_ptr<std::vector<double>>& storage() const { return data_; }

  double at(int i) const { return (*data_)[i]; }
  double at(int i, int j) const { return (*data_)[static_cast<std::int64_t>(i) * shape_[1] + j]; }
  double at(int c, int i, int j) const {
    return (*data_)[(static_cast<std::int64_t>(c) * shape_[1] + i) * shape_[2] + j];
  }
  double& at(int i) { return (*data_)[i]; }
  double& at(int i, int j) { return (*data_)[static_cast<std::int64_t>(i) * shape_[1] + j]; }
  double& at(int c, int i, int j) {
    return (*data_)[(static_cast<std::int64_t>(c) * shape_[1] + i) * shape_[2] + j];
  }

  bool on_tape() const { return node_ >= 0; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Backward closure: receives the output gradient and accumulation spans for
// each input node (already allocated and zero-initialized on first touch).
using BackwardFn =
    std::function<void(std::span<const double> gout, const std::vector<std::span<double>>& gin)>;

// Record of primitive applications in topological order. Rebuilt per
// optimization step; one reverse traversal yields gradients for all leaves.
class Tape {
 public:
  // Binds a copy of `value` to this tape as a differentiable leaf.
  Tensor leaf(const Tensor& value);

  // Reverse-mode gradients of a scalar loss. Leaves that are not reachable
  // from the loss (or not on this tape) get zero gradients.
  std::vector<Tensor> gradients(const Tensor& loss, const std::vector<Tensor>& leaves);

  int size() const { return static_cast<int>(nodes_.size()); }
  void clear() { nodes_.clear(); }

  int record(std::vector<int> inputs, std::int64_t out_numel, BackwardFn backward);
  Tensor adopt(Tensor value, std::vector<int> inputs, BackwardFn backward);

 private:
  struct Node {
    std::vector<int> inputs;
    std::int64_t numel = 0;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Integer pixel rectangle; top-left corner plus extent.
struct BBox {
  int row = 0;
  int col = 0;
  int height = 0;
  int width = 0;

  int row_end() const { return row + height; }
  int col_end() const { return col + width; }
  std::int64_t area() const { return static_cast<std::int64_t>(height) * width; }
  bool operator==(const BBox&) const = default;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor abs(const Tensor& a);  // subgradient at 0 is 0
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);  // backward guarded at 0
Tensor sigmoid(const Tensor& a);
// Smooth leaky activation alpha*x + (1-alpha)*(x + sqrt(x^2 + 0.25))/2:
// behaves like a leaky rectifier but is differentiable everywhere (the
// gradient checks require smoothness), and needs no transcendentals.
Tensor smooth_leaky(const Tensor& a, double alpha = 0.2);
// Algebraic squash onto (0,1): 0.5 + 0.5*x/sqrt(1+x^2). Gradients never
// vanish entirely, unlike a hard clamp.
Tensor squash01(const Tensor& a);

// ---- reductions / linear algebra ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor l2_norm(const Tensor& a);           // sqrt(sum x^2), zero-gradient at 0
Tensor sum_row_norms(const Tensor& a);     // [n,d] -> sum_i ||row_i||_2

// ---- shape / gather ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_flat(const Tensor& a, std::int64_t offset, std::int64_t len);
Tensor row(const Tensor& a, int i);  // [n,d] -> [d]
Tensor concat_vec(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& img, int c0, int c1);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor crop(const Tensor& img, const BBox& box);
Tensor gather_border(const Tensor& img, int width);  // [c,h,w] -> [c, 2w(h+w)-4w^2]

// ---- image resampling ----
Tensor resize_bilinear(const Tensor& img, int out_h, int out_w);  // align_corners=false
Tensor upsample_bilinear_2x(const Tensor& img);
Tensor downsample_avg(const Tensor& img, int target);  // non-overlapping box average
Tensor avg_pool2(const Tensor& img);

// ---- fixed-weight convolutions (weights are plain data, inputs differentiable) ----
// weights layout: [oc][ic][3][3] row-major; zero padding of 1.
Tensor conv3x3(const Tensor& img, const std::vector<double>& weights, int out_channels,
               const std::vector<double>& bias = {});
Tensor depthwise3x3(const Tensor& img, const std::vector<double>& kernels);  // [c][3][3]
Tensor conv1x1(const Tensor& img, const std::vector<double>& mix, int out_channels,
               const std::vector<double>& bias = {});
// y = W x + b with constant W [m x n], b [m].
Tensor linear_const(const std::vector<double>& w, int m, int n, const Tensor& x,
                    const std::vector<double>& bias = {});

// ---- modulation / normalization ----
Tensor channel_affine(const Tensor& img, const Tensor& scale, const Tensor& shift);
// Spatially profiled modulation: y[c,p] = x[c,p]*(1 + g*u[c]*P[c,p]) + g*v[c]*Q[c,p]
// with frozen profile fields P, Q. Each latent knob then has a spatial
// signature instead of acting uniformly over the plane.
Tensor channel_affine_field(const Tensor& img, const Tensor& u, const Tensor& v,
                            const std::vector<double>& prof_scale,
                            const std::vector<double>& prof_shift, double gain);
Tensor channel_norm(const Tensor& img, double eps = 1e-8);
// Smooth elliptical blob map [1,h,w] from scalar center/radius tensors.
Tensor ellipse_map(const Tensor& cr, const Tensor& cc, const Tensor& rr, const Tensor& rc,
                   int h, int w, double steepness);

// ---- ADAM ----
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_size(std::size_t n) {
    AdamState s;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    return s;
  }
};

// Standard bias-corrected ADAM step; pure function of its arguments.
void adam_update(AdamState& state, std::span<double> param, std::span<const double> grad,
                 double lr);

// ---- finite differences ----
struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

// Central differences per coordinate of `x0` against reverse-mode gradients
// of the scalar build by `f`. `f` must construct the loss from the tape-bound
// tensor it receives. When max_coords > 0, a seeded random subset of
// coordinates is checked.
GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&, Tape&)>& f,
                                        const Tensor& x0, double eps, int max_coords = -1,
                                        std::uint64_t coord_seed = 0);

// Directional variant: compares grad . dir against the central difference of
// f along dir. Cheap enough for full objectives.
double finite_difference_directional(const std::function<Tensor(const Tensor&, Tape&)>& f,
                                     const Tensor& x0, const std::vector<double>& dir, double eps);

double fd_rel_err(double analytic, double numeric);

}  // namespace insetopt
