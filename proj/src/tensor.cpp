#include "insetopt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "insetopt/rng.hpp"

namespace insetopt {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape_));
  data_ = std::make_shared<std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_->begin(), t.data_->end(), v);
  return t;
}

Tensor Tensor::from_vector(const std::vector<double>& v) {
  return Tensor(Shape{static_cast<int>(v.size())}, v);
}

double Tensor::value() const {
  if (numel() != 1)
    throw std::invalid_argument("value() requires a scalar, got shape " + shape_str(shape_));
  return (*data_)[0];
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

int Tape::record(std::vector<int> inputs, std::int64_t out_numel, BackwardFn backward) {
  nodes_.push_back(Node{std::move(inputs), out_numel, std::move(backward)});
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::leaf(const Tensor& value) {
  Tensor t(value.shape(), std::vector<double>(value.data().begin(), value.data().end()));
  t.tape_ = this;
  t.node_ = record({}, t.numel(), nullptr);
  return t;
}

Tensor Tape::adopt(Tensor value, std::vector<int> inputs, BackwardFn backward) {
  value.tape_ = this;
  value.node_ = record(std::move(inputs), value.numel(), std::move(backward));
  return value;
}

std::vector<Tensor> Tape::gradients(const Tensor& loss, const std::vector<Tensor>& leaves) {
  if (loss.numel() != 1)
    throw std::invalid_argument("gradients: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  std::vector<std::vector<double>> buf(nodes_.size());
  if (loss.on_tape() && loss.tape() == this) {
    const int top = loss.node();
    buf[top] = {1.0};
    for (int id = top; id >= 0; --id) {
      if (buf[id].empty()) continue;
      const Node& node = nodes_[id];
      if (!node.backward) continue;  // leaf
      std::vector<std::span<double>> gin;
      gin.reserve(node.inputs.size());
      for (int in : node.inputs) {
        if (buf[in].empty()) buf[in].assign(nodes_[in].numel, 0.0);
        gin.emplace_back(buf[in].data(), buf[in].size());
      }
      node.backward({buf[id].data(), buf[id].size()}, gin);
      std::vector<double>().swap(buf[id]);  // interior grads are not needed again
    }
  }
  std::vector<Tensor> out;
  out.reserve(leaves.size());
  for (const Tensor& leaf : leaves) {
    if (leaf.on_tape() && leaf.tape() == this && !buf[leaf.node()].empty()) {
      out.emplace_back(leaf.shape(), buf[leaf.node()]);
    } else {
      out.emplace_back(leaf.shape());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

void check_image(const char* op, const Tensor& img) {
  if (img.rank() != 3)
    throw std::invalid_argument(std::string(op) + ": expected [c,h,w] image, got " +
                                shape_str(img.shape()));
}

Tape* common_tape(std::initializer_list<const Tensor*> args) {
  Tape* tape = nullptr;
  for (const Tensor* t : args) {
    if (!t->on_tape()) continue;
    if (tape && t->tape() != tape)
      throw std::invalid_argument("operands are bound to different tapes");
    tape = t->tape();
  }
  return tape;
}

void axpy(std::span<double> dst, std::span<const double> src, double a) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * src[i];
}

// dst += conv3x3(src, k) with zero padding 1; dst and src are h*w planes.
void conv_plane_accum(double* dst, const double* src, const double* k, int h, int w) {
  for (int i = 0; i < h; ++i) {
    const double* r0 = (i > 0) ? src + (i - 1) * w : nullptr;
    const double* r1 = src + i * w;
    const double* r2 = (i + 1 < h) ? src + (i + 1) * w : nullptr;
    double* out = dst + i * w;
    auto tap = [&](const double* r, int j) { return r ? r[j] : 0.0; };
    // left edge
    {
      int j = 0;
      double acc = 0.0;
      if (r0) acc += k[1] * r0[j] + (j + 1 < w ? k[2] * r0[j + 1] : 0.0);
      acc += k[4] * r1[j] + (j + 1 < w ? k[5] * r1[j + 1] : 0.0);
      if (r2) acc += k[7] * r2[j] + (j + 1 < w ? k[8] * r2[j + 1] : 0.0);
      out[j] += acc;
    }
    for (int j = 1; j + 1 < w; ++j) {
      double acc = 0.0;
      if (r0) acc += k[0] * r0[j - 1] + k[1] * r0[j] + k[2] * r0[j + 1];
      acc += k[3] * r1[j - 1] + k[4] * r1[j] + k[5] * r1[j + 1];
      if (r2) acc += k[6] * r2[j - 1] + k[7] * r2[j] + k[8] * r2[j + 1];
      out[j] += acc;
    }
    if (w > 1) {
      int j = w - 1;
      double acc = 0.0;
      acc += tap(r0, j - 1) * k[0] + tap(r0, j) * k[1];
      acc += r1[j - 1] * k[3] + r1[j] * k[4];
      acc += tap(r2, j - 1) * k[6] + tap(r2, j) * k[7];
      out[j] += acc;
    }
  }
}

std::array<double, 9> flip3x3(const double* k) {
  std::array<double, 9> f;
  for (int i = 0; i < 9; ++i) f[i] = k[8 - i];
  return f;
}

// Precomputed 1-D bilinear sampling (align_corners=false, edge clamped).
struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> w0, w1;
};

LerpAxis make_axis(int in, int out) {
  LerpAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.w0.resize(out);
  ax.w1.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    double fl = std::floor(src);
    double frac = src - fl;
    int lo = static_cast<int>(fl);
    int hi = lo + 1;
    lo = std::clamp(lo, 0, in - 1);
    hi = std::clamp(hi, 0, in - 1);
    ax.i0[i] = lo;
    ax.i1[i] = hi;
    ax.w0[i] = 1.0 - frac;
    ax.w1[i] = frac;
  }
  return ax;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kSmoothLeakyBeta = 0.25;

// Border pixel offsets (within one channel plane) in deterministic order:
// top rows, bottom rows, left columns, right columns.
std::vector<int> border_offsets(int h, int w, int x) {
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(2 * x * (h + w)));
  for (int i = 0; i < x; ++i)
    for (int j = 0; j < w; ++j) idx.push_back(i * w + j);
  for (int i = h - x; i < h; ++i)
    for (int j = 0; j < w; ++j) idx.push_back(i * w + j);
  for (int i = x; i < h - x; ++i)
    for (int j = 0; j < x; ++j) idx.push_back(i * w + j);
  for (int i = x; i < h - x; ++i)
    for (int j = w - x; j < w; ++j) idx.push_back(i * w + j);
  return idx;
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out(a.shape());
  auto oa = a.data(), ob = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] + ob[i];
  Tape* tape = common_tape({&a, &b});
  if (!tape) return out;
  const bool ta = a.on_tape(), tb = b.on_tape();
  std::vector<int> in;
  if (ta) in.push_back(a.node());
  if (tb) in.push_back(b.node());
  return tape->adopt(std::move(out), std::move(in),
                     [ta, tb](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                       int k = 0;
                       if (ta) axpy(gin[k++], g, 1.0);
                       if (tb) axpy(gin[k++], g, 1.0);
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out(a.shape());
  auto oa = a.data(), ob = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] - ob[i];
  Tape* tape = common_tape({&a, &b});
  if (!tape) return out;
  const bool ta = a.on_tape(), tb = b.on_tape();
  std::vector<int> in;
  if (ta) in.push_back(a.node());
  if (tb) in.push_back(b.node());
  return tape->adopt(std::move(out), std::move(in),
                     [ta, tb](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                       int k = 0;
                       if (ta) axpy(gin[k++], g, 1.0);
                       if (tb) axpy(gin[k++], g, -1.0);
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out(a.shape());
  auto oa = a.data(), ob = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] * ob[i];
  Tape* tape = common_tape({&a, &b});
  if (!tape) return out;
  const bool ta = a.on_tape(), tb = b.on_tape();
  std::vector<int> in;
  if (ta) in.push_back(a.node());
  if (tb) in.push_back(b.node());
  auto da = a.storage(), db = b.storage();
  return tape->adopt(std::move(out), std::move(in),
                     [ta, tb, da, db](std::span<const double> g,
                                      const std::vector<std::span<double>>& gin) {
                       int k = 0;
                       if (ta) {
                         auto dst = gin[k++];
                         for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * (*db)[i];
                       }
                       if (tb) {
                         auto dst = gin[k++];
                         for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * (*da)[i];
                       }
                     });
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] + c;
  if (!a.on_tape()) return out;
  return a.tape()->adopt(std::move(out), {a.node()},
                         [](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                           axpy(gin[0], g, 1.0);
                         });
}

Tensor mul_scalar(const Tensor& a, double c) {
  Tensor out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] * c;
  if (!a.on_tape()) return out;
  return a.tape()->adopt(std::move(out), {a.node()},
                         [c](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                           axpy(gin[0], g, c);
                         });
}

Tensor abs(const Tensor& a) {
  Tensor out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::fabs(oa[i]);
  if (!a.on_tape()) return out;
  auto da = a.storage();
  return a.tape()->adopt(std::move(out), {a.node()},
                         [da](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                           auto dst = gin[0];
                           for (std::size_t i = 0; i < dst.size(); ++i) {
                             const double x = (*da)[i];
                             if (x > 0.0)
                               dst[i] += g[i];
                             else if (x < 0.0)
                               dst[i] -= g[i];
                             // subgradient at 0 is 0
                           }
                         });
}

Tensor square(const Tensor& a) {
  Tensor out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] * oa[i];
  if (!a.on_tape()) return out;
  auto da = a.storage();
  return a.tape()->adopt(std::move(out), {a.node()},
                         [da](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                           auto dst = gin[0];
                           for (std::size_t i = 0; i < dst.size(); ++i)
                             dst[i] += 2.0 * (*da)[i] * g[i];
                         });
}

Tensor sqrt(const Tensor& a) {
  Tensor out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    if (oa[i] < 0.0) throw std::invalid_argument("sqrt: negative input");
    od[i] = std::sqrt(oa[i]);
  }
  if (!a.on_tape()) return out;
  auto dy = out.storage();
  return a.tape()->adopt(std::move(out), {a.node()},
                         [dy](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                           auto dst = gin[0];
                           for (std::size_t i = 0; i < dst.size(); ++i) {
                             const double y = (*dy)[i];
                             if (y > 0.0) dst[i] += g[i] / (2.0 * y);
                           }
                         });
}

Tensor sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = stable_sigmoid(oa[i]);
  if (!a.on_tape()) return out;
  auto dy = out.storage();
  return a.tape()->adopt(std::move(out), {a.node()},
                         [dy](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                           auto dst = gin[0];
                           for (std::size_t i = 0; i < dst.size(); ++i) {
                             const double y = (*dy)[i];
                             dst[i] += g[i] * y * (1.0 - y);
                           }
                         });
}

Tensor smooth_leaky(const Tensor& a, double alpha) {
  Tensor out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    const double x = oa[i];
    od[i] = alpha * x + (1.0 - alpha) * 0.5 * (x + std::sqrt(x * x + kSmoothLeakyBeta));
  }
  if (!a.on_tape()) return out;
  auto da = a.storage();
  return a.tape()->adopt(
      std::move(out), {a.node()},
      [da, alpha](std::span<const double> g, const std::vector<std::span<double>>& gin) {
        auto dst = gin[0];
        for (std::size_t i = 0; i < dst.size(); ++i) {
          const double x = (*da)[i];
          dst[i] += g[i] * (alpha + (1.0 - alpha) * 0.5 *
                                        (1.0 + x / std::sqrt(x * x + kSmoothLeakyBeta)));
        }
      });
}

Tensor squash01(const Tensor& a) {
  Tensor out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    const double x = oa[i];
    od[i] = 0.5 + 0.5 * x / std::sqrt(1.0 + x * x);
  }
  if (!a.on_tape()) return out;
  auto da = a.storage();
  return a.tape()->adopt(std::move(out), {a.node()},
                         [da](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                           auto dst = gin[0];
                           for (std::size_t i = 0; i < dst.size(); ++i) {
                             const double x = (*da)[i];
                             const double s = std::sqrt(1.0 + x * x);
                             dst[i] += g[i] * 0.5 / (s * s * s);
                           }
                         });
}

// ---------------------------------------------------------------------------
// reductions / linear algebra
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor out = Tensor::scalar(s);
  if (!a.on_tape()) return out;
  return a.tape()->adopt(std::move(out), {a.node()},
                         [](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                           auto dst = gin[0];
                           for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[0];
                         });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      for (int j = 0; j < n; ++j) po[i * n + j] += av * pb[l * n + j];
    }
  Tape* tape = common_tape({&a, &b});
  if (!tape) return out;
  const bool ta = a.on_tape(), tb = b.on_tape();
  std::vector<int> in;
  if (ta) in.push_back(a.node());
  if (tb) in.push_back(b.node());
  auto da = a.storage(), db = b.storage();
  return tape->adopt(
      std::move(out), std::move(in),
      [ta, tb, da, db, m, k, n](std::span<const double> g,
                                const std::vector<std::span<double>>& gin) {
        int idx = 0;
        if (ta) {  // a_grad = g . b^T
          auto dst = gin[idx++];
          for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j) acc += g[i * n + j] * (*db)[l * n + j];
              dst[i * k + l] += acc;
            }
        }
        if (tb) {  // b_grad = a^T . g
          auto dst = gin[idx++];
          for (int l = 0; l < k; ++l)
            for (int i = 0; i < m; ++i) {
              const double av = (*da)[i * k + l];
              for (int j = 0; j < n; ++j) dst[l * n + j] += av * g[i * n + j];
            }
        }
      });
}

Tensor l2_norm(const Tensor& a) {
  double ss = 0.0;
  for (double x : a.data()) ss += x * x;
  const double r = std::sqrt(ss);
  Tensor out = Tensor::scalar(r);
  if (!a.on_tape()) return out;
  auto da = a.storage();
  return a.tape()->adopt(std::move(out), {a.node()},
                         [da, r](std::span<const double> g,
                                 const std::vector<std::span<double>>& gin) {
                           if (r == 0.0) return;
                           auto dst = gin[0];
                           for (std::size_t i = 0; i < dst.size(); ++i)
                             dst[i] += g[0] * (*da)[i] / r;
                         });
}

Tensor sum_row_norms(const Tensor& a) {
  if (a.rank() != 2)
    throw std::invalid_argument("sum_row_norms: expected [n,d], got " + shape_str(a.shape()));
  const int n = a.dim(0), d = a.dim(1);
  std::vector<double> norms(n, 0.0);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int j = 0; j < d; ++j) {
      const double x = a.at(i, j);
      ss += x * x;
    }
    norms[i] = std::sqrt(ss);
    total += norms[i];
  }
  Tensor out = Tensor::scalar(total);
  if (!a.on_tape()) return out;
  auto da = a.storage();
  return a.tape()->adopt(std::move(out), {a.node()},
                         [da, norms, n, d](std::span<const double> g,
                                           const std::vector<std::span<double>>& gin) {
                           auto dst = gin[0];
                           for (int i = 0; i < n; ++i) {
                             if (norms[i] == 0.0) continue;
                             for (int j = 0; j < d; ++j)
                               dst[i * d + j] += g[0] * (*da)[i * d + j] / norms[i];
                           }
                         });
}

// ---------------------------------------------------------------------------
// shape / gather
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) +
                                " -> " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (!a.on_tape()) return out;
  return a.tape()->adopt(std::move(out), {a.node()},
                         [](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                           axpy(gin[0], g, 1.0);
                         });
}

Tensor slice_flat(const Tensor& a, std::int64_t offset, std::int64_t len) {
  if (offset < 0 || len < 0 || offset + len > a.numel())
    throw std::invalid_argument("slice_flat: range [" + std::to_string(offset) + ", " +
                                std::to_string(offset + len) + ") outside " +
                                std::to_string(a.numel()) + " elements");
  Tensor out(Shape{static_cast<int>(len)});
  auto od = out.data();
  auto oa = a.data();
  std::copy(oa.begin() + offset, oa.begin() + offset + len, od.begin());
  if (!a.on_tape()) return out;
  return a.tape()->adopt(std::move(out), {a.node()},
                         [offset](std::span<const double> g,
                                  const std::vector<std::span<double>>& gin) {
                           auto dst = gin[0];
                           for (std::size_t i = 0; i < g.size(); ++i) dst[offset + i] += g[i];
                         });
}

Tensor row(const Tensor& a, int i) {
  if (a.rank() != 2) throw std::invalid_argument("row: expected rank-2 tensor");
  if (i < 0 || i >= a.dim(0)) throw std::invalid_argument("row: index out of range");
  return slice_flat(a, static_cast<std::int64_t>(i) * a.dim(1), a.dim(1));
}

Tensor concat_vec(const std::vector<Tensor>& parts) {
  std::int64_t total = 0;
  for (const Tensor& p : parts) total += p.numel();
  Tensor out(Shape{static_cast<int>(total)});
  auto od = out.data();
  std::int64_t pos = 0;
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), od.begin() + pos);
    pos += p.numel();
    if (p.on_tape()) tape = p.tape();
  }
  if (!tape) return out;
  // (start, len) of each taped part within the output
  std::vector<int> in;
  std::vector<std::pair<std::int64_t, std::int64_t>> spans;
  pos = 0;
  for (const Tensor& p : parts) {
    if (p.on_tape()) {
      if (p.tape() != tape) throw std::invalid_argument("concat_vec: inputs on different tapes");
      in.push_back(p.node());
      spans.emplace_back(pos, p.numel());
    }
    pos += p.numel();
  }
  return tape->adopt(std::move(out), std::move(in),
                     [spans](std::span<const double> g, const std::vector<std::span<double>>& gin) {
                       for (std::size_t k = 0; k < spans.size(); ++k) {
                         auto [start, len] = spans[k];
                         auto dst = gin[k];
                         for (std::int64_t i = 0; i < len; ++i) dst[i] += g[start + i];
                       }
                     });
}

Tensor slice_channels(const Tensor& img, int c0, int c1) {
  check_image("slice_channels", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw std::invalid_argument("slice_channels: range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") invalid for " + std::to_string(c) +
                                " channels");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out(Shape{c1 - c0, h, w});
  std::copy(img.data().begin() + c0 * plane, img.data().begin() + c1 * plane, out.data().begin());
  if (!img.on_tape()) return out;
  return img.tape()->adopt(std::move(out), {img.node()},
                           [c0, plane](std::span<const double> g,
                                       const std::vector<std::span<double>>& gin) {
                             auto dst = gin[0];
                             for (std::size_t i = 0; i < g.size(); ++i)
                               dst[c0 * plane + i] += g[i];
                           });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check_image("concat_channels", a);
  check_image("concat_channels", b);
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw std::invalid_argument("concat_channels: spatial dims differ");
  Tensor out(Shape{a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  auto od = out.data();
  std::copy(a.data().begin(), a.data().end(), od.begin());
  std::copy(b.data().begin(), b.data().end(), od.begin() + a.numel());
  Tape* tape = common_tape({&a, &b});
  if (!tape) return out;
  const bool ta = a.on_tape(), tb = b.on_tape();
  std::vector<int> in;
  if (ta) in.push_back(a.node());
  if (tb) in.push_back(b.node());
  const std::int64_t na = a.numel();
  return tape->adopt(std::move(out), std::move(in),
                     [ta, tb, na](std::span<const double> g,
                                  const std::vector<std::span<double>>& gin) {
                       int k = 0;
                       if (ta) {
                         auto dst = gin[k++];
                         for (std::int64_t i = 0; i < na; ++i) dst[i] += g[i];
                       }
                       if (tb) {
                         auto dst = gin[k++];
                         for (std::size_t i = na; i < g.size(); ++i) dst[i - na] += g[i];
                       }
                     });
}

Tensor crop(const Tensor& img, const BBox& box) {
  check_image("crop", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (box.row < 0 || box.col < 0 || box.height <= 0 || box.width <= 0 || box.row_end() > h ||
      box.col_end() > w)
    throw std::invalid_argument("crop: box (" + std::to_string(box.row) + "," +
                                std::to_string(box.col) + "," + std::to_string(box.height) + "," +
                                std::to_string(box.width) + ") not inside " + shape_str(img.shape()));
  Tensor out(Shape{c, box.height, box.width});
  const double* src = img.data().data();
  double* dst = out.data().data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < box.height; ++i)
      std::memcpy(dst + (static_cast<std::int64_t>(ch) * box.height + i) * box.width,
                  src + (static_cast<std::int64_t>(ch) * h + box.row + i) * w + box.col,
                  sizeof(double) * box.width);
  if (!img.on_tape()) return out;
  return img.tape()->adopt(std::move(out), {img.node()},
                           [box, c, h, w](std::span<const double> g,
                                          const std::vector<std::span<double>>& gin) {
                             auto dst = gin[0];
                             for (int ch = 0; ch < c; ++ch)
                               for (int i = 0; i < box.height; ++i)
                                 for (int j = 0; j < box.width; ++j)
                                   dst[(static_cast<std::int64_t>(ch) * h + box.row + i) * w +
                                       box.col + j] +=
                                       g[(static_cast<std::int64_t>(ch) * box.height + i) *
                                             box.width +
                                         j];
                           });
}

Tensor gather_border(const Tensor& img, int width) {
  check_image("gather_border", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (width < 1 || 2 * width > h || 2 * width > w)
    throw std::invalid_argument("gather_border: width " + std::to_string(width) +
                                " too large for " + shape_str(img.shape()));
  const std::vector<int> idx = border_offsets(h, w, width);
  const int n = static_cast<int>(idx.size());
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out(Shape{c, n});
  const double* src = img.data().data();
  double* dst = out.data().data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < n; ++i) dst[ch * n + i] = src[ch * plane + idx[i]];
  if (!img.on_tape()) return out;
  return img.tape()->adopt(std::move(out), {img.node()},
                           [idx, c, n, plane](std::span<const double> g,
                                              const std::vector<std::span<double>>& gin) {
                             auto dst = gin[0];
                             for (int ch = 0; ch < c; ++ch)
                               for (int i = 0; i < n; ++i)
                                 dst[ch * plane + idx[i]] += g[ch * n + i];
                           });
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

Tensor resize_bilinear(const Tensor& img, int out_h, int out_w) {
  check_image("resize_bilinear", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: bad output size");
  if (out_h == h && out_w == w) {
    // identity resize is an exact copy
    Tensor out(img.shape(), std::vector<double>(img.data().begin(), img.data().end()));
    if (!img.on_tape()) return out;
    return img.tape()->adopt(std::move(out), {img.node()},
                             [](std::span<const double> g,
                                const std::vector<std::span<double>>& gin) {
                               axpy(gin[0], g, 1.0);
                             });
  }
  const LerpAxis ay = make_axis(h, out_h);
  const LerpAxis ax = make_axis(w, out_w);
  Tensor out(Shape{c, out_h, out_w});
  const double* src = img.data().data();
  double* dst = out.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = src + static_cast<std::int64_t>(ch) * h * w;
    for (int i = 0; i < out_h; ++i) {
      const double* r0 = plane + ay.i0[i] * w;
      const double* r1 = plane + ay.i1[i] * w;
      const double wy0 = ay.w0[i], wy1 = ay.w1[i];
      double* orow = dst + (static_cast<std::int64_t>(ch) * out_h + i) * out_w;
      for (int j = 0; j < out_w; ++j) {
        orow[j] = wy0 * (ax.w0[j] * r0[ax.i0[j]] + ax.w1[j] * r0[ax.i1[j]]) +
                  wy1 * (ax.w0[j] * r1[ax.i0[j]] + ax.w1[j] * r1[ax.i1[j]]);
      }
    }
  }
  if (!img.on_tape()) return out;
  return img.tape()->adopt(
      std::move(out), {img.node()},
      [ay, ax, c, h, w, out_h, out_w](std::span<const double> g,
                                      const std::vector<std::span<double>>& gin) {
        auto dst = gin[0];
        for (int ch = 0; ch < c; ++ch) {
          double* plane = dst.data() + static_cast<std::int64_t>(ch) * h * w;
          for (int i = 0; i < out_h; ++i) {
            const double wy0 = ay.w0[i], wy1 = ay.w1[i];
            double* r0 = plane + ay.i0[i] * w;
            double* r1 = plane + ay.i1[i] * w;
            const double* grow = g.data() + (static_cast<std::int64_t>(ch) * out_h + i) * out_w;
            for (int j = 0; j < out_w; ++j) {
              const double gv = grow[j];
              r0[ax.i0[j]] += gv * wy0 * ax.w0[j];
              r0[ax.i1[j]] += gv * wy0 * ax.w1[j];
              r1[ax.i0[j]] += gv * wy1 * ax.w0[j];
              r1[ax.i1[j]] += gv * wy1 * ax.w1[j];
            }
          }
        }
      });
}

Tensor upsample_bilinear_2x(const Tensor& img) {
  check_image("upsample_bilinear_2x", img);
  return resize_bilinear(img, 2 * img.dim(1), 2 * img.dim(2));
}

Tensor downsample_avg(const Tensor& img, int target) {
  check_image("downsample_avg", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (target < 1 || h % target != 0 || w % target != 0)
    throw std::invalid_argument("downsample_avg: " + shape_str(img.shape()) +
                                " not divisible by target " + std::to_string(target));
  const int fh = h / target, fw = w / target;
  if (fh == 1 && fw == 1) return reshape(img, img.shape());  // identity at target size
  const double inv = 1.0 / (static_cast<double>(fh) * fw);
  Tensor out(Shape{c, target, target});
  const double* src = img.data().data();
  double* dst = out.data().data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < target; ++i)
      for (int j = 0; j < target; ++j) {
        double acc = 0.0;
        for (int di = 0; di < fh; ++di) {
          const double* srow =
              src + (static_cast<std::int64_t>(ch) * h + i * fh + di) * w + j * fw;
          for (int dj = 0; dj < fw; ++dj) acc += srow[dj];
        }
        dst[(static_cast<std::int64_t>(ch) * target + i) * target + j] = acc * inv;
      }
  if (!img.on_tape()) return out;
  return img.tape()->adopt(std::move(out), {img.node()},
                           [c, h, w, target, fh, fw, inv](
                               std::span<const double> g,
                               const std::vector<std::span<double>>& gin) {
                             auto dst = gin[0];
                             for (int ch = 0; ch < c; ++ch)
                               for (int i = 0; i < target; ++i)
                                 for (int j = 0; j < target; ++j) {
                                   const double gv =
                                       g[(static_cast<std::int64_t>(ch) * target + i) * target +
                                         j] *
                                       inv;
                                   for (int di = 0; di < fh; ++di) {
                                     double* drow = dst.data() +
                                                    (static_cast<std::int64_t>(ch) * h + i * fh +
                                                     di) *
                                                        w +
                                                    j * fw;
                                     for (int dj = 0; dj < fw; ++dj) drow[dj] += gv;
                                   }
                                 }
                           });
}

Tensor avg_pool2(const Tensor& img) {
  check_image("avg_pool2", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw std::invalid_argument("avg_pool2: odd spatial dims " + shape_str(img.shape()));
  const int oh = h / 2, ow = w / 2;
  Tensor out(Shape{c, oh, ow});
  const double* src = img.data().data();
  double* dst = out.data().data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < oh; ++i) {
      const double* r0 = src + (static_cast<std::int64_t>(ch) * h + 2 * i) * w;
      const double* r1 = r0 + w;
      double* orow = dst + (static_cast<std::int64_t>(ch) * oh + i) * ow;
      for (int j = 0; j < ow; ++j)
        orow[j] = 0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]);
    }
  if (!img.on_tape()) return out;
  return img.tape()->adopt(std::move(out), {img.node()},
                           [c, h, w, oh, ow](std::span<const double> g,
                                             const std::vector<std::span<double>>& gin) {
                             auto dst = gin[0];
                             for (int ch = 0; ch < c; ++ch)
                               for (int i = 0; i < oh; ++i) {
                                 double* r0 =
                                     dst.data() + (static_cast<std::int64_t>(ch) * h + 2 * i) * w;
                                 double* r1 = r0 + w;
                                 const double* grow =
                                     g.data() + (static_cast<std::int64_t>(ch) * oh + i) * ow;
                                 for (int j = 0; j < ow; ++j) {
                                   const double gv = 0.25 * grow[j];
                                   r0[2 * j] += gv;
                                   r0[2 * j + 1] += gv;
                                   r1[2 * j] += gv;
                                   r1[2 * j + 1] += gv;
                                 }
                               }
                           });
}

// ---------------------------------------------------------------------------
// fixed-weight convolutions
// ---------------------------------------------------------------------------

Tensor conv3x3(const Tensor& img, const std::vector<double>& weights, int out_channels,
               const std::vector<double>& bias) {
  check_image("conv3x3", img);
  const int ic = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (weights.size() != static_cast<std::size_t>(out_channels) * ic * 9)
    throw std::invalid_argument("conv3x3: weight count mismatch");
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(out_channels))
    throw std::invalid_argument("conv3x3: bias count mismatch");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out(Shape{out_channels, h, w});
  double* dst = out.data().data();
  const double* src = img.data().data();
  for (int o = 0; o < out_channels; ++o) {
    double* op = dst + o * plane;
    if (!bias.empty())
      for (std::int64_t p = 0; p < plane; ++p) op[p] = bias[o];
    for (int c = 0; c < ic; ++c)
      conv_plane_accum(op, src + c * plane, weights.data() + (o * ic + c) * 9, h, w);
  }
  if (!img.on_tape()) return out;
  return img.tape()->adopt(std::move(out), {img.node()},
                           [weights, out_channels, ic, h, w, plane](
                               std::span<const double> g,
                               const std::vector<std::span<double>>& gin) {
                             auto dst = gin[0];
                             for (int o = 0; o < out_channels; ++o)
                               for (int c = 0; c < ic; ++c) {
                                 const auto fk = flip3x3(weights.data() + (o * ic + c) * 9);
                                 conv_plane_accum(dst.data() + c * plane, g.data() + o * plane,
                                                  fk.data(), h, w);
                               }
                           });
}

Tensor depthwise3x3(const Tensor& img, const std::vector<double>& kernels) {
  check_image("depthwise3x3", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (kernels.size() != static_cast<std::size_t>(c) * 9)
    throw std::invalid_argument("depthwise3x3: kernel count mismatch");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out(Shape{c, h, w});
  for (int ch = 0; ch < c; ++ch)
    conv_plane_accum(out.data().data() + ch * plane, img.data().data() + ch * plane,
                     kernels.data() + ch * 9, h, w);
  if (!img.on_tape()) return out;
  return img.tape()->adopt(std::move(out), {img.node()},
                           [kernels, c, h, w, plane](std::span<const double> g,
                                                     const std::vector<std::span<double>>& gin) {
                             auto dst = gin[0];
                             for (int ch = 0; ch < c; ++ch) {
                               const auto fk = flip3x3(kernels.data() + ch * 9);
                               conv_plane_accum(dst.data() + ch * plane, g.data() + ch * plane,
                                                fk.data(), h, w);
                             }
                           });
}

Tensor conv1x1(const Tensor& img, const std::vector<double>& mix, int out_channels,
               const std::vector<double>& bias) {
  check_image("conv1x1", img);
  const int ic = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (mix.size() != static_cast<std::size_t>(out_channels) * ic)
    throw std::invalid_argument("conv1x1: mix matrix size mismatch");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out(Shape{out_channels, h, w});
  double* dst = out.data().data();
  const double* src = img.data().data();
  for (int o = 0; o < out_channels; ++o) {
    double* op = dst + o * plane;
    if (!bias.empty()) {
      const double b = bias[o];
      for (std::int64_t p = 0; p < plane; ++p) op[p] = b;
    }
    for (int c = 0; c < ic; ++c) {
      const double m = mix[o * ic + c];
      const double* sp = src + c * plane;
      for (std::int64_t p = 0; p < plane; ++p) op[p] += m * sp[p];
    }
  }
  if (!img.on_tape()) return out;
  return img.tape()->adopt(std::move(out), {img.node()},
                           [mix, out_channels, ic, plane](
                               std::span<const double> g,
                               const std::vector<std::span<double>>& gin) {
                             auto dst = gin[0];
                             for (int c = 0; c < ic; ++c) {
                               double* dp = dst.data() + c * plane;
                               for (int o = 0; o < out_channels; ++o) {
                                 const double m = mix[o * ic + c];
                                 const double* gp = g.data() + o * plane;
                                 for (std::int64_t p = 0; p < plane; ++p) dp[p] += m * gp[p];
                               }
                             }
                           });
}

Tensor linear_const(const std::vector<double>& w, int m, int n, const Tensor& x,
                    const std::vector<double>& bias) {
  if (x.numel() != n)
    throw std::invalid_argument("linear_const: expected " + std::to_string(n) +
                                " inputs, got " + std::to_string(x.numel()));
  if (w.size() != static_cast<std::size_t>(m) * n)
    throw std::invalid_argument("linear_const: weight matrix size mismatch");
  Tensor out(Shape{m});
  auto od = out.data();
  auto xd = x.data();
  for (int i = 0; i < m; ++i) {
    double acc = bias.empty() ? 0.0 : bias[i];
    const double* wr = w.data() + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) acc += wr[j] * xd[j];
    od[i] = acc;
  }
  if (!x.on_tape()) return out;
  return x.tape()->adopt(std::move(out), {x.node()},
                         [w, m, n](std::span<const double> g,
                                   const std::vector<std::span<double>>& gin) {
                           auto dst = gin[0];
                           for (int i = 0; i < m; ++i) {
                             const double gv = g[i];
                             const double* wr = w.data() + static_cast<std::int64_t>(i) * n;
                             for (int j = 0; j < n; ++j) dst[j] += gv * wr[j];
                           }
                         });
}

// ---------------------------------------------------------------------------
// modulation / normalization
// ---------------------------------------------------------------------------

Tensor channel_affine(const Tensor& img, const Tensor& scale, const Tensor& shift) {
  check_image("channel_affine", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (scale.numel() != c || shift.numel() != c)
    throw std::invalid_argument("channel_affine: scale/shift must have one entry per channel");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out(img.shape());
  double* dst = out.data().data();
  const double* src = img.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const double s = scale.data()[ch], t = shift.data()[ch];
    const double* sp = src + ch * plane;
    double* op = dst + ch * plane;
    for (std::int64_t p = 0; p < plane; ++p) op[p] = s * sp[p] + t;
  }
  Tape* tape = common_tape({&img, &scale, &shift});
  if (!tape) return out;
  const bool ti = img.on_tape(), ts = scale.on_tape(), tt = shift.on_tape();
  std::vector<int> in;
  if (ti) in.push_back(img.node());
  if (ts) in.push_back(scale.node());
  if (tt) in.push_back(shift.node());
  auto dimg = img.storage();
  auto dscale = scale.storage();
  return tape->adopt(std::move(out), std::move(in),
                     [ti, ts, tt, dimg, dscale, c, plane](
                         std::span<const double> g, const std::vector<std::span<double>>& gin) {
                       int k = 0;
                       if (ti) {
                         auto dst = gin[k++];
                         for (int ch = 0; ch < c; ++ch) {
                           const double s = (*dscale)[ch];
                           for (std::int64_t p = 0; p < plane; ++p)
                             dst[ch * plane + p] += s * g[ch * plane + p];
                         }
                       }
                       if (ts) {
                         auto dst = gin[k++];
                         for (int ch = 0; ch < c; ++ch) {
                           double acc = 0.0;
                           for (std::int64_t p = 0; p < plane; ++p)
                             acc += g[ch * plane + p] * (*dimg)[ch * plane + p];
                           dst[ch] += acc;
                         }
                       }
                       if (tt) {
                         auto dst = gin[k++];
                         for (int ch = 0; ch < c; ++ch) {
                           double acc = 0.0;
                           for (std::int64_t p = 0; p < plane; ++p) acc += g[ch * plane + p];
                           dst[ch] += acc;
                         }
                       }
                     });
}

Tensor channel_affine_field(const Tensor& img, const Tensor& u, const Tensor& v,
                            const std::vector<double>& prof_scale,
                            const std::vector<double>& prof_shift, double gain) {
  check_image("channel_affine_field", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  if (u.numel() != c || v.numel() != c)
    throw std::invalid_argument("channel_affine_field: u/v must have one entry per channel");
  if (prof_scale.size() != static_cast<std::size_t>(img.numel()) ||
      prof_shift.size() != static_cast<std::size_t>(img.numel()))
    throw std::invalid_argument("channel_affine_field: profile size mismatch");
  Tensor out(img.shape());
  double* dst = out.data().data();
  const double* src = img.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const double uc = gain * u.data()[ch], vc = gain * v.data()[ch];
    const double* sp = src + ch * plane;
    const double* pp = prof_scale.data() + ch * plane;
    const double* qp = prof_shift.data() + ch * plane;
    double* op = dst + ch * plane;
    for (std::int64_t p = 0; p < plane; ++p) op[p] = sp[p] * (1.0 + uc * pp[p]) + vc * qp[p];
  }
  Tape* tape = common_tape({&img, &u, &v});
  if (!tape) return out;
  const bool ti = img.on_tape(), tu = u.on_tape(), tv = v.on_tape();
  std::vector<int> in;
  if (ti) in.push_back(img.node());
  if (tu) in.push_back(u.node());
  if (tv) in.push_back(v.node());
  auto dimg = img.storage();
  auto du = u.storage();
  return tape->adopt(
      std::move(out), std::move(in),
      [ti, tu, tv, dimg, du, prof_scale, prof_shift, gain, c, plane](
          std::span<const double> g, const std::vector<std::span<double>>& gin) {
        int k = 0;
        if (ti) {
          auto dst = gin[k++];
          for (int ch = 0; ch < c; ++ch) {
            const double uc = gain * (*du)[ch];
            const double* pp = prof_scale.data() + ch * plane;
            for (std::int64_t p = 0; p < plane; ++p)
              dst[ch * plane + p] += g[ch * plane + p] * (1.0 + uc * pp[p]);
          }
        }
        if (tu) {
          auto dst = gin[k++];
          for (int ch = 0; ch < c; ++ch) {
            const double* pp = prof_scale.data() + ch * plane;
            double acc = 0.0;
            for (std::int64_t p = 0; p < plane; ++p)
              acc += g[ch * plane + p] * (*dimg)[ch * plane + p] * pp[p];
            dst[ch] += gain * acc;
          }
        }
        if (tv) {
          auto dst = gin[k++];
          for (int ch = 0; ch < c; ++ch) {
            const double* qp = prof_shift.data() + ch * plane;
            double acc = 0.0;
            for (std::int64_t p = 0; p < plane; ++p) acc += g[ch * plane + p] * qp[p];
            dst[ch] += gain * acc;
          }
        }
      });
}

Tensor channel_norm(const Tensor& img, double eps) {
  check_image("channel_norm", img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<double> inv_norm(plane, 0.0);
  const double* src = img.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const double* sp = src + ch * plane;
    for (std::int64_t p = 0; p < plane; ++p) inv_norm[p] += sp[p] * sp[p];
  }
  for (std::int64_t p = 0; p < plane; ++p) inv_norm[p] = 1.0 / std::sqrt(inv_norm[p] + eps);
  Tensor out(img.shape());
  double* dst = out.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const double* sp = src + ch * plane;
    double* op = dst + ch * plane;
    for (std::int64_t p = 0; p < plane; ++p) op[p] = sp[p] * inv_norm[p];
  }
  if (!img.on_tape()) return out;
  auto dimg = img.storage();
  return img.tape()->adopt(
      std::move(out), {img.node()},
      [dimg, inv_norm, c, plane](std::span<const double> g,
                                 const std::vector<std::span<double>>& gin) {
        auto dst = gin[0];
        std::vector<double> dot(plane, 0.0);
        for (int ch = 0; ch < c; ++ch)
          for (std::int64_t p = 0; p < plane; ++p)
            dot[p] += g[ch * plane + p] * (*dimg)[ch * plane + p];
        for (int ch = 0; ch < c; ++ch)
          for (std::int64_t p = 0; p < plane; ++p) {
            const double in = inv_norm[p];
            dst[ch * plane + p] +=
                in * g[ch * plane + p] - in * in * in * dot[p] * (*dimg)[ch * plane + p];
          }
      });
}

Tensor ellipse_map(const Tensor& cr, const Tensor& cc, const Tensor& rr, const Tensor& rc, int h,
                   int w, double steepness) {
  for (const Tensor* t : {&cr, &cc, &rr, &rc})
    if (t->numel() != 1) throw std::invalid_argument("ellipse_map: parameters must be scalars");
  const double vcr = cr.data()[0], vcc = cc.data()[0], vrr = rr.data()[0], vrc = rc.data()[0];
  if (vrr <= 0.0 || vrc <= 0.0) throw std::invalid_argument("ellipse_map: radii must be positive");
  Tensor out(Shape{1, h, w});
  double* dst = out.data().data();
  for (int i = 0; i < h; ++i) {
    const double a = (i - vcr) / vrr;
    for (int j = 0; j < w; ++j) {
      const double b = (j - vcc) / vrc;
      const double u = steepness * (1.0 - a * a - b * b);
      dst[i * w + j] = 0.5 + 0.5 * u / std::sqrt(1.0 + u * u);
    }
  }
  Tape* tape = common_tape({&cr, &cc, &rr, &rc});
  if (!tape) return out;
  const bool t0 = cr.on_tape(), t1 = cc.on_tape(), t2 = rr.on_tape(), t3 = rc.on_tape();
  std::vector<int> in;
  if (t0) in.push_back(cr.node());
  if (t1) in.push_back(cc.node());
  if (t2) in.push_back(rr.node());
  if (t3) in.push_back(rc.node());
  return tape->adopt(
      std::move(out), std::move(in),
      [t0, t1, t2, t3, vcr, vcc, vrr, vrc, h, w, steepness](
          std::span<const double> g, const std::vector<std::span<double>>& gin) {
        double gcr = 0.0, gcc = 0.0, grr = 0.0, grc = 0.0;
        for (int i = 0; i < h; ++i) {
          const double a = (i - vcr) / vrr;
          for (int j = 0; j < w; ++j) {
            const double b = (j - vcc) / vrc;
            const double u = steepness * (1.0 - a * a - b * b);
            const double s = std::sqrt(1.0 + u * u);
            const double t = g[i * w + j] * 0.5 / (s * s * s) * steepness;
            gcr += t * 2.0 * a / vrr;
            gcc += t * 2.0 * b / vrc;
            grr += t * 2.0 * a * a / vrr;
            grc += t * 2.0 * b * b / vrc;
          }
        }
        int k = 0;
        if (t0) gin[k++][0] += gcr;
        if (t1) gin[k++][0] += gcc;
        if (t2) gin[k++][0] += grr;
        if (t3) gin[k++][0] += grc;
      });
}

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

void adam_update(AdamState& state, std::span<double> param, std::span<const double> grad,
                 double lr) {
  if (param.size() != grad.size() || state.m.size() != param.size() ||
      state.v.size() != param.size())
    throw std::invalid_argument("adam_update: size mismatch");
  if (!(lr > 0.0)) throw std::invalid_argument("adam_update: lr must be positive");
  state.step_count += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

double fd_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
  return std::fabs(analytic - numeric) / denom;
}

GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&, Tape&)>& f,
                                        const Tensor& x0, double eps, int max_coords,
                                        std::uint64_t coord_seed) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
  Tape tape;
  Tensor x = tape.leaf(x0);
  Tensor loss = f(x, tape);
  Tensor g = tape.gradients(loss, {x})[0];

  auto eval = [&](const Tensor& pt) {
    Tape t;
    Tensor xx = t.leaf(pt);
    return f(xx, t).value();
  };

  std::vector<std::int64_t> coords;
  const std::int64_t n = x0.numel();
  if (max_coords > 0 && max_coords < n) {
    Rng rng(coord_seed);
    for (int i = 0; i < max_coords; ++i)
      coords.push_back(static_cast<std::int64_t>(rng.next_u64() % n));
  } else {
    coords.resize(n);
    for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
  }

  GradCheckResult res;
  Tensor pt(x0.shape(), std::vector<double>(x0.data().begin(), x0.data().end()));
  for (std::int64_t i : coords) {
    const double saved = pt.data()[i];
    pt.data()[i] = saved + eps;
    const double fp = eval(pt);
    pt.data()[i] = saved - eps;
    const double fm = eval(pt);
    pt.data()[i] = saved;
    const double fd = (fp - fm) / (2.0 * eps);
    const double an = g.data()[i];
    res.max_rel_err = std::max(res.max_rel_err, fd_rel_err(an, fd));
    res.max_abs_err = std::max(res.max_abs_err, std::fabs(an - fd));
  }
  return res;
}

double finite_difference_directional(const std::function<Tensor(const Tensor&, Tape&)>& f,
                                     const Tensor& x0, const std::vector<double>& dir,
                                     double eps) {
  if (static_cast<std::int64_t>(dir.size()) != x0.numel())
    throw std::invalid_argument("finite_difference_directional: direction size mismatch");
  Tape tape;
  Tensor x = tape.leaf(x0);
  Tensor loss = f(x, tape);
  Tensor g = tape.gradients(loss, {x})[0];
  double analytic = 0.0;
  for (std::size_t i = 0; i < dir.size(); ++i) analytic += g.data()[i] * dir[i];

  auto eval_offset = [&](double t) {
    Tensor pt(x0.shape(), std::vector<double>(x0.data().begin(), x0.data().end()));
    for (std::size_t i = 0; i < dir.size(); ++i) pt.data()[i] += t * dir[i];
    Tape tp;
    Tensor xx = tp.leaf(pt);
    return f(xx, tp).value();
  };
  const double numeric = (eval_offset(eps) - eval_offset(-eps)) / (2.0 * eps);
  return fd_rel_err(analytic, numeric);
}

}  // namespace insetopt
