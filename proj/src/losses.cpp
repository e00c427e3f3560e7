#include "insetopt/losses.hpp"

#include <cmath>

#include "insetopt/rng.hpp"

namespace insetopt {

Tensor Region::mask(int channels, int h, int w) const {
  if (box.row < 0 || box.col < 0 || box.row_end() > h || box.col_end() > w || box.height <= 0 ||
      box.width <= 0)
    throw std::invalid_argument("region: anchor bbox does not fit image");
  Tensor m(Shape{channels, h, w});
  auto inside_box = [&](int i, int j) {
    return i >= box.row && i < box.row_end() && j >= box.col && j < box.col_end();
  };
  auto in_border = [&](int i, int j) {
    if (!inside_box(i, j)) return false;
    const int di = i - box.row, dj = j - box.col;
    return di < width || di >= box.height - width || dj < width || dj >= box.width - width;
  };
  std::int64_t count = 0;
  double* d = m.data().data();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      bool sel = false;
      switch (kind) {
        case Kind::interior:
          sel = inside_box(i, j) && !in_border(i, j);
          break;
        case Kind::exterior:
          sel = !inside_box(i, j);
          break;
        case Kind::border:
          sel = in_border(i, j);
          break;
        case Kind::full:
          sel = true;
          break;
      }
      if (sel) {
        ++count;
        for (int c = 0; c < channels; ++c) d[(static_cast<std::int64_t>(c) * h + i) * w + j] = 1.0;
      }
    }
  if (count == 0) throw std::invalid_argument("region: selection is empty for this image");
  return m;
}

FeatureExtractor FeatureExtractor::make(std::uint64_t seed, int channels) {
  if (channels < 1) throw std::invalid_argument("feature extractor needs >= 1 channel");
  FeatureExtractor fx;
  fx.seed_ = seed;
  fx.channels_ = channels;
  Rng rng(seed);
  auto draw = [&](std::size_t n, double scale) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
  };
  const int c = channels;
  fx.w1_ = draw(static_cast<std::size_t>(c) * 3 * 9, 1.0 / std::sqrt(27.0));
  fx.b1_ = draw(c, 0.1);
  fx.w2_ = draw(static_cast<std::size_t>(c) * c * 9, 1.0 / std::sqrt(9.0 * c));
  fx.b2_ = draw(c, 0.1);
  fx.w3_ = draw(static_cast<std::size_t>(c) * c * 9, 1.0 / std::sqrt(9.0 * c));
  fx.b3_ = draw(c, 0.1);
  return fx;
}

FeatureExtractor::Stack FeatureExtractor::extract(const Tensor& img) const {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("feature extractor expects a [3,h,w] image, got " +
                                shape_str(img.shape()));
  Stack out;
  Tensor x = img;
  const std::vector<double>* ws[3] = {&w1_, &w2_, &w3_};
  const std::vector<double>* bs[3] = {&b1_, &b2_, &b3_};
  for (int s = 0; s < 3; ++s) {
    x = avg_pool2(smooth_leaky(conv3x3(x, *ws[s], channels_, *bs[s])));
    out[s] = channel_norm(x);
  }
  return out;
}

Tensor border_region(const Tensor& img, int x) { return gather_border(img, x); }

Tensor perceptual_distance(const Tensor& a, const Tensor& b, const FeatureExtractor& fx) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("perceptual_distance: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  return perceptual_distance(a, fx.extract(b), fx);
}

Tensor perceptual_distance(const Tensor& a, const FeatureExtractor::Stack& b_stack,
                           const FeatureExtractor& fx) {
  const FeatureExtractor::Stack a_stack = fx.extract(a);
  Tensor total;
  for (int s = 0; s < 3; ++s) {
    Tensor d = mean(square(sub(a_stack[s], b_stack[s])));
    total = (s == 0) ? d : add(total, d);
  }
  return total;
}

Tensor l1_mean(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("l1_mean: shape mismatch");
  return mean(abs(sub(a, b)));
}

namespace {

Tensor to_coarse(const Tensor& img, int target) {
  if (img.dim(1) == target && img.dim(2) == target) return img;
  return downsample_avg(img, target);
}

}  // namespace

Tensor coarse_appearance_loss(const Tensor& canvas_crop, const Tensor& inset, double lambda1,
                              double lambda2, const FeatureExtractor& fx) {
  const int target = std::min({64, canvas_crop.dim(1), inset.dim(1)});
  Tensor a = to_coarse(canvas_crop, target);
  Tensor b = to_coarse(inset, target);
  Tensor loss = mul_scalar(l1_mean(a, b), lambda1);
  if (lambda2 != 0.0) loss = add(loss, mul_scalar(perceptual_distance(a, b, fx), lambda2));
  return loss;
}

Tensor border_loss(const Tensor& canvas_crop, const Tensor& inset, double lambda3,
                   double lambda4, const FeatureExtractor& fx) {
  if (canvas_crop.shape() != inset.shape())
    throw std::invalid_argument("border_loss: crop must be resized to the inset resolution");
  const int h = canvas_crop.dim(1), w = canvas_crop.dim(2);
  if (h <= 2 * kBorderWidth || w <= 2 * kBorderWidth)
    throw std::invalid_argument("border_loss: image smaller than " +
                                std::to_string(2 * kBorderWidth + 1) + "x" +
                                std::to_string(2 * kBorderWidth + 1));
  Tensor l1 = l1_mean(border_region(canvas_crop, kBorderWidth),
                      border_region(inset, kBorderWidth));
  Tensor loss = mul_scalar(l1, lambda4);
  if (lambda3 != 0.0) {
    const Tensor m = Region::border(BBox{0, 0, h, w}).mask(canvas_crop.dim(0), h, w);
    loss = add(loss, mul_scalar(
                         perceptual_distance(mul(canvas_crop, m), mul(inset, m), fx), lambda3));
  }
  return loss;
}

double border_l1_value(const Tensor& canvas_crop, const Tensor& inset) {
  return l1_mean(border_region(canvas_crop, kBorderWidth), border_region(inset, kBorderWidth))
      .value();
}

Tensor latent_regularizer(const LatentNodes& w, const std::vector<double>& w_avg,
                          double lambda_r1, double lambda_r2) {
  if (w.base.numel() != static_cast<std::int64_t>(w_avg.size()))
    throw std::invalid_argument("latent_regularizer: w_avg dimension mismatch");
  Tensor base_term = l2_norm(sub(w.base, Tensor::from_vector(w_avg)));
  Tensor delta_term = sum_row_norms(w.deltas);
  return add(mul_scalar(base_term, lambda_r1), mul_scalar(delta_term, lambda_r2));
}

Tensor region_preservation_loss(const Tensor& img, const Tensor& ref, const Region& region,
                                double lambda_a, double lambda_b, const FeatureExtractor& fx) {
  if (img.shape() != ref.shape())
    throw std::invalid_argument("region_preservation_loss: shape mismatch");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const Tensor m = region.mask(c, h, w);
  double count = 0.0;
  for (double v : m.data()) count += v;
  Tensor l1 = mul_scalar(sum(mul(abs(sub(img, ref)), m)), 1.0 / count);
  Tensor loss = mul_scalar(l1, lambda_a);
  if (lambda_b != 0.0)
    loss = add(loss, mul_scalar(perceptual_distance(mul(img, m), mul(ref, m), fx), lambda_b));
  return loss;
}

double seam_energy(const Tensor& composite, const BBox& bbox) {
  if (composite.rank() != 3) throw std::invalid_argument("seam_energy: expected [c,h,w]");
  const int c = std::min(composite.dim(0), 3), h = composite.dim(1), w = composite.dim(2);
  if (bbox.row < 0 || bbox.col < 0 || bbox.row_end() > h || bbox.col_end() > w)
    throw std::invalid_argument("seam_energy: bbox outside image");
  double total = 0.0;
  std::int64_t count = 0;
  auto accum = [&](int ri, int ci, int ro, int co) {
    for (int ch = 0; ch < c; ++ch)
      total += std::fabs(composite.at(ch, ri, ci) - composite.at(ch, ro, co));
    count += c;
  };
  for (int j = bbox.col; j < bbox.col_end(); ++j) {
    if (bbox.row > 0) accum(bbox.row, j, bbox.row - 1, j);
    if (bbox.row_end() < h) accum(bbox.row_end() - 1, j, bbox.row_end(), j);
  }
  for (int i = bbox.row; i < bbox.row_end(); ++i) {
    if (bbox.col > 0) accum(i, bbox.col, i, bbox.col - 1);
    if (bbox.col_end() < w) accum(i, bbox.col_end() - 1, i, bbox.col_end());
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace insetopt
