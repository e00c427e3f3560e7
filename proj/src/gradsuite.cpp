#include "insetopt/gradsuite.hpp"

#include <cmath>
#include <functional>

#include "insetopt/composer.hpp"
#include "insetopt/detector.hpp"
#include "insetopt/generator.hpp"
#include "insetopt/losses.hpp"
#include "insetopt/rng.hpp"
#include "insetopt/tensor.hpp"

namespace insetopt {

namespace {

using LossFn = std::function<Tensor(const Tensor&, Tape&)>;

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = lo + (hi - lo) * rng.uniform();
  return t;
}

struct Suite {
  int points;
  std::vector<GradCheckEntry> out;

  void coordwise(const std::string& name, const std::function<LossFn(Rng&)>& make_f,
                 const std::function<Tensor(Rng&)>& make_x, double eps, int max_coords = 32,
                 double threshold = 1e-5) {
    GradCheckEntry e{name, 0.0, threshold};
    for (int p = 0; p < points; ++p) {
      Rng rng(fnv(name) + 31 * p);
      LossFn f = make_f(rng);
      Tensor x0 = make_x(rng);
      const GradCheckResult r = finite_difference_check(f, x0, eps, max_coords, fnv(name) + p);
      e.max_rel_err = std::max(e.max_rel_err, r.max_rel_err);
    }
    out.push_back(e);
  }

  void directional(const std::string& name, const std::function<LossFn(Rng&)>& make_f,
                   const std::function<Tensor(Rng&)>& make_x, double eps,
                   double threshold = 1e-5) {
    GradCheckEntry e{name, 0.0, threshold};
    for (int p = 0; p < points; ++p) {
      Rng rng(fnv(name) + 131 * p);
      LossFn f = make_f(rng);
      Tensor x0 = make_x(rng);
      std::vector<double> dir(x0.numel());
      double norm = 0.0;
      for (auto& d : dir) {
        d = rng.normal();
        norm += d * d;
      }
      norm = std::sqrt(norm);
      for (auto& d : dir) d /= norm;
      e.max_rel_err = std::max(e.max_rel_err,
                               finite_difference_directional(f, x0, dir, eps));
    }
    out.push_back(e);
  }

  static std::uint64_t fnv(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

// Rebuild a LayeredLatent-shaped pair of tensors from one flat leaf.
LatentNodes split_latent(const Tensor& x, int n_layers, int d, std::int64_t offset) {
  LatentNodes nodes;
  nodes.base = slice_flat(x, offset, d);
  nodes.deltas = reshape(slice_flat(x, offset + d, static_cast<std::int64_t>(n_layers) * d),
                         Shape{n_layers, d});
  return nodes;
}

Tensor flat_of(const LayeredLatent& l) {
  std::vector<double> f = l.base;
  for (const auto& d : l.deltas) f.insert(f.end(), d.begin(), d.end());
  return Tensor::from_vector(f);
}

}  // namespace

std::vector<GradCheckEntry> run_gradient_suite(int points) {
  Suite s{points, {}};

  // ---- primitives, coordinate-wise ----
  s.coordwise(
      "matmul",
      [](Rng& rng) {
        Tensor c = random_tensor(rng, {3, 4});
        return [c](const Tensor& x, Tape&) {
          Tensor a = reshape(slice_flat(x, 0, 6), {3, 2});
          Tensor b = reshape(slice_flat(x, 6, 8), {2, 4});
          return sum(mul(matmul(a, b), c));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {14}); }, 1e-6, -1, 1e-6);

  s.coordwise(
      "elementwise_chain",
      [](Rng&) {
        return [](const Tensor& x, Tape&) {
          return sum(mul(sigmoid(x), smooth_leaky(mul(x, x))));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {4, 5}); }, 1e-6);

  s.coordwise(
      "abs_l1",
      [](Rng& rng) {
        Tensor b = random_tensor(rng, {4, 4});
        return [b](const Tensor& x, Tape&) { return mean(abs(sub(x, b))); };
      },
      [](Rng& rng) { return random_tensor(rng, {4, 4}); }, 1e-7);

  s.coordwise(
      "sqrt_norms",
      [](Rng&) {
        return [](const Tensor& x, Tape&) {
          return add(l2_norm(x), add(sum(sqrt(x)), sum_row_norms(reshape(x, {4, 4}))));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {16}, 0.5, 1.5); }, 1e-6);

  s.coordwise(
      "upsample_bilinear_2x",
      [](Rng& rng) {
        Tensor c = random_tensor(rng, {1, 6, 6});
        return [c](const Tensor& x, Tape&) {
          return sum(mul(upsample_bilinear_2x(reshape(x, {1, 3, 3})), c));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {9}); }, 1e-6, -1, 1e-6);

  s.coordwise(
      "resize_bilinear",
      [](Rng& rng) {
        Tensor cu = random_tensor(rng, {2, 13, 11});
        Tensor cd = random_tensor(rng, {2, 5, 7});
        return [cu, cd](const Tensor& x, Tape&) {
          Tensor img = reshape(x, {2, 8, 8});
          return add(sum(mul(resize_bilinear(img, 13, 11), cu)),
                     sum(mul(resize_bilinear(img, 5, 7), cd)));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {128}); }, 1e-6);

  s.coordwise(
      "downsample_avg",
      [](Rng& rng) {
        Tensor c = random_tensor(rng, {2, 2, 2});
        return [c](const Tensor& x, Tape&) {
          return sum(mul(downsample_avg(reshape(x, {2, 8, 8}), 2), c));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {128}); }, 1e-6);

  s.coordwise(
      "avg_pool2",
      [](Rng& rng) {
        Tensor c = random_tensor(rng, {2, 3, 3});
        return [c](const Tensor& x, Tape&) {
          return sum(mul(avg_pool2(reshape(x, {2, 6, 6})), c));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {72}); }, 1e-6);

  s.coordwise(
      "crop_gather_border",
      [](Rng& rng) {
        Tensor c = random_tensor(rng, {2, 6, 6});
        return [c](const Tensor& x, Tape&) {
          Tensor img = reshape(x, {2, 12, 12});
          Tensor cropped = crop(img, BBox{3, 2, 6, 6});
          return add(sum(mul(cropped, c)), sum(square(gather_border(img, 2))));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {288}); }, 1e-6);

  s.coordwise(
      "conv3x3",
      [](Rng& rng) {
        std::vector<double> w(3 * 2 * 9);
        for (auto& v : w) v = rng.normal() / 3.0;
        std::vector<double> b = {0.1, -0.2, 0.05};
        Tensor c = random_tensor(rng, {3, 7, 7});
        return [w, b, c](const Tensor& x, Tape&) {
          return sum(mul(conv3x3(reshape(x, {2, 7, 7}), w, 3, b), c));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {98}); }, 1e-6);

  s.coordwise(
      "depthwise3x3",
      [](Rng& rng) {
        std::vector<double> k(3 * 9);
        for (auto& v : k) v = rng.normal() / 3.0;
        Tensor c = random_tensor(rng, {3, 6, 6});
        return [k, c](const Tensor& x, Tape&) {
          return sum(mul(depthwise3x3(reshape(x, {3, 6, 6}), k), c));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {108}); }, 1e-6);

  s.coordwise(
      "conv1x1_linear",
      [](Rng& rng) {
        std::vector<double> m(4 * 2), w(3 * 8), b = {0.3, -0.1, 0.2};
        for (auto& v : m) v = rng.normal();
        for (auto& v : w) v = rng.normal();
        Tensor c = random_tensor(rng, {4, 5, 5});
        return [m, w, b, c](const Tensor& x, Tape&) {
          Tensor img = reshape(slice_flat(x, 0, 50), {2, 5, 5});
          Tensor vec = slice_flat(x, 50, 8);
          return add(sum(mul(conv1x1(img, m, 4), c)), sum(linear_const(w, 3, 8, vec, b)));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {58}); }, 1e-6);

  s.coordwise(
      "channel_affine",
      [](Rng& rng) {
        Tensor c = random_tensor(rng, {3, 4, 4});
        return [c](const Tensor& x, Tape&) {
          Tensor img = reshape(slice_flat(x, 0, 48), {3, 4, 4});
          Tensor scale = slice_flat(x, 48, 3);
          Tensor shift = slice_flat(x, 51, 3);
          return sum(mul(channel_affine(img, scale, shift), c));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {54}); }, 1e-6);

  s.coordwise(
      "channel_norm",
      [](Rng& rng) {
        Tensor c = random_tensor(rng, {3, 4, 4});
        return [c](const Tensor& x, Tape&) {
          return sum(mul(channel_norm(reshape(x, {3, 4, 4})), c));
        };
      },
      [](Rng& rng) { return random_tensor(rng, {48}); }, 1e-6);

  s.coordwise(
      "ellipse_map",
      [](Rng& rng) {
        Tensor c = random_tensor(rng, {1, 16, 16});
        return [c](const Tensor& x, Tape&) {
          Tensor m = ellipse_map(slice_flat(x, 0, 1), slice_flat(x, 1, 1), slice_flat(x, 2, 1),
                                 slice_flat(x, 3, 1), 16, 16, 6.0);
          return sum(mul(m, c));
        };
      },
      [](Rng& rng) {
        Tensor x(Shape{4});
        x.data()[0] = 5.0 + 6.0 * rng.uniform();
        x.data()[1] = 5.0 + 6.0 * rng.uniform();
        x.data()[2] = 3.0 + 2.0 * rng.uniform();
        x.data()[3] = 3.0 + 2.0 * rng.uniform();
        return x;
      },
      1e-6);

  // ---- generators ----
  const GeneratorSpec small_canvas = GeneratorSpec::make(11, 16, 4, 6, 8, 1, 4);
  s.coordwise(
      "generate",
      [&](Rng& rng) {
        Tensor c = random_tensor(rng, {4, 16, 16});
        return [&, c](const Tensor& x, Tape&) {
          LatentNodes nodes = split_latent(x, small_canvas.n_layers(), small_canvas.latent_dim(), 0);
          return sum(mul(generate(nodes, small_canvas), c));
        };
      },
      [&](Rng& rng) { return random_tensor(rng, {8 + 6 * 8}, -0.8, 0.8); }, 1e-6, 24);

  // ---- loss bank on small images ----
  const FeatureExtractor fx_small = FeatureExtractor::make(5, 4);

  s.coordwise(
      "perceptual_distance",
      [&](Rng&) {
        return [&](const Tensor& x, Tape&) {
          Tensor a = reshape(slice_flat(x, 0, 3 * 16 * 16), {3, 16, 16});
          Tensor b = reshape(slice_flat(x, 3 * 16 * 16, 3 * 16 * 16), {3, 16, 16});
          return perceptual_distance(a, b, fx_small);
        };
      },
      [](Rng& rng) { return random_tensor(rng, {2 * 3 * 16 * 16}, 0.1, 0.9); }, 1e-6, 24);

  s.coordwise(
      "coarse_appearance_loss",
      [&](Rng&) {
        return [&](const Tensor& x, Tape&) {
          Tensor a = reshape(slice_flat(x, 0, 3 * 32 * 32), {3, 32, 32});
          Tensor b = reshape(slice_flat(x, 3 * 32 * 32, 3 * 16 * 16), {3, 16, 16});
          return coarse_appearance_loss(a, b, 500.0, 0.05, fx_small);
        };
      },
      [](Rng& rng) { return random_tensor(rng, {3 * 32 * 32 + 3 * 16 * 16}, 0.1, 0.9); }, 1e-6,
      24);

  s.coordwise(
      "border_loss",
      [&](Rng&) {
        return [&](const Tensor& x, Tape&) {
          Tensor a = reshape(slice_flat(x, 0, 3 * 24 * 24), {3, 24, 24});
          Tensor b = reshape(slice_flat(x, 3 * 24 * 24, 3 * 24 * 24), {3, 24, 24});
          return border_loss(a, b, 0.1, 10000.0, fx_small);
        };
      },
      [](Rng& rng) { return random_tensor(rng, {2 * 3 * 24 * 24}, 0.1, 0.9); }, 1e-7, 24);

  s.coordwise(
      "latent_regularizer",
      [](Rng& rng) {
        std::vector<double> avg(8);
        for (auto& v : avg) v = rng.normal();
        return [avg](const Tensor& x, Tape&) {
          LatentNodes nodes = split_latent(x, 4, 8, 0);
          return latent_regularizer(nodes, avg, 25000.0, 1.0);
        };
      },
      [](Rng& rng) { return random_tensor(rng, {8 + 4 * 8}, 0.2, 1.0); }, 1e-6);

  for (const auto& [name, kind] :
       {std::pair<std::string, Region::Kind>{"region_preservation_exterior",
                                             Region::Kind::exterior},
        {"region_preservation_interior", Region::Kind::interior}}) {
    const Region::Kind k = kind;
    s.coordwise(
        name,
        [&fx_small, k](Rng& rng) {
          Tensor ref = random_tensor(rng, {3, 24, 24}, 0.1, 0.9);
          const Region region = (k == Region::Kind::exterior)
                                    ? Region::exterior(BBox{6, 6, 10, 10})
                                    : Region::interior(BBox{0, 0, 24, 24});
          return [&fx_small, ref, region](const Tensor& x, Tape&) {
            return region_preservation_loss(reshape(x, {3, 24, 24}), ref, region, 9000.0, 0.1,
                                            fx_small);
          };
        },
        [](Rng& rng) { return random_tensor(rng, {3 * 24 * 24}, 0.1, 0.9); }, 1e-7, 24);
  }

  // ---- assembled objectives at desk scale, directional ----
  const GeneratorSpec canvas = GeneratorSpec::canvas(7);
  const GeneratorSpec inset = GeneratorSpec::inset(8);
  const FeatureExtractor fx = FeatureExtractor::make(77, 6);
  const AverageLatent avg_a = average_latent(canvas, 2000, 1234);
  const AverageLatent avg_b = average_latent(inset, 2000, 1234);
  const int d = canvas.latent_dim();
  const int nl = canvas.n_layers();
  const std::int64_t latent_sz = d + static_cast<std::int64_t>(nl) * d;
  const LambdaTable lam;

  auto random_pair_point = [&](Rng& rng) {
    LayeredLatent wa = init_latent_truncated_random(canvas, avg_a, 0.6, rng.next_u64());
    LayeredLatent wb = init_latent_truncated_random(inset, avg_b, 0.6, rng.next_u64());
    for (auto& row : wa.deltas)
      for (auto& v : row) v = 0.05 * rng.normal();
    for (auto& row : wb.deltas)
      for (auto& v : row) v = 0.05 * rng.normal();
    const Tensor fa = flat_of(wa);
    const Tensor fb = flat_of(wb);
    std::vector<double> flat(fa.data().begin(), fa.data().end());
    flat.insert(flat.end(), fb.data().begin(), fb.data().end());
    return Tensor::from_vector(flat);
  };

  auto objective = [&](ObjectiveMode mode) {
    return [&, mode](Rng& rng) -> LossFn {
      // references and the frozen bbox come from the evaluation point itself
      Rng probe = rng;
      Tensor x0 = random_pair_point(probe);
      LayeredLatent wa, wb;
      {
        std::vector<double> fa(x0.data().begin(), x0.data().begin() + latent_sz);
        std::vector<double> fb(x0.data().begin() + latent_sz, x0.data().end());
        wa = LayeredLatent::flat(std::vector<double>(fa.begin(), fa.begin() + d), nl);
        for (int i = 0; i < nl; ++i)
          wa.deltas[i].assign(fa.begin() + d + i * d, fa.begin() + d + (i + 1) * d);
        wb = LayeredLatent::flat(std::vector<double>(fb.begin(), fb.begin() + d), nl);
        for (int i = 0; i < nl; ++i)
          wb.deltas[i].assign(fb.begin() + d + i * d, fb.begin() + d + (i + 1) * d);
      }
      const BBox bbox = detect_bbox(generate_image(wa, canvas));
      const Tensor ref_body = slice_channels(
          generate_image(init_latent_truncated_random(canvas, avg_a, 0.8, 999), canvas), 0, 3);
      const Tensor ref_face =
          generate_image(init_latent_truncated_random(inset, avg_b, 0.8, 998), inset);
      const int r = inset.out_resolution();
      const Region interior = Region::interior(BBox{0, 0, r, r});
      const Region exterior = Region::exterior(bbox);

      return [&, mode, bbox, ref_body, ref_face, interior, exterior, r](const Tensor& x,
                                                                        Tape&) {
        LatentNodes na = split_latent(x, nl, d, 0);
        LatentNodes nb = split_latent(x, nl, d, latent_sz);
        Tensor color = slice_channels(generate(na, canvas), 0, 3);
        Tensor inset_img = generate(nb, inset);
        Tensor crop64 = resize_bilinear(crop(color, bbox), r, r);
        Tensor loss = coarse_appearance_loss(crop64, inset_img, lam.l1, lam.l2, fx);
        loss = add(loss, border_loss(crop64, inset_img, lam.l3, lam.l4_face, fx));
        if (mode != ObjectiveMode::refine_inset) {
          loss = add(loss, latent_regularizer(na, avg_a.w_avg, lam.r1_body, lam.r2));
          loss = add(loss, latent_regularizer(nb, avg_b.w_avg, lam.r1_face, lam.r2));
        }
        if (mode == ObjectiveMode::joint_refine || mode == ObjectiveMode::montage)
          loss = add(loss, region_preservation_loss(color, ref_body, exterior, lam.l5, lam.l6, fx));
        if (mode == ObjectiveMode::body_for_face || mode == ObjectiveMode::montage)
          loss = add(loss,
                     region_preservation_loss(inset_img, ref_face, interior, lam.l7, lam.l8, fx));
        return loss;
      };
    };
  };

  auto pair_point = [&](Rng& rng) { return random_pair_point(rng); };

  s.directional("objective_refine_inset", objective(ObjectiveMode::refine_inset), pair_point,
                1e-5);
  s.directional("objective_joint_refine", objective(ObjectiveMode::joint_refine), pair_point,
                1e-5);
  s.directional("objective_body_for_face", objective(ObjectiveMode::body_for_face), pair_point,
                1e-5);
  s.directional("objective_montage", objective(ObjectiveMode::montage), pair_point, 1e-5);

  return std::move(s.out);
}

}  // namespace insetopt
