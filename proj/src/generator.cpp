#include "insetopt/generator.hpp"

#include <cmath>
#include <fstream>

#include "insetopt/rng.hpp"
#include "json.hpp"

namespace insetopt {

const std::array<double, 18> kAdaptiveTruncation = {0.35, 0.25, 0.25, 0.70, 0.75, 0.65,
                                                    0.65, 0.40, 0.40, 0.35, 0.25, 0.15,
                                                    0.15, 0.05, 0.05, 0.05, 0.05, 0.05};

namespace {
constexpr double kActivationAlpha = 0.2;
constexpr double kModulationGain = 0.9;
constexpr double kBiasFieldGain = 0.15;
constexpr double kOutputGain = 0.7;
constexpr double kNormFloor = 0.25;
constexpr double kProfileContrast = 0.8;
constexpr double kBlobSteepness = 6.0;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double lsp(double x, double alpha) {
  return alpha * x + (1.0 - alpha) * 0.5 * (x + std::sqrt(x * x + 0.25));
}

std::vector<double> scaled_normals(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}
}  // namespace

LayeredLatent LayeredLatent::flat(std::vector<double> base_latent, int n_layers) {
  LayeredLatent l;
  l.deltas.assign(n_layers, std::vector<double>(base_latent.size(), 0.0));
  l.base = std::move(base_latent);
  return l;
}

std::vector<double> LayeredLatent::layer_code(int i) const {
  std::vector<double> code = base;
  for (std::size_t j = 0; j < code.size(); ++j) code[j] += deltas.at(i)[j];
  return code;
}

int GeneratorSpec::layer_resolution(int i) const {
  return std::min(kBaseResolution << (i / 2), out_resolution_);
}

std::array<double, 6> GeneratorSpec::blob_ranges(int j) const {
  // {row_lo, row_span, col_lo, col_span, rad_lo, rad_span}; chosen so the
  // expanded blob box always stays inside the image, and so multiple blobs
  // cannot merge into one thresholded component.
  if (n_blobs_ <= 1) return {0.30, 0.25, 0.35, 0.30, 0.10, 0.08};
  if (j == 0) return {0.30, 0.25, 0.15, 0.18, 0.08, 0.04};
  return {0.30, 0.25, 0.67, 0.18, 0.08, 0.04};
}

GeneratorSpec GeneratorSpec::make(std::uint64_t seed, int out_resolution, int out_channels,
                                  int n_layers, int latent_dim, int n_blobs,
                                  int hidden_channels) {
  if (out_resolution < kBaseResolution || (out_resolution & (out_resolution - 1)) != 0)
    throw std::invalid_argument("generator resolution must be a power of two >= 4");
  if (out_channels != 3 && out_channels != 4)
    throw std::invalid_argument("out_channels must be 3 (color) or 4 (color+marker)");
  if (n_layers < 1 || latent_dim < 4 || hidden_channels < 1)
    throw std::invalid_argument("bad generator dimensions");
  if (out_channels == 4 && n_blobs * 4 > n_layers)
    throw std::invalid_argument("marker blobs need 4 layer codes each");

  GeneratorSpec g;
  g.seed_ = seed;
  g.n_layers_ = n_layers;
  g.latent_dim_ = latent_dim;
  g.out_resolution_ = out_resolution;
  g.out_channels_ = out_channels;
  g.hidden_ = hidden_channels;
  g.n_blobs_ = (out_channels == 4) ? n_blobs : 0;

  Rng rng(seed);
  const int d = latent_dim;
  const int c = hidden_channels;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));

  g.map_w1_ = scaled_normals(rng, static_cast<std::size_t>(d) * d, inv_sqrt_d);
  g.map_b1_ = scaled_normals(rng, d, 0.1);
  g.map_w2_ = scaled_normals(rng, static_cast<std::size_t>(d) * d, inv_sqrt_d);
  g.map_b2_ = scaled_normals(rng, d, 0.1);
  g.base_const_ = scaled_normals(rng, static_cast<std::size_t>(c) * kBaseResolution * kBaseResolution, 1.0);

  g.layers_.resize(n_layers);
  for (int i = 0; i < n_layers; ++i) {
    Layer& L = g.layers_[i];
    L.mod_w = scaled_normals(rng, static_cast<std::size_t>(2 * c) * d, inv_sqrt_d);
    L.mod_b = scaled_normals(rng, 2 * c, 0.1);
    L.dw = scaled_normals(rng, static_cast<std::size_t>(c) * 9, 1.0 / 3.0);
    L.mix = scaled_normals(rng, static_cast<std::size_t>(c) * c, inv_sqrt_c);
  }
  for (int i = 0; i < n_layers; ++i) {
    const int r = g.layer_resolution(i);
    // weaker fixed texture at finer scales keeps the border matchable
    const double gain = kBiasFieldGain * std::sqrt(static_cast<double>(kBaseResolution) / r);
    g.layers_[i].bias = scaled_normals(rng, static_cast<std::size_t>(c) * r * r, gain);
    // scale knobs act globally per channel; shift knobs carry smooth random
    // spatial profiles, so the optimizer has latent directions with a local
    // footprint and border terms need not drag the interior along
    g.layers_[i].prof_scale.assign(static_cast<std::size_t>(c) * r * r, 1.0);
    const int cr = std::max(4, r / 8);
    Tensor coarse(Shape{c, cr, cr},
                  scaled_normals(rng, static_cast<std::size_t>(c) * cr * cr, 1.0));
    Tensor up = (cr == r) ? coarse : resize_bilinear(coarse, r, r);
    auto& q = g.layers_[i].prof_shift;
    q.resize(static_cast<std::size_t>(c) * r * r);
    for (std::size_t p = 0; p < q.size(); ++p) q[p] = 1.0 + kProfileContrast * up.data()[p];
    if (out_channels == 3) {
      // part generators get frame-vs-interior specialized shift channels, so
      // seam matching and identity preservation use disjoint knobs
      for (int ch = 0; ch < c; ++ch)
        for (int yy = 0; yy < r; ++yy)
          for (int xx = 0; xx < r; ++xx) {
            const int dd = std::min(std::min(yy, r - 1 - yy), std::min(xx, r - 1 - xx));
            const double edge = std::exp(-dd / 4.0);
            const double window = (ch % 2 == 0) ? edge : 1.0 - edge;
            q[(static_cast<std::size_t>(ch) * r + yy) * r + xx] *= window;
          }
    }
  }
  g.color_w_ = scaled_normals(rng, 3 * static_cast<std::size_t>(c), inv_sqrt_c);
  g.color_b_ = scaled_normals(rng, 3, 0.1);
  for (int j = 0; j < g.n_blobs_; ++j) {
    g.blob_w_.push_back(scaled_normals(rng, 4 * static_cast<std::size_t>(4 * d),
                                       2.0 / std::sqrt(4.0 * d)));
    g.blob_b_.push_back(scaled_normals(rng, 4, 0.5));
  }

  // Freeze per-layer activation normalizers against a fixed probe latent so
  // magnitudes stay O(1) through the whole stack.
  const LayeredLatent probe =
      LayeredLatent::flat(map_latent(std::vector<double>(d, 0.0), g), n_layers);
  std::vector<double> x = g.base_const_;
  int res = kBaseResolution;
  for (int i = 0; i < n_layers; ++i) {
    Layer& L = g.layers_[i];
    const int target = g.layer_resolution(i);
    if (target != res) {
      Tensor t(Shape{c, res, res}, x);
      Tensor up = resize_bilinear(t, target, target);
      x.assign(up.data().begin(), up.data().end());
      res = target;
    }
    Tensor t(Shape{c, res, res}, x);
    Tensor dw = depthwise3x3(t, L.dw);
    Tensor mx = conv1x1(dw, L.mix, c);
    const std::vector<double> code = probe.layer_code(i);
    std::vector<double> uv(2 * c, 0.0);
    for (int o = 0; o < 2 * c; ++o) {
      double acc = L.mod_b[o];
      for (int k = 0; k < d; ++k) acc += L.mod_w[o * d + k] * code[k];
      uv[o] = acc;
    }
    double ss = 0.0;
    std::vector<double> pre(static_cast<std::size_t>(c) * res * res);
    for (int ch = 0; ch < c; ++ch) {
      const double uc = kModulationGain * uv[ch];
      const double vc = kModulationGain * uv[c + ch];
      for (int p = 0; p < res * res; ++p) {
        const std::size_t idx = static_cast<std::size_t>(ch) * res * res + p;
        const double v = mx.data()[idx] * (1.0 + uc * L.prof_scale[idx]) +
                         vc * L.prof_shift[idx] + L.bias[idx];
        pre[idx] = v;
        ss += v * v;
      }
    }
    const double rms = std::sqrt(ss / static_cast<double>(pre.size()));
    L.norm = 1.0 / std::max(rms, kNormFloor);
    for (std::size_t p = 0; p < pre.size(); ++p)
      x[p] = lsp(pre[p] * L.norm, kActivationAlpha);
  }
  return g;
}

GeneratorSpec GeneratorSpec::canvas(std::uint64_t seed, int out_resolution, int n_blobs) {
  return make(seed, out_resolution, 4, kDefaultLayers, kDefaultLatentDim, n_blobs);
}

GeneratorSpec GeneratorSpec::inset(std::uint64_t seed, int out_resolution) {
  return make(seed, out_resolution, 3);
}

bool GeneratorSpec::operator==(const GeneratorSpec& other) const {
  return seed_ == other.seed_ && n_layers_ == other.n_layers_ &&
         latent_dim_ == other.latent_dim_ && out_resolution_ == other.out_resolution_ &&
         out_channels_ == other.out_channels_ && hidden_ == other.hidden_ &&
         n_blobs_ == other.n_blobs_;
}

void GeneratorSpec::save(const std::string& path) const {
  nlohmann::ordered_json j;
  j["seed"] = seed_;
  j["n_layers"] = n_layers_;
  j["latent_dim"] = latent_dim_;
  j["out_resolution"] = out_resolution_;
  j["out_channels"] = out_channels_;
  j["hidden_channels"] = hidden_;
  j["n_blobs"] = n_blobs_;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write generator spec to " + path);
  f << j.dump(2) << "\n";
}

GeneratorSpec GeneratorSpec::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read generator spec from " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  return make(j.at("seed").get<std::uint64_t>(), j.at("out_resolution").get<int>(),
              j.at("out_channels").get<int>(), j.at("n_layers").get<int>(),
              j.at("latent_dim").get<int>(), j.value("n_blobs", 1),
              j.value("hidden_channels", 8));
}

LatentNodes bind_latent(Tape& tape, const LayeredLatent& latent) {
  const int n = latent.n_layers(), d = latent.dim();
  std::vector<double> flat(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    std::copy(latent.deltas[i].begin(), latent.deltas[i].end(), flat.begin() + i * d);
  LatentNodes nodes;
  nodes.base = tape.leaf(Tensor::from_vector(latent.base));
  nodes.deltas = tape.leaf(Tensor(Shape{n, d}, std::move(flat)));
  return nodes;
}

LatentNodes constant_latent(const LayeredLatent& latent) {
  const int n = latent.n_layers(), d = latent.dim();
  std::vector<double> flat(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    std::copy(latent.deltas[i].begin(), latent.deltas[i].end(), flat.begin() + i * d);
  LatentNodes nodes;
  nodes.base = Tensor::from_vector(latent.base);
  nodes.deltas = Tensor(Shape{n, d}, std::move(flat));
  return nodes;
}

LayeredLatent to_layered(const Tensor& base, const Tensor& deltas) {
  LayeredLatent l;
  l.base.assign(base.data().begin(), base.data().end());
  const int n = deltas.dim(0), d = deltas.dim(1);
  l.deltas.resize(n);
  for (int i = 0; i < n; ++i)
    l.deltas[i].assign(deltas.data().begin() + i * d, deltas.data().begin() + (i + 1) * d);
  return l;
}

std::vector<double> map_latent(const std::vector<double>& z, const GeneratorSpec& spec) {
  const int d = spec.latent_dim();
  if (static_cast<int>(z.size()) != d)
    throw std::invalid_argument("map_latent: expected " + std::to_string(d) +
                                " dimensions, got " + std::to_string(z.size()));
  std::vector<double> h(d, 0.0), w(d, 0.0);
  for (int i = 0; i < d; ++i) {
    double acc = spec.map_b1()[i];
    for (int j = 0; j < d; ++j) acc += spec.map_w1()[i * d + j] * z[j];
    h[i] = lsp(acc, kActivationAlpha);
  }
  for (int i = 0; i < d; ++i) {
    double acc = spec.map_b2()[i];
    for (int j = 0; j < d; ++j) acc += spec.map_w2()[i * d + j] * h[j];
    w[i] = acc;
  }
  return w;
}

AverageLatent average_latent(const GeneratorSpec& spec, int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("average_latent: n_samples must be >= 1");
  const int d = spec.latent_dim();
  AverageLatent avg;
  avg.w_avg.assign(d, 0.0);
  avg.sample_count = n_samples;
  Rng rng(seed);
  std::vector<double> z(d);
  for (int s = 0; s < n_samples; ++s) {
    for (auto& x : z) x = rng.normal();
    const std::vector<double> w = map_latent(z, spec);
    for (int i = 0; i < d; ++i) avg.w_avg[i] += w[i];
  }
  for (auto& x : avg.w_avg) x /= static_cast<double>(n_samples);
  return avg;
}

std::vector<double> truncate(const std::vector<double>& w, double t,
                             const std::vector<double>& w_avg) {
  if (t < 0.0 || t > 1.0)
    throw std::invalid_argument("truncate: t must be in [0,1], got " + std::to_string(t));
  if (w.size() != w_avg.size()) throw std::invalid_argument("truncate: dimension mismatch");
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w_avg[i] + t * (w[i] - w_avg[i]);
  return out;
}

LayeredLatent truncate_adaptive(const LayeredLatent& w_plus, const std::vector<double>& t_vec,
                                const std::vector<double>& w_avg) {
  if (static_cast<int>(t_vec.size()) != w_plus.n_layers())
    throw std::invalid_argument("truncate_adaptive: need one t per layer (" +
                                std::to_string(w_plus.n_layers()) + "), got " +
                                std::to_string(t_vec.size()));
  LayeredLatent out = w_plus;
  for (int i = 0; i < w_plus.n_layers(); ++i) {
    const std::vector<double> code = truncate(w_plus.layer_code(i), t_vec[i], w_avg);
    for (int j = 0; j < w_plus.dim(); ++j) out.deltas[i][j] = code[j] - w_plus.base[j];
  }
  return out;
}

LayeredLatent init_latent_average(const GeneratorSpec& spec, const AverageLatent& avg) {
  return LayeredLatent::flat(avg.w_avg, spec.n_layers());
}

LayeredLatent init_latent_truncated_random(const GeneratorSpec& spec, const AverageLatent& avg,
                                           double alpha, std::uint64_t seed) {
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("init_latent: alpha must be in [0,1]");
  Rng rng(seed);
  const std::vector<double> w_rand = map_latent(rng.normal_vector(spec.latent_dim()), spec);
  std::vector<double> base(w_rand.size());
  for (std::size_t i = 0; i < base.size(); ++i)
    base[i] = w_rand[i] * (1.0 - alpha) + avg.w_avg[i] * alpha;
  return LayeredLatent::flat(std::move(base), spec.n_layers());
}

namespace {

// cr, cc, rr, rc as tape scalars from the blob's parameter group.
std::array<Tensor, 4> blob_params(const LatentNodes& w, const GeneratorSpec& spec, int j) {
  const int d = spec.latent_dim();
  std::vector<Tensor> codes;
  for (int k = 0; k < 4; ++k) codes.push_back(w.layer_code(4 * j + k));
  Tensor u = concat_vec(codes);
  Tensor raw = linear_const(spec.blob_w(j), 4, 4 * d, u, spec.blob_b(j));
  const auto ranges = spec.blob_ranges(j);
  const double res = spec.out_resolution();
  auto squash = [&](int idx, double lo, double span) {
    return add_scalar(mul_scalar(sigmoid(slice_flat(raw, idx, 1)), span * res), lo * res);
  };
  return {squash(0, ranges[0], ranges[1]), squash(1, ranges[2], ranges[3]),
          squash(2, ranges[4], ranges[5]), squash(3, ranges[4], ranges[5])};
}

}  // namespace

Tensor generate(const LatentNodes& w, const GeneratorSpec& spec) {
  const int d = spec.latent_dim();
  const int c = spec.hidden_channels();
  if (w.base.numel() != d || w.deltas.rank() != 2 || w.deltas.dim(0) != spec.n_layers() ||
      w.deltas.dim(1) != d)
    throw std::invalid_argument("generate: latent dims do not match generator spec");

  Tensor x(Shape{c, kBaseResolution, kBaseResolution}, spec.base_const());
  int res = kBaseResolution;
  for (int i = 0; i < spec.n_layers(); ++i) {
    const GeneratorSpec::Layer& L = spec.layers()[i];
    const int target = spec.layer_resolution(i);
    if (target != res) {
      x = upsample_bilinear_2x(x);
      res = target;
    }
    Tensor code = w.layer_code(i);
    Tensor uv = linear_const(L.mod_w, 2 * c, d, code, L.mod_b);
    Tensor u = slice_flat(uv, 0, c);
    Tensor v = slice_flat(uv, c, c);
    x = depthwise3x3(x, L.dw);
    x = conv1x1(x, L.mix, c);
    x = channel_affine_field(x, u, v, L.prof_scale, L.prof_shift, kModulationGain);
    x = add(x, Tensor(Shape{c, res, res}, L.bias));
    x = mul_scalar(x, L.norm);
    x = smooth_leaky(x, kActivationAlpha);
  }
  Tensor logits = conv1x1(x, spec.color_w(), 3, spec.color_b());
  Tensor img = squash01(mul_scalar(logits, kOutputGain));
  if (!spec.has_marker()) return img;

  Tensor marker;
  for (int j = 0; j < spec.n_blobs(); ++j) {
    auto [cr, cc, rr, rc] = blob_params(w, spec, j);
    Tensor m = ellipse_map(cr, cc, rr, rc, res, res, kBlobSteepness);
    marker = (j == 0) ? m : add(marker, m);
  }
  return concat_channels(img, marker);
}

Tensor generate_image(const LayeredLatent& w, const GeneratorSpec& spec) {
  return generate(constant_latent(w), spec);
}

std::vector<BlobGeometry> marker_geometry(const LayeredLatent& w, const GeneratorSpec& spec) {
  if (!spec.has_marker())
    throw std::invalid_argument("marker_geometry: generator has no marker channel");
  const int d = spec.latent_dim();
  std::vector<BlobGeometry> out;
  for (int j = 0; j < spec.n_blobs(); ++j) {
    std::vector<double> u;
    for (int k = 0; k < 4; ++k) {
      const std::vector<double> code = w.layer_code(4 * j + k);
      u.insert(u.end(), code.begin(), code.end());
    }
    std::array<double, 4> raw;
    for (int i = 0; i < 4; ++i) {
      double acc = spec.blob_b(j)[i];
      for (int k = 0; k < 4 * d; ++k) acc += spec.blob_w(j)[i * 4 * d + k] * u[k];
      raw[i] = acc;
    }
    const auto ranges = spec.blob_ranges(j);
    const double res = spec.out_resolution();
    BlobGeometry g;
    g.row = (ranges[0] + ranges[1] * stable_sigmoid(raw[0])) * res;
    g.col = (ranges[2] + ranges[3] * stable_sigmoid(raw[1])) * res;
    g.r_row = (ranges[4] + ranges[5] * stable_sigmoid(raw[2])) * res;
    g.r_col = (ranges[4] + ranges[5] * stable_sigmoid(raw[3])) * res;
    out.push_back(g);
  }
  return out;
}

}  // namespace insetopt
