#include "insetopt/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace insetopt {

FeatureSet embed(const std::vector<Tensor>& images, const FeatureExtractor& fx,
                 const std::string& source) {
  FeatureSet set;
  set.source = source;
  set.dim = fx.feature_dim();
  set.n = static_cast<int>(images.size());
  set.data.reserve(static_cast<std::size_t>(set.n) * set.dim);
  const Shape* shape = nullptr;
  for (const Tensor& img : images) {
    if (shape && img.shape() != *shape)
      throw std::invalid_argument("embed: images must share one shape");
    shape = &img.shape();
    const FeatureExtractor::Stack stack = fx.extract(img);
    for (const Tensor& stage : stack) {
      const int c = stage.dim(0);
      const std::int64_t plane = static_cast<std::int64_t>(stage.dim(1)) * stage.dim(2);
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        const double* p = stage.data().data() + ch * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
        set.data.push_back(acc / static_cast<double>(plane));
      }
    }
  }
  return set;
}

namespace {

Eigen::VectorXd mean_of(const FeatureSet& s) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(s.dim);
  for (int i = 0; i < s.n; ++i)
    for (int j = 0; j < s.dim; ++j) mu[j] += s.row(i)[j];
  return mu / static_cast<double>(s.n);
}

Eigen::MatrixXd covariance_of(const FeatureSet& s, const Eigen::VectorXd& mu) {
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(s.dim, s.dim);
  Eigen::VectorXd d(s.dim);
  for (int i = 0; i < s.n; ++i) {
    for (int j = 0; j < s.dim; ++j) d[j] = s.row(i)[j] - mu[j];
    cov.noalias() += d * d.transpose();
  }
  return cov / static_cast<double>(s.n - 1);
}

// Eigenvalues below -tol are a hard error; small negatives (roundoff) clamp.
Eigen::VectorXd clamped_eigenvalues(const Eigen::VectorXd& ev, double tol, const char* what) {
  Eigen::VectorXd out = ev;
  for (int i = 0; i < ev.size(); ++i) {
    if (ev[i] < -tol)
      throw std::runtime_error(std::string(what) + ": eigenvalue " + std::to_string(ev[i]) +
                               " below -" + std::to_string(tol));
    out[i] = std::max(ev[i], 0.0);
  }
  return out;
}

}  // namespace

double fid(const FeatureSet& a, const FeatureSet& b) {
  if (a.dim != b.dim)
    throw std::invalid_argument("fid: feature dimension mismatch " + std::to_string(a.dim) +
                                " vs " + std::to_string(b.dim));
  if (a.n < 2 || b.n < 2)
    throw std::invalid_argument("fid: need at least 2 samples per set for covariance");
  const double tol = 1e-8;

  const Eigen::VectorXd mu_a = mean_of(a), mu_b = mean_of(b);
  const Eigen::MatrixXd cov_a = covariance_of(a, mu_a), cov_b = covariance_of(b, mu_b);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(cov_a);
  const Eigen::VectorXd ev_a = clamped_eigenvalues(es_a.eigenvalues(), tol, "fid: covariance");
  const Eigen::MatrixXd sqrt_a = es_a.eigenvectors() * ev_a.cwiseSqrt().asDiagonal() *
                                 es_a.eigenvectors().transpose();

  // tr((Sa Sb)^1/2) via the symmetric product sqrtA * Sb * sqrtA
  const Eigen::MatrixXd m = sqrt_a * cov_b * sqrt_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m((m + m.transpose()) / 2.0);
  const Eigen::VectorXd ev_m = clamped_eigenvalues(es_m.eigenvalues(), tol, "fid: product");

  const double mean_term = (mu_a - mu_b).squaredNorm();
  const double trace_term = cov_a.trace() + cov_b.trace() - 2.0 * ev_m.cwiseSqrt().sum();
  return std::max(mean_term + trace_term, 0.0);
}

namespace {

std::vector<double> knn_radii(const FeatureSet& s, int k) {
  std::vector<double> radii(s.n);
  std::vector<double> dists(s.n);
  for (int i = 0; i < s.n; ++i) {
    int m = 0;
    for (int j = 0; j < s.n; ++j) {
      if (j == i) continue;
      double ss = 0.0;
      for (int d = 0; d < s.dim; ++d) {
        const double diff = s.row(i)[d] - s.row(j)[d];
        ss += diff * diff;
      }
      dists[m++] = std::sqrt(ss);
    }
    std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.begin() + m);
    radii[i] = dists[k - 1];
  }
  return radii;
}

double manifold_fraction(const FeatureSet& points, const FeatureSet& manifold,
                         const std::vector<double>& radii) {
  int inside = 0;
  for (int i = 0; i < points.n; ++i) {
    for (int j = 0; j < manifold.n; ++j) {
      double ss = 0.0;
      for (int d = 0; d < points.dim; ++d) {
        const double diff = points.row(i)[d] - manifold.row(j)[d];
        ss += diff * diff;
      }
      if (std::sqrt(ss) <= radii[j]) {
        ++inside;
        break;
      }
    }
  }
  return static_cast<double>(inside) / static_cast<double>(points.n);
}

}  // namespace

std::pair<double, double> precision_recall(const FeatureSet& real, const FeatureSet& gen,
                                           int k) {
  if (real.dim != gen.dim) throw std::invalid_argument("precision_recall: dimension mismatch");
  if (k < 1 || k >= std::min(real.n, gen.n))
    throw std::invalid_argument("precision_recall: need 1 <= k < min(n_real, n_gen)");
  const std::vector<double> real_radii = knn_radii(real, k);
  const std::vector<double> gen_radii = knn_radii(gen, k);
  auto degenerate = [](const std::vector<double>& radii) {
    for (double r : radii)
      if (r > 0.0) return false;
    return true;
  };
  if (degenerate(real_radii) || degenerate(gen_radii))
    throw std::invalid_argument("precision_recall: set contains only duplicated points");
  const double precision = manifold_fraction(gen, real, real_radii);
  const double recall = manifold_fraction(real, gen, gen_radii);
  return {precision, recall};
}

}  // namespace insetopt
