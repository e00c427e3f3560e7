#pragma once

#include <string>
#include <utility>
#include <vector>

#include "insetopt/losses.hpp"
#include "insetopt/tensor.hpp"

namespace insetopt {

// n feature vectors, one row per image.
struct FeatureSet {
  int n = 0;
  int dim = 0;
  std::vector<double> data;  // row-major [n x dim]
  std::string source;        // "real" | "generated"

  const double* row(int i) const { return data.data() + static_cast<std::int64_t>(i) * dim; }
};

// Stage outputs of the extractor, globally pooled per channel and
// concatenated; row order matches input order.
FeatureSet embed(const std::vector<Tensor>& images, const FeatureExtractor& fx,
                 const std::string& source = "");

// Frechet distance between Gaussian fits:
// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with the matrix square
// root taken through symmetric eigendecompositions. Eigenvalues below -1e-8
// are an error; small negatives clamp to zero.
double fid(const FeatureSet& a, const FeatureSet& b);

// k-NN manifold precision/recall: precision is the fraction of generated
// points inside the union of the real points' k-th-neighbor hyperspheres;
// recall swaps the roles.
std::pair<double, double> precision_recall(const FeatureSet& real, const FeatureSet& gen,
                                           int k = 3);

}  // namespace insetopt
