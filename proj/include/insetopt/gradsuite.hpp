#pragma once

#include <string>
#include <vector>

namespace insetopt {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double threshold = 1e-5;
  bool pass() const { return max_rel_err < threshold; }
};

// Central finite-difference checks for every differentiable primitive and
// every assembled objective, at >= `points` seeded random points each.
// Primitives are checked coordinate-wise; full objectives along random
// directions in latent space with the bbox frozen at the evaluation point.
std::vector<GradCheckEntry> run_gradient_suite(int points = 10);

}  // namespace insetopt
