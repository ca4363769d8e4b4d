#pragma once

#include <functional>
#include <string>

#include "topowmamba/tensor.hpp"

namespace twm {

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::int64_t coords_checked = 0;
  bool pass = false;
  std::string worst_coord;
};

// Central finite differences against the tape gradient, run at f64.
//
// `f` rebuilds the scalar loss from the current contents of `inputs` on every
// call; it must be deterministic. When max_coords >= 0 only that many
// coordinates are sampled (seeded) across the concatenated input space,
// otherwise every coordinate is checked. Relative error uses a
// max(|fd|, |analytic|, 1e-8) denominator.
GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                           double eps = 1e-4, double tol = 1e-4, std::int64_t max_coords = -1,
                           std::uint64_t seed = 0);

}  // namespace twm
