#pragma once

#include "topowmamba/gradcheck.hpp"

namespace twm {

struct SuiteCheck {
  std::string name;
  GradCheckResult result;
};

// Named finite-difference checks over the op set, the transforms, every
// composite block and a tiny end-to-end model, all at f64. `module` filters
// by name prefix ("tensor", "wavelet", "scan", "blocks", "network", "loss");
// empty runs everything.
std::vector<SuiteCheck> run_gradcheck_suite(const std::string& module, double tol, std::int64_t coords_per_check = 220);

}  // namespace twm
