#include "topowmamba/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace twm {

GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                           double eps, double tol, std::int64_t max_coords, std::uint64_t seed) {
  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    for (auto& in : inputs) in.zero_grad();
    Tensor<double> loss = f();
    if (loss.numel() != 1) throw ShapeError("grad_check: program must produce a scalar");
    tape.backward(loss);
    analytic.reserve(inputs.size());
    for (auto& in : inputs) analytic.push_back(in.grad_dense());
  }

  std::int64_t total = 0;
  for (const auto& in : inputs) total += in.numel();

  // Coordinates are (input index, flat offset) pairs encoded as a global offset.
  std::vector<std::int64_t> coords;
  if (max_coords < 0 || max_coords >= total) {
    coords.resize(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) coords[static_cast<std::size_t>(i)] = i;
  } else {
    Rng rng(Rng::derive_seed(seed, 0xfdc0ULL));
    std::unordered_set<std::int64_t> picked;
    while (static_cast<std::int64_t>(picked.size()) < max_coords) picked.insert(rng.uniform_int(total));
    coords.assign(picked.begin(), picked.end());
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult res;
  for (auto gidx : coords) {
    std::int64_t which = 0, off = gidx;
    while (off >= inputs[static_cast<std::size_t>(which)].numel()) {
      off -= inputs[static_cast<std::size_t>(which)].numel();
      ++which;
    }
    auto& in = inputs[static_cast<std::size_t>(which)];
    double* slot = in.data() + off;
    const double orig = *slot;

    *slot = orig + eps;
    const double fp = f().item();
    *slot = orig - eps;
    const double fm = f().item();
    *slot = orig;

    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("grad_check: non-finite loss during probing");
    const double fd = (fp - fm) / (2.0 * eps);
    const double an = analytic[static_cast<std::size_t>(which)][static_cast<std::size_t>(off)];
    const double abs_err = std::abs(fd - an);
    const double rel = abs_err / std::max({std::abs(fd), std::abs(an), 1e-8});
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.max_abs_err = abs_err;
      res.worst_coord = "input " + std::to_string(which) + " offset " + std::to_string(off) + " fd " +
                        std::to_string(fd) + " tape " + std::to_string(an);
    }
    ++res.coords_checked;
  }
  res.pass = res.max_rel_err < tol;
  return res;
}

}  // namespace twm
