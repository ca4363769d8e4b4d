#pragma once

#include <array>

#include "topowmamba/metrics.hpp"

namespace twm {

// Synthetic segmentation phantoms: a stack of nested ellipses for the lower
// class ids and a serpentine tube for the last class, drawn over a noisy
// background with per-class intensity bands. (spec.seed, sample index) fully
// determine every byte.
struct PhantomSpec {
  std::int64_t n_samples = 200;
  std::int64_t h = 64, w = 64;
  std::int64_t num_classes = 3;
  double noise_sigma = 0.04;
  // fractions of min(h, w)
  double ellipse_r_min = 0.18, ellipse_r_max = 0.32;
  double tube_r_min = 0.035, tube_r_max = 0.07;
  // per-class [lo, hi] intensity bands; filled with spread defaults when empty
  std::vector<std::array<double, 2>> intensity;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json_string(int indent = -1) const;
  static PhantomSpec from_json_string(const std::string& text);
  std::vector<std::array<double, 2>> effective_intensity() const;
};

struct PhantomSample {
  std::vector<float> image;  // h*w in [0,1]
  LabelMask mask;
};

PhantomSample gen_phantom_sample(const PhantomSpec& spec, std::int64_t index);

// Writes manifest.json plus images/ and masks/ with 70/15/15 splits.
void gen_phantoms(const PhantomSpec& spec, const std::string& out_dir);

}  // namespace twm
