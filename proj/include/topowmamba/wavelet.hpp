#pragma once

#include "topowmamba/tensor.hpp"

namespace twm {

// Single-level orthonormal 2D Haar decomposition of an [N,C,H,W] map.
// Per 2x2 block [[a,b],[c,d]]:
//   ll = (a+b+c+d)/2   lh = (a+b-c-d)/2   (row-pair contrast, vertical detail)
//   hl = (a-b+c-d)/2   hh = (a-b-c+d)/2
// The transform is orthogonal, so band energies sum to the input energy and
// the backward rule is the inverse structure applied to the band gradients.
template <typename T>
struct WaveletBands {
  Tensor<T> ll, lh, hl, hh;
  static constexpr const char* convention = "orthonormal-haar/lh-vertical";
};

// Requires even H and W; callers pad (reflect) and crop around the transform.
template <typename T>
WaveletBands<T> dwt2(const Tensor<T>& x);

template <typename T>
Tensor<T> iwt2(const WaveletBands<T>& bands);

}  // namespace twm
