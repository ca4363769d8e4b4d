#pragma once

#include <array>
#include <string>

#include "topowmamba/tensor.hpp"

namespace twm {

// v1..v4: raster orders (row-major, column-major and their reverses).
// s1..s4: serpentine orders (alternating row sweep, alternating column sweep
// and their reverses).
enum class ScanDirection { V1, V2, V3, V4, S1, S2, S3, S4 };

enum class DirectionSet { Conventional, Serpentine };

const char* direction_name(ScanDirection d);
ScanDirection direction_from_name(const std::string& name);
std::array<ScanDirection, 4> directions_for(DirectionSet set);

// Bijective flattening of an h x w grid. forward_index[t] is the grid index
// visited at sequence position t; inverse_index is its inverse permutation.
struct ScanOrder {
  ScanDirection direction;
  std::int64_t h = 0, w = 0;
  std::vector<std::int64_t> forward_index;
  std::vector<std::int64_t> inverse_index;
};

ScanOrder build_scan_order(std::int64_t h, std::int64_t w, ScanDirection direction);

// Selective-scan parameters for one direction. A = -exp(a_log) stays
// strictly negative; delta comes out of a softplus so it stays positive.
// Projections follow the low-rank Mamba form: w_x maps each input vector to
// [dt_rank | N | N] = [delta seed | B_t | C_t], and w_dt lifts the delta seed
// back to D_inner.
template <typename T>
struct S6Params {
  Tensor<T> a_log;   // [D, N]
  Tensor<T> d_skip;  // [D]
  Tensor<T> w_x;     // [dt_rank + 2N, D]
  Tensor<T> w_dt;    // [D, dt_rank]
  Tensor<T> b_dt;    // [D]
  std::int64_t n_state = 0;
  std::int64_t dt_rank = 0;

  std::int64_t d_inner() const { return a_log.dim(0); }
};

template <typename T>
S6Params<T> init_s6_params(std::int64_t d_inner, std::int64_t n_state, Rng& rng);

// [N,C,H,W] -> [N,L,C] with L = H*W, sequence position t holding the pixel at
// grid index order.forward_index[t].
template <typename T>
Tensor<T> expand_scan(const Tensor<T>& x, const ScanOrder& order);

template <typename T>
std::vector<Tensor<T>> expand(const Tensor<T>& x, const std::vector<ScanOrder>& orders);

// Scatters each sequence back through its order and sums across orders.
template <typename T>
Tensor<T> merge(const std::vector<Tensor<T>>& seqs, const std::vector<ScanOrder>& orders);

// Strictly causal selective scan over [N,L,D] sequences:
//   abar_t = exp(delta_t[d] * A[d,n]); h_t = abar_t h_{t-1} + delta_t B_t x_t
//   y_t[d] = sum_n C_t[n] h_t[d,n] + d_skip[d] x_t[d],  h_0 = 0.
template <typename T>
Tensor<T> s6_scan(const Tensor<T>& seq, const S6Params<T>& params);

// expand -> per-direction s6_scan -> merge over the chosen direction family.
template <typename T>
Tensor<T> multi_directional_scan(const Tensor<T>& x, const std::vector<S6Params<T>>& params,
                                 DirectionSet set);

}  // namespace twm
