#pragma once

#include <optional>

#include "topowmamba/tensor.hpp"

namespace twm {

enum class PoolKind { GlobalMax, GlobalAvg, ChannelMax, ChannelMean };
enum class ResampleMode { Nearest, Bilinear };

// ---- elementwise ----
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, mul_scalar(b, T(-1)));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);
// tanh approximation
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// ---- last-axis normalizers ----
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x);

// ---- reductions ----
template <typename T>
Tensor<T> sum(const Tensor<T>& x);  // rank-0 output
template <typename T>
Tensor<T> sum_last(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---- shape ops ----
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::int64_t>& axes);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis);
// out[..., i] = x[..., index_map[i]]; backward scatter-adds.
template <typename T>
Tensor<T> gather_last(const Tensor<T>& x, const std::vector<std::int64_t>& index_map);
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::int64_t start, std::int64_t len);

// ---- neural net primitives ----
// Direct cross-correlation, zero padding, fixed accumulation order
// (ci, kh, kw ascending), bias added last.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                 std::int64_t stride, std::int64_t padding, std::int64_t groups = 1);

// Affine map over the last axis; w is [D_out, D_in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b);

// Normalizes the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

template <typename T>
Tensor<T> pool_reduce(const Tensor<T>& x, PoolKind kind);

// Integer 2x upsampling; bilinear uses the align_corners=false convention.
template <typename T>
Tensor<T> resample2d(const Tensor<T>& x, ResampleMode mode);

// ---- broadcast helpers built on gather_last ----
// [N,C,1,1] -> [N,C,H,W]
template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& s, std::int64_t h, std::int64_t w);
// [N,1,H,W] -> [N,C,H,W]
template <typename T>
Tensor<T> broadcast_channels(const Tensor<T>& s, std::int64_t c);

}  // namespace twm
