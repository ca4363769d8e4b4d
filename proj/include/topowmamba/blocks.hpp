#pragma once

#include <string>

#include "topowmamba/scan.hpp"
#include "topowmamba/tensor.hpp"

namespace twm {

struct BlockConfig {
  std::int64_t channels = 0;
  double mlp_ratio = 4.0;
  double drop_path_rate = 0.0;
  std::int64_t n_state = 16;
  double ffn_ratio = 4.0;
  double norm_eps = 1e-5;
  std::int64_t sca_reduction = 8;

  void validate() const;
};

// Per-forward knobs: training enables DropPath, whose draws come from `rng`.
struct ForwardCtx {
  bool training = false;
  Rng* rng = nullptr;
};

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
};
template <typename T>
using ParamList = std::vector<ParamRef<T>>;

template <typename T>
void zero_params(ParamList<T>& params);

// Stochastic depth on the whole tensor, one draw per sample; retained samples
// are scaled by 1/(1-p). Identity when not training or p == 0.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double p, const ForwardCtx& ctx);

// ---- leaf layers ----

template <typename T>
struct LinearLayer {
  Tensor<T> w, b;
  LinearLayer() = default;
  LinearLayer(std::int64_t d_in, std::int64_t d_out, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  std::int64_t stride = 1, padding = 0, groups = 1;
  Conv2dLayer() = default;
  Conv2dLayer(std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t stride, std::int64_t padding,
              std::int64_t groups, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

// Channel LayerNorm on [N,C,H,W] maps (normalizes each position's channel
// vector); also usable directly on [..., C] tensors via forward_last.
template <typename T>
struct LayerNorm2d {
  Tensor<T> gamma, beta;
  T eps = T(1e-5);
  LayerNorm2d() = default;
  LayerNorm2d(std::int64_t channels, T eps);
  Tensor<T> forward(const Tensor<T>& x) const;       // [N,C,H,W]
  Tensor<T> forward_last(const Tensor<T>& x) const;  // [..., C]
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

// ---- composite blocks ----

// Two-stage gating: pooled-FC channel gate, then a 7x7 conv over the
// concatenated channel max/mean statistics. The two FC layers are shared
// between the max and avg paths.
template <typename T>
struct ScaAttention {
  LinearLayer<T> fc1, fc2;
  Conv2dLayer<T> conv;
  ScaAttention() = default;
  ScaAttention(std::int64_t channels, std::int64_t reduction, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

// LN -> expand (ratio 2, main/gate split) -> depthwise conv + SiLU ->
// 4-direction selective scan -> LN, gated by SiLU(gate), projected back.
// `include_residual` controls the trailing +x.
template <typename T>
struct VssBranch {
  LayerNorm2d<T> norm;
  LinearLayer<T> in_proj;
  Conv2dLayer<T> dwconv;
  std::vector<S6Params<T>> scan_params;
  LayerNorm2d<T> norm_out;
  LinearLayer<T> out_proj;
  DirectionSet directions = DirectionSet::Conventional;
  std::int64_t d_inner = 0;

  VssBranch() = default;
  VssBranch(std::int64_t channels, std::int64_t n_state, DirectionSet dirs, T norm_eps, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool include_residual = true) const;
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

// channel MLP with LN front and its own residual
template <typename T>
struct ChannelMlp {
  LayerNorm2d<T> norm;
  LinearLayer<T> fc1, fc2;
  ChannelMlp() = default;
  ChannelMlp(std::int64_t channels, double ratio, T norm_eps, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

// Three branches (conv / serpentine scan / raster scan), each gated by its
// own attention, summed under DropPath and pushed through the channel MLP.
// The residual carrier is the block input; the scan branches feed their
// pre-residual outputs to the attention so the zero-weight block is exactly
// the identity.
template <typename T>
struct ScvssBlock {
  LayerNorm2d<T> norm_conv;
  Conv2dLayer<T> conv;
  VssBranch<T> snake, vss;
  ScaAttention<T> sca_conv, sca_snake, sca_vss;
  ChannelMlp<T> mlp;
  double drop_path_rate = 0.0;

  ScvssBlock() = default;
  ScvssBlock(const BlockConfig& cfg, bool snake_enabled, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) const;
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

// LN -> Haar split -> (LL: conv, channel-wise bidirectional scan, conv;
// LH/HL/HH: depthwise + pointwise convs) -> inverse Haar, then an FFN stage;
// both stages residual. Odd extents are reflect-padded and cropped back.
template <typename T>
struct WmbBlock {
  LayerNorm2d<T> norm1;
  Conv2dLayer<T> ll_in, ll_out;
  S6Params<T> mamba_fwd, mamba_bwd;
  Conv2dLayer<T> lh_dw, lh_pw, hl_dw, hl_pw, hh_dw, hh_pw;
  LayerNorm2d<T> norm2;
  LinearLayer<T> ffn_fc1, ffn_fc2;

  WmbBlock() = default;
  WmbBlock(const BlockConfig& cfg, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) const;
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

// 2x2 stride-2 conv followed by channel LN.
template <typename T>
struct PatchEmbed {
  Conv2dLayer<T> conv;
  LayerNorm2d<T> norm;
  PatchEmbed() = default;
  PatchEmbed(std::int64_t c_in, std::int64_t c_out, T norm_eps, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

// 2x2 neighborhood gather to 4C channels, LN, linear down to c_out.
template <typename T>
struct PatchMerge {
  LayerNorm2d<T> norm;
  LinearLayer<T> reduce;
  PatchMerge() = default;
  PatchMerge(std::int64_t c_in, std::int64_t c_out, T norm_eps, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect_params(const std::string& prefix, ParamList<T>& out);
};

// reflect-pad H/W up to even extents (replicates when the extent is 1)
template <typename T>
Tensor<T> pad_to_even(const Tensor<T>& x);
template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& x, std::int64_t h, std::int64_t w);

// NCHW <-> flattened channel-rows helpers shared by the channel-wise layers.
template <typename T>
Tensor<T> nchw_to_rows(const Tensor<T>& x);  // [N,C,H,W] -> [N*H*W, C]
template <typename T>
Tensor<T> rows_to_nchw(const Tensor<T>& rows, std::int64_t n, std::int64_t h, std::int64_t w);

}  // namespace twm
