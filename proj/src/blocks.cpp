#include "topowmamba/blocks.hpp"

#include "topowmamba/ops.hpp"
#include "topowmamba/wavelet.hpp"

namespace twm {

void BlockConfig::validate() const {
  if (channels < 1) throw ConfigError("BlockConfig: channels must be >= 1");
  if (mlp_ratio <= 0 || ffn_ratio <= 0) throw ConfigError("BlockConfig: ratios must be positive");
  if (drop_path_rate < 0 || drop_path_rate >= 1) throw ConfigError("BlockConfig: drop_path_rate must be in [0,1)");
  if (n_state < 1) throw ConfigError("BlockConfig: n_state must be >= 1");
  if (sca_reduction < 1) throw ConfigError("BlockConfig: sca_reduction must be >= 1");
}

template <typename T>
void zero_params(ParamList<T>& params) {
  for (auto& p : params) std::fill(p.tensor.values().begin(), p.tensor.values().end(), T(0));
}

template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double p, const ForwardCtx& ctx) {
  if (!ctx.training || p <= 0.0) return x;
  if (!ctx.rng) throw ConfigError("drop_path: training forward needs an rng");
  const auto n = x.dim(0);
  std::vector<T> mv(static_cast<std::size_t>(n));
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::int64_t i = 0; i < n; ++i) mv[static_cast<std::size_t>(i)] = ctx.rng->uniform() < p ? T(0) : scale;
  auto mask = Tensor<T>::from_data({n, 1, 1, 1}, std::move(mv));
  auto full = broadcast_channels(broadcast_spatial(mask, x.dim(2), x.dim(3)), x.dim(1));
  return mul(x, full);
}

template <typename T>
Tensor<T> nchw_to_rows(const Tensor<T>& x) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), {n * h * w, c});
}

template <typename T>
Tensor<T> rows_to_nchw(const Tensor<T>& rows, std::int64_t n, std::int64_t h, std::int64_t w) {
  const auto c = rows.dim(1);
  return permute(reshape(rows, {n, h, w, c}), {0, 3, 1, 2});
}

namespace {

std::vector<std::int64_t> reflect_to_even(std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n % 2 == 0 ? n : n + 1));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  if (n % 2 != 0) idx[static_cast<std::size_t>(n)] = n >= 2 ? n - 2 : 0;
  return idx;
}

template <typename T>
Tensor<T> gather_cols(const Tensor<T>& x, const std::vector<std::int64_t>& idx) {
  return gather_last(x, idx);
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::int64_t>& idx) {
  auto swapped = permute(x, {0, 1, 3, 2});
  return permute(gather_last(swapped, idx), {0, 1, 3, 2});
}

}  // namespace

template <typename T>
Tensor<T> pad_to_even(const Tensor<T>& x) {
  const auto h = x.dim(2), w = x.dim(3);
  Tensor<T> out = x;
  if (w % 2 != 0) out = gather_cols(out, reflect_to_even(w));
  if (h % 2 != 0) out = gather_rows(out, reflect_to_even(h));
  return out;
}

template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
  Tensor<T> out = x;
  if (x.dim(3) != w) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(w));
    for (std::int64_t i = 0; i < w; ++i) idx[static_cast<std::size_t>(i)] = i;
    out = gather_cols(out, idx);
  }
  if (x.dim(2) != h) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(h));
    for (std::int64_t i = 0; i < h; ++i) idx[static_cast<std::size_t>(i)] = i;
    out = gather_rows(out, idx);
  }
  return out;
}

// ---- leaf layers ----

template <typename T>
LinearLayer<T>::LinearLayer(std::int64_t d_in, std::int64_t d_out, Rng& rng) {
  std::vector<T> wv(static_cast<std::size_t>(d_out * d_in));
  for (auto& v : wv) v = static_cast<T>(rng.trunc_normal(0.02));
  w = Tensor<T>::from_data({d_out, d_in}, std::move(wv), true);
  b = Tensor<T>::zeros({d_out}, true);
}

template <typename T>
Tensor<T> LinearLayer<T>::forward(const Tensor<T>& x) const {
  return linear(x, w, std::optional<Tensor<T>>(b));
}

template <typename T>
void LinearLayer<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

template <typename T>
Conv2dLayer<T>::Conv2dLayer(std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t stride_,
                            std::int64_t padding_, std::int64_t groups_, Rng& rng)
    : stride(stride_), padding(padding_), groups(groups_) {
  std::vector<T> wv(static_cast<std::size_t>(c_out * (c_in / groups_) * k * k));
  for (auto& v : wv) v = static_cast<T>(rng.trunc_normal(0.02));
  w = Tensor<T>::from_data({c_out, c_in / groups_, k, k}, std::move(wv), true);
  b = Tensor<T>::zeros({c_out}, true);
}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(const Tensor<T>& x) const {
  return conv2d(x, w, std::optional<Tensor<T>>(b), stride, padding, groups);
}

template <typename T>
void Conv2dLayer<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

template <typename T>
LayerNorm2d<T>::LayerNorm2d(std::int64_t channels, T eps_) : eps(eps_) {
  gamma = Tensor<T>::full({channels}, T(1), true);
  beta = Tensor<T>::zeros({channels}, true);
}

template <typename T>
Tensor<T> LayerNorm2d<T>::forward(const Tensor<T>& x) const {
  const auto n = x.dim(0), h = x.dim(2), w = x.dim(3);
  return rows_to_nchw(layer_norm(nchw_to_rows(x), gamma, beta, eps), n, h, w);
}

template <typename T>
Tensor<T> LayerNorm2d<T>::forward_last(const Tensor<T>& x) const {
  return layer_norm(x, gamma, beta, eps);
}

template <typename T>
void LayerNorm2d<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

// ---- SCA ----

template <typename T>
ScaAttention<T>::ScaAttention(std::int64_t channels, std::int64_t reduction, Rng& rng) {
  const auto hidden = std::max<std::int64_t>(1, (channels + reduction - 1) / reduction);
  fc1 = LinearLayer<T>(channels, hidden, rng);
  fc2 = LinearLayer<T>(hidden, channels, rng);
  conv = Conv2dLayer<T>(2, 1, 7, 1, 3, 1, rng);
}

template <typename T>
Tensor<T> ScaAttention<T>::forward(const Tensor<T>& x) const {
  OpScope scope("sca");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto pmax = reshape(pool_reduce(x, PoolKind::GlobalMax), {n, c});
  auto pavg = reshape(pool_reduce(x, PoolKind::GlobalAvg), {n, c});
  auto smax = fc2.forward(relu(fc1.forward(pmax)));
  auto savg = fc2.forward(relu(fc1.forward(pavg)));
  auto gate1 = broadcast_spatial(reshape(sigmoid(add(smax, savg)), {n, c, 1, 1}), h, w);
  auto xs = mul(x, gate1);

  auto stats = concat<T>({pool_reduce(xs, PoolKind::ChannelMax), pool_reduce(xs, PoolKind::ChannelMean)}, 1);
  auto gate2 = broadcast_channels(sigmoid(conv.forward(stats)), c);
  return mul(xs, gate2);
}

template <typename T>
void ScaAttention<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  fc1.collect_params(prefix + ".fc1", out);
  fc2.collect_params(prefix + ".fc2", out);
  conv.collect_params(prefix + ".conv", out);
}

// ---- VSS ----

template <typename T>
VssBranch<T>::VssBranch(std::int64_t channels, std::int64_t n_state, DirectionSet dirs, T norm_eps, Rng& rng)
    : directions(dirs), d_inner(2 * channels) {
  norm = LayerNorm2d<T>(channels, norm_eps);
  in_proj = LinearLayer<T>(channels, 2 * d_inner, rng);
  dwconv = Conv2dLayer<T>(d_inner, d_inner, 3, 1, 1, d_inner, rng);
  for (int i = 0; i < 4; ++i) scan_params.push_back(init_s6_params<T>(d_inner, n_state, rng));
  norm_out = LayerNorm2d<T>(d_inner, norm_eps);
  out_proj = LinearLayer<T>(d_inner, channels, rng);
}

template <typename T>
Tensor<T> VssBranch<T>::forward(const Tensor<T>& x, bool include_residual) const {
  OpScope scope(directions == DirectionSet::Serpentine ? "snakevss" : "vss");
  const auto n = x.dim(0), h = x.dim(2), w = x.dim(3);
  auto rows = nchw_to_rows(norm.forward(x));
  auto proj = in_proj.forward(rows);
  auto main = rows_to_nchw(slice_last(proj, 0, d_inner), n, h, w);
  auto gate = rows_to_nchw(slice_last(proj, d_inner, d_inner), n, h, w);

  main = silu(dwconv.forward(main));
  auto scanned = norm_out.forward(multi_directional_scan(main, scan_params, directions));
  auto gated = mul(scanned, silu(gate));
  auto out = rows_to_nchw(out_proj.forward(nchw_to_rows(gated)), n, h, w);
  return include_residual ? add(x, out) : out;
}

template <typename T>
void VssBranch<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  norm.collect_params(prefix + ".norm", out);
  in_proj.collect_params(prefix + ".in_proj", out);
  dwconv.collect_params(prefix + ".dwconv", out);
  for (std::size_t i = 0; i < scan_params.size(); ++i) {
    auto& p = scan_params[i];
    const auto base = prefix + ".scan" + std::to_string(i);
    out.push_back({base + ".a_log", p.a_log});
    out.push_back({base + ".d_skip", p.d_skip});
    out.push_back({base + ".w_x", p.w_x});
    out.push_back({base + ".w_dt", p.w_dt});
    out.push_back({base + ".b_dt", p.b_dt});
  }
  norm_out.collect_params(prefix + ".norm_out", out);
  out_proj.collect_params(prefix + ".out_proj", out);
}

// ---- channel MLP ----

template <typename T>
ChannelMlp<T>::ChannelMlp(std::int64_t channels, double ratio, T norm_eps, Rng& rng) {
  const auto hidden = std::max<std::int64_t>(1, static_cast<std::int64_t>(ratio * static_cast<double>(channels)));
  norm = LayerNorm2d<T>(channels, norm_eps);
  fc1 = LinearLayer<T>(channels, hidden, rng);
  fc2 = LinearLayer<T>(hidden, channels, rng);
}

template <typename T>
Tensor<T> ChannelMlp<T>::forward(const Tensor<T>& x) const {
  OpScope scope("mlp");
  const auto n = x.dim(0), h = x.dim(2), w = x.dim(3);
  auto rows = nchw_to_rows(x);
  auto path = fc2.forward(gelu(fc1.forward(norm.forward_last(rows))));
  return add(x, rows_to_nchw(path, n, h, w));
}

template <typename T>
void ChannelMlp<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  norm.collect_params(prefix + ".norm", out);
  fc1.collect_params(prefix + ".fc1", out);
  fc2.collect_params(prefix + ".fc2", out);
}

// ---- SCVSS ----

template <typename T>
ScvssBlock<T>::ScvssBlock(const BlockConfig& cfg, bool snake_enabled, Rng& rng) {
  cfg.validate();
  const auto c = cfg.channels;
  norm_conv = LayerNorm2d<T>(c, static_cast<T>(cfg.norm_eps));
  conv = Conv2dLayer<T>(c, c, 3, 1, 1, 1, rng);
  snake = VssBranch<T>(c, cfg.n_state, snake_enabled ? DirectionSet::Serpentine : DirectionSet::Conventional,
                       static_cast<T>(cfg.norm_eps), rng);
  vss = VssBranch<T>(c, cfg.n_state, DirectionSet::Conventional, static_cast<T>(cfg.norm_eps), rng);
  sca_conv = ScaAttention<T>(c, cfg.sca_reduction, rng);
  sca_snake = ScaAttention<T>(c, cfg.sca_reduction, rng);
  sca_vss = ScaAttention<T>(c, cfg.sca_reduction, rng);
  mlp = ChannelMlp<T>(c, cfg.mlp_ratio, static_cast<T>(cfg.norm_eps), rng);
  drop_path_rate = cfg.drop_path_rate;
}

template <typename T>
Tensor<T> ScvssBlock<T>::forward(const Tensor<T>& x, const ForwardCtx& ctx) const {
  OpScope scope("scvss");
  auto x_conv = conv.forward(norm_conv.forward(x));
  auto x_snake = snake.forward(x, /*include_residual=*/false);
  auto x_vss = vss.forward(x, /*include_residual=*/false);
  auto branch = add(add(sca_conv.forward(x_conv), sca_snake.forward(x_snake)), sca_vss.forward(x_vss));
  return mlp.forward(add(x, drop_path(branch, drop_path_rate, ctx)));
}

template <typename T>
void ScvssBlock<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  norm_conv.collect_params(prefix + ".norm_conv", out);
  conv.collect_params(prefix + ".conv", out);
  snake.collect_params(prefix + ".snake", out);
  vss.collect_params(prefix + ".vss", out);
  sca_conv.collect_params(prefix + ".sca_conv", out);
  sca_snake.collect_params(prefix + ".sca_snake", out);
  sca_vss.collect_params(prefix + ".sca_vss", out);
  mlp.collect_params(prefix + ".mlp", out);
}

// ---- WMB ----

template <typename T>
WmbBlock<T>::WmbBlock(const BlockConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto c = cfg.channels;
  norm1 = LayerNorm2d<T>(c, static_cast<T>(cfg.norm_eps));
  ll_in = Conv2dLayer<T>(c, c, 3, 1, 1, 1, rng);
  mamba_fwd = init_s6_params<T>(1, cfg.n_state, rng);
  mamba_bwd = init_s6_params<T>(1, cfg.n_state, rng);
  ll_out = Conv2dLayer<T>(c, c, 3, 1, 1, 1, rng);
  lh_dw = Conv2dLayer<T>(c, c, 3, 1, 1, c, rng);
  lh_pw = Conv2dLayer<T>(c, c, 1, 1, 0, 1, rng);
  hl_dw = Conv2dLayer<T>(c, c, 3, 1, 1, c, rng);
  hl_pw = Conv2dLayer<T>(c, c, 1, 1, 0, 1, rng);
  hh_dw = Conv2dLayer<T>(c, c, 3, 1, 1, c, rng);
  hh_pw = Conv2dLayer<T>(c, c, 1, 1, 0, 1, rng);
  norm2 = LayerNorm2d<T>(c, static_cast<T>(cfg.norm_eps));
  const auto hidden = std::max<std::int64_t>(1, static_cast<std::int64_t>(cfg.ffn_ratio * static_cast<double>(c)));
  ffn_fc1 = LinearLayer<T>(c, hidden, rng);
  ffn_fc2 = LinearLayer<T>(hidden, c, rng);
}

namespace {

// Channel-wise bidirectional scan: every spatial position becomes an
// independent length-C sequence of scalars.
template <typename T>
Tensor<T> channel_mamba(const Tensor<T>& x, const S6Params<T>& fwd, const S6Params<T>& bwd) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto rows = nchw_to_rows(x);  // [N*H*W, C]
  const auto b = n * h * w;
  auto yf = s6_scan(reshape(rows, {b, c, 1}), fwd);

  std::vector<std::int64_t> rev(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < c; ++i) rev[static_cast<std::size_t>(i)] = c - 1 - i;
  auto yb = s6_scan(reshape(gather_last(rows, rev), {b, c, 1}), bwd);
  auto yb_rows = gather_last(reshape(yb, {b, c}), rev);

  auto y = add(reshape(yf, {b, c}), yb_rows);
  return rows_to_nchw(y, n, h, w);
}

}  // namespace

template <typename T>
Tensor<T> WmbBlock<T>::forward(const Tensor<T>& x, const ForwardCtx&) const {
  OpScope scope("wmb");
  const auto n = x.dim(0), h = x.dim(2), w = x.dim(3);
  auto xp = pad_to_even(x);
  auto bands = dwt2(norm1.forward(xp));

  auto ll = ll_out.forward(channel_mamba(ll_in.forward(bands.ll), mamba_fwd, mamba_bwd));
  WaveletBands<T> refined{ll, lh_pw.forward(lh_dw.forward(bands.lh)), hl_pw.forward(hl_dw.forward(bands.hl)),
                          hh_pw.forward(hh_dw.forward(bands.hh))};
  auto wm = crop_spatial(iwt2(refined), h, w);
  auto stage1 = add(x, wm);

  auto rows = nchw_to_rows(stage1);
  auto ffn = ffn_fc2.forward(gelu(ffn_fc1.forward(norm2.forward_last(rows))));
  return add(stage1, rows_to_nchw(ffn, n, h, w));
}

template <typename T>
void WmbBlock<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  norm1.collect_params(prefix + ".norm1", out);
  ll_in.collect_params(prefix + ".ll_in", out);
  auto s6 = [&](const std::string& base, S6Params<T>& p) {
    out.push_back({base + ".a_log", p.a_log});
    out.push_back({base + ".d_skip", p.d_skip});
    out.push_back({base + ".w_x", p.w_x});
    out.push_back({base + ".w_dt", p.w_dt});
    out.push_back({base + ".b_dt", p.b_dt});
  };
  s6(prefix + ".mamba_fwd", mamba_fwd);
  s6(prefix + ".mamba_bwd", mamba_bwd);
  ll_out.collect_params(prefix + ".ll_out", out);
  lh_dw.collect_params(prefix + ".lh_dw", out);
  lh_pw.collect_params(prefix + ".lh_pw", out);
  hl_dw.collect_params(prefix + ".hl_dw", out);
  hl_pw.collect_params(prefix + ".hl_pw", out);
  hh_dw.collect_params(prefix + ".hh_dw", out);
  hh_pw.collect_params(prefix + ".hh_pw", out);
  norm2.collect_params(prefix + ".norm2", out);
  ffn_fc1.collect_params(prefix + ".ffn_fc1", out);
  ffn_fc2.collect_params(prefix + ".ffn_fc2", out);
}

// ---- patch embed / merge ----

template <typename T>
PatchEmbed<T>::PatchEmbed(std::int64_t c_in, std::int64_t c_out, T norm_eps, Rng& rng) {
  conv = Conv2dLayer<T>(c_in, c_out, 2, 2, 0, 1, rng);
  norm = LayerNorm2d<T>(c_out, norm_eps);
}

template <typename T>
Tensor<T> PatchEmbed<T>::forward(const Tensor<T>& x) const {
  OpScope scope("patch_embed");
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw ShapeError("patch_embed requires even extents, got " + shape_str(x.shape()));
  return norm.forward(conv.forward(x));
}

template <typename T>
void PatchEmbed<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  conv.collect_params(prefix + ".conv", out);
  norm.collect_params(prefix + ".norm", out);
}

template <typename T>
PatchMerge<T>::PatchMerge(std::int64_t c_in, std::int64_t c_out, T norm_eps, Rng& rng) {
  norm = LayerNorm2d<T>(4 * c_in, norm_eps);
  reduce = LinearLayer<T>(4 * c_in, c_out, rng);
}

template <typename T>
Tensor<T> PatchMerge<T>::forward(const Tensor<T>& x) const {
  OpScope scope("patch_merge");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("patch_merge requires even extents, got " + shape_str(x.shape()));
  const auto h2 = h / 2, w2 = w / 2;
  auto flat = reshape(x, {n, c, h * w});
  std::vector<Tensor<T>> quads;
  const std::pair<std::int64_t, std::int64_t> offsets[4] = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  for (auto [dr, dc] : offsets) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(h2 * w2));
    for (std::int64_t r = 0; r < h2; ++r)
      for (std::int64_t cc = 0; cc < w2; ++cc)
        idx[static_cast<std::size_t>(r * w2 + cc)] = (2 * r + dr) * w + 2 * cc + dc;
    quads.push_back(reshape(gather_last(flat, idx), {n, c, h2, w2}));
  }
  auto gathered = concat(quads, 1);  // [N,4C,H/2,W/2]
  auto rows = norm.forward_last(nchw_to_rows(gathered));
  return rows_to_nchw(reduce.forward(rows), n, h2, w2);
}

template <typename T>
void PatchMerge<T>::collect_params(const std::string& prefix, ParamList<T>& out) {
  norm.collect_params(prefix + ".norm", out);
  reduce.collect_params(prefix + ".reduce", out);
}

#define TWM_INSTANTIATE_BLOCKS(T)                                                                 \
  template void zero_params<T>(ParamList<T>&);                                                    \
  template Tensor<T> drop_path<T>(const Tensor<T>&, double, const ForwardCtx&);                   \
  template Tensor<T> nchw_to_rows<T>(const Tensor<T>&);                                           \
  template Tensor<T> rows_to_nchw<T>(const Tensor<T>&, std::int64_t, std::int64_t, std::int64_t); \
  template Tensor<T> pad_to_even<T>(const Tensor<T>&);                                            \
  template Tensor<T> crop_spatial<T>(const Tensor<T>&, std::int64_t, std::int64_t);               \
  template struct LinearLayer<T>;                                                                 \
  template struct Conv2dLayer<T>;                                                                 \
  template struct LayerNorm2d<T>;                                                                 \
  template struct ScaAttention<T>;                                                                \
  template struct VssBranch<T>;                                                                   \
  template struct ChannelMlp<T>;                                                                  \
  template struct ScvssBlock<T>;                                                                  \
  template struct WmbBlock<T>;                                                                    \
  template struct PatchEmbed<T>;                                                                  \
  template struct PatchMerge<T>;

TWM_INSTANTIATE_BLOCKS(float)
TWM_INSTANTIATE_BLOCKS(double)

#undef TWM_INSTANTIATE_BLOCKS

}  // namespace twm
