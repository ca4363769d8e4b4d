#include "topowmamba/gradcheck_suite.hpp"

#include "topowmamba/blocks.hpp"
#include "topowmamba/metrics.hpp"
#include "topowmamba/network.hpp"
#include "topowmamba/ops.hpp"
#include "topowmamba/scan.hpp"
#include "topowmamba/wavelet.hpp"

namespace twm {

namespace {

Tensor<double> rand_tensor(Rng& rng, const Shape& shape, double lo, double hi, bool rg = false) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_data(shape, std::move(v), rg);
}

// tiny init weights bury the scan state path below what finite differences
// can see; checks run at uniform(-0.25, 0.25) instead
template <typename Block>
void randomize(Block& block, std::uint64_t seed, double mag = 0.25) {
  Rng rng(seed);
  ParamList<double> params;
  block.collect_params("p", params);
  for (auto& p : params)
    for (auto& v : p.tensor.values()) v = rng.uniform(-mag, mag);
}

std::vector<Tensor<double>> with_params(const Tensor<double>& x, ParamList<double>& params) {
  std::vector<Tensor<double>> inputs{x};
  for (auto& p : params) inputs.push_back(p.tensor);
  return inputs;
}

}  // namespace

std::vector<SuiteCheck> run_gradcheck_suite(const std::string& module, double tol, std::int64_t coords) {
  std::vector<SuiteCheck> out;
  auto wants = [&](const std::string& name) { return module.empty() || name.rfind(module, 0) == 0; };
  const double eps = 1e-4;
  // losses are scaled to O(0.1) so the rel-err floor dominates FD noise on
  // dead coordinates
  const double scale = 1.0 / 8192.0;

  if (wants("tensor.conv2d")) {
    Rng rng(11);
    auto x = rand_tensor(rng, {1, 2, 5, 5}, -1, 1, true);
    auto w = rand_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5, true);
    auto b = rand_tensor(rng, {3}, -0.2, 0.2, true);
    auto lw = rand_tensor(rng, {1, 3, 3, 3}, 0.5, 1.5);
    auto res = grad_check([&] { return mul_scalar(sum(mul(conv2d<double>(x, w, b, 2, 1), lw)), scale); },
                          {x, w, b}, eps, tol, coords, 1);
    out.push_back({"tensor.conv2d", res});
  }
  if (wants("tensor.composite")) {
    Rng rng(13);
    auto x = rand_tensor(rng, {1, 3, 4, 4}, -1, 1, true);
    auto g = rand_tensor(rng, {4}, 0.5, 1.5, true);
    auto bt = rand_tensor(rng, {4}, -0.3, 0.3, true);
    auto lw = rand_tensor(rng, {1, 3, 4, 4}, 0.5, 1.5);
    auto res = grad_check(
        [&] {
          auto y = gelu(layer_norm<double>(silu(x), g, bt));
          auto pooled = pool_reduce(y, PoolKind::GlobalAvg);
          y = mul(y, broadcast_spatial(pooled, 4, 4));
          return mul_scalar(sum(mul(softmax(y), lw)), scale);
        },
        {x, g, bt}, eps, tol, coords, 2);
    out.push_back({"tensor.composite", res});
  }
  if (wants("wavelet.roundtrip")) {
    Rng rng(17);
    auto x = rand_tensor(rng, {1, 2, 4, 4}, -1, 1, true);
    auto wl = rand_tensor(rng, {1, 2, 2, 2}, 0.5, 1.5);
    auto wo = rand_tensor(rng, {1, 2, 4, 4}, 0.5, 1.5);
    auto res = grad_check(
        [&] {
          auto bands = dwt2(x);
          WaveletBands<double> wb{mul(bands.ll, wl), bands.lh, bands.hl, bands.hh};
          return mul_scalar(sum(mul(iwt2(wb), wo)), scale);
        },
        {x}, eps, tol, coords, 3);
    out.push_back({"wavelet.roundtrip", res});
  }
  if (wants("scan.s6")) {
    Rng rng(19);
    auto p = init_s6_params<double>(2, 4, rng);
    for (std::int64_t i = 0; i < p.w_x.numel(); ++i) p.w_x.data()[i] = rng.uniform(-0.5, 0.5);
    auto seq = rand_tensor(rng, {1, 8, 2}, -1, 1, true);
    auto lw = rand_tensor(rng, {1, 8, 2}, 0.5, 1.5);
    std::vector<Tensor<double>> inputs{seq, p.a_log, p.d_skip, p.w_x, p.w_dt, p.b_dt};
    auto res = grad_check([&] { return mul_scalar(sum(mul(s6_scan(seq, p), lw)), scale); }, inputs, eps, tol, coords, 4);
    out.push_back({"scan.s6", res});
  }
  if (wants("scan.multidir")) {
    Rng rng(23);
    std::vector<S6Params<double>> params;
    for (int i = 0; i < 4; ++i) {
      auto p = init_s6_params<double>(2, 3, rng);
      for (std::int64_t j = 0; j < p.w_x.numel(); ++j) p.w_x.data()[j] = rng.uniform(-0.5, 0.5);
      params.push_back(p);
    }
    auto x = rand_tensor(rng, {1, 2, 3, 3}, -1, 1, true);
    auto lw = rand_tensor(rng, {1, 2, 3, 3}, 0.5, 1.5);
    auto res = grad_check(
        [&] { return mul_scalar(sum(mul(multi_directional_scan(x, params, DirectionSet::Serpentine), lw)), scale); },
        {x}, eps, tol, coords, 5);
    out.push_back({"scan.multidir", res});
  }
  if (wants("blocks.sca")) {
    Rng rng(29);
    ScaAttention<double> sca(4, 8, rng);
    randomize(sca, 101);
    auto x = rand_tensor(rng, {1, 4, 4, 4}, -1, 1, true);
    auto lw = rand_tensor(rng, {1, 4, 4, 4}, 0.5, 1.5);
    ParamList<double> params;
    sca.collect_params("sca", params);
    auto res = grad_check([&] { return mul_scalar(sum(mul(sca.forward(x), lw)), scale); }, with_params(x, params),
                          eps, tol, coords, 6);
    out.push_back({"blocks.sca", res});
  }
  if (wants("blocks.vss")) {
    Rng rng(31);
    VssBranch<double> branch(8, 4, DirectionSet::Conventional, 1e-5, rng);
    randomize(branch, 102);
    auto x = rand_tensor(rng, {1, 8, 4, 4}, -1, 1, true);
    auto lw = rand_tensor(rng, {1, 8, 4, 4}, 0.5, 1.5);
    ParamList<double> params;
    branch.collect_params("vss", params);
    auto res = grad_check([&] { return mul_scalar(sum(mul(branch.forward(x), lw)), scale); }, with_params(x, params),
                          eps, tol, coords, 7);
    out.push_back({"blocks.vss", res});
  }
  if (wants("blocks.snakevss")) {
    Rng rng(37);
    VssBranch<double> branch(8, 4, DirectionSet::Serpentine, 1e-5, rng);
    randomize(branch, 103);
    auto x = rand_tensor(rng, {1, 8, 4, 4}, -1, 1, true);
    auto lw = rand_tensor(rng, {1, 8, 4, 4}, 0.5, 1.5);
    ParamList<double> params;
    branch.collect_params("snake", params);
    auto res = grad_check([&] { return mul_scalar(sum(mul(branch.forward(x), lw)), scale); }, with_params(x, params),
                          eps, tol, coords, 8);
    out.push_back({"blocks.snakevss", res});
  }
  if (wants("blocks.scvss")) {
    Rng rng(41);
    BlockConfig bc;
    bc.channels = 8;
    bc.n_state = 4;
    bc.mlp_ratio = 2.0;
    ScvssBlock<double> block(bc, true, rng);
    randomize(block, 104, 0.2);
    auto x = rand_tensor(rng, {1, 8, 4, 4}, -1, 1, true);
    auto lw = rand_tensor(rng, {1, 8, 4, 4}, 0.5, 1.5);
    ParamList<double> params;
    block.collect_params("scvss", params);
    auto res = grad_check([&] { return mul_scalar(sum(mul(block.forward(x, {}), lw)), scale); },
                          with_params(x, params), eps, tol, coords, 9);
    out.push_back({"blocks.scvss", res});
  }
  if (wants("blocks.wmb")) {
    Rng rng(43);
    BlockConfig bc;
    bc.channels = 8;
    bc.n_state = 4;
    bc.ffn_ratio = 2.0;
    WmbBlock<double> block(bc, rng);
    randomize(block, 105, 0.2);
    auto x = rand_tensor(rng, {1, 8, 6, 6}, -1, 1, true);
    auto lw = rand_tensor(rng, {1, 8, 6, 6}, 0.5, 1.5);
    ParamList<double> params;
    block.collect_params("wmb", params);
    auto res = grad_check([&] { return mul_scalar(sum(mul(block.forward(x, {}), lw)), scale); },
                          with_params(x, params), eps, tol, coords, 10);
    out.push_back({"blocks.wmb", res});
  }
  if (wants("loss.seg_loss")) {
    Rng rng(47);
    LabelMask gt;
    gt.h = gt.w = 4;
    gt.classes.resize(16);
    for (auto& c : gt.classes) c = static_cast<std::uint8_t>(rng.uniform_int(2));
    auto logits = rand_tensor(rng, {1, 2, 4, 4}, -1, 1, true);
    auto res = grad_check(
        [&] {
          SegOutput<double> so;
          so.main = logits;
          return seg_loss(so, {gt});
        },
        {logits}, eps, tol, coords, 11);
    out.push_back({"loss.seg_loss", res});
  }
  if (wants("network.tiny")) {
    ModelConfig cfg;
    cfg.num_classes = 2;
    cfg.stage_dims = {4, 8, 16, 32, 64};
    cfg.scvss_counts = {1, 1, 1, 1};
    cfg.wmb_encoder_stages = {1, 3, 5};
    cfg.drop_path_rate = 0.0;
    cfg.input_h = cfg.input_w = 32;
    Model<double> model(cfg, 3);
    Rng rng(53);
    for (auto& p : model.parameters())
      for (auto& v : p.tensor.values()) v = rng.uniform(-0.2, 0.2);
    auto x = rand_tensor(rng, {1, 1, 32, 32}, 0, 1, true);
    auto lw = rand_tensor(rng, {1, 2, 32, 32}, 0.5, 1.5);
    std::vector<Tensor<double>> inputs{x};
    for (auto& p : model.parameters()) inputs.push_back(p.tensor);
    auto res = grad_check(
        [&] {
          auto so = model.forward(x, {});
          auto total = sum(mul(so.main, lw));
          for (const auto& aux : so.aux) total = add(total, mul_scalar(sum(aux), 0.25));
          return mul_scalar(total, scale);
        },
        inputs, 4e-4, tol, coords, 12);
    out.push_back({"network.tiny", res});
  }
  if (out.empty()) throw ConfigError("gradcheck: unknown module filter '" + module + "'");
  return out;
}

}  // namespace twm
