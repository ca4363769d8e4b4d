#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "topowmamba/checkpoint.hpp"
#include "topowmamba/network.hpp"
#include "topowmamba/ops.hpp"

using namespace twm;

namespace {

ModelConfig tiny_cfg(std::int64_t hw = 64) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.stage_dims = {4, 8, 16, 32, 64};
  cfg.scvss_counts = {1, 1, 1, 1};
  cfg.wmb_encoder_stages = {1, 3, 5};
  cfg.drop_path_rate = 0.0;
  cfg.input_h = hw;
  cfg.input_w = hw;
  return cfg;
}

// Layer-by-layer parameter arithmetic, independent of the model's own
// registration machinery.
std::int64_t analytic_param_count(const ModelConfig& c) {
  const std::int64_t n_state = 16, sca_r = 8;
  const double mlp_ratio = 4.0, ffn_ratio = 4.0;
  auto conv = [](std::int64_t ci, std::int64_t co, std::int64_t k, std::int64_t g = 1) {
    return co * (ci / g) * k * k + co;
  };
  auto lin = [](std::int64_t di, std::int64_t dо) { return dо * di + dо; };
  auto ln = [](std::int64_t ch) { return 2 * ch; };
  auto s6 = [&](std::int64_t d) {
    const std::int64_t dtr = std::max<std::int64_t>(1, (d + 15) / 16);
    return d * n_state + d + (dtr + 2 * n_state) * d + d * dtr + d;
  };
  auto sca = [&](std::int64_t ch) {
    const std::int64_t hidden = std::max<std::int64_t>(1, (ch + sca_r - 1) / sca_r);
    return lin(ch, hidden) + lin(hidden, ch) + conv(2, 1, 7);
  };
  auto vss = [&](std::int64_t ch) {
    const std::int64_t di = 2 * ch;
    return ln(ch) + lin(ch, 2 * di) + conv(di, di, 3, di) + 4 * s6(di) + ln(di) + lin(di, ch);
  };
  auto mlp = [&](std::int64_t ch) {
    const auto hidden = std::max<std::int64_t>(1, static_cast<std::int64_t>(mlp_ratio * ch));
    return ln(ch) + lin(ch, hidden) + lin(hidden, ch);
  };
  auto scvss = [&](std::int64_t ch) { return ln(ch) + conv(ch, ch, 3) + 2 * vss(ch) + 3 * sca(ch) + mlp(ch); };
  auto wmb = [&](std::int64_t ch) {
    const auto hidden = std::max<std::int64_t>(1, static_cast<std::int64_t>(ffn_ratio * ch));
    return ln(ch) + conv(ch, ch, 3) + 2 * s6(1) + conv(ch, ch, 3) +
           3 * (conv(ch, ch, 3, ch) + conv(ch, ch, 1)) + ln(ch) + lin(ch, hidden) + lin(hidden, ch);
  };

  const auto& d = c.stage_dims;
  std::int64_t total = conv(c.in_channels, d[0], 7);  // stem
  if (c.wmb_encoder_stages.count(1)) total += wmb(d[0]);
  total += conv(d[0], d[1], 2) + ln(d[1]);  // patch embed
  for (int stage = 0; stage < 4; ++stage) {
    if (stage > 0) total += ln(4 * d[stage]) + lin(4 * d[stage], d[stage + 1]);  // patch merge
    total += c.scvss_counts[static_cast<std::size_t>(stage)] * scvss(d[stage + 1]);
    if (c.wmb_encoder_stages.count(stage + 2)) total += wmb(d[stage + 1]);
  }
  std::int64_t prev = d[4];
  const std::int64_t widths[4] = {d[3], d[2], d[1], d[0]};
  for (int i = 0; i < 4; ++i) {
    const auto w = widths[i];
    total += conv(prev, w, 3) + conv(w, w, 1) + conv(2 * w, w, 3) + ln(w) + conv(w, w, 3) + ln(w);
    if (c.wmb_decoder_stages.count(i + 1)) total += wmb(w);
    total += conv(w, c.num_classes, 1);
    prev = w;
  }
  total += conv(d[0], d[0], 3) + conv(d[0], d[0], 3) + conv(d[0], c.num_classes, 1);
  return total;
}

}  // namespace

TEST_CASE("toy model produces the contracted output shapes") {
  auto cfg = tiny_cfg(64);
  Model<float> model(cfg, 7);
  Rng rng(3);
  auto x = oracle::random_tensor<float>(rng, {1, 1, 64, 64}, 0.f, 1.f);
  auto out = model.forward(x, {});
  CHECK(out.main.shape() == Shape{1, 3, 64, 64});
  REQUIRE(out.aux.size() == 4);
  CHECK(out.aux[0].shape() == Shape{1, 3, 32, 32});
  CHECK(out.aux[1].shape() == Shape{1, 3, 16, 16});
  CHECK(out.aux[2].shape() == Shape{1, 3, 8, 8});
  CHECK(out.aux[3].shape() == Shape{1, 3, 4, 4});

  auto feats = model.encoder_features(x);
  REQUIRE(feats.size() == 5);
  const std::int64_t dims[5] = {4, 8, 16, 32, 64};
  for (int i = 0; i < 5; ++i) {
    CHECK(feats[static_cast<std::size_t>(i)].dim(1) == dims[i]);
    CHECK(feats[static_cast<std::size_t>(i)].dim(2) == 64 >> (i + 1));
  }
}

TEST_CASE("same seed gives bitwise-identical parameters") {
  auto cfg = tiny_cfg(64);
  Model<float> a(cfg, 99), b(cfg, 99);
  REQUIRE(a.parameters().size() == b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    REQUIRE(a.parameters()[i].name == b.parameters()[i].name);
    REQUIRE(a.parameters()[i].tensor.values() == b.parameters()[i].tensor.values());
  }
  Model<float> c(cfg, 100);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size() && !any_diff; ++i)
    any_diff = a.parameters()[i].tensor.values() != c.parameters()[i].tensor.values();
  CHECK(any_diff);
}

TEST_CASE("parameter counts match the analytic layer-by-layer sum") {
  SUBCASE("tiny config") {
    auto cfg = tiny_cfg(64);
    Model<float> model(cfg, 1);
    CHECK(model.parameter_count() == analytic_param_count(cfg));
  }
  SUBCASE("decoder wmb variant") {
    auto cfg = tiny_cfg(64);
    cfg.wmb_encoder_stages = {2, 4};
    cfg.wmb_decoder_stages = {1, 2, 3, 4};
    Model<float> model(cfg, 1);
    CHECK(model.parameter_count() == analytic_param_count(cfg));
  }
  SUBCASE("default config") {
    ModelConfig cfg;
    cfg.num_classes = 7;
    Model<float> model(cfg, 1);
    CHECK(model.parameter_count() == analytic_param_count(cfg));
  }
}

TEST_CASE("deep supervision heads are additive, not in-path") {
  auto cfg = tiny_cfg(64);
  cfg.deep_supervision = true;
  Model<float> with(cfg, 42);
  cfg.deep_supervision = false;
  Model<float> without(cfg, 42);

  Rng rng(5);
  auto x = oracle::random_tensor<float>(rng, {1, 1, 64, 64}, 0.f, 1.f);
  auto a = with.forward(x, {});
  auto b = without.forward(x, {});
  CHECK(b.aux.empty());
  REQUIRE(a.main.numel() == b.main.numel());
  for (std::int64_t i = 0; i < a.main.numel(); ++i) REQUIRE(a.main.data()[i] == b.main.data()[i]);
}

TEST_CASE("snake toggle changes outputs but not shapes") {
  // finest width >= 4: channel LayerNorm over a 2-vector would collapse the
  // decoder signal to its sign and mask the toggle
  auto cfg = tiny_cfg(32);
  cfg.wmb_encoder_stages = {};
  ModelConfig cfg_off = cfg;
  cfg_off.snake_enabled = false;
  Model<double> on(cfg, 11), off(cfg_off, 11);
  // same parameter inventory either way; put both at healthy magnitudes
  REQUIRE(on.parameters().size() == off.parameters().size());
  Rng wrng(21);
  for (std::size_t i = 0; i < on.parameters().size(); ++i) {
    auto& pa = on.parameters()[i].tensor;
    auto& pb = off.parameters()[i].tensor;
    for (std::int64_t j = 0; j < pa.numel(); ++j) pa.data()[j] = pb.data()[j] = wrng.uniform(-0.25, 0.25);
  }
  Rng rng(13);
  auto x = oracle::random_tensor<double>(rng, {1, 1, 32, 32}, 0.0, 1.0);
  auto a = on.forward(x, {});
  auto b = off.forward(x, {});
  REQUIRE(a.main.shape() == b.main.shape());
  double diff = 0;
  for (std::int64_t i = 0; i < a.main.numel(); ++i) diff = std::max(diff, std::abs(a.main.data()[i] - b.main.data()[i]));
  CHECK(diff > 1e-9);
}

TEST_CASE("eval forward is a pure function of weights and input") {
  auto cfg = tiny_cfg(64);
  Model<float> model(cfg, 10);
  Rng rng(1);
  auto x = oracle::random_tensor<float>(rng, {2, 1, 64, 64}, 0.f, 1.f);
  auto a = model.forward(x, {});
  auto b = model.forward(x, {});
  for (std::int64_t i = 0; i < a.main.numel(); ++i) REQUIRE(a.main.data()[i] == b.main.data()[i]);
}

TEST_CASE("non-finite activations report the offending layer") {
  auto cfg = tiny_cfg(64);
  Model<float> model(cfg, 10);
  // blow up the stem so the overflow happens immediately
  for (auto& p : model.parameters())
    if (p.name == "stem.w")
      for (auto& v : p.tensor.values()) v = 3e38f;
  Rng rng(1);
  auto x = oracle::random_tensor<float>(rng, {1, 1, 64, 64}, 0.5f, 1.f);
  try {
    model.forward(x, {});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("encoder") != std::string::npos);
  }
}

TEST_CASE("model config json round-trip and validation") {
  auto cfg = tiny_cfg(64);
  auto text = cfg.to_json_string();
  auto back = ModelConfig::from_json_string(text);
  CHECK(back == cfg);

  CHECK_THROWS_AS(ModelConfig::from_json_string("{}"), ConfigError);
  auto bad = cfg;
  bad.input_h = 100;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoint round-trip is byte-identical and forward-equivalent") {
  auto cfg = tiny_cfg(64);
  Model<float> model(cfg, 77);
  NamedBuffers opt;
  opt.emplace_back("opt.m.stem.w", std::vector<float>(static_cast<std::size_t>(model.parameters()[0].tensor.numel()), 0.5f));
  CheckpointMeta meta{3, 120, 0.91};

  const std::string p1 = "/tmp/twm_test_ck1.bin", p2 = "/tmp/twm_test_ck2.bin";
  checkpoint_save(model, opt, meta, p1);
  auto loaded = checkpoint_load(p1);
  CHECK(loaded.meta.epoch == 3);
  CHECK(loaded.meta.step == 120);
  CHECK(loaded.meta.best_metric == doctest::Approx(0.91));
  REQUIRE(loaded.optimizer_state.size() == 1);
  CHECK(loaded.optimizer_state[0].first == "opt.m.stem.w");

  checkpoint_save(*loaded.model, loaded.optimizer_state, loaded.meta, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(b1.size() == b2.size());
  CHECK(b1 == b2);
  CHECK(b1.substr(0, 4) == "TWMB");

  Rng rng(9);
  auto x = oracle::random_tensor<float>(rng, {1, 1, 64, 64}, 0.f, 1.f);
  auto a = model.forward(x, {});
  auto b = loaded.model->forward(x, {});
  for (std::int64_t i = 0; i < a.main.numel(); ++i) REQUIRE(a.main.data()[i] == b.main.data()[i]);
}

TEST_CASE("corrupted magic fails loudly, config mismatches are named") {
  auto cfg = tiny_cfg(64);
  Model<float> model(cfg, 77);
  const std::string p = "/tmp/twm_test_ck3.bin";
  checkpoint_save(model, {}, {}, p);

  // corrupt the magic
  {
    std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(checkpoint_load(p), IoError);

  auto other = cfg;
  other.num_classes = 5;
  other.snake_enabled = false;
  try {
    require_config_match(cfg, other);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("num_classes") != std::string::npos);
    CHECK(msg.find("snake_enabled") != std::string::npos);
  }
}

TEST_CASE("truncated checkpoints are rejected") {
  auto cfg = tiny_cfg(64);
  Model<float> model(cfg, 77);
  const std::string p = "/tmp/twm_test_ck4.bin";
  checkpoint_save(model, {}, {}, p);
  std::string buf;
  {
    std::ifstream f(p, std::ios::binary);
    buf.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size() / 2));
  }
  CHECK_THROWS_AS(checkpoint_load(p), IoError);
}
