#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "oracles.hpp"
#include "topowmamba/dataset.hpp"
#include "topowmamba/phantom.hpp"
#include "topowmamba/trainer.hpp"

using namespace twm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

PhantomSpec small_spec(std::int64_t n = 12, std::int64_t hw = 32) {
  PhantomSpec spec;
  spec.n_samples = n;
  spec.h = spec.w = hw;
  spec.num_classes = 3;
  spec.seed = 9;
  return spec;
}

ModelConfig pipeline_model(std::int64_t hw = 32) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.stage_dims = {4, 8, 16, 32, 64};
  cfg.scvss_counts = {1, 1, 1, 1};
  cfg.wmb_encoder_stages = {1, 3, 5};
  cfg.drop_path_rate = 0.0;
  cfg.input_h = cfg.input_w = hw;
  return cfg;
}

}  // namespace

TEST_CASE("phantom generation is byte-deterministic") {
  auto spec = small_spec(6);
  const std::string d1 = "/tmp/twm_ph_a", d2 = "/tmp/twm_ph_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  gen_phantoms(spec, d1);
  gen_phantoms(spec, d2);
  for (const auto& entry : fs::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), d1);
    CHECK(slurp(entry.path().string()) == slurp((fs::path(d2) / rel).string()));
  }
}

TEST_CASE("phantom masks stay within the declared class ids") {
  auto spec = small_spec(8);
  for (std::int64_t i = 0; i < spec.n_samples; ++i) {
    auto s = gen_phantom_sample(spec, i);
    std::vector<bool> seen(3, false);
    for (auto c : s.mask.classes) {
      REQUIRE(c < 3);
      seen[c] = true;
    }
    CHECK(seen[0]);
    CHECK(seen[1]);
    CHECK(seen[2]);
    for (auto v : s.image) {
      REQUIRE(v >= 0.f);
      REQUIRE(v <= 1.f);
    }
  }
}

TEST_CASE("foreground fraction falls inside the Monte-Carlo geometry range") {
  auto spec = small_spec(100, 48);
  double mean_frac = 0;
  for (std::int64_t i = 0; i < spec.n_samples; ++i) {
    auto s = gen_phantom_sample(spec, i);
    std::int64_t fg = 0;
    for (auto c : s.mask.classes) fg += c != 0;
    mean_frac += static_cast<double>(fg) / static_cast<double>(spec.h * spec.w);
  }
  mean_frac /= static_cast<double>(spec.n_samples);

  // geometry oracle: sample shape parameters from the same ranges and
  // estimate the union area by point sampling, independent of the rasterizer
  Rng rng(777);
  const double m = static_cast<double>(std::min(spec.h, spec.w));
  double lo = 1.0, hi = 0.0;
  std::vector<double> fracs;
  for (int trial = 0; trial < 200; ++trial) {
    const double cy = spec.h * (0.5 + rng.uniform(-0.08, 0.08));
    const double cx = spec.w * (0.5 + rng.uniform(-0.08, 0.08));
    const double a = rng.uniform(spec.ellipse_r_min, spec.ellipse_r_max) * m;
    const double b = rng.uniform(spec.ellipse_r_min, spec.ellipse_r_max) * m;
    const double theta = rng.uniform(0.0, M_PI);
    const double amp = rng.uniform(0.08, 0.2) * spec.w;
    const double freq = rng.uniform(0.6, 1.6);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    const double radius = rng.uniform(spec.tube_r_min, spec.tube_r_max) * m;
    const double col0 = cx + rng.uniform(-0.15, 0.15) * spec.w;
    std::vector<std::pair<double, double>> path;
    for (int i = 0; i < 128; ++i) {
      const double t = i / 127.0;
      path.emplace_back(t * (spec.h - 1.0), col0 + amp * std::sin(2 * M_PI * freq * t + phase));
    }
    std::int64_t in_union = 0;
    const int pts = 3000;
    for (int p = 0; p < pts; ++p) {
      const double y = rng.uniform(0.0, static_cast<double>(spec.h));
      const double x = rng.uniform(0.0, static_cast<double>(spec.w));
      const double dy = y - cy, dx = x - cx;
      const double u = (dx * std::cos(theta) + dy * std::sin(theta)) / a;
      const double v = (-dx * std::sin(theta) + dy * std::cos(theta)) / b;
      bool inside = u * u + v * v <= 1.0;
      if (!inside)
        for (const auto& [qy, qx] : path)
          if ((y - qy) * (y - qy) + (x - qx) * (x - qx) <= radius * radius) {
            inside = true;
            break;
          }
      in_union += inside;
    }
    const double frac = static_cast<double>(in_union) / pts;
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
  }
  CHECK(mean_frac > lo - 0.02);
  CHECK(mean_frac < hi + 0.02);
}

TEST_CASE("degenerate phantom specs are rejected") {
  auto spec = small_spec();
  spec.ellipse_r_min = 0.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  auto spec2 = small_spec();
  spec2.num_classes = 1;
  CHECK_THROWS_AS(spec2.validate(), ConfigError);
}

TEST_CASE("preprocess_slice fixed point, degenerate and window cases") {
  std::vector<float> img = {0.f, 0.25f, 0.5f, 1.f};
  auto same = preprocess_slice(img, 2, 2, 2, 2);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(same[i] == doctest::Approx(img[i]).epsilon(1e-7));

  std::vector<float> flat(9, 3.0f);
  auto zeros = preprocess_slice(flat, 3, 3, 3, 3);
  for (auto v : zeros) CHECK(v == 0.f);

  // window (-100, 300): clamp then min-max
  std::vector<float> hu = {-500.f, -100.f, 100.f, 300.f, 700.f, 0.f};
  auto win = preprocess_slice(hu, 2, 3, 2, 3, std::make_pair(-100.0, 300.0));
  std::vector<float> expect;
  for (auto v : hu) {
    const float c = std::clamp(v, -100.f, 300.f);
    expect.push_back((c + 100.f) / 400.f);
  }
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(win[i] == doctest::Approx(expect[i]).epsilon(1e-6));

  CHECK_THROWS_AS(preprocess_slice({}, 0, 0, 2, 2), ShapeError);
}

TEST_CASE("adamw first step moves by roughly -lr per coordinate") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  ParamList<double> params;
  auto p = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5}, true);
  params.push_back({"p", p});
  double* g = p.grad();
  g[0] = 0.3;
  g[1] = -0.7;
  g[2] = 1.9;
  auto state = AdamState<double>::init(params);
  adamw_step(params, state, cfg.lr, cfg);
  CHECK(p.data()[0] == doctest::Approx(1.0 - cfg.lr).epsilon(1e-4));
  CHECK(p.data()[1] == doctest::Approx(-2.0 + cfg.lr).epsilon(1e-4));
  CHECK(p.data()[2] == doctest::Approx(0.5 - cfg.lr).epsilon(1e-4));
}

TEST_CASE("adamw null update leaves parameters untouched") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  ParamList<double> params;
  auto p = Tensor<double>::from_data({2}, {1.5, -0.25}, true);
  params.push_back({"p", p});
  auto state = AdamState<double>::init(params);
  adamw_step(params, state, cfg.lr, cfg);
  CHECK(p.data()[0] == 1.5);
  CHECK(p.data()[1] == -0.25);
}

TEST_CASE("adamw five-step trace matches the scalar recurrence") {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  ParamList<double> params;
  auto p = Tensor<double>::from_data({1}, {2.0}, true);
  params.push_back({"p", p});
  auto state = AdamState<double>::init(params);

  // oracle: hand recurrence for f(x) = x^2 / 2, grad = x
  double x = 2.0, m = 0, v = 0;
  for (int t = 1; t <= 5; ++t) {
    p.zero_grad();
    p.grad()[0] = p.data()[0];  // gradient of the quadratic
    adamw_step(params, state, cfg.lr, cfg);

    const double g = x;
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
    const double mhat = m / (1 - std::pow(cfg.beta1, t));
    const double vhat = v / (1 - std::pow(cfg.beta2, t));
    x -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    REQUIRE(std::abs(p.data()[0] - x) < 1e-10);
  }
}

TEST_CASE("adamw with zero gradients contracts by exactly 1 - lr*wd") {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  ParamList<double> params;
  auto p = Tensor<double>::from_data({2}, {4.0, -2.0}, true);
  params.push_back({"p", p});
  auto state = AdamState<double>::init(params);
  adamw_step(params, state, cfg.lr, cfg);
  CHECK(p.data()[0] == 4.0 * (1.0 - 0.1 * 0.5));
  CHECK(p.data()[1] == -2.0 * (1.0 - 0.1 * 0.5));
}

TEST_CASE("non-finite gradients abort the step with the parameter named") {
  TrainConfig cfg;
  ParamList<double> params;
  auto p = Tensor<double>::from_data({1}, {1.0}, true);
  params.push_back({"enc.stem.w", p});
  p.grad()[0] = std::numeric_limits<double>::infinity();
  auto state = AdamState<double>::init(params);
  try {
    adamw_step(params, state, cfg.lr, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("enc.stem.w") != std::string::npos);
  }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 1e-3, 1e-6) == doctest::Approx(1e-3));
  CHECK(cosine_lr(100, 100, 1e-3, 1e-6) == doctest::Approx(1e-6));
  CHECK(cosine_lr(50, 100, 1e-3, 1e-6) == doctest::Approx((1e-3 + 1e-6) / 2));
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3, 1e-6), ConfigError);
  double prev = 2e-3;
  for (int s = 0; s <= 100; ++s) {
    const double lr = cosine_lr(s, 100, 1e-3, 1e-6);
    CHECK(lr <= prev + 1e-15);
    prev = lr;
  }
}

TEST_CASE("early stopping triggers after exactly patience non-improving epochs") {
  EarlyStopping es(3);
  CHECK_FALSE(es.update(0.5));  // improve
  CHECK_FALSE(es.update(0.6));  // improve
  CHECK_FALSE(es.update(0.6));  // flat 1
  CHECK_FALSE(es.update(0.55));  // flat 2
  CHECK(es.update(0.59));  // flat 3 -> stop
  CHECK(es.best == doctest::Approx(0.6));
}

TEST_CASE("training runs are reproducible and evaluation is consistent") {
  auto spec = small_spec(12, 32);
  const std::string data = "/tmp/twm_pipe_data";
  fs::remove_all(data);
  gen_phantoms(spec, data);

  auto mcfg = pipeline_model(32);
  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 4;
  tcfg.lr = 1e-3;
  tcfg.seed = 5;

  const std::string o1 = "/tmp/twm_pipe_run1", o2 = "/tmp/twm_pipe_run2";
  fs::remove_all(o1);
  fs::remove_all(o2);
  auto r1 = run_training(mcfg, tcfg, data, o1);
  auto r2 = run_training(mcfg, tcfg, data, o2);
  CHECK(slurp(r1.log_path) == slurp(r2.log_path));
  CHECK(slurp(r1.best_checkpoint) == slurp(r2.best_checkpoint));
  CHECK(slurp(r1.last_checkpoint) == slurp(r2.last_checkpoint));

  // evaluation twice gives identical bytes
  const std::string rep1 = o1 + "/report1.json", rep2 = o1 + "/report2.json";
  auto m1 = run_evaluation(r1.best_checkpoint, data, "test", rep1, o1 + "/cases1.csv");
  auto m2 = run_evaluation(r1.best_checkpoint, data, "test", rep2, o1 + "/cases2.csv");
  CHECK(slurp(rep1) == slurp(rep2));
  CHECK(m1.mean_dice == m2.mean_dice);

  // report means equal the arithmetic means of the per-case CSV
  std::ifstream csv(o1 + "/cases1.csv");
  std::string line;
  std::getline(csv, line);  // header
  std::map<int, std::pair<double, int>> dice_by_class;
  while (std::getline(csv, line)) {
    std::vector<std::string> cols;
    std::size_t pos = 0;
    while (pos != std::string::npos) {
      auto next = line.find(',', pos);
      cols.push_back(line.substr(pos, next == std::string::npos ? next : next - pos));
      pos = next == std::string::npos ? next : next + 1;
    }
    REQUIRE(cols.size() == 9);
    const int cls = std::stoi(cols[1]);
    dice_by_class[cls].first += std::stod(cols[3]);
    dice_by_class[cls].second += 1;
  }
  double mean_of_means = 0;
  for (auto& [cls, acc] : dice_by_class) mean_of_means += acc.first / acc.second;
  mean_of_means /= static_cast<double>(dice_by_class.size());
  CHECK(m1.mean_dice == doctest::Approx(mean_of_means).epsilon(1e-9));
}

TEST_CASE("evaluating the ground truth against itself is perfect") {
  auto spec = small_spec(8, 32);
  const std::string data = "/tmp/twm_pipe_ident";
  fs::remove_all(data);
  gen_phantoms(spec, data);
  auto mf = load_manifest(data);
  auto identity = [](const SampleRef&, const std::vector<float>&, const LabelMask& gt) { return gt; };
  auto rep = evaluate_cases(mf, "train", identity, "");
  CHECK(rep.mean_dice == doctest::Approx(100.0));
  CHECK(rep.mean_iou == doctest::Approx(100.0));
  CHECK(rep.mean_hd95 == doctest::Approx(0.0));
}

TEST_CASE("prediction writes masks of the input shape plus stable overlays") {
  auto spec = small_spec(12, 32);
  const std::string data = "/tmp/twm_pipe_data";  // reuse from the training test if present
  if (!fs::exists(data)) gen_phantoms(spec, data);
  const std::string out = "/tmp/twm_pipe_run1";
  if (!fs::exists(out + "/best.ckpt")) {
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 4;
    tcfg.seed = 5;
    run_training(pipeline_model(32), tcfg, data, out);
  }

  // PGM input of a different size gets resized in and the mask resized back
  const std::string pgm = "/tmp/twm_pred_in.pgm";
  {
    std::vector<std::uint8_t> gray(static_cast<std::size_t>(40 * 24));
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = static_cast<std::uint8_t>(i % 251);
    write_pgm(pgm, gray, 40, 24);
  }
  const std::string pred = "/tmp/twm_pred_out";
  fs::remove_all(pred);
  run_prediction(out + "/best.ckpt", {pgm}, pred, true);
  auto mask = read_mask_u8(pred + "/twm_pred_in.mask.u8", 40, 24, 1, 1);
  CHECK(mask.h == 40);
  CHECK(mask.w == 24);
  for (auto c : mask.classes) CHECK(c < 3);

  const std::string pred2 = "/tmp/twm_pred_out2";
  fs::remove_all(pred2);
  run_prediction(out + "/best.ckpt", {pgm}, pred2, true);
  CHECK(slurp(pred + "/twm_pred_in.overlay.ppm") == slurp(pred2 + "/twm_pred_in.overlay.ppm"));
}
