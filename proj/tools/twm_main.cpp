#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "topowmamba/gradcheck_suite.hpp"
#include "topowmamba/phantom.hpp"
#include "topowmamba/trainer.hpp"

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw twm::IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// TWM_SEED, when set, overrides every config seed
bool env_seed(std::uint64_t& out) {
  const char* s = std::getenv("TWM_SEED");
  if (!s || !*s) return false;
  out = std::strtoull(s, nullptr, 10);
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TopoWMamba segmentation toolkit"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, model_cfg_path, train_cfg_path, data_dir, ckpt, split = "test", report_path,
              csv_path, module;
  std::vector<std::string> inputs;
  bool overlay = false;
  double tol = 1e-4;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
  gen->add_option("--spec", spec_path, "phantom spec JSON")->required();
  gen->add_option("--out", out_dir, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--model-config", model_cfg_path, "model config JSON")->required();
  train->add_option("--train-config", train_cfg_path, "training config JSON")->required();
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--split", split, "train | val | test");
  eval->add_option("--report", report_path, "metrics report JSON path")->required();
  eval->add_option("--csv", csv_path, "per-case CSV path (default: report path + .cases.csv)");

  auto* predict = app.add_subcommand("predict", "predict masks for image files");
  predict->add_option("--ckpt", ckpt, "checkpoint file")->required();
  predict->add_option("--input", inputs, "input images (.f32 raw or .pgm)")->required();
  predict->add_option("--out", out_dir, "output directory")->required();
  predict->add_flag("--overlay", overlay, "also write color overlays");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of the backward rules");
  gradcheck->add_option("--module", module, "name prefix filter (tensor, wavelet, scan, blocks, loss, network)");
  gradcheck->add_option("--tol", tol, "relative error tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    std::uint64_t seed_override = 0;
    const bool has_seed = env_seed(seed_override);

    if (gen->parsed()) {
      auto spec = twm::PhantomSpec::from_json_string(slurp(spec_path));
      if (has_seed) spec.seed = seed_override;
      twm::gen_phantoms(spec, out_dir);
      std::printf("wrote %lld samples to %s\n", static_cast<long long>(spec.n_samples), out_dir.c_str());
    } else if (train->parsed()) {
      auto mcfg = twm::ModelConfig::from_json_string(slurp(model_cfg_path));
      auto tcfg = twm::TrainConfig::from_json_string(slurp(train_cfg_path));
      if (has_seed) tcfg.seed = seed_override;
      auto res = twm::run_training(mcfg, tcfg, data_dir, out_dir);
      std::printf("trained %lld epochs, best val dice %.4f\nbest: %s\nlog:  %s\n",
                  static_cast<long long>(res.epochs_run), res.best_val_dice, res.best_checkpoint.c_str(),
                  res.log_path.c_str());
    } else if (eval->parsed()) {
      if (csv_path.empty()) csv_path = report_path + ".cases.csv";
      auto report = twm::run_evaluation(ckpt, data_dir, split, report_path, csv_path);
      std::printf("%s\n", report.to_json_string(2).c_str());
    } else if (predict->parsed()) {
      twm::run_prediction(ckpt, inputs, out_dir, overlay);
      std::printf("wrote %zu predictions to %s\n", inputs.size(), out_dir.c_str());
    } else if (gradcheck->parsed()) {
      auto checks = twm::run_gradcheck_suite(module, tol);
      bool all_pass = true;
      for (const auto& c : checks) {
        std::printf("%-18s max_rel_err %.3e  coords %lld  %s\n", c.name.c_str(), c.result.max_rel_err,
                    static_cast<long long>(c.result.coords_checked), c.result.pass ? "pass" : "FAIL");
        all_pass = all_pass && c.result.pass;
      }
      if (!all_pass) return 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
