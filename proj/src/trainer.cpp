#include "topowmamba/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace twm {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (lr <= 0) throw ConfigError("TrainConfig: lr must be positive");
  if (lr_min >= lr) throw ConfigError("TrainConfig: lr_min must be below lr");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("TrainConfig: betas must be in [0,1)");
  if (eps <= 0) throw ConfigError("TrainConfig: eps must be positive");
  if (weight_decay < 0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
  if (optimizer != "adamw" && optimizer != "adam") throw ConfigError("TrainConfig: optimizer must be adamw or adam");
  if (epochs < 1 || batch_size < 1) throw ConfigError("TrainConfig: epochs and batch_size must be >= 1");
  if (patience < 1) throw ConfigError("TrainConfig: patience must be >= 1");
}

std::string TrainConfig::to_json_string(int indent) const {
  json j;
  j["lr"] = lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["eps"] = eps;
  j["weight_decay"] = weight_decay;
  j["optimizer"] = optimizer;
  j["lr_min"] = lr_min;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["patience"] = patience;
  j["seed"] = seed;
  return j.dump(indent);
}

TrainConfig TrainConfig::from_json_string(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("beta1")) c.beta1 = j["beta1"].get<double>();
  if (j.contains("beta2")) c.beta2 = j["beta2"].get<double>();
  if (j.contains("eps")) c.eps = j["eps"].get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("optimizer")) c.optimizer = j["optimizer"].get<std::string>();
  if (j.contains("lr_min")) c.lr_min = j["lr_min"].get<double>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<std::int64_t>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::int64_t>();
  if (j.contains("patience")) c.patience = j["patience"].get<std::int64_t>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  c.validate();
  return c;
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min) {
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step < 0) step = 0;
  if (step > total_steps) step = total_steps;
  const double phase = M_PI * static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

template <typename T>
AdamState<T> AdamState<T>::init(const ParamList<T>& params) {
  AdamState<T> s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& p : params) {
    s.m.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
    s.v.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
  }
  return s;
}

template <typename T>
void adamw_step(ParamList<T>& params, AdamState<T>& state, double lr_t, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) throw ConfigError("adamw_step: state does not match parameter list");
  state.t += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  const bool decoupled = cfg.optimizer == "adamw";

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i].tensor;
    auto grads = tensor.grad_dense();
    for (auto g : grads)
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("adamw_step: non-finite gradient in " + params[i].name + "; step aborted");
    auto& m = state.m[i];
    auto& v = state.v[i];
    T* p = tensor.data();
    for (std::size_t k = 0; k < grads.size(); ++k) {
      double g = static_cast<double>(grads[k]);
      if (!decoupled) g += cfg.weight_decay * static_cast<double>(p[k]);  // classic L2 coupling
      const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * g;
      const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      double update = mhat / (std::sqrt(vhat) + cfg.eps);
      if (decoupled) update += cfg.weight_decay * static_cast<double>(p[k]);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - lr_t * update);
    }
  }
}

LabelMask logits_to_mask(const Tensor<float>& logits, double sr, double sc) {
  if (logits.rank() != 4 || logits.dim(0) != 1) throw ShapeError("logits_to_mask expects [1,C,H,W]");
  const auto c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  LabelMask m;
  m.h = h;
  m.w = w;
  m.spacing_r = sr;
  m.spacing_c = sc;
  m.classes.resize(static_cast<std::size_t>(h * w));
  for (std::int64_t p = 0; p < h * w; ++p) {
    float best = logits.data()[p];
    std::int64_t bi = 0;
    for (std::int64_t cc = 1; cc < c; ++cc) {
      const float v = logits.data()[cc * h * w + p];
      if (v > best) {
        best = v;
        bi = cc;
      }
    }
    m.classes[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(bi);
  }
  return m;
}

namespace {

Tensor<float> stack_batch(const std::vector<const SampleRef*>& refs, const std::vector<std::int64_t>& idx,
                          std::int64_t from, std::int64_t to, const DatasetManifest& mf) {
  const auto n = to - from;
  std::vector<float> data(static_cast<std::size_t>(n * mf.h * mf.w));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto* ref = refs[static_cast<std::size_t>(idx[static_cast<std::size_t>(from + i)])];
    auto img = read_image_f32((fs::path(mf.root) / ref->image).string(), mf.h * mf.w);
    std::copy(img.begin(), img.end(), data.begin() + i * mf.h * mf.w);
  }
  return Tensor<float>::from_data({n, 1, mf.h, mf.w}, std::move(data));
}

double fmt_double(double v) { return v; }

std::string json_line(std::initializer_list<std::pair<const char*, json>> fields) {
  json j;
  for (const auto& [k, v] : fields) j[k] = v;
  return j.dump();
}

double validation_mean_dice(const Model<float>& model, const DatasetManifest& mf,
                            const std::vector<const SampleRef*>& refs) {
  std::vector<std::vector<ClassStats>> cases;
  for (const auto* ref : refs) {
    auto img = read_image_f32((fs::path(mf.root) / ref->image).string(), mf.h * mf.w);
    auto gt = read_mask_u8((fs::path(mf.root) / ref->mask).string(), mf.h, mf.w, mf.spacing_r, mf.spacing_c);
    auto x = Tensor<float>::from_data({1, 1, mf.h, mf.w}, std::move(img));
    auto out = model.forward(x, {});
    auto pred = logits_to_mask(out.main, mf.spacing_r, mf.spacing_c);
    cases.push_back(overlap_metrics(pred, gt, mf.num_classes));
  }
  return aggregate_metrics(cases, mf.class_names).mean_dice;
}

}  // namespace

TrainResult run_training(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const std::string& data_dir,
                         const std::string& out_dir) {
  model_cfg.validate();
  train_cfg.validate();
  auto mf = load_manifest(data_dir);
  if (mf.num_classes != model_cfg.num_classes)
    throw ConfigError("run_training: dataset has " + std::to_string(mf.num_classes) + " classes, model expects " +
                      std::to_string(model_cfg.num_classes));
  if (mf.h != model_cfg.input_h || mf.w != model_cfg.input_w)
    throw ConfigError("run_training: dataset extent does not match the model input size");

  auto train_refs = mf.split_samples("train");
  auto val_refs = mf.split_samples("val");
  if (train_refs.empty()) throw ConfigError("run_training: no training samples in " + data_dir);

  fs::create_directories(out_dir);
  const auto log_path = (fs::path(out_dir) / "train_log.jsonl").string();
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path);

  Model<float> model(model_cfg, Rng::derive_seed(train_cfg.seed, 0x0DE1u));
  auto& params = model.parameters();
  auto opt_state = AdamState<float>::init(params);
  Rng shuffle_rng(Rng::derive_seed(train_cfg.seed, 0x5403u));
  Rng droppath_rng(Rng::derive_seed(train_cfg.seed, 0xD20Fu));

  const auto n_train = static_cast<std::int64_t>(train_refs.size());
  const auto steps_per_epoch = (n_train + train_cfg.batch_size - 1) / train_cfg.batch_size;
  const auto total_steps = steps_per_epoch * train_cfg.epochs;

  TrainResult result;
  result.log_path = log_path;
  result.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
  result.last_checkpoint = (fs::path(out_dir) / "last.ckpt").string();
  EarlyStopping stopper(train_cfg.patience);
  double best = -1.0;
  std::int64_t global_step = 0;

  std::vector<std::int64_t> order(static_cast<std::size_t>(n_train));
  for (std::int64_t i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;

  for (std::int64_t epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::int64_t start = 0; start < n_train; start += train_cfg.batch_size) {
      const auto stop = std::min(n_train, start + train_cfg.batch_size);
      auto x = stack_batch(train_refs, order, start, stop, mf);
      std::vector<LabelMask> gt;
      for (std::int64_t i = start; i < stop; ++i) {
        const auto* ref = train_refs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        gt.push_back(read_mask_u8((fs::path(mf.root) / ref->mask).string(), mf.h, mf.w, mf.spacing_r, mf.spacing_c));
      }
      const double lr_t = cosine_lr(global_step, total_steps, train_cfg.lr, train_cfg.lr_min);
      double loss_value = 0;
      try {
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        ForwardCtx ctx{true, &droppath_rng};
        auto out = model.forward(x, ctx);
        auto loss = seg_loss(out, gt);
        loss_value = static_cast<double>(loss.item());
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw NumericError("training aborted at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(global_step) + ": " + e.what());
      }
      adamw_step(params, opt_state, lr_t, train_cfg);
      for (auto& p : params) p.tensor.zero_grad();
      log << json_line({{"epoch", epoch}, {"step", global_step}, {"lr", fmt_double(lr_t)}, {"loss", fmt_double(loss_value)}})
          << "\n";
      ++global_step;
    }

    const double val_dice = val_refs.empty() ? 0.0 : validation_mean_dice(model, mf, val_refs);
    log << json_line({{"epoch", epoch}, {"step", global_step}, {"val_mean_dice", fmt_double(val_dice)}}) << "\n";
    result.epochs_run = epoch + 1;

    if (val_dice > best) {
      best = val_dice;
      result.best_val_dice = val_dice;
      checkpoint_save(model, {}, CheckpointMeta{epoch, global_step, best}, result.best_checkpoint);
    }
    if (!val_refs.empty() && stopper.update(val_dice)) {
      log << json_line({{"epoch", epoch}, {"step", global_step}, {"early_stop", true}}) << "\n";
      break;
    }
  }

  // final state with optimizer moments
  NamedBuffers opt;
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.emplace_back("opt.m." + params[i].name, opt_state.m[i]);
    opt.emplace_back("opt.v." + params[i].name, opt_state.v[i]);
  }
  checkpoint_save(model, opt, CheckpointMeta{result.epochs_run - 1, global_step, best}, result.last_checkpoint);
  log.close();
  return result;
}

MetricsReport evaluate_cases(const DatasetManifest& mf, const std::string& split,
                             const std::function<LabelMask(const SampleRef&, const std::vector<float>&,
                                                           const LabelMask&)>& predictor,
                             const std::string& csv_path) {
  auto refs = mf.split_samples(split);
  if (refs.empty()) throw ConfigError("evaluate_cases: split '" + split + "' is empty");
  std::vector<std::vector<ClassStats>> cases;
  std::string csv = "case,class_id,class_name,dice,hd95,iou,support,both_empty,one_empty\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (const auto* ref : refs) {
    auto img = read_image_f32((fs::path(mf.root) / ref->image).string(), mf.h * mf.w);
    auto gt = read_mask_u8((fs::path(mf.root) / ref->mask).string(), mf.h, mf.w, mf.spacing_r, mf.spacing_c);
    auto pred = predictor(*ref, img, gt);
    auto stats = case_metrics(pred, gt, mf.num_classes);
    for (const auto& s : stats) {
      const auto& name = s.id < static_cast<int>(mf.class_names.size()) ? mf.class_names[static_cast<std::size_t>(s.id)]
                                                                        : "class" + std::to_string(s.id);
      csv += ref->id + "," + std::to_string(s.id) + "," + name + "," + num(s.dice_pct) + "," + num(s.hd95_mm) + "," +
             num(s.iou_pct) + "," + std::to_string(s.support) + "," + std::to_string(int(s.both_empty)) + "," +
             std::to_string(int(s.one_empty)) + "\n";
    }
    cases.push_back(std::move(stats));
  }
  if (!csv_path.empty()) {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + csv_path);
    f << csv;
  }
  return aggregate_metrics(cases, mf.class_names);
}

MetricsReport run_evaluation(const std::string& ckpt_path, const std::string& data_dir, const std::string& split,
                             const std::string& report_path, const std::string& csv_path) {
  auto loaded = checkpoint_load(ckpt_path);
  auto mf = load_manifest(data_dir);
  if (mf.num_classes != loaded.config.num_classes)
    throw ConfigError("run_evaluation: dataset has " + std::to_string(mf.num_classes) + " classes, checkpoint has " +
                      std::to_string(loaded.config.num_classes));
  if (mf.h != loaded.config.input_h || mf.w != loaded.config.input_w)
    throw ConfigError("run_evaluation: dataset extent does not match the checkpoint input size");

  auto predictor = [&](const SampleRef&, const std::vector<float>& img, const LabelMask&) {
    auto x = Tensor<float>::from_data({1, 1, mf.h, mf.w}, std::vector<float>(img));
    auto out = loaded.model->forward(x, {});
    return logits_to_mask(out.main, mf.spacing_r, mf.spacing_c);
  };
  auto report = evaluate_cases(mf, split, predictor, csv_path);
  if (!report_path.empty()) {
    std::ofstream f(report_path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + report_path);
    f << report.to_json_string(2) << "\n";
  }
  return report;
}

namespace {

const std::uint8_t kPalette[6][3] = {{230, 60, 60}, {60, 150, 230}, {60, 210, 90},
                                     {235, 200, 60}, {200, 90, 220}, {90, 220, 210}};

LabelMask nearest_resize_mask(const LabelMask& m, std::int64_t th, std::int64_t tw) {
  if (m.h == th && m.w == tw) return m;
  LabelMask out;
  out.h = th;
  out.w = tw;
  out.spacing_r = m.spacing_r;
  out.spacing_c = m.spacing_c;
  out.classes.resize(static_cast<std::size_t>(th * tw));
  for (std::int64_t r = 0; r < th; ++r) {
    const auto sr = std::min<std::int64_t>(m.h - 1, r * m.h / th);
    for (std::int64_t c = 0; c < tw; ++c) {
      const auto sc = std::min<std::int64_t>(m.w - 1, c * m.w / tw);
      out.classes[static_cast<std::size_t>(r * tw + c)] = m.classes[static_cast<std::size_t>(sr * m.w + sc)];
    }
  }
  return out;
}

}  // namespace

void run_prediction(const std::string& ckpt_path, const std::vector<std::string>& inputs, const std::string& out_dir,
                    bool overlay) {
  auto loaded = checkpoint_load(ckpt_path);
  const auto th = loaded.config.input_h, tw = loaded.config.input_w;
  fs::create_directories(out_dir);

  for (const auto& input : inputs) {
    std::int64_t h = 0, w = 0;
    std::vector<float> raw;
    const auto ext = fs::path(input).extension().string();
    if (ext == ".pgm") {
      raw = read_pgm(input, h, w);
    } else {
      h = th;
      w = tw;
      raw = read_image_f32(input, th * tw);
    }
    auto prepared = preprocess_slice(raw, h, w, th, tw);
    auto x = Tensor<float>::from_data({1, 1, th, tw}, std::move(prepared));
    auto out = loaded.model->forward(x, {});
    auto mask = nearest_resize_mask(logits_to_mask(out.main, 1.0, 1.0), h, w);

    const auto stem = (fs::path(out_dir) / fs::path(input).stem()).string();
    write_mask_u8(stem + ".mask.u8", mask);
    if (overlay) {
      // gray background from the normalized input, classes blended on top
      auto gray = preprocess_slice(raw, h, w, h, w);
      std::vector<std::uint8_t> rgb(static_cast<std::size_t>(3 * h * w));
      for (std::int64_t p = 0; p < h * w; ++p) {
        const auto g = static_cast<std::uint8_t>(std::lround(255.0 * gray[static_cast<std::size_t>(p)]));
        std::uint8_t r8 = g, g8 = g, b8 = g;
        const auto cls = mask.classes[static_cast<std::size_t>(p)];
        if (cls > 0) {
          const auto& col = kPalette[(cls - 1) % 6];
          r8 = static_cast<std::uint8_t>((g + col[0]) / 2);
          g8 = static_cast<std::uint8_t>((g + col[1]) / 2);
          b8 = static_cast<std::uint8_t>((g + col[2]) / 2);
        }
        rgb[static_cast<std::size_t>(3 * p)] = r8;
        rgb[static_cast<std::size_t>(3 * p + 1)] = g8;
        rgb[static_cast<std::size_t>(3 * p + 2)] = b8;
      }
      write_ppm(stem + ".overlay.ppm", rgb, h, w);
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adamw_step<float>(ParamList<float>&, AdamState<float>&, double, const TrainConfig&);
template void adamw_step<double>(ParamList<double>&, AdamState<double>&, double, const TrainConfig&);

}  // namespace twm
