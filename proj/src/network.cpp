#include "topowmamba/network.hpp"

#include "json.hpp"
#include "topowmamba/ops.hpp"

namespace twm {

using nlohmann::json;

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("ModelConfig: in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("ModelConfig: num_classes must be >= 2");
  if (stage_dims.size() != 5) throw ConfigError("ModelConfig: stage_dims must list 5 stages");
  for (auto d : stage_dims)
    if (d < 1) throw ConfigError("ModelConfig: stage dims must be >= 1");
  if (scvss_counts.size() != 4) throw ConfigError("ModelConfig: scvss_counts must cover stages 2-5");
  for (auto c : scvss_counts)
    if (c < 0) throw ConfigError("ModelConfig: scvss_counts must be >= 0");
  for (auto s : wmb_encoder_stages)
    if (s < 1 || s > 5) throw ConfigError("ModelConfig: wmb_encoder_stages must be within {1..5}");
  for (auto s : wmb_decoder_stages)
    if (s < 1 || s > 4) throw ConfigError("ModelConfig: wmb_decoder_stages must be within {1..4}");
  if (drop_path_rate < 0 || drop_path_rate >= 1) throw ConfigError("ModelConfig: drop_path_rate must be in [0,1)");
  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0)
    throw ConfigError("ModelConfig: input_size must be divisible by 32");
}

namespace {

json config_to_json(const ModelConfig& c) {
  json j;
  j["in_channels"] = c.in_channels;
  j["num_classes"] = c.num_classes;
  j["stage_dims"] = c.stage_dims;
  j["scvss_counts"] = c.scvss_counts;
  j["wmb_encoder_stages"] = c.wmb_encoder_stages;
  j["wmb_decoder_stages"] = c.wmb_decoder_stages;
  j["snake_enabled"] = c.snake_enabled;
  j["drop_path_rate"] = c.drop_path_rate;
  j["deep_supervision"] = c.deep_supervision;
  j["input_size"] = json::array({c.input_h, c.input_w});
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<std::int64_t>();
  if (!j.contains("num_classes")) throw ConfigError("ModelConfig: num_classes is required");
  c.num_classes = j.at("num_classes").get<std::int64_t>();
  if (j.contains("stage_dims")) c.stage_dims = j.at("stage_dims").get<std::vector<std::int64_t>>();
  if (j.contains("scvss_counts")) c.scvss_counts = j.at("scvss_counts").get<std::vector<std::int64_t>>();
  if (j.contains("wmb_encoder_stages")) c.wmb_encoder_stages = j.at("wmb_encoder_stages").get<std::set<int>>();
  if (j.contains("wmb_decoder_stages")) c.wmb_decoder_stages = j.at("wmb_decoder_stages").get<std::set<int>>();
  if (j.contains("snake_enabled")) c.snake_enabled = j.at("snake_enabled").get<bool>();
  if (j.contains("drop_path_rate")) c.drop_path_rate = j.at("drop_path_rate").get<double>();
  if (j.contains("deep_supervision")) c.deep_supervision = j.at("deep_supervision").get<bool>();
  if (j.contains("input_size")) {
    auto v = j.at("input_size").get<std::vector<std::int64_t>>();
    if (v.size() != 2) throw ConfigError("ModelConfig: input_size must be [H, W]");
    c.input_h = v[0];
    c.input_w = v[1];
  }
  c.validate();
  return c;
}

}  // namespace

std::string ModelConfig::to_json_string(int indent) const {
  return config_to_json(*this).dump(indent);
}

ModelConfig ModelConfig::from_json_string(const std::string& text) {
  json j = json::parse(text);
  return config_from_json(j);
}

std::vector<std::string> diff_configs(const ModelConfig& a, const ModelConfig& b) {
  const json ja = config_to_json(a), jb = config_to_json(b);
  std::vector<std::string> keys;
  for (auto it = ja.begin(); it != ja.end(); ++it)
    if (jb.at(it.key()) != it.value()) keys.push_back(it.key());
  return keys;
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const auto& d = cfg_.stage_dims;

  BlockConfig base;
  base.drop_path_rate = 0.0;

  stem_ = Conv2dLayer<T>(cfg_.in_channels, d[0], 7, 2, 3, 1, rng);
  enc_wmb_.resize(5);

  auto wmb_for = [&](std::int64_t channels) {
    BlockConfig bc = base;
    bc.channels = channels;
    return WmbBlock<T>(bc, rng);
  };
  if (cfg_.wmb_encoder_stages.count(1)) enc_wmb_[0] = wmb_for(d[0]);

  embed2_ = PatchEmbed<T>(d[0], d[1], T(1e-5), rng);

  // DropPath rate grows linearly over the scvss blocks.
  std::int64_t total_blocks = 0;
  for (auto c : cfg_.scvss_counts) total_blocks += c;
  std::int64_t block_index = 0;
  stages_.resize(4);
  for (int stage = 0; stage < 4; ++stage) {
    if (stage > 0) merges_.push_back(PatchMerge<T>(d[stage], d[stage + 1], T(1e-5), rng));
    for (std::int64_t b = 0; b < cfg_.scvss_counts[static_cast<std::size_t>(stage)]; ++b) {
      BlockConfig bc = base;
      bc.channels = d[stage + 1];
      bc.drop_path_rate = total_blocks > 1 ? cfg_.drop_path_rate * static_cast<double>(block_index) /
                                                 static_cast<double>(total_blocks - 1)
                                           : 0.0;
      stages_[static_cast<std::size_t>(stage)].emplace_back(bc, cfg_.snake_enabled, rng);
      ++block_index;
    }
    if (cfg_.wmb_encoder_stages.count(stage + 2)) enc_wmb_[static_cast<std::size_t>(stage + 1)] = wmb_for(d[stage + 1]);
  }

  // decoder: coarse to fine, widths mirror the encoder
  const std::int64_t widths[4] = {d[3], d[2], d[1], d[0]};
  std::int64_t prev = d[4];
  for (int i = 0; i < 4; ++i) {
    DecoderStage ds;
    const auto w = widths[i];
    ds.up = Conv2dLayer<T>(prev, w, 3, 1, 1, 1, rng);
    ds.skip = Conv2dLayer<T>(w, w, 1, 1, 0, 1, rng);
    ds.fuse1_conv = Conv2dLayer<T>(2 * w, w, 3, 1, 1, 1, rng);
    ds.fuse1_norm = LayerNorm2d<T>(w, T(1e-5));
    ds.fuse2_conv = Conv2dLayer<T>(w, w, 3, 1, 1, 1, rng);
    ds.fuse2_norm = LayerNorm2d<T>(w, T(1e-5));
    if (cfg_.wmb_decoder_stages.count(i + 1)) {
      BlockConfig bc = base;
      bc.channels = w;
      ds.wmb = WmbBlock<T>(bc, rng);
    }
    ds.aux_head = Conv2dLayer<T>(w, cfg_.num_classes, 1, 1, 0, 1, rng);
    decoder_.push_back(std::move(ds));
    prev = w;
  }

  head_conv1_ = Conv2dLayer<T>(d[0], d[0], 3, 1, 1, 1, rng);
  head_conv2_ = Conv2dLayer<T>(d[0], d[0], 3, 1, 1, 1, rng);
  head_out_ = Conv2dLayer<T>(d[0], cfg_.num_classes, 1, 1, 0, 1, rng);

  collect_all_params();
}

template <typename T>
void Model<T>::collect_all_params() {
  params_.clear();
  stem_.collect_params("stem", params_);
  if (enc_wmb_[0]) enc_wmb_[0]->collect_params("enc.wmb1", params_);
  embed2_.collect_params("enc.embed2", params_);
  for (int stage = 0; stage < 4; ++stage) {
    const auto tag = "enc.stage" + std::to_string(stage + 2);
    if (stage > 0) merges_[static_cast<std::size_t>(stage - 1)].collect_params(tag + ".merge", params_);
    auto& blocks = stages_[static_cast<std::size_t>(stage)];
    for (std::size_t b = 0; b < blocks.size(); ++b)
      blocks[b].collect_params(tag + ".block" + std::to_string(b), params_);
    if (enc_wmb_[static_cast<std::size_t>(stage + 1)])
      enc_wmb_[static_cast<std::size_t>(stage + 1)]->collect_params("enc.wmb" + std::to_string(stage + 2), params_);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto tag = "dec.stage" + std::to_string(i + 1);
    auto& ds = decoder_[i];
    ds.up.collect_params(tag + ".up", params_);
    ds.skip.collect_params(tag + ".skip", params_);
    ds.fuse1_conv.collect_params(tag + ".fuse1.conv", params_);
    ds.fuse1_norm.collect_params(tag + ".fuse1.norm", params_);
    ds.fuse2_conv.collect_params(tag + ".fuse2.conv", params_);
    ds.fuse2_norm.collect_params(tag + ".fuse2.norm", params_);
    if (ds.wmb) ds.wmb->collect_params(tag + ".wmb", params_);
    ds.aux_head.collect_params(tag + ".aux", params_);
  }
  head_conv1_.collect_params("head.conv1", params_);
  head_conv2_.collect_params("head.conv2", params_);
  head_out_.collect_params("head.out", params_);
}

template <typename T>
std::int64_t Model<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::encoder_features(const Tensor<T>& x) const {
  std::vector<Tensor<T>> feats;
  ForwardCtx ctx;
  OpScope scope("encoder");
  auto e = stem_.forward(x);
  if (enc_wmb_[0]) e = enc_wmb_[0]->forward(e, ctx);
  feats.push_back(e);
  for (int stage = 0; stage < 4; ++stage) {
    OpScope sscope("stage" + std::to_string(stage + 2));
    e = stage == 0 ? embed2_.forward(e) : merges_[static_cast<std::size_t>(stage - 1)].forward(e);
    for (const auto& blk : stages_[static_cast<std::size_t>(stage)]) e = blk.forward(e, ctx);
    if (enc_wmb_[static_cast<std::size_t>(stage + 1)]) e = enc_wmb_[static_cast<std::size_t>(stage + 1)]->forward(e, ctx);
    feats.push_back(e);
  }
  return feats;
}

template <typename T>
SegOutput<T> Model<T>::forward(const Tensor<T>& x, const ForwardCtx& ctx) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.input_h || x.dim(3) != cfg_.input_w)
    throw ShapeError("model_forward: input " + shape_str(x.shape()) + " does not match config " +
                     std::to_string(cfg_.in_channels) + "x" + std::to_string(cfg_.input_h) + "x" +
                     std::to_string(cfg_.input_w));

  // encoder
  std::vector<Tensor<T>> feats;
  {
    OpScope scope("encoder");
    auto e = stem_.forward(x);
    if (enc_wmb_[0]) e = enc_wmb_[0]->forward(e, ctx);
    feats.push_back(e);
    for (int stage = 0; stage < 4; ++stage) {
      OpScope sscope("stage" + std::to_string(stage + 2));
      e = stage == 0 ? embed2_.forward(e) : merges_[static_cast<std::size_t>(stage - 1)].forward(e);
      for (const auto& blk : stages_[static_cast<std::size_t>(stage)]) e = blk.forward(e, ctx);
      if (enc_wmb_[static_cast<std::size_t>(stage + 1)])
        e = enc_wmb_[static_cast<std::size_t>(stage + 1)]->forward(e, ctx);
      feats.push_back(e);
    }
  }

  // decoder with deep supervision
  SegOutput<T> out;
  {
    OpScope scope("decoder");
    auto d = feats[4];
    std::vector<Tensor<T>> aux_coarse_to_fine;
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      OpScope sscope("stage" + std::to_string(i + 1));
      const auto& ds = decoder_[i];
      d = ds.up.forward(resample2d(d, ResampleMode::Nearest));
      auto skip = ds.skip.forward(feats[3 - i]);
      d = concat<T>({d, skip}, 1);
      d = gelu(ds.fuse1_norm.forward(ds.fuse1_conv.forward(d)));
      d = gelu(ds.fuse2_norm.forward(ds.fuse2_conv.forward(d)));
      if (ds.wmb) d = ds.wmb->forward(d, ctx);
      if (cfg_.deep_supervision) aux_coarse_to_fine.push_back(ds.aux_head.forward(d));
    }
    {
      OpScope hscope("head");
      auto f = resample2d(d, ResampleMode::Nearest);
      f = gelu(head_conv1_.forward(f));
      f = gelu(head_conv2_.forward(f));
      out.main = head_out_.forward(f);
    }
    out.aux.assign(aux_coarse_to_fine.rbegin(), aux_coarse_to_fine.rend());
  }
  return out;
}

template class Model<float>;
template class Model<double>;

}  // namespace twm
