#pragma once

#include <memory>
#include <optional>
#include <set>

#include "topowmamba/blocks.hpp"

namespace twm {

struct ModelConfig {
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 2;
  std::vector<std::int64_t> stage_dims{48, 96, 192, 384, 768};
  std::vector<std::int64_t> scvss_counts{2, 2, 5, 2};
  std::set<int> wmb_encoder_stages{1, 3, 5};
  std::set<int> wmb_decoder_stages{};
  bool snake_enabled = true;
  double drop_path_rate = 0.1;
  bool deep_supervision = true;
  std::int64_t input_h = 256;
  std::int64_t input_w = 256;

  void validate() const;
  std::string to_json_string(int indent = -1) const;
  static ModelConfig from_json_string(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

// Field-by-field difference listing, used for checkpoint/config diagnostics.
std::vector<std::string> diff_configs(const ModelConfig& a, const ModelConfig& b);

template <typename T>
struct SegOutput {
  Tensor<T> main;               // [N, num_classes, H, W]
  std::vector<Tensor<T>> aux;   // finest (H/2) to coarsest (H/16); empty unless deep supervision
};

// The encoder-decoder segmentation network. Five encoder stages each halve
// the spatial extent; the decoder mirrors them with nearest-upsample + conv
// stages fed by 1x1-projected skips. Auxiliary heads always exist as
// parameters; deep_supervision only controls whether their outputs are
// produced.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  SegOutput<T> forward(const Tensor<T>& x, const ForwardCtx& ctx) const;
  // Encoder feature maps e1..e5, exposed for shape verification.
  std::vector<Tensor<T>> encoder_features(const Tensor<T>& x) const;

  const ModelConfig& config() const { return cfg_; }
  ParamList<T>& parameters() { return params_; }
  const ParamList<T>& parameters() const { return params_; }
  std::int64_t parameter_count() const;

  struct DecoderStage {
    Conv2dLayer<T> up;
    Conv2dLayer<T> skip;
    Conv2dLayer<T> fuse1_conv, fuse2_conv;
    LayerNorm2d<T> fuse1_norm, fuse2_norm;
    std::optional<WmbBlock<T>> wmb;
    Conv2dLayer<T> aux_head;
  };

  // members are public for tests and serialization helpers
  ModelConfig cfg_;
  Conv2dLayer<T> stem_;
  std::vector<std::optional<WmbBlock<T>>> enc_wmb_;  // index 0..4 for stages 1..5
  PatchEmbed<T> embed2_;
  std::vector<PatchMerge<T>> merges_;                // stages 3..5
  std::vector<std::vector<ScvssBlock<T>>> stages_;   // stages 2..5
  std::vector<DecoderStage> decoder_;                // coarse to fine
  Conv2dLayer<T> head_conv1_, head_conv2_, head_out_;

 private:
  ParamList<T> params_;
  void collect_all_params();
};

}  // namespace twm
