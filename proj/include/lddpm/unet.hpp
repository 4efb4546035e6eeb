#pragma once

// Noise-prediction UNet. The encoder half ends at the middle block, whose
// output is exposed so the conditional branch can replace it before decoding.

#include <memory>
#include <vector>

#include "lddpm/conditioning.hpp"

namespace lddpm {

struct UNetConfig {
  int image_channels = 3;  ///< predicted noise channels
  int input_channels = 6;  ///< noisy image stacked with the upsampled LR image
  int inner_channel = 32;
  std::vector<int> channel_multipliers{1, 2, 4};
  int res_blocks = 1;
  float dropout = 0.0f;
  /// Levels receiving cross-attention; the middle block gets it whenever this is non-empty.
  std::vector<int> attention_levels{1, 2};
  int num_heads = 4;
  int context_dim = 64;  ///< LR token width
  float layer_scale = 1e-6f;

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int bottleneck_channels() const { return inner_channel * channel_multipliers.back(); }
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

class ResBlock : public nn::Module {
 public:
  ResBlock() = default;
  ResBlock(int in_ch, int out_ch, int temb_dim, float dropout, float layer_scale, Rng& rng);

  Var operator()(const Var& x, const Var& temb, Rng* dropout_rng) const;
  void collect(const std::string& prefix, nn::ParamList& out) const override;

  nn::GroupNorm norm1;
  nn::Conv2d conv1;
  nn::Linear temb_proj;
  nn::GroupNorm norm2;
  nn::Conv2d conv2;
  nn::Conv2d skip;  ///< 1x1, only when channel counts differ
  Var gamma;        ///< per-channel residual scale
  float dropout = 0.0f;
};

struct UNetEncoding {
  Var features;  ///< F_X: middle-block output
  Var temb;
  std::vector<Var> skips;
};

class UNet : public nn::Module {
 public:
  UNet() = default;
  UNet(const UNetConfig& cfg, Rng& rng);

  /// `tokens` may be undefined when the network has no attention layers.
  /// `dropout_rng` null disables dropout.
  UNetEncoding encode(const Var& x, const std::vector<int>& steps, const Var& tokens, Rng* dropout_rng) const;
  /// Runs the decoder from `bottleneck`, which must have the shape of enc.features.
  Var decode(const UNetEncoding& enc, const Var& bottleneck, const Var& tokens, Rng* dropout_rng) const;
  Var predict_eps(const Var& x, const std::vector<int>& steps, const Var& tokens, Rng* dropout_rng) const;

  const UNetConfig& config() const { return cfg_; }
  bool has_attention() const { return !cfg_.attention_levels.empty(); }
  void collect(const std::string& prefix, nn::ParamList& out) const override;

 private:
  struct Level {
    std::vector<ResBlock> blocks;
    std::vector<std::unique_ptr<CrossAttention>> attn;  ///< null where a level has no attention
    nn::Conv2d resample;                                ///< strided conv down or conv after upsampling
    bool has_resample = false;
  };

  Var attend(const std::unique_ptr<CrossAttention>& a, const Var& h, const Var& tokens) const;

  UNetConfig cfg_;
  nn::TimestepEmbedder time_embed;
  nn::Conv2d in_conv;
  std::vector<Level> down_;
  ResBlock mid1_;
  std::unique_ptr<CrossAttention> mid_attn_;
  ResBlock mid2_;
  std::vector<Level> up_;  ///< stored deepest level first
  nn::GroupNorm out_norm_;
  nn::Conv2d out_conv_;
};

}  // namespace lddpm
