#include "lddpm/unet.hpp"

#include <algorithm>
#include <stdexcept>

namespace lddpm {

void UNetConfig::validate() const {
  if (image_channels <= 0 || input_channels < image_channels) throw std::invalid_argument("bad image/input channels");
  if (inner_channel <= 0 || channel_multipliers.empty()) throw std::invalid_argument("bad UNet widths");
  for (int m : channel_multipliers) {
    if (m <= 0) throw std::invalid_argument("channel multipliers must be positive");
  }
  if (res_blocks < 1) throw std::invalid_argument("res_blocks must be >= 1");
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw std::invalid_argument("dropout must lie in [0, 1)");
  for (int l : attention_levels) {
    if (l < 0 || l >= levels()) throw std::invalid_argument("attention level " + std::to_string(l) + " out of range");
    if ((inner_channel * channel_multipliers[static_cast<std::size_t>(l)]) % num_heads != 0) {
      throw std::invalid_argument("level width not divisible by num_heads");
    }
  }
  if (!attention_levels.empty() && (num_heads <= 0 || bottleneck_channels() % num_heads != 0 || context_dim <= 0)) {
    throw std::invalid_argument("bad attention settings");
  }
}

ResBlock::ResBlock(int in_ch, int out_ch, int temb_dim, float p, float layer_scale, Rng& rng)
    : norm1(in_ch),
      conv1(in_ch, out_ch, 3, 1, 1, rng),
      temb_proj(temb_dim, out_ch, rng),
      norm2(out_ch),
      conv2(out_ch, out_ch, 3, 1, 1, rng),
      gamma(nn::make_param(Tensor({1, out_ch, 1, 1}, layer_scale))),
      dropout(p) {
  if (in_ch != out_ch) skip = nn::Conv2d(in_ch, out_ch, 1, 1, 0, rng);
}

Var ResBlock::operator()(const Var& x, const Var& temb, Rng* dropout_rng) const {
  Var h = conv1(ag::silu(norm1(x)));
  const int n = h.dim(0);
  h = h + ag::reshape(temb_proj(ag::silu(temb)), {n, h.dim(1), 1, 1});
  h = ag::silu(norm2(h));
  if (dropout_rng != nullptr && dropout > 0.0f) h = ag::dropout(h, dropout, *dropout_rng);
  h = conv2(h);
  Var base = skip.weight.defined() ? skip(x) : x;
  return base + h * gamma;
}

void ResBlock::collect(const std::string& prefix, nn::ParamList& out) const {
  norm1.collect(prefix + "norm1.", out);
  conv1.collect(prefix + "conv1.", out);
  temb_proj.collect(prefix + "temb.", out);
  norm2.collect(prefix + "norm2.", out);
  conv2.collect(prefix + "conv2.", out);
  if (skip.weight.defined()) skip.collect(prefix + "skip.", out);
  out.push_back({prefix + "gamma", gamma});
}

UNet::UNet(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int temb_dim = 4 * cfg_.inner_channel;
  time_embed = nn::TimestepEmbedder(temb_dim, temb_dim, rng);
  in_conv = nn::Conv2d(cfg_.input_channels, cfg_.inner_channel, 3, 1, 1, rng);
  auto has_attn = [&](int l) {
    return std::find(cfg_.attention_levels.begin(), cfg_.attention_levels.end(), l) != cfg_.attention_levels.end();
  };
  auto make_attn = [&](int ch) { return std::make_unique<CrossAttention>(ch, cfg_.context_dim, cfg_.num_heads, rng); };

  std::vector<int> skip_ch{cfg_.inner_channel};
  int ch = cfg_.inner_channel;
  const int nl = cfg_.levels();
  for (int l = 0; l < nl; ++l) {
    Level lv;
    const int out = cfg_.inner_channel * cfg_.channel_multipliers[static_cast<std::size_t>(l)];
    for (int b = 0; b < cfg_.res_blocks; ++b) {
      lv.blocks.emplace_back(ch, out, temb_dim, cfg_.dropout, cfg_.layer_scale, rng);
      lv.attn.push_back(has_attn(l) ? make_attn(out) : nullptr);
      ch = out;
      skip_ch.push_back(ch);
    }
    if (l + 1 < nl) {
      lv.resample = nn::Conv2d(ch, ch, 3, 2, 1, rng);
      lv.has_resample = true;
      skip_ch.push_back(ch);
    }
    down_.push_back(std::move(lv));
  }
  mid1_ = ResBlock(ch, ch, temb_dim, cfg_.dropout, cfg_.layer_scale, rng);
  if (has_attention()) mid_attn_ = make_attn(ch);
  mid2_ = ResBlock(ch, ch, temb_dim, cfg_.dropout, cfg_.layer_scale, rng);

  for (int l = nl - 1; l >= 0; --l) {
    Level lv;
    const int out = cfg_.inner_channel * cfg_.channel_multipliers[static_cast<std::size_t>(l)];
    for (int b = 0; b < cfg_.res_blocks + 1; ++b) {
      const int sc = skip_ch.back();
      skip_ch.pop_back();
      lv.blocks.emplace_back(ch + sc, out, temb_dim, cfg_.dropout, cfg_.layer_scale, rng);
      lv.attn.push_back(has_attn(l) ? make_attn(out) : nullptr);
      ch = out;
    }
    if (l > 0) {
      lv.resample = nn::Conv2d(ch, ch, 3, 1, 1, rng);
      lv.has_resample = true;
    }
    up_.push_back(std::move(lv));
  }
  out_norm_ = nn::GroupNorm(ch);
  out_conv_ = nn::Conv2d(ch, cfg_.image_channels, 3, 1, 1, rng);
  out_conv_.zero_init();
}

Var UNet::attend(const std::unique_ptr<CrossAttention>& a, const Var& h, const Var& tokens) const {
  if (!a) return h;
  if (!tokens.defined()) throw std::invalid_argument("UNet with cross-attention needs LR tokens");
  return (*a)(h, tokens);
}

UNetEncoding UNet::encode(const Var& x, const std::vector<int>& steps, const Var& tokens, Rng* dropout_rng) const {
  if (x.value().rank() != 4 || x.dim(1) != cfg_.input_channels) {
    throw ShapeError("UNet input must be [N, " + std::to_string(cfg_.input_channels) + ", H, W]; got " +
                     shape_str(x.shape()));
  }
  if (static_cast<int>(steps.size()) != x.dim(0)) throw ShapeError("one step per batch element expected");
  const int factor = 1 << (cfg_.levels() - 1);
  if (x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
    throw ShapeError("UNet input spatial size must be divisible by " + std::to_string(factor));
  }
  UNetEncoding enc;
  enc.temb = time_embed(steps);
  Var h = in_conv(x);
  enc.skips.push_back(h);
  for (const auto& lv : down_) {
    for (std::size_t b = 0; b < lv.blocks.size(); ++b) {
      h = attend(lv.attn[b], lv.blocks[b](h, enc.temb, dropout_rng), tokens);
      enc.skips.push_back(h);
    }
    if (lv.has_resample) {
      h = lv.resample(h);
      enc.skips.push_back(h);
    }
  }
  h = mid1_(h, enc.temb, dropout_rng);
  h = attend(mid_attn_, h, tokens);
  enc.features = mid2_(h, enc.temb, dropout_rng);
  return enc;
}

Var UNet::decode(const UNetEncoding& enc, const Var& bottleneck, const Var& tokens, Rng* dropout_rng) const {
  if (bottleneck.shape() != enc.features.shape()) {
    throw ShapeError("bottleneck " + shape_str(bottleneck.shape()) + " does not match F_X " +
                     shape_str(enc.features.shape()));
  }
  std::vector<Var> skips = enc.skips;
  Var h = bottleneck;
  for (const auto& lv : up_) {
    for (std::size_t b = 0; b < lv.blocks.size(); ++b) {
      h = ag::concat({h, skips.back()}, 1);
      skips.pop_back();
      h = attend(lv.attn[b], lv.blocks[b](h, enc.temb, dropout_rng), tokens);
    }
    if (lv.has_resample) h = lv.resample(ag::upsample_nearest(h, 2));
  }
  return out_conv_(ag::silu(out_norm_(h)));
}

Var UNet::predict_eps(const Var& x, const std::vector<int>& steps, const Var& tokens, Rng* dropout_rng) const {
  UNetEncoding enc = encode(x, steps, tokens, dropout_rng);
  return decode(enc, enc.features, tokens, dropout_rng);
}

void UNet::collect(const std::string& prefix, nn::ParamList& out) const {
  time_embed.collect(prefix + "time.", out);
  in_conv.collect(prefix + "in.", out);
  auto level = [&](const std::string& p, const Level& lv) {
    for (std::size_t b = 0; b < lv.blocks.size(); ++b) {
      lv.blocks[b].collect(p + "block" + std::to_string(b) + ".", out);
      if (lv.attn[b]) lv.attn[b]->collect(p + "attn" + std::to_string(b) + ".", out);
    }
    if (lv.has_resample) lv.resample.collect(p + "resample.", out);
  };
  for (std::size_t l = 0; l < down_.size(); ++l) level(prefix + "down" + std::to_string(l) + ".", down_[l]);
  mid1_.collect(prefix + "mid1.", out);
  if (mid_attn_) mid_attn_->collect(prefix + "mid_attn.", out);
  mid2_.collect(prefix + "mid2.", out);
  for (std::size_t l = 0; l < up_.size(); ++l) level(prefix + "up" + std::to_string(l) + ".", up_[l]);
  out_norm_.collect(prefix + "out_norm.", out);
  out_conv_.collect(prefix + "out.", out);
}

}  // namespace lddpm
