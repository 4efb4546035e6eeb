#pragma once

// Conditioning paths for the denoiser: an LR-image encoder whose tokens feed
// multi-head cross-attention, and a conditional VAE branch whose decoded
// latent modulates the UNet bottleneck.

#include <optional>

#include "lddpm/nn.hpp"

namespace lddpm {

using ag::Var;

/// Diagonal Gaussian. `sigma` is strictly positive.
struct GaussianParams {
  Var mu;
  Var sigma;
};

/// Per-step conditioning state attached to one denoiser call.
struct ConditionBundle {
  Var lr_tokens;  ///< [N, tokens, dim] keys/values source
  Var lr_grid;    ///< same features laid out as [N, dim, h, w]
  Var z;          ///< latent map [N, latent, hb, wb]
  Var f_r;        ///< decoded conditional feature
  Var f_mu;
  Var f_sigma;
  Var f_g;  ///< fused bottleneck feature
  std::optional<GaussianParams> posterior;  ///< set only when the CVAE encoder ran
};

struct AttentionResult {
  Var output;   ///< [B, heads, Tq, d]
  Var weights;  ///< [B, heads, Tq, Tk], rows sum to 1
};

/// softmax(q k^T / sqrt(d)) v for q [B, H, Tq, d], k and v [B, H, Tk, d].
AttentionResult scaled_dot_product_attention(const Var& q, const Var& k, const Var& v);

/// Multi-head attention from a feature map onto LR tokens, with per-instance
/// projection matrices W_Q, W_K, W_V and an output projection.
class CrossAttention : public nn::Module {
 public:
  CrossAttention() = default;
  CrossAttention(int channels, int context_dim, int heads, Rng& rng);

  /// Attention output shaped like `feat` (no residual).
  AttentionResult attend(const Var& feat, const Var& tokens) const;
  /// feat + attend(feat, tokens).
  Var operator()(const Var& feat, const Var& tokens) const;
  void collect(const std::string& prefix, nn::ParamList& out) const override;

  int channels = 0;
  int heads = 1;
  nn::GroupNorm norm;
  nn::Linear to_q;
  nn::Linear to_k;
  nn::Linear to_v;
  nn::Linear to_out;
};

/// Convolutional encoder for the LR image; keeps the LR spatial grid so each
/// pixel becomes one token.
class LrEncoder : public nn::Module {
 public:
  LrEncoder() = default;
  LrEncoder(int in_channels, int dim, int blocks, Rng& rng);

  /// Fills lr_tokens and lr_grid.
  void encode(const Var& lr, ConditionBundle& out) const;
  void collect(const std::string& prefix, nn::ParamList& out) const override;

  int dim = 0;
  nn::Conv2d stem;
  std::vector<nn::GroupNorm> norms;
  std::vector<nn::Conv2d> convs;
};

struct CvaeConfig {
  int in_channels = 6;        ///< noisy image stacked with upsampled LR
  int hidden = 32;
  int latent_channels = 4;
  int downsamples = 2;        ///< brings the input to the UNet bottleneck grid
  int feature_channels = 128; ///< bottleneck width of the UNet
};

class ConditionalVae : public nn::Module {
 public:
  ConditionalVae() = default;
  ConditionalVae(const CvaeConfig& cfg, Rng& rng);

  /// Posterior over the latent given the observation `c`.
  GaussianParams encode(const Var& c) const;
  /// Projects a latent map to the conditional feature F_R.
  Var decode(const Var& z) const;
  /// Latent shape for an input of spatial size (h, w).
  Shape latent_shape(int batch, int h, int w) const;
  void collect(const std::string& prefix, nn::ParamList& out) const override;

  CvaeConfig cfg;
  std::vector<nn::Conv2d> enc;
  nn::Conv2d mu_head;
  nn::Conv2d logvar_head;
  nn::Conv2d dec1;
  nn::Conv2d dec2;
};

/// mu + delta * sigma.
Var reparameterize(const GaussianParams& p, const Var& delta);

/// KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over the batch.
/// Throws std::domain_error if any sigma <= 0.
Var kl_to_standard_normal(const GaussianParams& p);

struct FusionResult {
  Var f_mu;
  Var f_sigma;
  Var f_g;
};

/// Learns a mean map and a positive scale map from F_X and modulates F_R:
/// F_g = F_mu + F_sigma * F_R.
class ConditionFusion : public nn::Module {
 public:
  ConditionFusion() = default;
  ConditionFusion(int channels, Rng& rng, float initial_sigma = 0.1f);

  FusionResult operator()(const Var& f_r, const Var& f_x) const;
  void collect(const std::string& prefix, nn::ParamList& out) const override;

  nn::Conv2d mean_head;
  nn::Conv2d logvar_head;
};

/// Brings a [N, C, h, w] grid to (H, W) by integer average pooling or nearest upsampling.
Var match_grid(const Var& grid, int h, int w);

}  // namespace lddpm
