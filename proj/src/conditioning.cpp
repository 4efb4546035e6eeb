#include "lddpm/conditioning.hpp"

#include <cmath>
#include <stdexcept>

namespace lddpm {

AttentionResult scaled_dot_product_attention(const Var& q, const Var& k, const Var& v) {
  if (q.value().rank() != 4 || k.value().rank() != 4 || v.value().rank() != 4) {
    throw ShapeError("attention expects [B, heads, T, d] operands");
  }
  if (k.shape() != v.shape() || q.dim(3) != k.dim(3) || q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1)) {
    throw ShapeError("attention operand mismatch: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                     shape_str(v.shape()));
  }
  const auto inv_sqrt_d = static_cast<float>(1.0 / std::sqrt(static_cast<double>(q.dim(3))));
  Var logits = ag::matmul(q, ag::permute(k, {0, 1, 3, 2})) * inv_sqrt_d;
  Var w = ag::softmax(logits);
  return {ag::matmul(w, v), w};
}

CrossAttention::CrossAttention(int ch, int context_dim, int nheads, Rng& rng)
    : channels(ch),
      heads(nheads),
      norm(ch),
      to_q(ch, ch, rng, false),
      to_k(context_dim, ch, rng, false),
      to_v(context_dim, ch, rng, false),
      to_out(ch, ch, rng) {
  if (nheads <= 0 || ch % nheads != 0) throw std::invalid_argument("channels must be divisible by num_heads");
}

AttentionResult CrossAttention::attend(const Var& feat, const Var& tokens) const {
  if (feat.value().rank() != 4 || feat.dim(1) != channels) {
    throw ShapeError("cross-attention feature " + shape_str(feat.shape()) + " vs channels " + std::to_string(channels));
  }
  if (tokens.value().rank() != 3 || tokens.dim(0) != feat.dim(0)) {
    throw ShapeError("cross-attention tokens must be [N, T, D]; got " + shape_str(tokens.shape()));
  }
  const int n = feat.dim(0);
  const int h = feat.dim(2);
  const int w = feat.dim(3);
  const int t = tokens.dim(1);
  const int d = channels / heads;
  // Flatten the feature grid into queries.
  Var flat = ag::permute(ag::reshape(norm(feat), {n, channels, h * w}), {0, 2, 1});
  Var q = ag::permute(ag::reshape(to_q(flat), {n, h * w, heads, d}), {0, 2, 1, 3});
  Var k = ag::permute(ag::reshape(to_k(tokens), {n, t, heads, d}), {0, 2, 1, 3});
  Var v = ag::permute(ag::reshape(to_v(tokens), {n, t, heads, d}), {0, 2, 1, 3});
  AttentionResult r = scaled_dot_product_attention(q, k, v);
  Var merged = ag::reshape(ag::permute(r.output, {0, 2, 1, 3}), {n, h * w, channels});
  Var out = ag::reshape(ag::permute(to_out(merged), {0, 2, 1}), {n, channels, h, w});
  return {out, r.weights};
}

Var CrossAttention::operator()(const Var& feat, const Var& tokens) const { return feat + attend(feat, tokens).output; }

void CrossAttention::collect(const std::string& prefix, nn::ParamList& out) const {
  norm.collect(prefix + "norm.", out);
  to_q.collect(prefix + "q.", out);
  to_k.collect(prefix + "k.", out);
  to_v.collect(prefix + "v.", out);
  to_out.collect(prefix + "out.", out);
}

LrEncoder::LrEncoder(int in_channels, int d, int blocks, Rng& rng) : dim(d), stem(in_channels, d, 3, 1, 1, rng) {
  for (int b = 0; b < blocks; ++b) {
    norms.emplace_back(d);
    convs.emplace_back(d, d, 3, 1, 1, rng);
  }
}

void LrEncoder::encode(const Var& lr, ConditionBundle& out) const {
  Var h = stem(lr);
  for (std::size_t b = 0; b < convs.size(); ++b) h = h + convs[b](ag::silu(norms[b](h)));
  const int n = h.dim(0);
  const int gh = h.dim(2);
  const int gw = h.dim(3);
  out.lr_grid = h;
  out.lr_tokens = ag::permute(ag::reshape(h, {n, dim, gh * gw}), {0, 2, 1});
}

void LrEncoder::collect(const std::string& prefix, nn::ParamList& out) const {
  stem.collect(prefix + "stem.", out);
  for (std::size_t b = 0; b < convs.size(); ++b) {
    norms[b].collect(prefix + "block" + std::to_string(b) + ".norm.", out);
    convs[b].collect(prefix + "block" + std::to_string(b) + ".conv.", out);
  }
}

ConditionalVae::ConditionalVae(const CvaeConfig& c, Rng& rng) : cfg(c) {
  enc.emplace_back(c.in_channels, c.hidden, 3, 1, 1, rng);
  for (int d = 0; d < c.downsamples; ++d) enc.emplace_back(c.hidden, c.hidden, 3, 2, 1, rng);
  mu_head = nn::Conv2d(c.hidden, c.latent_channels, 1, 1, 0, rng);
  logvar_head = nn::Conv2d(c.hidden, c.latent_channels, 1, 1, 0, rng);
  dec1 = nn::Conv2d(c.latent_channels, c.feature_channels, 3, 1, 1, rng);
  dec2 = nn::Conv2d(c.feature_channels, c.feature_channels, 3, 1, 1, rng);
}

GaussianParams ConditionalVae::encode(const Var& c) const {
  if (c.value().rank() != 4 || c.dim(1) != cfg.in_channels) {
    throw ShapeError("cvae observation must be [N, " + std::to_string(cfg.in_channels) + ", H, W]; got " +
                     shape_str(c.shape()));
  }
  Var h = c;
  for (const auto& conv : enc) h = ag::silu(conv(h));
  Var logvar = ag::clamp(logvar_head(h), -20.0f, 10.0f);
  return {mu_head(h), ag::exp(logvar * 0.5f)};
}

Var ConditionalVae::decode(const Var& z) const { return dec2(ag::silu(dec1(z))); }

Shape ConditionalVae::latent_shape(int batch, int h, int w) const {
  for (int d = 0; d < cfg.downsamples; ++d) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  return {batch, cfg.latent_channels, h, w};
}

void ConditionalVae::collect(const std::string& prefix, nn::ParamList& out) const {
  for (std::size_t i = 0; i < enc.size(); ++i) enc[i].collect(prefix + "enc" + std::to_string(i) + ".", out);
  mu_head.collect(prefix + "mu.", out);
  logvar_head.collect(prefix + "logvar.", out);
  dec1.collect(prefix + "dec1.", out);
  dec2.collect(prefix + "dec2.", out);
}

Var reparameterize(const GaussianParams& p, const Var& delta) {
  if (delta.shape() != p.mu.shape()) throw ShapeError("reparameterize: delta shape mismatch");
  return p.mu + delta * p.sigma;
}

Var kl_to_standard_normal(const GaussianParams& p) {
  if (p.mu.shape() != p.sigma.shape()) throw ShapeError("kl: mu/sigma shape mismatch");
  for (float s : p.sigma.value().values()) {
    if (!(s > 0.0f)) throw std::domain_error("kl: sigma must be positive");
  }
  const int n = p.mu.dim(0);
  // 1/2 * sum(-log sigma^2 - 1 + sigma^2 + mu^2)
  Var log_var = ag::log(p.sigma) * 2.0f;
  Var terms = ag::add_scalar(ag::square(p.sigma) + ag::square(p.mu) - log_var, -1.0f);
  return ag::sum(terms) * (0.5f / static_cast<float>(n));
}

ConditionFusion::ConditionFusion(int channels, Rng& rng, float initial_sigma)
    : mean_head(channels, channels, 1, 1, 0, rng), logvar_head(channels, channels, 1, 1, 0, rng) {
  // The mean map starts as the identity on F_X and the scale map as a constant.
  mean_head.zero_init();
  for (int c = 0; c < channels; ++c) mean_head.weight.mutable_value()[static_cast<std::int64_t>(c) * channels + c] = 1.0f;
  logvar_head.zero_init();
  logvar_head.bias.mutable_value().fill(2.0f * std::log(initial_sigma));
}

FusionResult ConditionFusion::operator()(const Var& f_r, const Var& f_x) const {
  if (f_r.shape() != f_x.shape()) {
    throw ShapeError("fusion: F_R " + shape_str(f_r.shape()) + " not aligned with F_X " + shape_str(f_x.shape()));
  }
  FusionResult r;
  r.f_mu = mean_head(f_x);
  r.f_sigma = ag::exp(logvar_head(f_x) * 0.5f);
  r.f_g = r.f_mu + r.f_sigma * f_r;
  return r;
}

void ConditionFusion::collect(const std::string& prefix, nn::ParamList& out) const {
  mean_head.collect(prefix + "mean.", out);
  logvar_head.collect(prefix + "logvar.", out);
}

Var match_grid(const Var& grid, int h, int w) {
  const int gh = grid.dim(2);
  const int gw = grid.dim(3);
  if (gh == h && gw == w) return grid;
  if (gh > h && gh % h == 0 && gw % w == 0 && gh / h == gw / w) return ag::avg_pool(grid, gh / h);
  if (h > gh && h % gh == 0 && w % gw == 0 && h / gh == w / gw) return ag::upsample_nearest(grid, h / gh);
  throw ShapeError("cannot align grid " + shape_str(grid.shape()) + " to " + std::to_string(h) + "x" + std::to_string(w));
}

}  // namespace lddpm
