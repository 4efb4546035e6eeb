#include "lddpm/adversarial.hpp"

#include <cmath>
#include <stdexcept>

namespace lddpm {

PairConvention parse_pair_convention(const std::string& name) {
  if (name == "as_printed") return PairConvention::as_printed;
  if (name == "shifted") return PairConvention::shifted;
  throw std::invalid_argument("unknown pair_index_convention '" + name + "' (as_printed|shifted)");
}

std::string to_string(PairConvention c) { return c == PairConvention::as_printed ? "as_printed" : "shifted"; }

DenoisePair predict_pair(const Var& x0, const Var& eps_theta, const std::vector<int>& steps, const Var& eps,
                         const NoiseSchedule& sched, PairConvention convention) {
  if (x0.shape() != eps_theta.shape() || x0.shape() != eps.shape()) {
    throw ShapeError("predict_pair: x0 " + shape_str(x0.shape()) + ", eps_theta " + shape_str(eps_theta.shape()) +
                     ", eps " + shape_str(eps.shape()));
  }
  std::vector<double> a_prev, b_prev, a_step, b_step;
  for (int i : steps) {
    sched.check_step(i);
    const double abar_prev = sched.alpha_bar(i - 1);
    const double alpha = convention == PairConvention::shifted ? sched.alpha(i) : (i == 1 ? 1.0 : sched.alpha(i - 1));
    a_prev.push_back(std::sqrt(abar_prev));
    b_prev.push_back(std::sqrt(1.0 - abar_prev));
    a_step.push_back(std::sqrt(alpha));
    b_step.push_back(std::sqrt(1.0 - alpha));
  }
  auto col = [&](const std::vector<double>& v) { return ag::constant(batch_coefficients(v, x0.shape())); };
  DenoisePair p;
  p.x_prev = x0 * col(a_prev) + eps_theta * col(b_prev);
  p.x_cur = p.x_prev * col(a_step) + eps * col(b_step);
  p.steps = steps;
  return p;
}

Discriminator::Discriminator(const DiscriminatorConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.blocks < 1 || cfg.base_channels < 1) throw std::invalid_argument("bad discriminator config");
  const int temb = 4 * cfg.base_channels;
  time_embed_ = nn::TimestepEmbedder(temb, temb, rng);
  in_conv_ = nn::Conv2d(2 * cfg.image_channels, cfg.base_channels, 3, 1, 1, rng);
  int ch = cfg.base_channels;
  for (int b = 0; b < cfg.blocks; ++b) {
    convs_.emplace_back(ch, ch * 2, 3, 2, 1, rng);
    temb_proj_.emplace_back(temb, ch * 2, rng);
    ch *= 2;
  }
  head_ = nn::Linear(ch, 1, rng);
}

Var Discriminator::logits(const DenoisePair& pair) const {
  if (pair.x_prev.shape() != pair.x_cur.shape() || pair.x_prev.dim(1) != cfg_.image_channels) {
    throw ShapeError("discriminator pair shape mismatch");
  }
  const int n = pair.x_prev.dim(0);
  if (static_cast<int>(pair.steps.size()) != n) throw ShapeError("one step per batch element expected");
  Var t = ag::silu(time_embed_(pair.steps));
  Var h = ag::silu(in_conv_(ag::concat({pair.x_prev, pair.x_cur}, 1)));
  for (std::size_t b = 0; b < convs_.size(); ++b) {
    h = convs_[b](h);
    h = ag::silu(h + ag::reshape(temb_proj_[b](t), {n, h.dim(1), 1, 1}));
  }
  Var pooled = ag::mean(h, {2, 3}, false);
  Var l = ag::reshape(head_(pooled), {n});
  return ag::clamp(l, -logit_limit, logit_limit);
}

Var Discriminator::confidence(const DenoisePair& pair) const { return ag::sigmoid(logits(pair)); }

void Discriminator::collect(const std::string& prefix, nn::ParamList& out) const {
  time_embed_.collect(prefix + "time.", out);
  in_conv_.collect(prefix + "in.", out);
  for (std::size_t b = 0; b < convs_.size(); ++b) {
    convs_[b].collect(prefix + "block" + std::to_string(b) + ".conv.", out);
    temb_proj_[b].collect(prefix + "block" + std::to_string(b) + ".temb.", out);
  }
  head_.collect(prefix + "head.", out);
}

Var discriminator_loss(const Var& real_logits, const Var& fake_logits) {
  // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l).
  return ag::mean(ag::softplus(-real_logits)) + ag::mean(ag::softplus(fake_logits));
}

Var generator_adv_loss(const Var& fake_logits) { return ag::mean(ag::softplus(-fake_logits)); }

}  // namespace lddpm
