#pragma once

// Time-dependent discriminator over denoising pairs (x_{i-1}, x_i) and the
// adversarial objectives that train it and the generator.

#include <string>
#include <vector>

#include "lddpm/nn.hpp"
#include "lddpm/schedule.hpp"

namespace lddpm {

using ag::Var;

/// Index used for alpha in the x_i recursion of a pair.
enum class PairConvention {
  as_printed,  ///< x_i = sqrt(alpha_{i-1}) x_{i-1} + sqrt(1 - alpha_{i-1}) eps, with alpha_0 = 1
  shifted,     ///< x_i = sqrt(alpha_i) x_{i-1} + sqrt(1 - alpha_i) eps
};

PairConvention parse_pair_convention(const std::string& name);
std::string to_string(PairConvention c);

struct DenoisePair {
  Var x_prev;  ///< x^_{i-1}
  Var x_cur;   ///< x^_i
  std::vector<int> steps;
};

/// x^_{i-1} = sqrt(abar_{i-1}) x0 + sqrt(1 - abar_{i-1}) eps_theta, then x^_i from x^_{i-1} and eps.
DenoisePair predict_pair(const Var& x0, const Var& eps_theta, const std::vector<int>& steps, const Var& eps,
                         const NoiseSchedule& sched, PairConvention convention = PairConvention::as_printed);

struct DiscriminatorConfig {
  int image_channels = 3;
  int base_channels = 32;
  int blocks = 3;
};

class Discriminator : public nn::Module {
 public:
  static constexpr float logit_limit = 15.0f;

  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& cfg, Rng& rng);

  /// Clamped logits, [N].
  Var logits(const DenoisePair& pair) const;
  /// sigmoid(logits), in (0, 1).
  Var confidence(const DenoisePair& pair) const;
  void collect(const std::string& prefix, nn::ParamList& out) const override;

 private:
  DiscriminatorConfig cfg_;
  nn::TimestepEmbedder time_embed_;
  nn::Conv2d in_conv_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::Linear> temb_proj_;
  nn::Linear head_;
};

/// -log D(real) - log(1 - D(fake)), batch means, from logits.
Var discriminator_loss(const Var& real_logits, const Var& fake_logits);
/// Non-saturating -log D(fake), batch mean, from logits.
Var generator_adv_loss(const Var& fake_logits);

}  // namespace lddpm
