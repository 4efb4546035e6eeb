#pragma once

// Conditional Glow on feature maps: ActNorm, LU-parameterized invertible 1x1
// mixing and conditional affine coupling, with exact log-determinants.

#include <stdexcept>

#include "lddpm/conditioning.hpp"

namespace lddpm {

class SingularFlowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct FlowState {
  Var features;
  Var log_det;  ///< [N]
};

/// Starts a state with zero log-determinant.
FlowState flow_state(const Var& x);

class ActNorm : public nn::Module {
 public:
  ActNorm() = default;
  explicit ActNorm(int channels);

  /// Data-dependent initialization: outputs on `x` get per-channel mean 0, std 1.
  void initialize(const Tensor& x);
  bool initialized() const { return initialized_; }
  void set_initialized(bool on) { initialized_ = on; }

  FlowState forward(const FlowState& s) const;
  Var inverse(const Var& y) const;
  void collect(const std::string& prefix, nn::ParamList& out) const override;

  Var log_scale;  ///< [1, C, 1, 1]
  Var bias;       ///< [1, C, 1, 1]

 private:
  bool initialized_ = false;
};

/// 1x1 convolution with W = P L (U + diag(sign * exp(log_s))).
class InvertibleMixing : public nn::Module {
 public:
  InvertibleMixing() = default;
  /// `identity` starts from W = I; otherwise from a random rotation.
  InvertibleMixing(int channels, Rng& rng, bool identity = false);

  Var weight() const;  ///< [C, C], differentiable in the LU factors
  FlowState forward(const FlowState& s) const;
  Var inverse(const Var& y) const;
  void collect(const std::string& prefix, nn::ParamList& out) const override;

  /// Throws SingularFlowError when W is numerically singular or badly conditioned.
  void check_conditioning(double max_condition = 1e8) const;

  int channels = 0;
  Tensor permutation;  ///< fixed [C, C]
  Tensor sign;         ///< fixed [C]
  Var lower;           ///< strictly lower part is used
  Var upper;           ///< strictly upper part is used
  Var log_s;           ///< [C]
};

/// Affine coupling: the second channel half is scaled and shifted by a network
/// of the first half concatenated with the conditioning features.
class AffineCoupling : public nn::Module {
 public:
  AffineCoupling() = default;
  AffineCoupling(int channels, int cond_channels, int hidden, Rng& rng);

  FlowState forward(const FlowState& s, const Var& cond) const;
  Var inverse(const Var& y, const Var& cond) const;
  void collect(const std::string& prefix, nn::ParamList& out) const override;

  int split = 0;  ///< channels passed through unchanged
  int cond_channels = 0;
  nn::Conv2d conv1;
  nn::Conv2d conv2;
  nn::Conv2d conv3;  ///< zero-initialized, emits log-scale and shift

 private:
  struct ScaleShift {
    Var log_scale;
    Var shift;
  };
  ScaleShift scale_shift(const Var& xa, const Var& cond) const;
};

struct FlowConfig {
  int channels = 128;
  int cond_channels = 64;
  int levels = 2;
  int steps_per_level = 4;
  int hidden = 64;
  /// Space-to-depth between levels (undone at the end, so shapes are preserved).
  bool squeeze = false;
  bool identity_mixing = false;
};

class ConditionalFlow : public nn::Module {
 public:
  ConditionalFlow() = default;
  ConditionalFlow(const FlowConfig& cfg, Rng& rng);

  FlowState forward(const Var& x, const Var& cond) const;
  Var inverse(const Var& z, const Var& cond) const;
  /// Data-dependent ActNorm initialization, step by step, on a batch. No-op once done.
  void initialize_actnorm(const Var& x, const Var& cond);

  bool actnorm_initialized() const;
  void set_actnorm_initialized(bool on);
  const FlowConfig& config() const { return cfg_; }
  void collect(const std::string& prefix, nn::ParamList& out) const override;

  struct Step {
    ActNorm actnorm;
    InvertibleMixing mixing;
    AffineCoupling coupling;
  };
  std::vector<Step> steps;

 private:
  FlowConfig cfg_;
};

/// Space-to-depth by 2 and its inverse.
Var squeeze2(const Var& x);
Var unsqueeze2(const Var& x);

/// log N(z; mu, sigma) summed over all non-batch dims, [N]. Throws if sigma <= 0.
Var gaussian_log_density(const Var& z, const GaussianParams& base);

/// Per-element log-likelihood of x under the flow, [N].
Var flow_log_prob(const ConditionalFlow& flow, const Var& x, const Var& cond, const GaussianParams& base);
/// Negative log-likelihood averaged over the batch.
Var flow_nll(const ConditionalFlow& flow, const Var& x, const Var& cond, const GaussianParams& base);
/// flow_nll divided by the number of dims per element.
Var flow_nll_per_dim(const ConditionalFlow& flow, const Var& x, const Var& cond, const GaussianParams& base);

}  // namespace lddpm
