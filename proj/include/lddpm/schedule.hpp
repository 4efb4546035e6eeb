#pragma once

// Noise-schedule algebra of the diffusion Markov chain. Steps are 1-based;
// alpha_bar(0) is defined as 1.

#include <span>
#include <stdexcept>
#include <vector>

#include "lddpm/autograd.hpp"

namespace lddpm {

class DegenerateScheduleError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A diffusion step in [1, T].
struct StepIndex {
  int value = 1;
  constexpr explicit StepIndex(int v) : value(v) {}
};

enum class ReverseVariance {
  beta,       ///< sigma_i^2 = beta_i
  posterior,  ///< sigma_i^2 = (1 - abar_{i-1}) / (1 - abar_i) * beta_i
};

class NoiseSchedule {
 public:
  /// Betas linearly spaced from beta_start to beta_end inclusive.
  static NoiseSchedule linear(int steps, double beta_start, double beta_end,
                              ReverseVariance variance = ReverseVariance::beta);
  /// Cosine alpha_bar schedule with offset s = 0.008, betas capped at 0.999.
  static NoiseSchedule cosine(int steps, ReverseVariance variance = ReverseVariance::beta);
  /// Arbitrary betas. `validate = false` admits beta = 0 (identity chains in tests).
  static NoiseSchedule from_betas(std::vector<double> betas, ReverseVariance variance = ReverseVariance::beta,
                                  bool validate = true);

  /// Sub-chain over `subset` (strictly decreasing, ending at 1). Position j of the
  /// result corresponds to original step subset[size - j]. Consecutive original
  /// steps keep their original beta, so the full subset reproduces this schedule.
  NoiseSchedule respaced(std::span<const int> subset) const;

  int steps() const { return static_cast<int>(betas_.size()) - 1; }
  double beta(int i) const { return betas_.at(check(i)); }
  double alpha(int i) const { return alphas_.at(check(i)); }
  /// Valid for i in [0, T]; alpha_bar(0) == 1.
  double alpha_bar(int i) const;
  double sigma(int i) const { return sigmas_.at(check(i)); }
  ReverseVariance variance() const { return variance_; }

  std::span<const double> betas() const { return {betas_.data() + 1, betas_.size() - 1}; }
  std::span<const double> alpha_bars() const { return {alpha_bars_.data() + 1, alpha_bars_.size() - 1}; }

  void check_step(int i) const { (void)check(i); }

 private:
  NoiseSchedule() = default;
  std::size_t check(int i) const;
  void finish(ReverseVariance variance);

  // Index 0 is the i = 0 sentinel (beta 0, alpha 1, alpha_bar 1).
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> sigmas_;
  ReverseVariance variance_ = ReverseVariance::beta;
};

// Operations take one step per batch element (`steps.size() == N`) or a single
// StepIndex broadcast over the batch.

/// sqrt(abar_i) x0 + sqrt(1 - abar_i) eps.
ag::Var forward_sample(const ag::Var& x0, std::span<const int> steps, const ag::Var& eps, const NoiseSchedule& sched);
Tensor forward_sample(const Tensor& x0, StepIndex i, const Tensor& eps, const NoiseSchedule& sched);

/// (x_i - beta_i / sqrt(1 - abar_i) eps_hat) / sqrt(alpha_i).
ag::Var posterior_mean(const ag::Var& x_i, const ag::Var& eps_hat, std::span<const int> steps,
                       const NoiseSchedule& sched);
Tensor posterior_mean(const Tensor& x_i, const Tensor& eps_hat, StepIndex i, const NoiseSchedule& sched);

/// posterior_mean + sigma_i z. `z` must be all zero at i = 1.
Tensor reverse_step(const Tensor& x_i, const Tensor& eps_hat, StepIndex i, const Tensor& z, const NoiseSchedule& sched);

/// (x_i - sqrt(1 - abar_i) eps_hat) / sqrt(abar_i), optionally clamped to [-1, 1].
ag::Var predict_x0(const ag::Var& x_i, const ag::Var& eps_hat, std::span<const int> steps, const NoiseSchedule& sched,
                   bool clamp = false);
Tensor predict_x0(const Tensor& x_i, const Tensor& eps_hat, StepIndex i, const NoiseSchedule& sched,
                  bool clamp = false);

/// Per-element coefficient column shaped [N, 1, ..., 1] to broadcast against `like`.
Tensor batch_coefficients(const std::vector<double>& per_item, const Shape& like);

}  // namespace lddpm
