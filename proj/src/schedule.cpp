#include "lddpm/schedule.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace lddpm {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end, ReverseVariance variance) {
  if (steps < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("linear schedule needs 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    const double t = steps == 1 ? 0.0 : static_cast<double>(k) / (steps - 1);
    betas[static_cast<std::size_t>(k)] = beta_start + t * (beta_end - beta_start);
  }
  return from_betas(std::move(betas), variance);
}

NoiseSchedule NoiseSchedule::cosine(int steps, ReverseVariance variance) {
  if (steps < 1) throw std::invalid_argument("schedule needs T >= 1");
  constexpr double s = 0.008;
  auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / steps + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 1; i <= steps; ++i) {
    betas[static_cast<std::size_t>(i - 1)] = std::min(1.0 - f(i) / f(i - 1), 0.999);
  }
  return from_betas(std::move(betas), variance);
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas, ReverseVariance variance, bool validate) {
  if (betas.empty()) throw std::invalid_argument("schedule needs T >= 1");
  for (double b : betas) {
    const bool ok = validate ? (b > 0.0 && b < 1.0) : (b >= 0.0 && b < 1.0);
    if (!ok) throw std::invalid_argument("beta outside (0, 1): " + std::to_string(b));
  }
  NoiseSchedule s;
  s.betas_.reserve(betas.size() + 1);
  s.betas_.push_back(0.0);
  s.betas_.insert(s.betas_.end(), betas.begin(), betas.end());
  s.alphas_.resize(s.betas_.size());
  s.alpha_bars_.resize(s.betas_.size());
  s.alphas_[0] = 1.0;
  s.alpha_bars_[0] = 1.0;
  for (std::size_t i = 1; i < s.betas_.size(); ++i) {
    s.alphas_[i] = 1.0 - s.betas_[i];
    s.alpha_bars_[i] = s.alpha_bars_[i - 1] * s.alphas_[i];
  }
  s.finish(variance);
  return s;
}

void NoiseSchedule::finish(ReverseVariance variance) {
  variance_ = variance;
  sigmas_.assign(betas_.size(), 0.0);
  for (std::size_t i = 1; i < betas_.size(); ++i) {
    if (variance == ReverseVariance::beta) {
      sigmas_[i] = std::sqrt(betas_[i]);
    } else {
      const double denom = 1.0 - alpha_bars_[i];
      sigmas_[i] = denom > 0.0 ? std::sqrt((1.0 - alpha_bars_[i - 1]) / denom * betas_[i]) : 0.0;
    }
  }
}

NoiseSchedule NoiseSchedule::respaced(std::span<const int> subset) const {
  if (subset.empty()) throw std::invalid_argument("empty step subset");
  if (subset.back() != 1) throw std::invalid_argument("step subset must end at 1");
  for (std::size_t k = 0; k < subset.size(); ++k) {
    check_step(subset[k]);
    if (k > 0 && subset[k] >= subset[k - 1]) throw std::invalid_argument("step subset must be strictly decreasing");
  }
  NoiseSchedule s;
  const std::size_t n = subset.size();
  s.betas_.assign(n + 1, 0.0);
  s.alphas_.assign(n + 1, 1.0);
  s.alpha_bars_.assign(n + 1, 1.0);
  int prev_orig = 0;
  for (std::size_t j = 1; j <= n; ++j) {
    const int orig = subset[n - j];
    s.alpha_bars_[j] = alpha_bars_[static_cast<std::size_t>(orig)];
    if (orig == prev_orig + 1) {
      s.betas_[j] = betas_[static_cast<std::size_t>(orig)];
      s.alphas_[j] = alphas_[static_cast<std::size_t>(orig)];
    } else {
      s.alphas_[j] = alpha_bars_[static_cast<std::size_t>(orig)] / alpha_bars_[static_cast<std::size_t>(prev_orig)];
      s.betas_[j] = 1.0 - s.alphas_[j];
    }
    prev_orig = orig;
  }
  s.finish(variance_);
  return s;
}

double NoiseSchedule::alpha_bar(int i) const {
  if (i == 0) return 1.0;
  return alpha_bars_.at(check(i));
}

std::size_t NoiseSchedule::check(int i) const {
  if (i < 1 || i > steps()) {
    throw std::out_of_range("step " + std::to_string(i) + " outside [1, " + std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(i);
}

Tensor batch_coefficients(const std::vector<double>& per_item, const Shape& like) {
  if (like.empty() || static_cast<std::size_t>(like[0]) != per_item.size()) {
    throw ShapeError("one step per batch element expected for shape " + shape_str(like));
  }
  Shape s(like.size(), 1);
  s[0] = like[0];
  Tensor t(s);
  for (std::size_t n = 0; n < per_item.size(); ++n) t[static_cast<std::int64_t>(n)] = static_cast<float>(per_item[n]);
  return t;
}

namespace {

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

template <class F>
ag::Var coef(const Shape& like, std::span<const int> steps, const NoiseSchedule& sched, F f) {
  std::vector<double> v;
  v.reserve(steps.size());
  for (int i : steps) {
    sched.check_step(i);
    v.push_back(f(i));
  }
  return ag::constant(batch_coefficients(v, like));
}

std::vector<int> broadcast_step(const Tensor& x, StepIndex i) {
  if (x.rank() < 1) throw ShapeError("batch tensor expected");
  return std::vector<int>(static_cast<std::size_t>(x.dim(0)), i.value);
}

}  // namespace

ag::Var forward_sample(const ag::Var& x0, std::span<const int> steps, const ag::Var& eps, const NoiseSchedule& sched) {
  require_same(x0.shape(), eps.shape(), "forward_sample");
  auto a = coef(x0.shape(), steps, sched, [&](int i) { return std::sqrt(sched.alpha_bar(i)); });
  auto b = coef(x0.shape(), steps, sched, [&](int i) { return std::sqrt(1.0 - sched.alpha_bar(i)); });
  return x0 * a + eps * b;
}

Tensor forward_sample(const Tensor& x0, StepIndex i, const Tensor& eps, const NoiseSchedule& sched) {
  const auto steps = broadcast_step(x0, i);
  return forward_sample(ag::constant(x0), steps, ag::constant(eps), sched).value();
}

ag::Var posterior_mean(const ag::Var& x_i, const ag::Var& eps_hat, std::span<const int> steps,
                       const NoiseSchedule& sched) {
  require_same(x_i.shape(), eps_hat.shape(), "posterior_mean");
  auto inv_sqrt_alpha = coef(x_i.shape(), steps, sched, [&](int i) { return 1.0 / std::sqrt(sched.alpha(i)); });
  auto eps_coef = coef(x_i.shape(), steps, sched, [&](int i) {
    const double one_minus = 1.0 - sched.alpha_bar(i);
    if (!(one_minus >= std::numeric_limits<double>::min())) {
      throw DegenerateScheduleError("1 - alpha_bar underflows at step " + std::to_string(i));
    }
    return sched.beta(i) / std::sqrt(one_minus);
  });
  return (x_i - eps_hat * eps_coef) * inv_sqrt_alpha;
}

Tensor posterior_mean(const Tensor& x_i, const Tensor& eps_hat, StepIndex i, const NoiseSchedule& sched) {
  const auto steps = broadcast_step(x_i, i);
  return posterior_mean(ag::constant(x_i), ag::constant(eps_hat), steps, sched).value();
}

Tensor reverse_step(const Tensor& x_i, const Tensor& eps_hat, StepIndex i, const Tensor& z, const NoiseSchedule& sched) {
  require_same(x_i.shape(), z.shape(), "reverse_step");
  sched.check_step(i.value);
  if (i.value == 1) {
    for (float v : z.values()) {
      if (v != 0.0f) throw std::invalid_argument("reverse_step: noise must be zero at the final step");
    }
  }
  Tensor mean = posterior_mean(x_i, eps_hat, i, sched);
  const auto sigma = static_cast<float>(sched.sigma(i.value));
  if (i.value == 1 || sigma == 0.0f) return mean;
  for (std::int64_t k = 0; k < mean.size(); ++k) mean[k] += sigma * z[k];
  return mean;
}

ag::Var predict_x0(const ag::Var& x_i, const ag::Var& eps_hat, std::span<const int> steps, const NoiseSchedule& sched,
                   bool clamp) {
  require_same(x_i.shape(), eps_hat.shape(), "predict_x0");
  auto eps_coef = coef(x_i.shape(), steps, sched, [&](int i) { return std::sqrt(1.0 - sched.alpha_bar(i)); });
  auto inv = coef(x_i.shape(), steps, sched, [&](int i) {
    const double ab = sched.alpha_bar(i);
    if (!(ab >= std::numeric_limits<double>::min())) {
      throw DegenerateScheduleError("alpha_bar underflows at step " + std::to_string(i));
    }
    return 1.0 / std::sqrt(ab);
  });
  ag::Var y = (x_i - eps_hat * eps_coef) * inv;
  return clamp ? ag::clamp(y, -1.0f, 1.0f) : y;
}

Tensor predict_x0(const Tensor& x_i, const Tensor& eps_hat, StepIndex i, const NoiseSchedule& sched, bool clamp) {
  const auto steps = broadcast_step(x_i, i);
  return predict_x0(ag::constant(x_i), ag::constant(eps_hat), steps, sched, clamp).value();
}

}  // namespace lddpm
