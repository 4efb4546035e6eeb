#include <cmath>

#include "doctest.h"
#include "lddpm/schedule.hpp"

using namespace lddpm;

namespace {

Tensor filled(Shape s, float v) { return Tensor(std::move(s), v); }

}  // namespace

TEST_CASE("linear schedule tables") {
  auto s1 = NoiseSchedule::linear(1, 0.5, 0.5);
  CHECK(s1.alpha_bar(1) == doctest::Approx(0.5).epsilon(1e-15));
  auto s3 = NoiseSchedule::linear(3, 0.1, 0.1);
  CHECK(s3.alpha_bar(3) == doctest::Approx(0.729).epsilon(1e-14));
  CHECK(s3.alpha_bar(0) == 1.0);

  // Reference value from a 50-digit product of the same betas.
  auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
  CHECK(s.alpha_bar(1000) == doctest::Approx(4.0358297653756833e-05).epsilon(1e-10));
  long double prod = 1.0L;
  for (int k = 0; k < 1000; ++k) prod *= 1.0L - (1e-4L + static_cast<long double>(k) / 999.0L * (0.02L - 1e-4L));
  CHECK(s.alpha_bar(1000) == doctest::Approx(static_cast<double>(prod)).epsilon(1e-11));

  for (int i = 1; i <= 1000; ++i) {
    CHECK(s.alpha(i) == 1.0 - s.beta(i));
    CHECK(s.sigma(i) == std::sqrt(s.beta(i)));
    if (i > 1) CHECK(s.alpha_bar(i) < s.alpha_bar(i - 1));
  }
  CHECK(s.alpha_bar(1000) > 0.0);
  CHECK(s.alpha_bar(1) < 1.0);
}

TEST_CASE("schedule construction errors") {
  CHECK_THROWS(NoiseSchedule::linear(0, 1e-4, 0.02));
  CHECK_THROWS(NoiseSchedule::linear(10, 0.0, 0.02));
  CHECK_THROWS(NoiseSchedule::linear(10, 0.1, 1.0));
  CHECK_THROWS(NoiseSchedule::linear(10, 0.2, 0.1));
  auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
  CHECK_THROWS_AS(s.beta(0), std::out_of_range);
  CHECK_THROWS_AS(s.beta(11), std::out_of_range);
}

TEST_CASE("cosine schedule and posterior variance are valid") {
  auto c = NoiseSchedule::cosine(100);
  for (int i = 2; i <= 100; ++i) CHECK(c.alpha_bar(i) < c.alpha_bar(i - 1));
  auto p = NoiseSchedule::linear(50, 1e-4, 0.02, ReverseVariance::posterior);
  CHECK(p.sigma(1) == 0.0);
  for (int i = 2; i <= 50; ++i) {
    const double expect = (1.0 - p.alpha_bar(i - 1)) / (1.0 - p.alpha_bar(i)) * p.beta(i);
    CHECK(p.sigma(i) * p.sigma(i) == doctest::Approx(expect));
  }
}

TEST_CASE("forward_sample") {
  auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
  Rng rng(3);
  Tensor x0 = rng.uniform_tensor({2, 3, 4, 4}, -1.0f, 1.0f);
  Tensor y = forward_sample(x0, StepIndex(7), Tensor(x0.shape(), 0.0f), s);
  for (std::int64_t k = 0; k < x0.size(); ++k) CHECK(y[k] == doctest::Approx(std::sqrt(s.alpha_bar(7)) * x0[k]));

  auto identity = NoiseSchedule::from_betas({0.0, 0.0}, ReverseVariance::beta, false);
  Tensor z = forward_sample(x0, StepIndex(2), rng.normal_tensor(x0.shape()), identity);
  for (std::int64_t k = 0; k < x0.size(); ++k) CHECK(z[k] == x0[k]);

  // alpha_bar = 0.25 via a single step with beta 0.75.
  auto quarter = NoiseSchedule::from_betas({0.75});
  Tensor v = forward_sample(filled({1, 1, 1, 1}, 1.0f), StepIndex(1), filled({1, 1, 1, 1}, 2.0f), quarter);
  CHECK(v[0] == doctest::Approx(2.2320508).epsilon(1e-7));

  CHECK_THROWS_AS(forward_sample(x0, StepIndex(1), Tensor({2, 3, 4, 3}), s), ShapeError);
  CHECK_THROWS_AS(forward_sample(x0, StepIndex(11), x0, s), std::out_of_range);
}

TEST_CASE("posterior_mean") {
  // A near-zero beta after a noisy step: the eps coefficient is beta / sqrt(1 - abar) ~ 1e-12.
  auto tiny = NoiseSchedule::from_betas({0.5, 1e-12});
  Tensor x = filled({1, 1, 2, 2}, 0.7f);
  Tensor e = filled({1, 1, 2, 2}, -1.3f);
  Tensor m = posterior_mean(x, e, StepIndex(2), tiny);
  for (std::int64_t k = 0; k < 4; ++k) CHECK(std::abs(m[k] - x[k]) < 1e-9);

  // beta_2 = 0.02 and alpha_bar_2 = 0.5 need alpha_bar_1 = 0.5 / 0.98.
  auto s = NoiseSchedule::from_betas({1.0 - 0.5 / 0.98, 0.02});
  Tensor out = posterior_mean(filled({1, 1, 1, 1}, 1.0f), filled({1, 1, 1, 1}, 0.5f), StepIndex(2), s);
  const double expect = (1.0 - 0.02 / std::sqrt(0.5) * 0.5) / std::sqrt(0.98);
  CHECK(out[0] == doctest::Approx(expect).epsilon(1e-6));

  auto degenerate = NoiseSchedule::from_betas({0.0}, ReverseVariance::beta, false);
  CHECK_THROWS_AS(posterior_mean(x, e, StepIndex(1), degenerate), DegenerateScheduleError);
}

TEST_CASE("one-step inversion and x0 recovery") {
  auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
  Rng rng(11);
  Tensor x0 = rng.uniform_tensor({2, 3, 8, 8}, -1.0f, 1.0f);
  Tensor eps = rng.normal_tensor(x0.shape());
  Tensor x1 = forward_sample(x0, StepIndex(1), eps, s);
  Tensor back = reverse_step(x1, eps, StepIndex(1), Tensor(x0.shape(), 0.0f), s);
  double err = 0.0;
  for (std::int64_t k = 0; k < x0.size(); ++k) err = std::max(err, static_cast<double>(std::abs(back[k] - x0[k])));
  CHECK(err < 1e-5);

  for (int i : {1, 10, 500, 1000}) {
    Tensor xi = forward_sample(x0, StepIndex(i), eps, s);
    Tensor rec = predict_x0(xi, eps, StepIndex(i), s);
    double e2 = 0.0;
    for (std::int64_t k = 0; k < x0.size(); ++k) e2 = std::max(e2, static_cast<double>(std::abs(rec[k] - x0[k])));
    // Recovering x0 divides by sqrt(abar_i), which amplifies float rounding at large i.
    CHECK(e2 < 1e-5 / std::sqrt(s.alpha_bar(i)));
    Tensor zero_eps = predict_x0(xi, Tensor(x0.shape(), 0.0f), StepIndex(i), s);
    CHECK(zero_eps[3] == doctest::Approx(xi[3] / std::sqrt(s.alpha_bar(i))).epsilon(1e-6));
  }
  Tensor big = filled({1, 1, 1, 1}, 5.0f);
  CHECK(predict_x0(big, Tensor({1, 1, 1, 1}), StepIndex(1), s, true)[0] == 1.0f);

  CHECK_THROWS(reverse_step(x1, eps, StepIndex(1), Tensor(x0.shape(), 0.5f), s));
}

TEST_CASE("reverse_step noise moments") {
  auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
  const int n = 10000;
  Rng rng(12);
  Tensor x({n, 1, 1, 1}, 0.3f);
  Tensor e({n, 1, 1, 1}, -0.4f);
  Tensor z = rng.normal_tensor(x.shape());
  Tensor mean = posterior_mean(x, e, StepIndex(50), s);
  Tensor out = reverse_step(x, e, StepIndex(50), z, s);
  double m = 0.0, m2 = 0.0;
  for (int k = 0; k < n; ++k) {
    m += out[k];
    m2 += static_cast<double>(out[k]) * out[k];
  }
  m /= n;
  const double sd = std::sqrt(m2 / n - m * m);
  const double sigma = s.sigma(50);
  CHECK(std::abs(m - mean[0]) < 3.0 * sigma / std::sqrt(n));
  CHECK(std::abs(sd - sigma) < 3.0 * sigma / std::sqrt(2.0 * n));
}

TEST_CASE("per-element steps in a batch") {
  auto s = NoiseSchedule::linear(20, 1e-4, 0.02);
  Tensor x0({2, 1, 1, 1}, 1.0f);
  std::vector<int> steps{3, 17};
  auto y = forward_sample(ag::constant(x0), steps, ag::constant(Tensor(x0.shape(), 0.0f)), s);
  CHECK(y.value()[0] == doctest::Approx(std::sqrt(s.alpha_bar(3))));
  CHECK(y.value()[1] == doctest::Approx(std::sqrt(s.alpha_bar(17))));
}

TEST_CASE("respaced schedule") {
  auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
  std::vector<int> full{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
  auto r = s.respaced(full);
  for (int i = 1; i <= 10; ++i) {
    CHECK(r.beta(i) == s.beta(i));
    CHECK(r.alpha_bar(i) == s.alpha_bar(i));
  }
  std::vector<int> sub{10, 6, 3, 1};
  auto q = s.respaced(sub);
  CHECK(q.steps() == 4);
  CHECK(q.alpha_bar(2) == s.alpha_bar(3));
  CHECK(q.alpha_bar(4) == s.alpha_bar(10));
  CHECK(q.alpha(3) == doctest::Approx(s.alpha_bar(6) / s.alpha_bar(3)));
  std::vector<int> bad{10, 6, 3};
  CHECK_THROWS(s.respaced(bad));
  std::vector<int> unsorted{3, 6, 1};
  CHECK_THROWS(s.respaced(unsorted));
}
