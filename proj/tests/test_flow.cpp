#include <cmath>
#include <numbers>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lddpm/flow.hpp"

using namespace lddpm;
using ag::Var;

namespace {

FlowConfig small_config(int channels, int cond, int levels, int steps) {
  FlowConfig c;
  c.channels = channels;
  c.cond_channels = cond;
  c.levels = levels;
  c.steps_per_level = steps;
  c.hidden = 8;
  return c;
}

void randomize(ConditionalFlow& flow, Rng& rng, float scale) {
  for (const auto& p : flow.parameters()) {
    Var v = p.var;
    Tensor noise = rng.uniform_tensor(v.shape(), -scale, scale);
    for (std::int64_t k = 0; k < noise.size(); ++k) v.mutable_value()[k] += noise[k];
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t k = 0; k < a.size(); ++k) m = std::max(m, static_cast<double>(std::abs(a[k] - b[k])));
  return m;
}

GaussianParams standard(const Shape& s) {
  return {ag::constant(Tensor(s, 0.0f)), ag::constant(Tensor(s, 1.0f))};
}

}  // namespace

TEST_CASE("identity-initialized flow") {
  Rng rng(1);
  FlowConfig cfg = small_config(4, 3, 2, 2);
  cfg.identity_mixing = true;
  ConditionalFlow flow(cfg, rng);
  Var x = ag::constant(rng.normal_tensor({2, 4, 4, 4}));
  Var cond = ag::constant(rng.normal_tensor({2, 3, 4, 4}));
  FlowState s = flow.forward(x, cond);
  CHECK(max_abs_diff(s.features.value(), x.value()) < 1e-6);
  for (float v : s.log_det.value().values()) CHECK(v == 0.0f);
  CHECK(max_abs_diff(flow.inverse(x, cond).value(), x.value()) < 1e-6);

  // The coupling alone contributes zero log-det when freshly built.
  Rng r2(9);
  AffineCoupling coupling(4, 3, 8, r2);
  FlowState c = coupling.forward(flow_state(x), cond);
  for (float v : c.log_det.value().values()) CHECK(v == 0.0f);
}

TEST_CASE("actnorm data-dependent initialization") {
  Rng rng(2);
  ActNorm an(3);
  Tensor x = rng.uniform_tensor({4, 3, 5, 5}, -2.0f, 7.0f);
  an.initialize(x);
  CHECK(an.initialized());
  Tensor y = an.forward(flow_state(ag::constant(x))).features.value();
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int k = 0; k < 25; ++k) {
        const double v = y[(n * 3 + c) * 25 + k];
        s += v;
        s2 += v * v;
      }
    const double mean = s / 100.0;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(std::abs(std::sqrt(s2 / 100.0 - mean * mean) - 1.0) < 1e-4);
  }

  Rng r3(3);
  ConditionalFlow flow(small_config(4, 2, 1, 3), r3);
  CHECK_FALSE(flow.actnorm_initialized());
  flow.initialize_actnorm(ag::constant(r3.normal_tensor({3, 4, 2, 2})), ag::constant(r3.normal_tensor({3, 2, 2, 2})));
  CHECK(flow.actnorm_initialized());
}

TEST_CASE("flow round trip") {
  Rng rng(4);
  for (bool squeeze : {false, true}) {
    FlowConfig cfg = small_config(4, 3, 2, 4);
    cfg.squeeze = squeeze;
    ConditionalFlow flow(cfg, rng);
    randomize(flow, rng, 0.2f);
    Var cond = ag::constant(rng.normal_tensor({3, 3, 8, 8}));
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      Var x = ag::constant(rng.normal_tensor({3, 4, 4, 4}));
      FlowState s = flow.forward(x, cond);
      CHECK(s.features.shape() == x.shape());
      worst = std::max(worst, max_abs_diff(flow.inverse(s.features, cond).value(), x.value()));
    }
    CHECK(worst < 1e-4);
  }

  ConditionalFlow deep(small_config(4, 2, 1, 50), rng);
  randomize(deep, rng, 0.05f);
  Var x = ag::constant(rng.normal_tensor({2, 4, 2, 2}));
  Var cond = ag::constant(rng.normal_tensor({2, 2, 2, 2}));
  CHECK(max_abs_diff(deep.inverse(deep.forward(x, cond).features, cond).value(), x.value()) < 1e-3);
}

TEST_CASE("flow log-det matches the dense Jacobian") {
  Rng rng(5);
  ConditionalFlow flow(small_config(2, 1, 1, 3), rng);
  randomize(flow, rng, 0.3f);
  Var cond = ag::constant(rng.normal_tensor({1, 1, 2, 2}));
  Tensor x = rng.normal_tensor({1, 2, 2, 2});
  const int d = 8;
  std::vector<double> jac(d * d);
  const float h = 1e-2f;
  for (int j = 0; j < d; ++j) {
    auto eval = [&](float off) {
      Tensor xp = x;
      xp[j] += off;
      return flow.forward(ag::constant(xp), cond).features.value();
    };
    Tensor a = eval(h), b = eval(-h), a2 = eval(2 * h), b2 = eval(-2 * h);
    for (int i = 0; i < d; ++i) jac[i * d + j] = (8.0 * (a[i] - b[i]) - (a2[i] - b2[i])) / (12.0 * h);
  }
  const double dense = log_abs_det(jac, d);
  const double ld = flow.forward(ag::constant(x), cond).log_det.item();
  CHECK(std::abs(dense - ld) < 1e-3);
}

TEST_CASE("log-det is additive over steps") {
  Rng rng(6);
  ConditionalFlow flow(small_config(4, 2, 1, 3), rng);
  randomize(flow, rng, 0.3f);
  Var x = ag::constant(rng.normal_tensor({2, 4, 3, 3}));
  Var cond = ag::constant(rng.normal_tensor({2, 2, 3, 3}));
  FlowState s = flow_state(x);
  std::vector<double> parts(2, 0.0);
  for (const auto& step : flow.steps) {
    for (int stage = 0; stage < 3; ++stage) {
      s = stage == 0 ? step.actnorm.forward(flow_state(s.features))
                     : (stage == 1 ? step.mixing.forward(flow_state(s.features))
                                   : step.coupling.forward(flow_state(s.features), cond));
      for (int n = 0; n < 2; ++n) parts[n] += s.log_det.value()[n];
    }
  }
  FlowState whole = flow.forward(x, cond);
  for (int n = 0; n < 2; ++n) CHECK(whole.log_det.value()[n] == doctest::Approx(parts[n]).epsilon(1e-6));
}

TEST_CASE("singular mixing is rejected") {
  Rng rng(7);
  InvertibleMixing mix(3, rng, true);
  mix.log_s.mutable_value()[1] = -200.0f;
  CHECK_THROWS_AS(mix.forward(flow_state(ag::constant(Tensor({1, 3, 2, 2}, 1.0f)))), SingularFlowError);
  CHECK_THROWS_AS(mix.inverse(ag::constant(Tensor({1, 3, 2, 2}, 1.0f))), SingularFlowError);
  InvertibleMixing rot(5, rng);
  CHECK_NOTHROW(rot.check_conditioning());
  // A random rotation has |det| = 1.
  double s = 0.0;
  for (float v : rot.log_s.value().values()) s += v;
  CHECK(std::abs(s) < 1e-5);
}

TEST_CASE("flow negative log-likelihood") {
  Rng rng(8);
  FlowConfig cfg = small_config(2, 0, 1, 1);
  cfg.identity_mixing = true;
  ConditionalFlow flow(cfg, rng);
  Var zero = ag::constant(Tensor({1, 2, 1, 1}, 0.0f));
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  CHECK(flow_nll_per_dim(flow, zero, Var(), standard({1, 2, 1, 1})).item() == doctest::Approx(half_log_2pi));

  Var x = ag::constant(Tensor({1, 2, 1, 1}, std::vector<float>{0.7f, -1.9f}));
  GaussianParams base{ag::constant(Tensor({1, 2, 1, 1}, std::vector<float>{0.2f, -0.5f})),
                      ag::constant(Tensor({1, 2, 1, 1}, std::vector<float>{1.5f, 0.8f}))};
  double hand = 0.0;
  const double xs[2] = {0.7, -1.9}, mu[2] = {0.2, -0.5}, sg[2] = {1.5, 0.8};
  for (int k = 0; k < 2; ++k) hand += 0.5 * std::pow((xs[k] - mu[k]) / sg[k], 2) + std::log(sg[k]) + half_log_2pi;
  CHECK(flow_nll(flow, x, Var(), base).item() == doctest::Approx(hand).epsilon(1e-6));

  // A pure scaling by s: NLL(x) = -log N(s x; mu, sigma) - log s.
  ActNorm scale(1);
  const double s = 2.5;
  scale.log_scale.mutable_value()[0] = static_cast<float>(std::log(s));
  Var x1 = ag::constant(Tensor({1, 1, 1, 1}, 0.4f));
  FlowState st = scale.forward(flow_state(x1));
  GaussianParams b1{ag::constant(Tensor({1, 1, 1, 1}, 0.3f)), ag::constant(Tensor({1, 1, 1, 1}, 0.9f))};
  const double nll = -(gaussian_log_density(st.features, b1) + st.log_det).item();
  const double expect = 0.5 * std::pow((s * 0.4 - 0.3) / 0.9, 2) + std::log(0.9) + half_log_2pi - std::log(s);
  CHECK(nll == doctest::Approx(expect).epsilon(1e-6));

  GaussianParams bad{ag::constant(Tensor({1, 2, 1, 1}, 0.0f)), ag::constant(Tensor({1, 2, 1, 1}, 0.0f))};
  CHECK_THROWS_AS(flow_nll(flow, x, Var(), bad), std::domain_error);
}

TEST_CASE("2-dim flow density integrates to one") {
  Rng rng(10);
  ConditionalFlow flow(small_config(2, 1, 1, 2), rng);
  randomize(flow, rng, 0.3f);
  const int g = 321;
  const double lim = 8.0, step = 2 * lim / (g - 1);
  Tensor grid({g * g, 2, 1, 1});
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j) {
      grid[(i * g + j) * 2] = static_cast<float>(-lim + i * step);
      grid[(i * g + j) * 2 + 1] = static_cast<float>(-lim + j * step);
    }
  Var cond = ag::constant(Tensor({g * g, 1, 1, 1}, 0.6f));
  Var lp = flow_log_prob(flow, ag::constant(grid), cond, standard({1, 2, 1, 1}));
  double mass = 0.0;
  for (float v : lp.value().values()) mass += std::exp(static_cast<double>(v));
  mass *= step * step;
  CHECK(std::abs(mass - 1.0) < 0.01);
}

TEST_CASE("flow NLL gradients") {
  Rng rng(11);
  ConditionalFlow flow(small_config(4, 2, 1, 2), rng);
  randomize(flow, rng, 0.2f);
  Var x = ag::constant(rng.normal_tensor({2, 4, 2, 2}));
  Var cond = ag::constant(rng.normal_tensor({2, 2, 2, 2}));
  auto loss = [&] { return flow_nll(flow, x, cond, standard({1, 4, 2, 2})); };
  for (const auto& p : flow.parameters()) {
    auto r = testing::check_gradient(loss, p.var, 1e-2f, 6, testing::Probe::largest);
    INFO(p.name);
    CHECK(r.rel_error < 1e-2);
  }
  Var xin(rng.normal_tensor({2, 4, 2, 2}), true);
  auto r = testing::check_gradient([&] { return flow_nll(flow, xin, cond, standard({1, 4, 2, 2})); }, xin);
  CHECK(r.rel_error < 1e-2);
}
