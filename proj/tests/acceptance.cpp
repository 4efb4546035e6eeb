// Acceptance checks: one PASS / FAIL line per criterion.
//
//   acceptance --cli build/tools/lddpm [--only 1,2,8] [--ablation-steps N]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "lddpm/cli_config.hpp"
#include "lddpm/data_pipeline.hpp"
#include "lddpm/engine.hpp"
#include "lddpm/image_io.hpp"
#include "lddpm/metrics.hpp"

using namespace lddpm;
using ag::Var;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t k = 0; k < a.size(); ++k) m = std::max(m, static_cast<double>(std::abs(a[k] - b[k])));
  return m;
}

// ---------------------------------------------------------------------------
// 1. Forward marginal

Outcome forward_marginal() {
  const auto t0 = Clock::now();
  const int T = 10, trials = 10000, pixels = 4;
  const std::vector<double> x0{-0.8, -0.1, 0.3, 0.9};
  double worst = 0.0;
  {
    const double b0 = 1e-4, b1 = 0.02;
    const NoiseSchedule s = NoiseSchedule::linear(T, b0, b1);
    std::vector<double> betas(T);
    for (int i = 0; i < T; ++i) betas[i] = b0 + (b1 - b0) * i / (T - 1);
    std::mt19937_64 gen(17);
    std::normal_distribution<double> nd;
    // Brute force: apply q(x_i | x_{i-1}) step by step.
    std::vector<std::vector<double>> sum(T, std::vector<double>(pixels)), sq = sum;
    for (int t = 0; t < trials; ++t) {
      std::vector<double> x = x0;
      for (int i = 0; i < T; ++i)
        for (int p = 0; p < pixels; ++p) {
          x[p] = std::sqrt(1.0 - betas[i]) * x[p] + std::sqrt(betas[i]) * nd(gen);
          sum[i][p] += x[p];
          sq[i][p] += x[p] * x[p];
        }
    }
    // Closed form from the library's alpha_bar, and its one-shot sampler.
    Rng rng(23);
    Tensor x0t({trials, pixels});
    for (int t = 0; t < trials; ++t)
      for (int p = 0; p < pixels; ++p) x0t[t * pixels + p] = static_cast<float>(x0[p]);
    for (int i = 1; i <= T; ++i) {
      const double ab = s.alpha_bar(i);
      const Tensor xi = forward_sample(x0t, StepIndex(i), rng.normal_tensor(x0t.shape()), s);
      for (int p = 0; p < pixels; ++p) {
        const double m = sum[i - 1][p] / trials;
        const double sd = std::sqrt(sq[i - 1][p] / trials - m * m);
        double om = 0.0, osq = 0.0;
        for (int t = 0; t < trials; ++t) {
          om += xi[t * pixels + p];
          osq += static_cast<double>(xi[t * pixels + p]) * xi[t * pixels + p];
        }
        om /= trials;
        const double osd = std::sqrt(osq / trials - om * om);
        const double cm = std::sqrt(ab) * x0[p], csd = std::sqrt(1.0 - ab);
        worst = std::max({worst, std::abs(m - cm), std::abs(sd - csd), std::abs(om - cm), std::abs(osd - csd)});
      }
    }
  }
  const double sec = seconds_since(t0);
  return {worst < 0.02 && sec < 10.0, fmt("max moment error %.4f (tol 0.02), %.1f s", worst, sec)};
}

// ---------------------------------------------------------------------------
// 2. KL to N(0, I)

Outcome kl_correctness() {
  const auto t0 = Clock::now();
  GaussianParams unit{ag::constant(Tensor({1, 4}, 0.0f)), ag::constant(Tensor({1, 4}, 1.0f))};
  const double at_unit = kl_to_standard_normal(unit).item();
  std::mt19937_64 gen(29);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.3, 2.0);
  const int dims = 4, draws = 1'000'000;
  double worst = 0.0;
  for (int c = 0; c < 20; ++c) {
    Tensor mu({1, dims}), sg({1, dims});
    for (int d = 0; d < dims; ++d) {
      mu[d] = static_cast<float>(nd(gen));
      sg[d] = static_cast<float>(ud(gen));
    }
    const double analytic = kl_to_standard_normal({ag::constant(mu), ag::constant(sg)}).item();
    // E_q[log q(z) - log p(z)]
    double acc = 0.0;
    for (int k = 0; k < draws; ++k)
      for (int d = 0; d < dims; ++d) {
        const double e = nd(gen), z = mu[d] + sg[d] * e;
        acc += -std::log(static_cast<double>(sg[d])) - 0.5 * e * e + 0.5 * z * z;
      }
    const double mc = acc / draws;
    worst = std::max(worst, std::abs(analytic - mc) / std::abs(mc));
  }
  const double sec = seconds_since(t0);
  return {std::abs(at_unit) == 0.0 && worst < 0.02 && sec < 30.0,
          fmt("KL(0,1) = %g, worst MC relative error %.4f (tol 0.02), %.1f s", at_unit, worst, sec)};
}

// ---------------------------------------------------------------------------
// 3. Flow exactness

FlowConfig flow_config(int channels, int cond, int levels, int steps, int hidden) {
  FlowConfig c;
  c.channels = channels;
  c.cond_channels = cond;
  c.levels = levels;
  c.steps_per_level = steps;
  c.hidden = hidden;
  return c;
}

void perturb(const nn::ParamList& params, Rng& rng, float scale) {
  for (const auto& p : params) {
    Var v = p.var;
    const Tensor noise = rng.uniform_tensor(v.shape(), -scale, scale);
    for (std::int64_t k = 0; k < noise.size(); ++k) v.mutable_value()[k] += noise[k];
  }
}

double dense_logdet(const ConditionalFlow& flow, const Tensor& x, const Var& cond) {
  const int d = static_cast<int>(x.size());
  std::vector<double> jac(static_cast<std::size_t>(d) * d);
  const float h = 1e-2f;
  for (int j = 0; j < d; ++j) {
    auto eval = [&](float off) {
      Tensor xp = x;
      xp[j] += off;
      return flow.forward(ag::constant(xp), cond).features.value();
    };
    const Tensor a = eval(h), b = eval(-h), a2 = eval(2 * h), b2 = eval(-2 * h);
    for (int i = 0; i < d; ++i) jac[i * d + j] = (8.0 * (a[i] - b[i]) - (a2[i] - b2[i])) / (12.0 * h);
  }
  return log_abs_det(jac, d);
}

Outcome flow_exactness() {
  const auto t0 = Clock::now();
  Rng rng(31);

  ConditionalFlow flow(flow_config(8, 4, 2, 4, 16), rng);
  perturb(flow.parameters(), rng, 0.1f);
  double round_trip = 0.0;
  for (int k = 0; k < 100; ++k) {
    const Var x = ag::constant(rng.normal_tensor({1, 8, 4, 4}));
    const Var cond = ag::constant(rng.normal_tensor({1, 4, 4, 4}));
    round_trip = std::max(round_trip, max_abs_diff(flow.inverse(flow.forward(x, cond).features, cond).value(), x.value()));
  }

  double logdet_err = 0.0;
  for (auto [c, side] : {std::pair{2, 2}, std::pair{4, 2}, std::pair{4, 1}, std::pair{2, 1}}) {
    ConditionalFlow small(flow_config(c, 2, 2, 2, 8), rng);
    perturb(small.parameters(), rng, 0.3f);
    const Tensor x = rng.normal_tensor({1, c, side, side});
    const Var cond = ag::constant(rng.normal_tensor({1, 2, side, side}));
    const double ld = small.forward(ag::constant(x), cond).log_det.item();
    logdet_err = std::max(logdet_err, std::abs(dense_logdet(small, x, cond) - ld));
  }

  ConditionalFlow planar(flow_config(2, 1, 1, 2, 8), rng);
  perturb(planar.parameters(), rng, 0.3f);
  const int g = 321;
  const double lim = 8.0, step = 2 * lim / (g - 1);
  Tensor grid({g * g, 2, 1, 1});
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j) {
      grid[(i * g + j) * 2] = static_cast<float>(-lim + i * step);
      grid[(i * g + j) * 2 + 1] = static_cast<float>(-lim + j * step);
    }
  const GaussianParams base{ag::constant(Tensor({1, 2, 1, 1}, 0.0f)), ag::constant(Tensor({1, 2, 1, 1}, 1.0f))};
  const Var lp = flow_log_prob(planar, ag::constant(grid), ag::constant(Tensor({g * g, 1, 1, 1}, 0.6f)), base);
  double mass = 0.0;
  for (float v : lp.value().values()) mass += std::exp(static_cast<double>(v));
  mass *= step * step;

  const double sec = seconds_since(t0);
  return {round_trip < 1e-4 && logdet_err < 1e-3 && std::abs(mass - 1.0) < 0.01 && sec < 120.0,
          fmt("round trip %.2e (tol 1e-4), log-det vs Jacobian %.2e (tol 1e-3), density mass %.5f, %.1f s", round_trip,
              logdet_err, mass, sec)};
}

// ---------------------------------------------------------------------------
// 4. Gradient fidelity

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.model.inner_channel = 8;
  cfg.model.channel_multipliers = {1, 2};
  cfg.model.attention_levels = {1};
  cfg.model.num_heads = 2;
  cfg.model.context_dim = 16;
  cfg.model.lr_encoder_blocks = 1;
  cfg.model.cvae_hidden = 8;
  cfg.model.cvae_latent = 2;
  cfg.model.disc_channels = 8;
  cfg.model.disc_blocks = 2;
  cfg.diffusion.steps = 20;
  cfg.optim.base_lr = 1e-2;
  cfg.hr_size = 8;
  cfg.batch_size = 2;
  cfg.weights.content = 0.0;
  cfg.weights.style = 0.0;
  cfg.seed = 13;
  return cfg;
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  using testing::Probe;
  std::vector<std::pair<std::string, double>> errors;

  // L_DDPM through the whole conditional denoiser, every parameter tensor. Weights are
  // randomized so no gradient is stuck at its (near) zero initialization.
  {
    TrainConfig cfg = tiny_train_config();
    cfg.model.inner_channel = 16;
    Trainer t(cfg);
    const auto params = t.model().generator_parameters();
    Rng init(53);
    perturb(params, init, 0.3f);
    std::vector<Tensor> images;
    std::vector<std::string> names;
    for (int i = 0; i < 2; ++i) {
      images.push_back(synthetic_texture(300 + i, cfg.hr_size));
      names.push_back(std::to_string(i));
    }
    DatasetIterator it(images, names, {cfg.hr_size, cfg.scale, Profile::clean, 5, 1, 3, {}});
    auto [hr, lr] = it.next_batch(cfg.batch_size);
    nn::set_requires_grad(params, true);
    for (const auto& p : params) {
      nn::zero_grad(params);
      const auto r = testing::check_gradient([&] { return t.generator_terms(hr, lr, 3).ddpm; }, p.var, 3e-2f, 12,
                                             Probe::largest);
      errors.emplace_back("ddpm/" + p.name, r.rel_error);
    }
  }

  Rng rng(37);
  // Content and style through the frozen extractor.
  {
    const PerceptualExtractor ex(7, {6, 6}, 2);
    const Tap tap{2, 2};
    Var xh(rng.uniform_tensor({1, 3, 8, 8}, -1.0f, 1.0f), true);
    Var yh(rng.uniform_tensor({1, 3, 8, 8}, -1.0f, 1.0f), true);
    const Var x = ag::constant(rng.uniform_tensor({1, 3, 8, 8}, -1.0f, 1.0f));
    const Var y = ag::constant(rng.uniform_tensor({1, 3, 8, 8}, -1.0f, 1.0f));
    errors.emplace_back("content/x", testing::check_gradient([&] { return content_loss(x, xh, y, yh, ex, tap); }, xh,
                                                             5e-3f, 12, Probe::largest).rel_error);
    errors.emplace_back("content/y", testing::check_gradient([&] { return content_loss(x, xh, y, yh, ex, tap); }, yh,
                                                             1e-3f, 12, Probe::largest).rel_error);
    errors.emplace_back("style/x", testing::check_gradient([&] { return style_loss(x, xh, ex, tap); }, xh, 5e-3f, 12,
                                                           Probe::largest).rel_error);
  }
  // Generator adversarial loss, into the pair and into the discriminator.
  {
    Discriminator d({3, 8, 2}, rng);
    DenoisePair pair{Var(rng.normal_tensor({2, 3, 8, 8}), true), Var(rng.normal_tensor({2, 3, 8, 8}), true), {3, 9}};
    auto f = [&] { return generator_adv_loss(d.logits(pair)); };
    errors.emplace_back("adv_g/x_prev", testing::check_gradient(f, pair.x_prev, 5e-2f, 12, Probe::largest).rel_error);
    errors.emplace_back("adv_g/x_cur", testing::check_gradient(f, pair.x_cur, 5e-2f, 12, Probe::largest).rel_error);
    for (const auto& p : d.parameters())
      errors.emplace_back("adv_g/" + p.name, testing::check_gradient(f, p.var, 1e-2f, 6, Probe::largest).rel_error);
  }
  // Flow NLL, into its parameters and its input.
  {
    ConditionalFlow flow(flow_config(4, 2, 1, 2, 8), rng);
    perturb(flow.parameters(), rng, 0.2f);
    const Var cond = ag::constant(rng.normal_tensor({2, 2, 2, 2}));
    const GaussianParams base{ag::constant(Tensor({1, 4, 2, 2}, 0.0f)), ag::constant(Tensor({1, 4, 2, 2}, 1.0f))};
    Var x(rng.normal_tensor({2, 4, 2, 2}), true);
    auto f = [&] { return flow_nll(flow, x, cond, base); };
    for (const auto& p : flow.parameters())
      errors.emplace_back("flow/" + p.name, testing::check_gradient(f, p.var, 1e-2f, 6, Probe::largest).rel_error);
    errors.emplace_back("flow/x", testing::check_gradient(f, x).rel_error);
  }

  auto worst = std::max_element(errors.begin(), errors.end(),
                                [](const auto& a, const auto& b) { return a.second < b.second; });
  const double sec = seconds_since(t0);
  return {worst->second < 1e-2 && sec < 120.0,
          fmt("%zu checks, worst relative error %.2e at %s (tol 1e-2, float32), %.1f s", errors.size(), worst->second,
              worst->first.c_str(), sec)};
}

// ---------------------------------------------------------------------------
// 5. Loss fixed points

Outcome loss_fixed_points() {
  Rng rng(41);
  const Var e = ag::constant(rng.normal_tensor({2, 3, 8, 8}));
  const Var x = ag::constant(rng.uniform_tensor({2, 3, 32, 32}, -1.0f, 1.0f));
  const Var y = ag::constant(rng.uniform_tensor({2, 3, 32, 32}, -1.0f, 1.0f));
  const PerceptualExtractor ex(3);
  const GaussianParams unit{ag::constant(Tensor({2, 4, 2, 2}, 0.0f)), ag::constant(Tensor({2, 4, 2, 2}, 1.0f))};
  const double vals[4] = {ddpm_loss(e, e).item(), kl_to_standard_normal(unit).item(),
                          content_loss(x, x, y, y, ex).item(), style_loss(x, x, ex).item()};
  double worst = 0.0;
  for (double v : vals) worst = std::max(worst, std::abs(v));
  return {worst <= 1e-7, fmt("ddpm %g, kl %g, content %g, style %g (tol 1e-7)", vals[0], vals[1], vals[2], vals[3])};
}

// ---------------------------------------------------------------------------
// 6. Adversarial hand values

Outcome adversarial_hand_values() {
  const Var half = ag::constant(Tensor({4}, 0.0f));  // logit of 0.5
  const double ld = discriminator_loss(half, half).item();
  const double err = std::abs(ld - 2.0 * std::log(2.0));
  const NoiseSchedule s = NoiseSchedule::linear(1000, 1e-4, 0.02);
  Rng rng(43);
  const Var x0 = ag::constant(rng.uniform_tensor({3, 3, 8, 8}, -1.0f, 1.0f));
  const DenoisePair pair = predict_pair(x0, ag::constant(rng.normal_tensor(x0.shape())), {1, 1, 1},
                                        ag::constant(rng.normal_tensor(x0.shape())), s);
  const bool exact = std::ranges::equal(pair.x_prev.value().values(), x0.value().values());
  return {err <= 1e-6 && exact, fmt("L_D(0.5, 0.5) = %.9f (2 ln 2 = %.9f), x_0 at i = 1 %s", ld, 2.0 * std::log(2.0),
                                    exact ? "bit-exact" : "differs")};
}

// ---------------------------------------------------------------------------
// 7. Metric oracles

Tensor random_u8(Rng& rng, int c, int h, int w) {
  Tensor t({c, h, w});
  for (float& v : t.values()) v = static_cast<float>(rng.uniform_int(0, 255));
  return t;
}

// Sliding 11x11 Gaussian window evaluated directly at every valid position.
double sliding_ssim(const Tensor& a, const Tensor& b) {
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  double win[11][11], tot = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) tot += win[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
  const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
  double acc = 0;
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    int n = 0;
    for (int y = 0; y + 11 <= h; ++y)
      for (int x = 0; x + 11 <= w; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double wt = win[i][j] / tot;
            const double va = a[(ch * h + y + i) * w + x + j], vb = b[(ch * h + y + i) * w + x + j];
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        s += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++n;
      }
    acc += s / n;
  }
  return acc / c;
}

Outcome metric_oracles() {
  const double p = psnr(Tensor({3, 16, 16}, 100.0f), Tensor({3, 16, 16}, 116.0f));
  Rng rng(47);
  bool self_one = true;
  for (int k = 0; k < 5; ++k) {
    const Tensor a = random_u8(rng, k % 2 ? 3 : 1, 16, 16);
    self_one = self_one && ssim(a, a) == 1.0;
  }
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Tensor a = random_u8(rng, 1, 16, 16), b = random_u8(rng, 1, 16, 16);
    worst = std::max(worst, std::abs(ssim(a, b) - sliding_ssim(a, b)));
  }
  return {std::abs(p - 24.05) <= 0.01 && self_one && worst < 1e-6,
          fmt("PSNR offset 16 = %.4f dB, SSIM(a, a) %s, SSIM vs sliding window %.2e (tol 1e-6)", p,
              self_one ? "= 1" : "!= 1", worst)};
}

// ---------------------------------------------------------------------------
// 8 and 9. Desk training runs

constexpr int kDeskSize = 32;
constexpr int kTrainImages = 16;
constexpr int kHeldOut = 8;

TrainConfig desk_config(Variant v, double perceptual, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.model.variant = v;
  cfg.model.inner_channel = 16;
  cfg.model.channel_multipliers = {1, 2, 2};
  cfg.model.attention_levels = {2};
  cfg.model.context_dim = 32;
  cfg.model.cvae_hidden = 16;
  cfg.model.flow_hidden = 32;
  cfg.model.disc_channels = 16;
  cfg.diffusion.variance = "posterior";
  cfg.diffusion.residual_scale = 8.0;
  cfg.optim.base_lr = 2e-3;
  cfg.optim.ema_decay = 0.999;
  cfg.optim.ema_warmup = true;
  cfg.weights.content = perceptual;
  cfg.weights.style = perceptual;
  cfg.hr_size = kDeskSize;
  cfg.batch_size = 8;
  cfg.seed = seed;
  return cfg;
}

struct DeskResult {
  std::vector<double> ddpm;      ///< per step
  std::vector<double> psnr;      ///< per held-out image
  std::vector<double> bicubic;   ///< per held-out image
  double seconds = 0.0;
};

struct HeldOut {
  Tensor hr;        ///< [N, 3, H, W] in [0, 1]
  Tensor lr;        ///< [N, 3, H/2, W/2] in [-1, 1]
  Tensor bicubic;   ///< [N, 3, H, W] in [0, 1]
};

HeldOut held_out_set() {
  HeldOut h;
  h.hr = Tensor({kHeldOut, 3, kDeskSize, kDeskSize});
  const std::int64_t n = 3 * kDeskSize * kDeskSize;
  for (int i = 0; i < kHeldOut; ++i) {
    const Tensor t = synthetic_image(200, i, kDeskSize, 3);
    std::copy(t.data(), t.data() + n, h.hr.data() + i * n);
  }
  h.lr = bicubic_resize_batch(unit_to_signed(h.hr), kDeskSize / 2, kDeskSize / 2);
  h.bicubic = signed_to_unit(bicubic_resize_batch(h.lr, kDeskSize, kDeskSize));
  for (float& v : h.bicubic.values()) v = std::clamp(v, 0.0f, 1.0f);
  return h;
}

std::vector<double> per_image_psnr(const Tensor& pred01, const Tensor& hr01) {
  const int n = pred01.dim(0);
  const std::int64_t sz = pred01.size() / n;
  const Shape one{pred01.dim(1), pred01.dim(2), pred01.dim(3)};
  std::vector<double> out;
  for (int i = 0; i < n; ++i) {
    Tensor a(one), b(one);
    std::copy(pred01.data() + i * sz, pred01.data() + (i + 1) * sz, a.data());
    std::copy(hr01.data() + i * sz, hr01.data() + (i + 1) * sz, b.data());
    out.push_back(psnr(to_8bit_scale(a), to_8bit_scale(b)));
  }
  return out;
}

constexpr int kSampleSteps = 200;

DeskResult desk_run(const TrainConfig& cfg, int steps, const HeldOut& held) {
  const auto t0 = Clock::now();
  Trainer tr(cfg);
  tr.set_total_steps(steps);
  std::vector<Tensor> images;
  std::vector<std::string> names;
  for (int i = 0; i < kTrainImages; ++i) {
    images.push_back(synthetic_image(100, i, kDeskSize, 3));
    names.push_back(std::to_string(i));
  }
  DatasetIterator it(images, names, {kDeskSize, 2, Profile::clean, derive_seed(cfg.seed, 0xda7a), 1, 3, {}});
  DeskResult r;
  for (int s = 0; s < steps; ++s) {
    auto [hr, lr] = it.next_batch(cfg.batch_size);
    r.ddpm.push_back(tr.train_step(hr, lr).ddpm);
  }
  const Tensor out = sample(tr.ema_model(), tr.schedule(), held.lr, strided_steps(cfg.diffusion.steps, kSampleSteps),
                            derive_seed(cfg.seed, 0x5a3b));
  r.psnr = per_image_psnr(out, held.hr);
  r.bicubic = per_image_psnr(held.bicubic, held.hr);
  r.seconds = seconds_since(t0);
  return r;
}

double mean_of(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
  double s = 0.0;
  for (std::size_t k = lo; k < hi; ++k) s += v[k];
  return s / static_cast<double>(hi - lo);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome training_trend(const HeldOut& held) {
  const DeskResult r = desk_run(desk_config(Variant::v3, 0.0, 1), 2000, held);
  // Mean over the first 20 steps against the trailing 50-step window ending at step 200.
  const double start = mean_of(r.ddpm, 0, 20), at200 = mean_of(r.ddpm, 150, 200);
  const double drop = 1.0 - at200 / start;
  const double ours = mean_of(r.psnr, 0, r.psnr.size()), bic = mean_of(r.bicubic, 0, r.bicubic.size());
  return {drop >= 0.30 && ours > bic,
          fmt("ddpm MA %.4f -> %.4f at step 200 (drop %.1f%%, need 30%%); held-out PSNR %.3f dB vs bicubic %.3f dB "
              "after 2000 steps; %.0f s",
              start, at200, 100.0 * drop, ours, bic, r.seconds)};
}

Outcome ablation_direction(const HeldOut& held, int steps) {
  int v_ok = 0, p_ok = 0;
  std::string detail;
  const std::uint64_t seeds[3] = {101, 202, 303};
  double seconds = 0.0;
  for (std::uint64_t seed : seeds) {
    const DeskResult v1 = desk_run(desk_config(Variant::v1, 0.0, seed), steps, held);
    const DeskResult v3 = desk_run(desk_config(Variant::v3, 0.0, seed), steps, held);
    const DeskResult cl = desk_run(desk_config(Variant::v3, 1.0, seed), steps, held);
    const double m1 = median_of(v1.psnr), m3 = median_of(v3.psnr), mc = median_of(cl.psnr);
    v_ok += m1 <= m3;
    p_ok += m3 <= mc;
    seconds += v1.seconds + v3.seconds + cl.seconds;
    detail += fmt(" [seed %llu: V1 %.2f, V3 %.2f, V3+CL+SL %.2f]", static_cast<unsigned long long>(seed), m1, m3, mc);
  }
  // Stochastic trend: only a violation on every seed fails.
  const bool pass = v_ok > 0 && p_ok > 0;
  std::string note = fmt("V1<=V3 on %d/3 seeds, base<=+CL+SL on %d/3 seeds, %d steps each", v_ok, p_ok, steps);
  if (pass && (v_ok < 3 || p_ok < 3)) note += " (reported, not failed)";
  return {pass, note + detail + fmt("; %.0f s", seconds)};
}

// ---------------------------------------------------------------------------
// 10. CLI reproducibility

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Empty when both trees hold the same files with identical bytes; otherwise the first difference.
std::string compare_trees(const fs::path& a, const fs::path& b) {
  std::set<std::string> names;
  for (const fs::path& root : {a, b})
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) names.insert(fs::relative(e.path(), root).string());
  if (names.empty()) return "no artifacts in " + a.string();
  for (const std::string& n : names) {
    if (!fs::exists(a / n) || !fs::exists(b / n)) return n + " missing on one side";
    if (slurp(a / n) != slurp(b / n)) return n + " differs";
  }
  return {};
}

Outcome cli_reproducibility(const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not found: '" + cli + "'"};
  const fs::path root = fs::temp_directory_path() / "lddpm_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream cfg(root / "tiny.cfg");
    cfg << "seed = 9\n"
           "model.inner_channel = 8\nmodel.channel_multipliers = 1,2\nmodel.attention_levels = 1\n"
           "model.num_heads = 2\nmodel.context_dim = 16\nmodel.cvae_hidden = 8\n"
           "model.flow = true\nmodel.flow_hidden = 16\nmodel.gan = true\nmodel.disc_channels = 8\n"
           "model.disc_blocks = 2\nmodel.dropout = 0.1\n"
           "diffusion.steps = 50\ntrain.hr_size = 16\ntrain.batch_size = 2\ntrain.epochs = 2\n"
           "train.checkpoint_every = 2\ntrain.log_every = 0\nloss.tap = 2,1\n"
           "data.profile = realistic\nsample.steps = 10\n";
  }
  auto run = [&](const std::string& args) {
    const std::string cmd = "\"" + cli + "\" --config \"" + (root / "tiny.cfg").string() + "\" --deterministic " + args +
                            " > \"" + (root / "log.txt").string() + "\" 2>&1";
    return std::system(cmd.c_str());
  };
  const std::string hr = (root / "hr").string();
  if (run("--out \"" + hr + "\" synth --count 4 --size 16") != 0) return {false, "synth failed"};
  // Identical config means identical paths too (config.resolved records them), so each
  // repeat runs in the same place and its artifacts are moved aside afterwards.
  const fs::path work = root / "work";
  const std::string lr = (work / "lr").string(), train = (work / "train").string(), sr = (work / "sr").string();
  for (const char* tag : {"a", "b"}) {
    if (run("--out \"" + lr + "\" degrade --hr-dir \"" + hr + "\" --profile realistic") != 0)
      return {false, std::string("degrade failed in run ") + tag};
    if (run("--out \"" + train + "\" --set data.dir=\"" + hr + "\" train") != 0)
      return {false, std::string("train failed in run ") + tag};
    if (run("--out \"" + sr + "\" sample --checkpoint \"" + (work / "train" / "checkpoint.ckpt").string() +
            "\" --lr-dir \"" + lr + "\"") != 0)
      return {false, std::string("sample failed in run ") + tag};
    fs::rename(work, root / tag);
  }
  for (const char* sub : {"lr", "train", "sr"}) {
    const std::string diff = compare_trees(root / "a" / sub, root / "b" / sub);
    if (!diff.empty()) return {false, std::string(sub) + ": " + diff};
  }
  return {true, "degrade, train and sample artifacts byte-identical across repeated runs"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string cli;
  std::vector<int> only;
  int ablation_steps = 1000;
  app.add_option("--cli", cli, "path to the lddpm binary");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  app.add_option("--ablation-steps", ablation_steps, "training steps per ablation run");
  CLI11_PARSE(app, argc, argv);

  // Single-threaded numerics: the same trajectories on every machine.
  RunConfig mode;
  mode.set("deterministic", "true");
  apply_runtime_mode(mode);

  const HeldOut held = held_out_set();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"forward marginal equivalence", forward_marginal},
      {"KL correctness", kl_correctness},
      {"flow exactness", flow_exactness},
      {"gradient fidelity", gradient_fidelity},
      {"loss fixed points", loss_fixed_points},
      {"adversarial hand values", adversarial_hand_values},
      {"metric oracles", metric_oracles},
      {"training smoke and trend", [&] { return training_trend(held); }},
      {"ablation direction", [&] { return ablation_direction(held, ablation_steps); }},
      {"reproducibility", [&] { return cli_reproducibility(cli); }},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
