#include "lddpm/flow.hpp"

#include <cmath>
#include <numbers>
#include <type_traits>

namespace lddpm {

FlowState flow_state(const Var& x) {
  return {x, ag::constant(Tensor({x.dim(0)}, 0.0f))};
}

namespace {

Var spatial_log_det(const Var& per_channel, int h, int w) {
  return ag::reshape(ag::sum(per_channel), {1}) * static_cast<float>(h * w);
}

std::vector<double> to_double(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

ActNorm::ActNorm(int channels)
    : log_scale(nn::make_param(Tensor({1, channels, 1, 1}, 0.0f))),
      bias(nn::make_param(Tensor({1, channels, 1, 1}, 0.0f))) {}

void ActNorm::initialize(const Tensor& x) {
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c != log_scale.dim(1)) throw ShapeError("actnorm channel mismatch");
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const float* p = x.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      for (int k = 0; k < hw; ++k) {
        s += p[k];
        s2 += static_cast<double>(p[k]) * p[k];
      }
    }
    const double count = static_cast<double>(n) * hw;
    const double mean = s / count;
    const double sd = std::sqrt(std::max(0.0, s2 / count - mean * mean));
    bias.mutable_value()[ch] = static_cast<float>(-mean);
    log_scale.mutable_value()[ch] = static_cast<float>(-std::log(sd + 1e-6));
  }
  initialized_ = true;
}

FlowState ActNorm::forward(const FlowState& s) const {
  const Var& x = s.features;
  Var y = (x + bias) * ag::exp(log_scale);
  return {y, s.log_det + spatial_log_det(log_scale, x.dim(2), x.dim(3))};
}

Var ActNorm::inverse(const Var& y) const { return y * ag::exp(-log_scale) - bias; }

void ActNorm::collect(const std::string& prefix, nn::ParamList& out) const {
  out.push_back({prefix + "log_scale", log_scale});
  out.push_back({prefix + "bias", bias});
}

InvertibleMixing::InvertibleMixing(int c, Rng& rng, bool identity) : channels(c) {
  const auto n = static_cast<std::size_t>(c);
  std::vector<double> q(n * n, 0.0);
  if (identity) {
    for (std::size_t i = 0; i < n; ++i) q[i * n + i] = 1.0;
  } else {
    // Random rotation: Gram-Schmidt on a Gaussian matrix, column by column.
    for (auto& v : q) v = rng.normal();
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += q[i * n + j] * q[i * n + k];
        for (std::size_t i = 0; i < n; ++i) q[i * n + j] -= dot * q[i * n + k];
      }
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) norm += q[i * n + j] * q[i * n + j];
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < n; ++i) q[i * n + j] /= norm;
    }
  }
  // P q = L U with partial pivoting, so q = P^T L U.
  std::vector<std::size_t> piv(n);
  for (std::size_t i = 0; i < n; ++i) piv[i] = i;
  std::vector<double> a = q;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t best = k;
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(a[i * n + k]) > std::abs(a[best * n + k])) best = i;
    }
    if (best != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[best * n + j]);
      std::swap(piv[k], piv[best]);
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      a[i * n + k] /= a[k * n + k];
      for (std::size_t j = k + 1; j < n; ++j) a[i * n + j] -= a[i * n + k] * a[k * n + j];
    }
  }
  permutation = Tensor({c, c}, 0.0f);
  for (std::size_t i = 0; i < n; ++i) permutation[static_cast<std::int64_t>(piv[i] * n + i)] = 1.0f;
  Tensor lo({c, c}, 0.0f), up({c, c}, 0.0f), ls({c}, 0.0f);
  sign = Tensor({c}, 1.0f);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto idx = static_cast<std::int64_t>(i * n + j);
      if (j < i) lo[idx] = static_cast<float>(a[i * n + j]);
      if (j > i) up[idx] = static_cast<float>(a[i * n + j]);
    }
    const double d = a[i * n + i];
    sign[static_cast<std::int64_t>(i)] = d < 0.0 ? -1.0f : 1.0f;
    ls[static_cast<std::int64_t>(i)] = static_cast<float>(std::log(std::abs(d)));
  }
  lower = nn::make_param(std::move(lo));
  upper = nn::make_param(std::move(up));
  log_s = nn::make_param(std::move(ls));
}

Var InvertibleMixing::weight() const {
  const int c = channels;
  Tensor eye({c, c}, 0.0f), mask_l({c, c}, 0.0f), mask_u({c, c}, 0.0f);
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      const std::int64_t idx = static_cast<std::int64_t>(i) * c + j;
      if (i == j) eye[idx] = 1.0f;
      if (j < i) mask_l[idx] = 1.0f;
      if (j > i) mask_u[idx] = 1.0f;
    }
  }
  Var e = ag::constant(std::move(eye));
  Var l = lower * ag::constant(std::move(mask_l)) + e;
  Var diag = e * ag::reshape(ag::constant(sign) * ag::exp(log_s), {1, c});
  Var u = upper * ag::constant(std::move(mask_u)) + diag;
  return ag::matmul(ag::matmul(ag::constant(permutation), l), u);
}

void InvertibleMixing::check_conditioning(double max_condition) const {
  const Tensor w = weight().value();
  const std::vector<double> wd = to_double(w);
  std::vector<double> inv;
  try {
    inv = invert_matrix(wd, channels);
  } catch (const std::domain_error& e) {
    throw SingularFlowError(std::string("1x1 mixing matrix is singular: ") + e.what());
  }
  auto norm1 = [&](const std::vector<double>& m) {
    double best = 0.0;
    for (int j = 0; j < channels; ++j) {
      double col = 0.0;
      for (int i = 0; i < channels; ++i) col += std::abs(m[static_cast<std::size_t>(i * channels + j)]);
      best = std::max(best, col);
    }
    return best;
  };
  const double cond = norm1(wd) * norm1(inv);
  if (!std::isfinite(cond) || cond > max_condition) {
    throw SingularFlowError("1x1 mixing matrix is ill-conditioned (condition number " + std::to_string(cond) + ")");
  }
}

FlowState InvertibleMixing::forward(const FlowState& s) const {
  check_conditioning();
  const Var& x = s.features;
  if (x.dim(1) != channels) throw ShapeError("mixing channel mismatch");
  Var y = ag::conv2d(x, ag::reshape(weight(), {channels, channels, 1, 1}), Var(), 1, 0);
  return {y, s.log_det + spatial_log_det(log_s, x.dim(2), x.dim(3))};
}

Var InvertibleMixing::inverse(const Var& y) const {
  check_conditioning();
  const std::vector<double> inv = invert_matrix(to_double(weight().value()), channels);
  Tensor w({channels, channels, 1, 1});
  for (std::size_t k = 0; k < inv.size(); ++k) w[static_cast<std::int64_t>(k)] = static_cast<float>(inv[k]);
  return ag::conv2d(y, ag::constant(std::move(w)), Var(), 1, 0);
}

void InvertibleMixing::collect(const std::string& prefix, nn::ParamList& out) const {
  out.push_back({prefix + "lower", lower});
  out.push_back({prefix + "upper", upper});
  out.push_back({prefix + "log_s", log_s});
}

AffineCoupling::AffineCoupling(int channels, int cond_ch, int hidden, Rng& rng)
    : split(channels / 2),
      cond_channels(cond_ch),
      conv1(channels / 2 + cond_ch, hidden, 3, 1, 1, rng),
      conv2(hidden, hidden, 1, 1, 0, rng),
      conv3(hidden, 2 * (channels - channels / 2), 3, 1, 1, rng) {
  if (channels < 2) throw std::invalid_argument("coupling needs at least 2 channels");
  conv3.zero_init();
}

AffineCoupling::ScaleShift AffineCoupling::scale_shift(const Var& xa, const Var& cond) const {
  Var in = xa;
  if (cond_channels > 0) {
    if (!cond.defined() || cond.dim(1) != cond_channels || cond.dim(2) != xa.dim(2) || cond.dim(3) != xa.dim(3)) {
      throw ShapeError("coupling conditioner must be [N, " + std::to_string(cond_channels) + ", " +
                       std::to_string(xa.dim(2)) + ", " + std::to_string(xa.dim(3)) + "]");
    }
    in = ag::concat({xa, cond}, 1);
  }
  Var h = conv3(ag::silu(conv2(ag::silu(conv1(in)))));
  const int nb = h.dim(1) / 2;
  return {ag::tanh(ag::slice(h, 1, 0, nb)), ag::slice(h, 1, nb, nb)};
}

FlowState AffineCoupling::forward(const FlowState& s, const Var& cond) const {
  const Var& x = s.features;
  const int c = x.dim(1);
  Var xa = ag::slice(x, 1, 0, split);
  Var xb = ag::slice(x, 1, split, c - split);
  ScaleShift ss = scale_shift(xa, cond);
  Var yb = xb * ag::exp(ss.log_scale) + ss.shift;
  return {ag::concat({xa, yb}, 1), s.log_det + ag::sum(ss.log_scale, {1, 2, 3}, false)};
}

Var AffineCoupling::inverse(const Var& y, const Var& cond) const {
  const int c = y.dim(1);
  Var ya = ag::slice(y, 1, 0, split);
  Var yb = ag::slice(y, 1, split, c - split);
  ScaleShift ss = scale_shift(ya, cond);
  return ag::concat({ya, (yb - ss.shift) * ag::exp(-ss.log_scale)}, 1);
}

void AffineCoupling::collect(const std::string& prefix, nn::ParamList& out) const {
  conv1.collect(prefix + "conv1.", out);
  conv2.collect(prefix + "conv2.", out);
  conv3.collect(prefix + "conv3.", out);
}

Var squeeze2(const Var& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("squeeze needs even spatial dims");
  Var r = ag::reshape(x, {n, c, h / 2, 2, w / 2, 2});
  return ag::reshape(ag::permute(r, {0, 1, 3, 5, 2, 4}), {n, c * 4, h / 2, w / 2});
}

Var unsqueeze2(const Var& x) {
  const int n = x.dim(0), c = x.dim(1) / 4, h = x.dim(2), w = x.dim(3);
  Var r = ag::reshape(x, {n, c, 2, 2, h, w});
  return ag::reshape(ag::permute(r, {0, 1, 4, 2, 5, 3}), {n, c, h * 2, w * 2});
}

ConditionalFlow::ConditionalFlow(const FlowConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.levels < 1 || cfg.steps_per_level < 1) throw std::invalid_argument("flow needs >= 1 level and step");
  int c = cfg.channels;
  for (int l = 0; l < cfg.levels; ++l) {
    if (l > 0 && cfg.squeeze) c *= 4;
    for (int k = 0; k < cfg.steps_per_level; ++k) {
      steps.push_back({ActNorm(c), InvertibleMixing(c, rng, cfg.identity_mixing),
                       AffineCoupling(c, cfg.cond_channels, cfg.hidden, rng)});
    }
  }
}

namespace {

template <class Flow>
FlowState run_flow(Flow& flow, const Var& x, const Var& cond, bool init) {
  const FlowConfig& cfg = flow.config();
  if (x.value().rank() != 4 || x.dim(1) != cfg.channels) {
    throw ShapeError("flow input must be [N, " + std::to_string(cfg.channels) + ", H, W]; got " +
                     shape_str(x.shape()));
  }
  FlowState s = flow_state(x);
  std::size_t idx = 0;
  for (int l = 0; l < cfg.levels; ++l) {
    if (l > 0 && cfg.squeeze) s.features = squeeze2(s.features);
    Var c = cfg.cond_channels > 0 ? match_grid(cond, s.features.dim(2), s.features.dim(3)) : Var();
    for (int k = 0; k < cfg.steps_per_level; ++k, ++idx) {
      auto& step = flow.steps[idx];
      if constexpr (!std::is_const_v<Flow>) {
        if (init && !step.actnorm.initialized()) step.actnorm.initialize(s.features.value());
      }
      s = step.actnorm.forward(s);
      s = step.mixing.forward(s);
      s = step.coupling.forward(s, c);
    }
  }
  if (cfg.squeeze) {
    for (int l = 1; l < cfg.levels; ++l) s.features = unsqueeze2(s.features);
  }
  return s;
}

}  // namespace

FlowState ConditionalFlow::forward(const Var& x, const Var& cond) const { return run_flow(*this, x, cond, false); }

void ConditionalFlow::initialize_actnorm(const Var& x, const Var& cond) {
  if (actnorm_initialized()) return;
  (void)run_flow(*this, ag::detach(x), cond.defined() ? ag::detach(cond) : cond, true);
}

Var ConditionalFlow::inverse(const Var& z, const Var& cond) const {
  if (z.value().rank() != 4 || z.dim(1) != cfg_.channels) throw ShapeError("flow inverse input shape mismatch");
  Var y = z;
  if (cfg_.squeeze) {
    for (int l = 1; l < cfg_.levels; ++l) y = squeeze2(y);
  }
  std::size_t idx = steps.size();
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    Var c = cfg_.cond_channels > 0 ? match_grid(cond, y.dim(2), y.dim(3)) : Var();
    for (int k = 0; k < cfg_.steps_per_level; ++k) {
      const Step& step = steps[--idx];
      y = step.coupling.inverse(y, c);
      y = step.mixing.inverse(y);
      y = step.actnorm.inverse(y);
    }
    if (l > 0 && cfg_.squeeze) y = unsqueeze2(y);
  }
  return y;
}

bool ConditionalFlow::actnorm_initialized() const {
  for (const auto& s : steps) {
    if (!s.actnorm.initialized()) return false;
  }
  return true;
}

void ConditionalFlow::set_actnorm_initialized(bool on) {
  for (auto& s : steps) s.actnorm.set_initialized(on);
}

void ConditionalFlow::collect(const std::string& prefix, nn::ParamList& out) const {
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const std::string p = prefix + "step" + std::to_string(k) + ".";
    steps[k].actnorm.collect(p + "actnorm.", out);
    steps[k].mixing.collect(p + "mixing.", out);
    steps[k].coupling.collect(p + "coupling.", out);
  }
}

Var gaussian_log_density(const Var& z, const GaussianParams& base) {
  for (float s : base.sigma.value().values()) {
    if (!(s > 0.0f)) throw std::domain_error("base density sigma must be positive");
  }
  const float half_log_2pi = static_cast<float>(0.5 * std::log(2.0 * std::numbers::pi));
  Var d = (z - base.mu) / base.sigma;
  Var lp = ag::add_scalar(ag::square(d) * -0.5f - ag::log(base.sigma), -half_log_2pi);
  std::vector<int> axes;
  for (int a = 1; a < lp.value().rank(); ++a) axes.push_back(a);
  return ag::sum(lp, axes, false);
}

Var flow_log_prob(const ConditionalFlow& flow, const Var& x, const Var& cond, const GaussianParams& base) {
  FlowState s = flow.forward(x, cond);
  return gaussian_log_density(s.features, base) + s.log_det;
}

Var flow_nll(const ConditionalFlow& flow, const Var& x, const Var& cond, const GaussianParams& base) {
  return -ag::mean(flow_log_prob(flow, x, cond, base));
}

Var flow_nll_per_dim(const ConditionalFlow& flow, const Var& x, const Var& cond, const GaussianParams& base) {
  const auto dims = static_cast<float>(x.value().size() / x.dim(0));
  return flow_nll(flow, x, cond, base) * (1.0f / dims);
}

}  // namespace lddpm
