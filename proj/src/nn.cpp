#include "lddpm/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace lddpm::nn {

Var make_param(Tensor value) { return Var(std::move(value), true); }

namespace {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv/linear layers.
Tensor fan_in_uniform(const Shape& shape, int fan_in, Rng& rng) {
  const auto bound = static_cast<float>(1.0 / std::sqrt(static_cast<double>(fan_in)));
  return rng.uniform_tensor(shape, -bound, bound);
}

}  // namespace

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride_, int padding_, Rng& rng, bool with_bias)
    : stride(stride_), padding(padding_) {
  const int fan_in = in_ch * kernel * kernel;
  weight = make_param(fan_in_uniform({out_ch, in_ch, kernel, kernel}, fan_in, rng));
  if (with_bias) bias = make_param(fan_in_uniform({out_ch}, fan_in, rng));
}

Var Conv2d::operator()(const Var& x) const { return ag::conv2d(x, weight, bias, stride, padding); }

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + "weight", weight});
  if (bias.defined()) out.push_back({prefix + "bias", bias});
}

void Conv2d::zero_init() {
  weight.mutable_value().fill(0.0f);
  if (bias.defined()) bias.mutable_value().fill(0.0f);
}

Linear::Linear(int in_f, int out_f, Rng& rng, bool with_bias) {
  weight = make_param(fan_in_uniform({out_f, in_f}, in_f, rng));
  if (with_bias) bias = make_param(fan_in_uniform({out_f}, in_f, rng));
}

Var Linear::operator()(const Var& x) const { return ag::linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + "weight", weight});
  if (bias.defined()) out.push_back({prefix + "bias", bias});
}

void Linear::zero_init() {
  weight.mutable_value().fill(0.0f);
  if (bias.defined()) bias.mutable_value().fill(0.0f);
}

int pick_groups(int channels, int max_groups) {
  for (int g = std::min(channels, max_groups); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

GroupNorm::GroupNorm(int channels, int max_groups)
    : groups(pick_groups(channels, max_groups)),
      gamma(make_param(Tensor({channels}, 1.0f))),
      beta(make_param(Tensor({channels}, 0.0f))) {}

Var GroupNorm::operator()(const Var& x) const { return ag::group_norm(x, groups, gamma, beta); }

void GroupNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + "gamma", gamma});
  out.push_back({prefix + "beta", beta});
}

Tensor sinusoidal_embedding(const std::vector<int>& steps, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("embedding dim must be even and >= 2");
  const int half = dim / 2;
  Tensor out({static_cast<int>(steps.size()), dim});
  for (std::size_t n = 0; n < steps.size(); ++n) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
      const double a = steps[n] * freq;
      out[static_cast<std::int64_t>(n) * dim + k] = static_cast<float>(std::sin(a));
      out[static_cast<std::int64_t>(n) * dim + half + k] = static_cast<float>(std::cos(a));
    }
  }
  return out;
}

Mlp::Mlp(int in_f, int hidden, int out_f, Rng& rng) : fc1(in_f, hidden, rng), fc2(hidden, out_f, rng) {}

Var Mlp::operator()(const Var& x) const { return fc2(ag::silu(fc1(x))); }

void Mlp::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + "fc1.", out);
  fc2.collect(prefix + "fc2.", out);
}

TimestepEmbedder::TimestepEmbedder(int sdim, int out_dim, Rng& rng) : sinusoid_dim(sdim), mlp(sdim, out_dim, out_dim, rng) {}

Var TimestepEmbedder::operator()(const std::vector<int>& steps) const {
  return mlp(ag::constant(sinusoidal_embedding(steps, sinusoid_dim)));
}

void TimestepEmbedder::collect(const std::string& prefix, ParamList& out) const { mlp.collect(prefix + "mlp.", out); }

void set_requires_grad(const ParamList& params, bool on) {
  for (const auto& p : params) {
    Var v = p.var;
    v.set_requires_grad(on);
  }
}

void zero_grad(const ParamList& params) {
  for (const auto& p : params) {
    Var v = p.var;
    v.zero_grad();
  }
}

std::int64_t count_parameters(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.var.value().size();
  return n;
}

void copy_values(const ParamList& from, const ParamList& to) {
  if (from.size() != to.size()) throw std::invalid_argument("parameter lists differ in length");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].var.shape() != to[i].var.shape()) {
      throw ShapeError("parameter " + from[i].name + " shape mismatch on copy");
    }
    Var dst = to[i].var;
    dst.mutable_value() = from[i].var.value();
  }
}

std::uint64_t hash_parameters(const ParamList& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    feed(p.name.data(), p.name.size());
    feed(p.var.value().data(), static_cast<std::size_t>(p.var.value().size()) * sizeof(float));
  }
  return h;
}

}  // namespace lddpm::nn
