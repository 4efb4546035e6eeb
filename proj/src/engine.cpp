#include "lddpm/engine.hpp"

#include <openssl/evp.h>
#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "lddpm/data_pipeline.hpp"

namespace lddpm {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::v1: return "V1";
    case Variant::v2: return "V2";
    case Variant::v3: return "V3";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "V1" || name == "v1") return Variant::v1;
  if (name == "V2" || name == "v2") return Variant::v2;
  if (name == "V3" || name == "v3") return Variant::v3;
  throw std::invalid_argument("unknown variant '" + name + "' (V1|V2|V3)");
}

NoiseSchedule DiffusionConfig::make() const {
  ReverseVariance v;
  if (variance == "beta") {
    v = ReverseVariance::beta;
  } else if (variance == "posterior") {
    v = ReverseVariance::posterior;
  } else {
    throw std::invalid_argument("unknown reverse variance '" + variance + "' (beta|posterior)");
  }
  if (schedule == "linear") return NoiseSchedule::linear(steps, beta_start, beta_end, v);
  if (schedule == "cosine") return NoiseSchedule::cosine(steps, v);
  throw std::invalid_argument("unknown noise schedule '" + schedule + "' (linear|cosine)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
  if (scale < 1 || hr_size < 1 || hr_size % scale != 0) fail("scale must divide hr_size");
  if (batch_size < 1) fail("batch_size must be positive");
  if (diffusion.steps < 1) fail("diffusion steps must be positive");
  if (!(diffusion.residual_scale > 0.0)) fail("residual_scale must be positive");
  if (!(optim.ema_decay > 0.0 && optim.ema_decay < 1.0)) fail("ema_decay must lie in (0, 1)");
  if (!(optim.base_lr > 0.0) || !(optim.disc_lr > 0.0)) fail("learning rates must be positive");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    fail("optimizer betas must lie in [0, 1)");
  }
  if (optim.weight_decay < 0.0 || !(optim.grad_clip > 0.0)) fail("weight_decay >= 0 and grad_clip > 0 required");
  for (double w : {weights.ddpm, weights.kl, weights.adv, weights.content, weights.style, weights.flow}) {
    if (!(w >= 0.0) || !std::isfinite(w)) fail("loss weights must be finite and >= 0");
  }
  if (model.flow && model.variant != Variant::v3) fail("the flow needs the CVAE branch (variant V3)");
  UNetConfig u = unet_config(*this);
  u.validate();
  const int down = 1 << (u.levels() - 1);
  if (hr_size % down != 0) fail("hr_size must be divisible by 2^(levels - 1)");
  if (model.lr_encoder_blocks < 0 || model.cvae_hidden < 1 || model.cvae_latent < 1) fail("bad conditioning widths");
  if (model.flow && (model.flow_levels < 1 || model.flow_steps < 1 || model.flow_hidden < 1)) fail("bad flow sizes");
  if (model.gan && (model.disc_channels < 1 || model.disc_blocks < 1)) fail("bad discriminator sizes");
}

std::string TrainConfig::signature() const {
  std::ostringstream os;
  os.precision(17);
  auto list = [&](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  const ModelConfig& m = model;
  os << "variant=" << to_string(m.variant) << "\ninner_channel=" << m.inner_channel
     << "\nchannel_multipliers=" << list(m.channel_multipliers) << "\nres_blocks=" << m.res_blocks
     << "\ndropout=" << m.dropout << "\nattention_levels=" << list(m.attention_levels) << "\nnum_heads=" << m.num_heads
     << "\ncontext_dim=" << m.context_dim << "\nlr_encoder_blocks=" << m.lr_encoder_blocks
     << "\nlayer_scale=" << m.layer_scale << "\ncvae_hidden=" << m.cvae_hidden << "\ncvae_latent=" << m.cvae_latent
     << "\nfusion_sigma=" << m.fusion_sigma << "\nflow=" << m.flow << "\nflow_levels=" << m.flow_levels
     << "\nflow_steps=" << m.flow_steps << "\nflow_hidden=" << m.flow_hidden << "\ngan=" << m.gan
     << "\ndisc_channels=" << m.disc_channels << "\ndisc_blocks=" << m.disc_blocks
     << "\npair_convention=" << to_string(m.pair_convention) << "\nT=" << diffusion.steps
     << "\nbeta_start=" << diffusion.beta_start << "\nbeta_end=" << diffusion.beta_end
     << "\nschedule=" << diffusion.schedule << "\nvariance=" << diffusion.variance
     << "\nresidual_scale=" << diffusion.residual_scale << "\nbase_lr=" << optim.base_lr << "\ndisc_lr=" << optim.disc_lr
     << "\nbeta1=" << optim.beta1 << "\nbeta2=" << optim.beta2 << "\neps=" << optim.eps
     << "\nweight_decay=" << optim.weight_decay << "\ngrad_clip=" << optim.grad_clip
     << "\nema_decay=" << optim.ema_decay << "\nema_warmup=" << optim.ema_warmup << "\nw_ddpm=" << weights.ddpm
     << "\nw_kl=" << weights.kl << "\nw_adv=" << weights.adv << "\nw_content=" << weights.content
     << "\nw_style=" << weights.style << "\nw_flow=" << weights.flow << "\ntap=" << tap.block << "," << tap.conv
     << "\nextractor_seed=" << extractor_seed << "\nextractor_weights=" << extractor_weights
     << "\nl1=" << (l1 == L1Mode::mean ? "mean" : "sum") << "\nhr_size=" << hr_size << "\nscale=" << scale
     << "\nchannels=" << channels << "\nbatch_size=" << batch_size << "\nseed=" << seed << '\n';
  return os.str();
}

std::array<std::uint8_t, 32> TrainConfig::hash() const {
  const std::string s = signature();
  std::array<std::uint8_t, 32> out{};
  unsigned int len = 0;
  if (!EVP_Digest(s.data(), s.size(), out.data(), &len, EVP_sha256(), nullptr) || len != 32) {
    throw std::runtime_error("SHA-256 failed");
  }
  return out;
}

std::string to_hex(const std::array<std::uint8_t, 32>& h) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : h) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

UNetConfig unet_config(const TrainConfig& cfg) {
  UNetConfig u;
  u.image_channels = cfg.channels;
  u.input_channels = 2 * cfg.channels;
  u.inner_channel = cfg.model.inner_channel;
  u.channel_multipliers = cfg.model.channel_multipliers;
  u.res_blocks = cfg.model.res_blocks;
  u.dropout = cfg.model.dropout;
  u.attention_levels = cfg.model.variant == Variant::v1 ? std::vector<int>{} : cfg.model.attention_levels;
  u.num_heads = cfg.model.num_heads;
  u.context_dim = cfg.model.context_dim;
  u.layer_scale = cfg.model.layer_scale;
  return u;
}

LddpmModel::LddpmModel(const TrainConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const UNetConfig u = unet_config(cfg);
  Rng r_unet(derive_seed(cfg.seed, 0x4e01));
  unet = UNet(u, r_unet);
  if (uses_attention()) {
    Rng r(derive_seed(cfg.seed, 0x4e02));
    lr_encoder = LrEncoder(cfg.channels, cfg.model.context_dim, cfg.model.lr_encoder_blocks, r);
  }
  if (uses_cvae()) {
    Rng r(derive_seed(cfg.seed, 0x4e03));
    CvaeConfig c;
    c.in_channels = 2 * cfg.channels;
    c.hidden = cfg.model.cvae_hidden;
    c.latent_channels = cfg.model.cvae_latent;
    c.downsamples = u.levels() - 1;
    c.feature_channels = u.bottleneck_channels();
    cvae = ConditionalVae(c, r);
    fusion = ConditionFusion(u.bottleneck_channels(), r, cfg.model.fusion_sigma);
  }
  if (cfg.model.flow) {
    Rng r(derive_seed(cfg.seed, 0x4e04));
    FlowConfig f;
    f.channels = u.bottleneck_channels();
    f.cond_channels = cfg.model.context_dim;
    f.levels = cfg.model.flow_levels;
    f.steps_per_level = cfg.model.flow_steps;
    f.hidden = cfg.model.flow_hidden;
    flow = ConditionalFlow(f, r);
    flow_mu = nn::Conv2d(u.bottleneck_channels(), u.bottleneck_channels(), 1, 1, 0, r);
    flow_log_sigma = nn::Conv2d(u.bottleneck_channels(), u.bottleneck_channels(), 1, 1, 0, r);
    flow_log_sigma.zero_init();
  }
  if (cfg.model.gan) {
    Rng r(derive_seed(cfg.seed, 0x4e05));
    disc = Discriminator({cfg.channels, cfg.model.disc_channels, cfg.model.disc_blocks}, r);
  }
}

LddpmModel::Output LddpmModel::forward(const Var& x_i, const std::vector<int>& steps, const Tensor& up,
                                       const Tensor& lr, bool posterior, Rng& rng, Rng* dropout_rng) const {
  if (x_i.shape() != up.shape()) throw ShapeError("forward: x_i and upsampled LR differ in shape");
  Output out;
  Var x_in = ag::concat({x_i, ag::constant(up)}, 1);
  Var tokens;
  if (uses_attention()) {
    lr_encoder.encode(ag::constant(lr), out.cond);
    tokens = out.cond.lr_tokens;
  }
  UNetEncoding enc = unet.encode(x_in, steps, tokens, dropout_rng);
  Var bottleneck = enc.features;
  if (uses_cvae()) {
    if (posterior) {
      GaussianParams p = cvae.encode(x_in);
      out.cond.z = reparameterize(p, ag::constant(rng.normal_tensor(p.mu.shape())));
      out.cond.posterior = p;
    } else {
      out.cond.z = ag::constant(rng.normal_tensor(cvae.latent_shape(x_i.dim(0), x_i.dim(2), x_i.dim(3))));
    }
    Var f_r = cvae.decode(out.cond.z);
    if (f_r.dim(2) != bottleneck.dim(2) || f_r.dim(3) != bottleneck.dim(3)) {
      f_r = match_grid(f_r, bottleneck.dim(2), bottleneck.dim(3));
    }
    FusionResult fused = fusion(f_r, enc.features);
    out.cond.f_r = f_r;
    out.cond.f_mu = fused.f_mu;
    out.cond.f_sigma = fused.f_sigma;
    bottleneck = fused.f_g;
  }
  out.cond.f_g = bottleneck;
  out.eps_hat = unet.decode(enc, bottleneck, tokens, dropout_rng);
  return out;
}

GaussianParams LddpmModel::flow_base(const Var& f_r) const {
  if (!cfg_.model.flow) throw std::logic_error("flow is disabled");
  return {flow_mu(f_r), ag::exp(flow_log_sigma(f_r))};
}

nn::ParamList LddpmModel::generator_parameters() const {
  nn::ParamList out;
  unet.collect("unet.", out);
  if (uses_attention()) lr_encoder.collect("lr_encoder.", out);
  if (uses_cvae()) {
    cvae.collect("cvae.", out);
    fusion.collect("fusion.", out);
  }
  if (cfg_.model.flow) {
    flow.collect("flow.", out);
    flow_mu.collect("flow_base.mu.", out);
    flow_log_sigma.collect("flow_base.log_sigma.", out);
  }
  return out;
}

nn::ParamList LddpmModel::discriminator_parameters() const {
  nn::ParamList out;
  if (cfg_.model.gan) disc.collect("disc.", out);
  return out;
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (total_steps <= 0) return base_lr;
  const double s = static_cast<double>(std::clamp<std::int64_t>(step, 0, total_steps));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * s / static_cast<double>(total_steps)));
}

double clip_grad_norm(const nn::ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.var.has_grad()) continue;
    for (float g : p.var.grad().values()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const auto s = static_cast<float>(max_norm / norm);
    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      auto& g = const_cast<Tensor&>(p.var.grad());
      for (float& v : g.values()) v *= s;
    }
  }
  return norm;
}

AdamW::AdamW(nn::ParamList params, const OptimConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape(), 0.0f);
    v_.emplace_back(p.var.shape(), 0.0f);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_)), c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var p = params_[k].var;
    if (!p.has_grad()) continue;
    const Tensor& g = p.grad();
    Tensor& w = p.mutable_value();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::int64_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double wi = w[i];
      wi -= lr * cfg_.weight_decay * wi;
      wi -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps);
      w[i] = static_cast<float>(wi);
    }
  }
}

void ema_update(const nn::ParamList& target, const nn::ParamList& source, double decay) {
  if (target.size() != source.size()) throw std::invalid_argument("EMA parameter lists differ");
  for (std::size_t k = 0; k < target.size(); ++k) {
    Var t = target[k].var;
    const Tensor& s = source[k].var.value();
    Tensor& e = t.mutable_value();
    if (e.shape() != s.shape()) throw ShapeError("EMA shape mismatch at " + target[k].name);
    for (std::int64_t i = 0; i < e.size(); ++i) {
      e[i] = static_cast<float>(decay * e[i] + (1.0 - decay) * s[i]);
    }
  }
}

double ema_decay_at(const OptimConfig& cfg, std::int64_t update) {
  if (!cfg.ema_warmup) return cfg.ema_decay;
  const double n = static_cast<double>(update);
  return std::min(cfg.ema_decay, (1.0 + n) / (10.0 + n));
}

Tensor pack_u64(std::uint64_t v) {
  Tensor t({4});
  for (int k = 0; k < 4; ++k) t[k] = static_cast<float>((v >> (16 * k)) & 0xffffu);
  return t;
}

std::uint64_t unpack_u64(const Tensor& t) {
  if (t.size() != 4) throw CheckpointError("packed integer record must hold 4 values");
  std::uint64_t v = 0;
  for (int k = 0; k < 4; ++k) {
    const float f = t[k];
    if (!(f >= 0.0f && f <= 65535.0f) || f != std::floor(f)) throw CheckpointError("bad packed integer record");
    v |= static_cast<std::uint64_t>(f) << (16 * k);
  }
  return v;
}

const Tensor* CheckpointFile::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.first == name) return &r.second;
  return nullptr;
}

namespace {

template <class T>
void put(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw CheckpointError(std::string("truncated checkpoint (") + what + ")");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& ckpt) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    os.write("LDPM", 4);
    put<std::uint32_t>(os, CheckpointFile::version);
    os.write(reinterpret_cast<const char*>(ckpt.config_hash.data()), 32);
    put<std::uint64_t>(os, ckpt.step);
    for (const auto& [name, t] : ckpt.records) {
      if (name.size() > 0xffff) throw CheckpointError("record name too long");
      put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
      for (int d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
      for (float f : t.values()) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        put<std::uint32_t>(os, u);
      }
    }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "LDPM", 4) != 0) throw CheckpointError("not a checkpoint: bad magic");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != CheckpointFile::version) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(CheckpointFile::version) + ")");
  }
  CheckpointFile ck;
  if (!is.read(reinterpret_cast<char*>(ck.config_hash.data()), 32)) throw CheckpointError("truncated checkpoint (hash)");
  ck.step = get<std::uint64_t>(is, "step");
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = get<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("truncated checkpoint (name)");
    const auto rank = get<std::uint8_t>(is, "rank");
    Shape shape(rank);
    std::int64_t numel = 1;
    for (int& d : shape) {
      d = static_cast<int>(get<std::uint32_t>(is, "dims"));
      if (d <= 0 || d > (1 << 26)) throw CheckpointError("corrupt record shape in " + name);
      numel *= d;
      if (numel > (std::int64_t{1} << 31)) throw CheckpointError("corrupt record size in " + name);
    }
    Tensor t(shape);
    for (float& f : t.values()) {
      const auto u = get<std::uint32_t>(is, name.c_str());
      std::memcpy(&f, &u, 4);
    }
    ck.records.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

namespace {

PerceptualExtractor make_extractor(const TrainConfig& cfg) {
  if (!cfg.extractor_weights.empty()) return PerceptualExtractor::load(cfg.extractor_weights);
  return PerceptualExtractor(cfg.extractor_seed);
}

std::string dump_terms(const LossTerms& t) {
  std::ostringstream os;
  auto one = [&](const char* n, const Var& v) {
    os << ' ' << n << '=';
    if (v.defined()) {
      os << v.item();
    } else {
      os << "unset";
    }
  };
  one("ddpm", t.ddpm);
  one("kl", t.kl);
  one("adv_g", t.adv_g);
  one("adv_d", t.adv_d);
  one("content", t.content);
  one("style", t.style);
  one("flow", t.flow);
  return os.str();
}

constexpr std::uint64_t kStepStream = 0x57e9;
constexpr std::uint64_t kDropoutStream = 0xd809;

}  // namespace

struct Trainer::Draw {
  std::vector<int> steps;
  Tensor eps;
  Tensor eps2;
};

namespace {

// Activations are freed and reallocated every step; keep them on the heap instead of
// returning them to the kernel.
void tune_allocator() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(cfg), sched_(cfg.diffusion.make()), extractor_(make_extractor(cfg)) {
  tune_allocator();
  cfg_.validate();
  if ((cfg.weights.content > 0.0 || cfg.weights.style > 0.0) && !extractor_.has_tap(cfg.tap)) {
    throw std::invalid_argument("perceptual extractor has no tap (" + std::to_string(cfg.tap.block) + "," +
                                std::to_string(cfg.tap.conv) + ")");
  }
  model_ = std::make_unique<LddpmModel>(cfg_);
  ema_ = std::make_unique<LddpmModel>(cfg_);
  nn::ParamList g = model_->generator_parameters();
  nn::copy_values(g, ema_->generator_parameters());
  nn::set_requires_grad(ema_->generator_parameters(), false);
  opt_g_ = AdamW(g, cfg_.optim);
  opt_d_ = AdamW(model_->discriminator_parameters(), cfg_.optim);
}

double Trainer::current_lr() const { return cosine_lr(step_, total_steps_, cfg_.optim.base_lr); }

Trainer::Draw Trainer::draw(const Tensor& hr, std::uint64_t seed) const {
  Rng rng(seed);
  Draw d;
  for (int n = 0; n < hr.dim(0); ++n) d.steps.push_back(rng.uniform_int(1, sched_.steps()));
  d.eps = rng.normal_tensor(hr.shape());
  d.eps2 = rng.normal_tensor(hr.shape());
  return d;
}

LossTerms Trainer::build_terms(const Tensor& hr, const Tensor& lr, const Draw& d, Rng& rng, Rng* dropout_rng,
                               DenoisePair* real_out, DenoisePair* fake_out) {
  if (hr.rank() != 4 || lr.rank() != 4 || hr.dim(0) != lr.dim(0) || hr.dim(1) != cfg_.channels ||
      lr.dim(1) != cfg_.channels || hr.dim(2) != lr.dim(2) * cfg_.scale || hr.dim(3) != lr.dim(3) * cfg_.scale) {
    throw ShapeError("train batch: hr " + shape_str(hr.shape()) + " and lr " + shape_str(lr.shape()) +
                     " do not match the configured scale and channels");
  }
  const Tensor up = bicubic_resize_batch(lr, hr.dim(2), hr.dim(3));
  const auto k = static_cast<float>(cfg_.diffusion.residual_scale);
  Tensor x0 = hr;
  for (std::int64_t i = 0; i < x0.size(); ++i) x0[i] = k * (x0[i] - up[i]);
  const Var x0_v = ag::constant(x0), eps_v = ag::constant(d.eps), up_v = ag::constant(up);
  const Var x_i = forward_sample(x0_v, d.steps, eps_v, sched_);

  LddpmModel::Output out = model_->forward(x_i, d.steps, up, lr, true, rng, dropout_rng);
  LossTerms terms;
  terms.ddpm = ddpm_loss(eps_v, out.eps_hat);
  if (out.cond.posterior) terms.kl = kl_to_standard_normal(*out.cond.posterior);

  const LossWeights& w = cfg_.weights;
  const bool perceptual = w.content > 0.0 || w.style > 0.0;
  if (cfg_.model.gan || perceptual) {
    const Var eps2_v = ag::constant(d.eps2);
    DenoisePair real = predict_pair(x0_v, eps_v, d.steps, eps2_v, sched_, cfg_.model.pair_convention);
    DenoisePair fake = predict_pair(x0_v, out.eps_hat, d.steps, eps2_v, sched_, cfg_.model.pair_convention);
    if (perceptual) {
      const Var xi = real.x_cur * (1.0f / k) + up_v, xi_hat = fake.x_cur * (1.0f / k) + up_v;
      if (w.content > 0.0) {
        const Var y_hat = ag::clamp(up_v + predict_x0(x_i, out.eps_hat, d.steps, sched_) * (1.0f / k), -1.0f, 1.0f);
        terms.content = content_loss(xi, xi_hat, ag::constant(hr), y_hat, extractor_, cfg_.tap, cfg_.l1);
      }
      if (w.style > 0.0) terms.style = style_loss(xi, xi_hat, extractor_, cfg_.tap);
    }
    if (real_out) *real_out = real;
    if (fake_out) *fake_out = fake;
  }
  if (cfg_.model.flow && w.flow > 0.0) {
    const Var fg = ag::detach(out.cond.f_g), cond = ag::detach(out.cond.lr_grid);
    if (!model_->flow.actnorm_initialized()) model_->flow.initialize_actnorm(fg, cond);
    terms.flow = flow_nll_per_dim(model_->flow, fg, cond, model_->flow_base(out.cond.f_r));
  }
  return terms;
}

LossTerms Trainer::generator_terms(const Tensor& hr, const Tensor& lr, std::uint64_t draw_seed) {
  const Draw d = draw(hr, draw_seed);
  Rng rng(derive_seed(draw_seed, 1));
  DenoisePair fake;
  LossTerms t = build_terms(hr, lr, d, rng, nullptr, nullptr, &fake);
  if (cfg_.model.gan) t.adv_g = generator_adv_loss(model_->disc.logits(fake));
  return t;
}

LossBreakdown Trainer::train_step(const Tensor& hr, const Tensor& lr) {
  const auto step_u = static_cast<std::uint64_t>(step_);
  const Draw d = draw(hr, derive_seed(cfg_.seed, kStepStream, step_u));
  Rng rng(derive_seed(cfg_.seed, kStepStream + 1, step_u));
  Rng dropout_rng(derive_seed(cfg_.seed, kDropoutStream, step_u));
  const nn::ParamList g = model_->generator_parameters();
  const nn::ParamList dp = model_->discriminator_parameters();
  nn::set_requires_grad(g, true);
  nn::set_requires_grad(dp, false);
  const double lr_g = current_lr();
  const double lr_d = cosine_lr(step_, total_steps_, cfg_.optim.disc_lr);

  DenoisePair real, fake;
  LossTerms terms = build_terms(hr, lr, d, rng, cfg_.model.dropout > 0.0f ? &dropout_rng : nullptr, &real, &fake);

  if (cfg_.model.gan) {
    const std::uint64_t g_before = nn::hash_parameters(g);
    nn::set_requires_grad(dp, true);
    nn::zero_grad(dp);
    DenoisePair fake_d{ag::detach(fake.x_prev), ag::detach(fake.x_cur), fake.steps};
    Var d_loss = discriminator_loss(model_->disc.logits(real), model_->disc.logits(fake_d));
    if (!std::isfinite(d_loss.item())) {
      terms.adv_d = d_loss;
      throw NonFiniteLossError("discriminator loss is not finite at step " + std::to_string(step_) + ":" +
                               dump_terms(terms));
    }
    ag::backward(d_loss);
    clip_grad_norm(dp, cfg_.optim.grad_clip);
    opt_d_.step(lr_d);
    nn::set_requires_grad(dp, false);
    if (nn::hash_parameters(g) != g_before) throw ParameterGuardError("discriminator update changed generator weights");
    terms.adv_d = ag::detach(d_loss);
    terms.adv_g = generator_adv_loss(model_->disc.logits(fake));
  }

  TotalLoss total;
  try {
    total = total_loss(terms, cfg_.weights);
  } catch (const NonFiniteLossError& e) {
    throw NonFiniteLossError(std::string(e.what()) + " at step " + std::to_string(step_) + ":" + dump_terms(terms));
  }
  const std::uint64_t d_before = nn::hash_parameters(dp);
  nn::zero_grad(g);
  ag::backward(total.total);
  clip_grad_norm(g, cfg_.optim.grad_clip);
  opt_g_.step(lr_g);
  if (nn::hash_parameters(dp) != d_before) throw ParameterGuardError("generator update changed discriminator weights");
  ema_update(ema_->generator_parameters(), g, ema_decay_at(cfg_.optim, step_));
  nn::zero_grad(g);
  nn::zero_grad(dp);
  ++step_;
  return total.breakdown;
}

void Trainer::save(const std::filesystem::path& path) const {
  CheckpointFile ck;
  ck.config_hash = cfg_.hash();
  ck.step = static_cast<std::uint64_t>(step_);
  auto add_params = [&](const std::string& prefix, const nn::ParamList& ps) {
    for (const auto& p : ps) ck.records.emplace_back(prefix + p.name, p.var.value());
  };
  add_params("model.", model_->generator_parameters());
  add_params("ema.", ema_->generator_parameters());
  add_params("", model_->discriminator_parameters());
  auto add_moments = [&](const std::string& prefix, const AdamW& opt) {
    for (std::size_t k = 0; k < opt.first_moments().size(); ++k) {
      ck.records.emplace_back(prefix + "m." + opt.parameters()[k].name, opt.first_moments()[k]);
      ck.records.emplace_back(prefix + "v." + opt.parameters()[k].name, opt.second_moments()[k]);
    }
  };
  add_moments("adam_g.", opt_g_);
  add_moments("adam_d.", opt_d_);
  ck.records.emplace_back("state.adam_g_steps", pack_u64(static_cast<std::uint64_t>(opt_g_.steps())));
  ck.records.emplace_back("state.adam_d_steps", pack_u64(static_cast<std::uint64_t>(opt_d_.steps())));
  ck.records.emplace_back("state.data_epoch", pack_u64(static_cast<std::uint64_t>(data_epoch)));
  ck.records.emplace_back("state.data_position", pack_u64(static_cast<std::uint64_t>(data_position)));
  ck.records.emplace_back("state.total_steps", pack_u64(static_cast<std::uint64_t>(total_steps_)));
  ck.records.emplace_back("state.seed", pack_u64(cfg_.seed));
  ck.records.emplace_back("state.actnorm", pack_u64(cfg_.model.flow && model_->flow.actnorm_initialized() ? 1 : 0));
  write_checkpoint(path, ck);
}

void Trainer::load(const std::filesystem::path& path, bool force) {
  const CheckpointFile ck = read_checkpoint(path);
  if (ck.config_hash != cfg_.hash() && !force) {
    throw CheckpointError("checkpoint config hash " + to_hex(ck.config_hash) + " does not match this configuration (" +
                          to_hex(cfg_.hash()) + "); pass --force to load anyway");
  }
  auto need = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    const Tensor* t = ck.find(name);
    if (!t) throw CheckpointError("checkpoint lacks record " + name);
    if (t->shape() != shape) {
      throw CheckpointError("record " + name + " has shape " + shape_str(t->shape()) + ", expected " + shape_str(shape));
    }
    return *t;
  };
  auto load_params = [&](const std::string& prefix, const nn::ParamList& ps) {
    for (const auto& p : ps) {
      Var v = p.var;
      v.mutable_value() = need(prefix + p.name, v.shape());
    }
  };
  load_params("model.", model_->generator_parameters());
  load_params("ema.", ema_->generator_parameters());
  load_params("", model_->discriminator_parameters());
  auto load_moments = [&](const std::string& prefix, AdamW& opt) {
    for (std::size_t k = 0; k < opt.first_moments().size(); ++k) {
      const std::string& n = opt.parameters()[k].name;
      opt.first_moments()[k] = need(prefix + "m." + n, opt.first_moments()[k].shape());
      opt.second_moments()[k] = need(prefix + "v." + n, opt.second_moments()[k].shape());
    }
  };
  load_moments("adam_g.", opt_g_);
  load_moments("adam_d.", opt_d_);
  auto scalar = [&](const std::string& name) { return unpack_u64(need(name, {4})); };
  opt_g_.set_steps(static_cast<std::int64_t>(scalar("state.adam_g_steps")));
  opt_d_.set_steps(static_cast<std::int64_t>(scalar("state.adam_d_steps")));
  data_epoch = static_cast<int>(scalar("state.data_epoch"));
  data_position = static_cast<std::int64_t>(scalar("state.data_position"));
  total_steps_ = static_cast<std::int64_t>(scalar("state.total_steps"));
  if (cfg_.model.flow) {
    const bool init = scalar("state.actnorm") != 0;
    model_->flow.set_actnorm_initialized(init);
    ema_->flow.set_actnorm_initialized(init);
  }
  step_ = static_cast<std::int64_t>(ck.step);
}

std::vector<int> strided_steps(int T, int count) {
  if (T < 1 || count < 1) throw std::invalid_argument("strided_steps needs T >= 1 and count >= 1");
  count = std::min(count, T);
  std::vector<int> out;
  if (count == 1) return {1};
  for (int k = count - 1; k >= 0; --k) {
    out.push_back(1 + static_cast<int>(std::lround(static_cast<double>(k) * (T - 1) / (count - 1))));
  }
  return out;
}

void check_subset(const std::vector<int>& subset, int T) {
  if (subset.empty()) throw std::invalid_argument("sampling step subset is empty");
  if (subset.back() != 1) throw std::invalid_argument("sampling step subset must end at 1");
  for (std::size_t k = 0; k < subset.size(); ++k) {
    if (subset[k] < 1 || subset[k] > T) throw std::invalid_argument("sampling step outside [1, T]");
    if (k && subset[k] >= subset[k - 1]) throw std::invalid_argument("sampling steps must be strictly decreasing");
  }
}

Tensor sample(const LddpmModel& model, const NoiseSchedule& sched, const Tensor& lr, const std::vector<int>& subset,
              std::uint64_t seed) {
  check_subset(subset, sched.steps());
  const TrainConfig& cfg = model.config();
  if (lr.rank() != 4 || lr.dim(1) != cfg.channels) throw ShapeError("sample expects LR [N, C, h, w]");
  const int n = lr.dim(0), c = lr.dim(1), h = lr.dim(2) * cfg.scale, w = lr.dim(3) * cfg.scale;
  const Tensor up = bicubic_resize_batch(lr, h, w);
  const NoiseSchedule sub = sched.respaced(subset);
  Rng rng(seed);
  Tensor x = rng.normal_tensor({n, c, h, w});
  const int len = static_cast<int>(subset.size());
  for (int k = 0; k < len; ++k) {
    const int j = len - k;
    const std::vector<int> steps(static_cast<std::size_t>(n), subset[static_cast<std::size_t>(k)]);
    const Tensor eps_hat = model.forward(ag::constant(x), steps, up, lr, false, rng, nullptr).eps_hat.value();
    const Tensor z = j > 1 ? rng.normal_tensor(x.shape()) : Tensor(x.shape(), 0.0f);
    x = reverse_step(x, eps_hat, StepIndex(j), z, sub);
  }
  const auto inv = static_cast<float>(1.0 / cfg.diffusion.residual_scale);
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = (std::clamp(up[i] + inv * x[i], -1.0f, 1.0f) + 1.0f) * 0.5f;
  return out;
}

}  // namespace lddpm
