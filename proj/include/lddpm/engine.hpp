#pragma once

// Training and sampling: the full conditional denoiser, AdamW with global-norm
// clipping, EMA weights, cosine learning-rate decay, checkpoints, and the
// strided reverse chain.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lddpm/adversarial.hpp"
#include "lddpm/conditioning.hpp"
#include "lddpm/flow.hpp"
#include "lddpm/objectives.hpp"
#include "lddpm/schedule.hpp"
#include "lddpm/unet.hpp"

namespace lddpm {

/// V1 stacks the upsampled LR image with the noisy input; V2 adds LR cross-attention;
/// V3 adds the CVAE bottleneck modulation.
enum class Variant { v1, v2, v3 };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::v3;
  int inner_channel = 32;
  std::vector<int> channel_multipliers{1, 2, 4};
  int res_blocks = 1;
  float dropout = 0.0f;
  std::vector<int> attention_levels{1, 2};
  int num_heads = 4;
  int context_dim = 64;
  int lr_encoder_blocks = 2;
  float layer_scale = 1e-6f;
  int cvae_hidden = 32;
  int cvae_latent = 4;
  float fusion_sigma = 0.1f;
  bool flow = false;
  int flow_levels = 2;
  int flow_steps = 4;
  int flow_hidden = 64;
  bool gan = false;
  int disc_channels = 32;
  int disc_blocks = 3;
  PairConvention pair_convention = PairConvention::as_printed;
};

struct DiffusionConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::string schedule = "linear";  ///< linear | cosine
  std::string variance = "beta";    ///< beta | posterior
  /// The chain runs on x0 = residual_scale * (HR - bicubic_up(LR)).
  double residual_scale = 1.0;

  NoiseSchedule make() const;
};

struct OptimConfig {
  double base_lr = 1e-4;
  double disc_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double ema_decay = 0.9999;
  /// Use min(decay, (1 + n) / (10 + n)) at update n.
  bool ema_warmup = false;
};

struct TrainConfig {
  ModelConfig model;
  DiffusionConfig diffusion;
  OptimConfig optim;
  LossWeights weights;
  Tap tap;
  std::uint64_t extractor_seed = 0;
  std::string extractor_weights;  ///< optional weight file; empty uses the seeded random pyramid
  L1Mode l1 = L1Mode::mean;
  int hr_size = 32;
  int scale = 2;
  int channels = 3;
  int batch_size = 8;
  std::uint64_t seed = 0;

  int lr_size() const { return hr_size / scale; }
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  /// Canonical text of every setting that shapes parameters or the training trajectory.
  std::string signature() const;
  std::array<std::uint8_t, 32> hash() const;
};

UNetConfig unet_config(const TrainConfig& cfg);

/// All trainable modules. Construction is deterministic in cfg.seed.
class LddpmModel {
 public:
  explicit LddpmModel(const TrainConfig& cfg);

  struct Output {
    Var eps_hat;
    ConditionBundle cond;
  };

  /// `posterior` runs the CVAE encoder on (x_i, up) and samples z with `delta`;
  /// otherwise z is drawn from N(0, I) with `rng`. `up` is the bicubic-upsampled LR.
  Output forward(const Var& x_i, const std::vector<int>& steps, const Tensor& up, const Tensor& lr, bool posterior,
                 Rng& rng, Rng* dropout_rng) const;

  GaussianParams flow_base(const Var& f_r) const;

  nn::ParamList generator_parameters() const;
  nn::ParamList discriminator_parameters() const;

  const TrainConfig& config() const { return cfg_; }
  bool uses_attention() const { return cfg_.model.variant != Variant::v1; }
  bool uses_cvae() const { return cfg_.model.variant == Variant::v3; }

  UNet unet;
  LrEncoder lr_encoder;
  ConditionalVae cvae;
  ConditionFusion fusion;
  ConditionalFlow flow;
  nn::Conv2d flow_mu;
  nn::Conv2d flow_log_sigma;
  Discriminator disc;

 private:
  TrainConfig cfg_;
};

/// base_lr * (1 + cos(pi * step / total)) / 2.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr);

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
double clip_grad_norm(const nn::ParamList& params, double max_norm);

/// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW() = default;
  AdamW(nn::ParamList params, const OptimConfig& cfg);
  void step(double lr);
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  const nn::ParamList& parameters() const { return params_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  nn::ParamList params_;
  std::vector<Tensor> m_, v_;
  OptimConfig cfg_;
  std::int64_t t_ = 0;
};

/// target = d target + (1 - d) source, parameter by parameter.
void ema_update(const nn::ParamList& target, const nn::ParamList& source, double decay);
double ema_decay_at(const OptimConfig& cfg, std::int64_t update);

class ParameterGuardError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointFile {
  static constexpr std::uint32_t version = 1;
  std::array<std::uint8_t, 32> config_hash{};
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> records;

  const Tensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& ckpt);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

/// u64 <-> four float32 values holding 16 bits each (exact in single precision).
Tensor pack_u64(std::uint64_t v);
std::uint64_t unpack_u64(const Tensor& t);

std::string to_hex(const std::array<std::uint8_t, 32>& h);

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  /// One discriminator update (when the GAN is on) then one generator update on
  /// the batch, then the EMA update. `hr` [N, C, H, W], `lr` [N, C, H/s, W/s], both in [-1, 1].
  LossBreakdown train_step(const Tensor& hr, const Tensor& lr);

  std::int64_t step() const { return step_; }
  /// Length of the cosine schedule; 0 keeps the base rate.
  void set_total_steps(std::int64_t n) { total_steps_ = n; }
  std::int64_t total_steps() const { return total_steps_; }
  double current_lr() const;

  /// Data stream position stored alongside the weights.
  int data_epoch = 0;
  std::int64_t data_position = 0;

  void save(const std::filesystem::path& path) const;
  /// Throws CheckpointError on corruption, version or config-hash mismatch (unless `force`).
  void load(const std::filesystem::path& path, bool force = false);

  const LddpmModel& model() const { return *model_; }
  LddpmModel& model() { return *model_; }
  const LddpmModel& ema_model() const { return *ema_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const TrainConfig& config() const { return cfg_; }
  const PerceptualExtractor& extractor() const { return extractor_; }

  /// Generator loss terms for a fixed draw; used by gradient checks. No parameter update.
  LossTerms generator_terms(const Tensor& hr, const Tensor& lr, std::uint64_t draw_seed);

 private:
  struct Draw;
  Draw draw(const Tensor& hr, std::uint64_t seed) const;
  LossTerms build_terms(const Tensor& hr, const Tensor& lr, const Draw& d, Rng& rng, Rng* dropout_rng,
                        DenoisePair* real_out, DenoisePair* fake_out);

  TrainConfig cfg_;
  NoiseSchedule sched_;
  PerceptualExtractor extractor_;
  std::unique_ptr<LddpmModel> model_;
  std::unique_ptr<LddpmModel> ema_;
  AdamW opt_g_;
  AdamW opt_d_;
  std::int64_t step_ = 0;
  std::int64_t total_steps_ = 0;
};

/// `count` steps spread evenly over [T..1], strictly decreasing and ending at 1.
std::vector<int> strided_steps(int T, int count);
/// Throws std::invalid_argument unless strictly decreasing within [1, T] and ending at 1.
void check_subset(const std::vector<int>& subset, int T);

/// Reverse chain from x_T ~ N(0, I) over `subset` with `model` (normally the EMA copy).
/// `lr` [N, C, h, w] in [-1, 1]; returns [N, C, s h, s w] in [0, 1].
Tensor sample(const LddpmModel& model, const NoiseSchedule& sched, const Tensor& lr, const std::vector<int>& subset,
              std::uint64_t seed);

}  // namespace lddpm
