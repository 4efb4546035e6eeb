#include "lddpm/cli_config.hpp"

#include <cblas.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "lddpm/image_io.hpp"

namespace lddpm {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(float v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

template <class T>
std::string fmt_int(T v) {
  return std::to_string(v);
}

std::string fmt(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::map<std::string, std::string> defaults() {
  const TrainConfig t;
  const ModelConfig& m = t.model;
  const DatasetOptions d;
  const RealisticRanges r;
  const EvalOptions e;
  return {
      {"seed", "0"},
      {"deterministic", "false"},
      {"out", "run"},

      {"model.variant", to_string(m.variant)},
      {"model.inner_channel", fmt_int(m.inner_channel)},
      {"model.channel_multipliers", fmt(m.channel_multipliers)},
      {"model.res_blocks", fmt_int(m.res_blocks)},
      {"model.dropout", fmt(m.dropout)},
      {"model.attention_levels", fmt(m.attention_levels)},
      {"model.num_heads", fmt_int(m.num_heads)},
      {"model.context_dim", fmt_int(m.context_dim)},
      {"model.lr_encoder_blocks", fmt_int(m.lr_encoder_blocks)},
      {"model.layer_scale", fmt(m.layer_scale)},
      {"model.cvae_hidden", fmt_int(m.cvae_hidden)},
      {"model.cvae_latent", fmt_int(m.cvae_latent)},
      {"model.fusion_sigma", fmt(m.fusion_sigma)},
      {"model.flow", fmt(m.flow)},
      {"model.flow_levels", fmt_int(m.flow_levels)},
      {"model.flow_steps", fmt_int(m.flow_steps)},
      {"model.flow_hidden", fmt_int(m.flow_hidden)},
      {"model.gan", fmt(m.gan)},
      {"model.disc_channels", fmt_int(m.disc_channels)},
      {"model.disc_blocks", fmt_int(m.disc_blocks)},
      {"model.pair_index_convention", to_string(m.pair_convention)},

      {"diffusion.steps", fmt_int(t.diffusion.steps)},
      {"diffusion.beta_start", fmt(t.diffusion.beta_start)},
      {"diffusion.beta_end", fmt(t.diffusion.beta_end)},
      {"diffusion.schedule", t.diffusion.schedule},
      {"diffusion.variance", t.diffusion.variance},
      {"diffusion.residual_scale", fmt(t.diffusion.residual_scale)},

      {"optim.base_lr", fmt(t.optim.base_lr)},
      {"optim.disc_lr", fmt(t.optim.disc_lr)},
      {"optim.beta1", fmt(t.optim.beta1)},
      {"optim.beta2", fmt(t.optim.beta2)},
      {"optim.eps", fmt(t.optim.eps)},
      {"optim.weight_decay", fmt(t.optim.weight_decay)},
      {"optim.grad_clip", fmt(t.optim.grad_clip)},
      {"optim.ema_decay", fmt(t.optim.ema_decay)},
      {"optim.ema_warmup", fmt(t.optim.ema_warmup)},

      {"loss.ddpm", fmt(t.weights.ddpm)},
      {"loss.kl", fmt(t.weights.kl)},
      {"loss.adv", fmt(t.weights.adv)},
      {"loss.content", fmt(t.weights.content)},
      {"loss.style", fmt(t.weights.style)},
      {"loss.flow", fmt(t.weights.flow)},
      {"loss.tap", fmt(std::vector<int>{t.tap.block, t.tap.conv})},
      {"loss.extractor_seed", fmt_int(t.extractor_seed)},
      {"loss.extractor_weights", t.extractor_weights},
      {"loss.l1", t.l1 == L1Mode::mean ? "mean" : "sum"},

      {"train.hr_size", fmt_int(t.hr_size)},
      {"train.scale", fmt_int(t.scale)},
      {"train.channels", fmt_int(t.channels)},
      {"train.batch_size", fmt_int(t.batch_size)},
      {"train.epochs", "1"},
      {"train.max_steps", "0"},
      {"train.checkpoint_every", "500"},
      {"train.log_every", "50"},
      {"train.resume", ""},

      {"data.dir", ""},
      {"data.synthetic", "16"},
      {"data.synthetic_seed", "0"},
      {"data.profile", to_string(d.profile)},
      {"data.crops_per_image", fmt_int(d.crops_per_image)},
      {"data.augment", fmt(d.augment)},
      {"data.kernel_min", fmt_int(r.kernel_min)},
      {"data.kernel_max", fmt_int(r.kernel_max)},
      {"data.blur_sigma_min", fmt(r.sigma_min)},
      {"data.blur_sigma_max", fmt(r.sigma_max)},
      {"data.noise_max", fmt(r.noise_max)},
      {"data.noise_prob", fmt(r.noise_prob)},
      {"data.jpeg_min", fmt_int(r.jpeg_min)},
      {"data.jpeg_max", fmt_int(r.jpeg_max)},
      {"data.jpeg_prob", fmt(r.jpeg_prob)},

      {"sample.checkpoint", ""},
      {"sample.lr_dir", ""},
      {"sample.steps", "0"},

      {"eval.pred_dir", ""},
      {"eval.ref_dir", ""},
      {"eval.y_only", fmt(e.y_only)},
      {"eval.histogram", fmt(e.histogram)},
      {"eval.psnr_cap", fmt(e.cap)},

      {"degrade.hr_dir", ""},
      {"degrade.profile", to_string(d.profile)},
      {"degrade.scale", fmt_int(d.scale)},

      {"synth.count", "16"},
      {"synth.size", "32"},
  };
}

std::vector<fs::path> png_files(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

void require_dir(const RunConfig& cfg, const std::string& key) {
  const std::string& p = cfg.get(key);
  if (p.empty()) throw ConfigError(key + " is not set");
  if (!fs::is_directory(p)) throw ConfigError(key + " = " + p + " is not a directory");
}

// Largest top-left crop whose sides are multiples of `scale`.
Tensor modcrop(const Tensor& img, int scale) {
  const int c = img.dim(0), h = img.dim(1) / scale * scale, w = img.dim(2) / scale * scale;
  if (h == img.dim(1) && w == img.dim(2)) return img;
  Tensor out({c, h, w});
  const int iw = img.dim(2), ih = img.dim(1);
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        out[(static_cast<std::int64_t>(k) * h + y) * w + x] = img[(static_cast<std::int64_t>(k) * ih + y) * iw + x];
      }
  return out;
}

constexpr const char* kLossHeader = "step,ddpm,kl,adv_g,adv_d,content,style,flow,total,lr";

std::string loss_row(std::int64_t step, const LossBreakdown& b, double lr) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(step),
                b.ddpm, b.kl, b.adv_g, b.adv_d, b.content, b.style, b.flow_nll, b.total, lr);
  return buf;
}

// Keeps the header and rows up to `step` so a resumed run appends where its checkpoint left off.
void truncate_loss_csv(const fs::path& path, std::int64_t step) {
  std::ifstream is(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(is, line)) {
    if (keep.empty()) {
      keep.push_back(line);
      continue;
    }
    if (std::stoll(line.substr(0, line.find(','))) <= step) keep.push_back(line);
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : keep) os << l << '\n';
}

}  // namespace

RunConfig::RunConfig() : values_(defaults()) {}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  cfg.merge_text(ss.str(), path.string());
  return cfg;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    try {
      set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> k;
  for (const auto& [key, v] : values_) k.push_back(key);
  return k;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& s = get(key);
  std::int64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& s = get(key);
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + s + "'");
  }
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& s = get(key);
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  const std::string& s = get(key);
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    int v = 0;
    const auto r = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || r.ec != std::errc() || r.ptr != item.data() + item.size()) {
      throw ConfigError(key + ": expected a comma-separated integer list, got '" + s + "'");
    }
    out.push_back(v);
  }
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  auto to_int = [&](const std::string& k) {
    const std::int64_t v = get_int(k);
    if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(k + " out of range");
    return static_cast<int>(v);
  };
  try {
    ModelConfig& m = t.model;
    m.variant = parse_variant(get("model.variant"));
    m.inner_channel = to_int("model.inner_channel");
    m.channel_multipliers = get_int_list("model.channel_multipliers");
    m.res_blocks = to_int("model.res_blocks");
    m.dropout = static_cast<float>(get_double("model.dropout"));
    m.attention_levels = get_int_list("model.attention_levels");
    m.num_heads = to_int("model.num_heads");
    m.context_dim = to_int("model.context_dim");
    m.lr_encoder_blocks = to_int("model.lr_encoder_blocks");
    m.layer_scale = static_cast<float>(get_double("model.layer_scale"));
    m.cvae_hidden = to_int("model.cvae_hidden");
    m.cvae_latent = to_int("model.cvae_latent");
    m.fusion_sigma = static_cast<float>(get_double("model.fusion_sigma"));
    m.flow = get_bool("model.flow");
    m.flow_levels = to_int("model.flow_levels");
    m.flow_steps = to_int("model.flow_steps");
    m.flow_hidden = to_int("model.flow_hidden");
    m.gan = get_bool("model.gan");
    m.disc_channels = to_int("model.disc_channels");
    m.disc_blocks = to_int("model.disc_blocks");
    m.pair_convention = parse_pair_convention(get("model.pair_index_convention"));

    t.diffusion.steps = to_int("diffusion.steps");
    t.diffusion.beta_start = get_double("diffusion.beta_start");
    t.diffusion.beta_end = get_double("diffusion.beta_end");
    t.diffusion.schedule = get("diffusion.schedule");
    t.diffusion.variance = get("diffusion.variance");
    t.diffusion.residual_scale = get_double("diffusion.residual_scale");

    t.optim.base_lr = get_double("optim.base_lr");
    t.optim.disc_lr = get_double("optim.disc_lr");
    t.optim.beta1 = get_double("optim.beta1");
    t.optim.beta2 = get_double("optim.beta2");
    t.optim.eps = get_double("optim.eps");
    t.optim.weight_decay = get_double("optim.weight_decay");
    t.optim.grad_clip = get_double("optim.grad_clip");
    t.optim.ema_decay = get_double("optim.ema_decay");
    t.optim.ema_warmup = get_bool("optim.ema_warmup");

    t.weights.ddpm = get_double("loss.ddpm");
    t.weights.kl = get_double("loss.kl");
    t.weights.adv = get_double("loss.adv");
    t.weights.content = get_double("loss.content");
    t.weights.style = get_double("loss.style");
    t.weights.flow = get_double("loss.flow");
    const std::vector<int> tap = get_int_list("loss.tap");
    if (tap.size() != 2) throw ConfigError("loss.tap: expected 'block,conv'");
    t.tap = {tap[0], tap[1]};
    t.extractor_seed = get_u64("loss.extractor_seed");
    t.extractor_weights = get("loss.extractor_weights");
    const std::string& l1 = get("loss.l1");
    if (l1 != "mean" && l1 != "sum") throw ConfigError("loss.l1: expected mean or sum");
    t.l1 = l1 == "mean" ? L1Mode::mean : L1Mode::sum;

    t.hr_size = to_int("train.hr_size");
    t.scale = to_int("train.scale");
    t.channels = to_int("train.channels");
    t.batch_size = to_int("train.batch_size");
    t.seed = get_u64("seed");
    t.validate();
    t.diffusion.make();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return t;
}

RealisticRanges RunConfig::realistic_ranges() const {
  RealisticRanges r;
  r.kernel_min = static_cast<int>(get_int("data.kernel_min"));
  r.kernel_max = static_cast<int>(get_int("data.kernel_max"));
  r.sigma_min = get_double("data.blur_sigma_min");
  r.sigma_max = get_double("data.blur_sigma_max");
  r.noise_max = get_double("data.noise_max");
  r.noise_prob = get_double("data.noise_prob");
  r.jpeg_min = static_cast<int>(get_int("data.jpeg_min"));
  r.jpeg_max = static_cast<int>(get_int("data.jpeg_max"));
  r.jpeg_prob = get_double("data.jpeg_prob");
  if (r.kernel_min < 3 || r.kernel_max < r.kernel_min) throw ConfigError("data.kernel_min/max out of range");
  if (r.sigma_min <= 0.0 || r.sigma_max < r.sigma_min) throw ConfigError("data.blur_sigma_min/max out of range");
  if (r.noise_max < 0.0) throw ConfigError("data.noise_max must be non-negative");
  if (r.jpeg_min < 10 || r.jpeg_max > 100 || r.jpeg_max < r.jpeg_min) throw ConfigError("data.jpeg_min/max out of range");
  for (double p : {r.noise_prob, r.jpeg_prob}) {
    if (p < 0.0 || p > 1.0) throw ConfigError("data probabilities must lie in [0, 1]");
  }
  return r;
}

DatasetOptions RunConfig::dataset_options() const {
  DatasetOptions o;
  o.patch_size = static_cast<int>(get_int("train.hr_size"));
  o.scale = static_cast<int>(get_int("train.scale"));
  o.channels = static_cast<int>(get_int("train.channels"));
  o.crops_per_image = static_cast<int>(get_int("data.crops_per_image"));
  if (o.crops_per_image < 1) throw ConfigError("data.crops_per_image must be positive");
  o.augment = get_bool("data.augment");
  o.seed = derive_seed(get_u64("seed"), 0xda7a);
  try {
    o.profile = parse_profile(get("data.profile"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  o.ranges = realistic_ranges();
  return o;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions e;
  e.y_only = get_bool("eval.y_only");
  e.histogram = get_bool("eval.histogram");
  e.cap = get_double("eval.psnr_cap");
  if (e.cap <= 0.0) throw ConfigError("eval.psnr_cap must be positive");
  return e;
}

void echo_config(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  std::ofstream os(out / "config.resolved", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + (out / "config.resolved").string());
  os << cfg.to_text();
}

void apply_runtime_mode(const RunConfig& cfg) {
  if (cfg.get_bool("deterministic")) openblas_set_num_threads(1);
}

Tensor synthetic_image(std::uint64_t base_seed, int k, int size, int channels) {
  return synthetic_texture(derive_seed(base_seed, 0x7e47, static_cast<std::uint64_t>(k)), size, channels);
}

int cmd_train(const RunConfig& cfg, bool force, std::ostream& log) {
  TrainConfig tc;
  DatasetOptions dopt;
  fs::path out, resume;
  std::int64_t epochs = 0, max_steps = 0, ckpt_every = 0, log_every = 0;
  std::unique_ptr<DatasetIterator> data;
  try {
    tc = cfg.train_config();
    dopt = cfg.dataset_options();
    out = cfg.get("out");
    resume = cfg.get("train.resume");
    epochs = cfg.get_int("train.epochs");
    max_steps = cfg.get_int("train.max_steps");
    ckpt_every = cfg.get_int("train.checkpoint_every");
    log_every = cfg.get_int("train.log_every");
    if (epochs < 0 || max_steps < 0 || ckpt_every < 0 || log_every < 0) {
      throw ConfigError("train.epochs, max_steps, checkpoint_every and log_every must be non-negative");
    }
    apply_runtime_mode(cfg);
    echo_config(cfg, out);
    if (epochs == 0) {
      log << "epochs = 0, nothing to train\n";
      return kExitOk;
    }
    const std::string& dir = cfg.get("data.dir");
    if (!dir.empty()) {
      if (!fs::is_directory(dir)) throw ConfigError("dataset directory '" + dir + "' does not exist");
      data = std::make_unique<DatasetIterator>(fs::path(dir), dopt);
    } else {
      const std::int64_t n = cfg.get_int("data.synthetic");
      if (n < 1) throw ConfigError("data.dir is empty and data.synthetic < 1: no training data");
      std::vector<Tensor> imgs;
      std::vector<std::string> names;
      const std::uint64_t s = cfg.get_u64("data.synthetic_seed");
      for (int k = 0; k < n; ++k) {
        imgs.push_back(synthetic_image(s, k, tc.hr_size, tc.channels));
        names.push_back("synthetic_" + std::to_string(k));
      }
      data = std::make_unique<DatasetIterator>(std::move(imgs), std::move(names), dopt);
    }
    if (!resume.empty() && !fs::exists(resume)) throw ConfigError("resume checkpoint " + resume.string() + " not found");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    Trainer trainer(tc);
    const std::int64_t per_epoch = std::max<std::int64_t>(1, data->epoch_length() / tc.batch_size);
    const std::int64_t total = epochs * per_epoch;
    const fs::path csv = out / "loss.csv";
    const fs::path ckpt = out / "checkpoint.ckpt";
    if (!resume.empty()) {
      try {
        trainer.load(resume, force);
      } catch (const CheckpointError& e) {
        std::cerr << "cannot resume: " << e.what() << '\n';
        return kExitUsage;
      }
      data->seek(trainer.data_epoch, trainer.data_position);
      log << "resumed at step " << trainer.step() << '\n';
    }
    trainer.set_total_steps(total);
    if (trainer.step() > 0 && fs::exists(csv)) {
      truncate_loss_csv(csv, trainer.step());
    } else {
      std::ofstream(csv, std::ios::trunc) << kLossHeader << '\n';
    }
    std::ofstream loss(csv, std::ios::app);
    const std::int64_t stop = max_steps > 0 ? std::min(max_steps, total) : total;
    log << "training " << to_string(tc.model.variant) << ", "
        << nn::count_parameters(trainer.model().generator_parameters()) << " generator parameters, steps "
        << trainer.step() << ".." << stop << " of " << total << '\n';
    const auto t0 = std::chrono::steady_clock::now();
    while (trainer.step() < stop) {
      auto [hr, lr] = data->next_batch(tc.batch_size);
      const double rate = trainer.current_lr();
      const LossBreakdown b = trainer.train_step(hr, lr);
      trainer.data_epoch = data->epoch();
      trainer.data_position = data->position();
      loss << loss_row(trainer.step(), b, rate) << '\n';
      if (log_every > 0 && trainer.step() % log_every == 0) {
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << "step " << trainer.step() << " ddpm " << b.ddpm << " total " << b.total << " lr " << rate << " ("
            << sec << " s)\n";
      }
      if (ckpt_every > 0 && trainer.step() % ckpt_every == 0) {
        loss.flush();
        trainer.save(ckpt);
      }
    }
    loss.flush();
    trainer.save(ckpt);
    log << "saved " << ckpt.string() << " at step " << trainer.step() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "training failed: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_sample(const RunConfig& cfg, bool force, std::ostream& log) {
  TrainConfig tc;
  fs::path out, ckpt, lr_dir;
  std::int64_t steps = 0;
  std::uint64_t seed = 0;
  std::unique_ptr<Trainer> trainer;
  try {
    tc = cfg.train_config();
    out = cfg.get("out");
    ckpt = cfg.get("sample.checkpoint");
    lr_dir = cfg.get("sample.lr_dir");
    steps = cfg.get_int("sample.steps");
    seed = cfg.get_u64("seed");
    if (ckpt.empty()) throw ConfigError("sample.checkpoint is not set");
    require_dir(cfg, "sample.lr_dir");
    if (steps < 0 || steps > tc.diffusion.steps) throw ConfigError("sample.steps must lie in [0, diffusion.steps]");
    apply_runtime_mode(cfg);
    echo_config(cfg, out);
    trainer = std::make_unique<Trainer>(tc);
    trainer->load(ckpt, force);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "cannot load checkpoint: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    const int T = tc.diffusion.steps;
    const std::vector<int> subset = strided_steps(T, steps == 0 ? T : static_cast<int>(steps));
    const auto files = png_files(lr_dir);
    if (files.empty()) {
      std::cerr << "no png files under " << lr_dir.string() << '\n';
      return kExitUsage;
    }
    for (std::size_t k = 0; k < files.size(); ++k) {
      const Tensor img = read_png(lr_dir / files[k], tc.channels);
      const Tensor lr = unit_to_signed(img).reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor hr = sample(trainer->ema_model(), trainer->schedule(), lr, subset,
                               derive_seed(seed, 0x5a3b, static_cast<std::uint64_t>(k)));
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const fs::path dst = out / files[k];
      fs::create_directories(dst.parent_path());
      write_png(dst, hr.reshaped({hr.dim(1), hr.dim(2), hr.dim(3)}));
      log << "time\t" << files[k].string() << "\t" << subset.size() << " steps\t" << sec << " s\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "sampling failed: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& log) {
  fs::path out;
  EvalOptions opts;
  try {
    out = cfg.get("out");
    opts = cfg.eval_options();
    require_dir(cfg, "eval.pred_dir");
    require_dir(cfg, "eval.ref_dir");
    apply_runtime_mode(cfg);
    echo_config(cfg, out);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  }
  MetricReport r;
  try {
    r = evaluate_dirs(cfg.get("eval.pred_dir"), cfg.get("eval.ref_dir"), opts);
  } catch (const UnmatchedFilesError& e) {
    std::cerr << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    // Empty directories and unreadable images are input problems.
    std::cerr << "eval failed: " << e.what() << '\n';
    return kExitUsage;
  }
  try {
    const std::string text = format_report(r);
    std::ofstream(out / "report.txt", std::ios::trunc) << text;
    write_report_tsv(out / "metrics.tsv", r);
    if (r.histogram) write_histogram_csv(out / "histogram.csv", *r.histogram);
    log << text;
  } catch (const std::exception& e) {
    std::cerr << "cannot write report: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_degrade(const RunConfig& cfg, std::ostream& log) {
  fs::path out, hr_dir;
  Profile profile = Profile::clean;
  int scale = 2;
  RealisticRanges ranges;
  std::uint64_t seed = 0;
  int channels = 3;
  std::vector<fs::path> files;
  try {
    out = cfg.get("out");
    require_dir(cfg, "degrade.hr_dir");
    hr_dir = cfg.get("degrade.hr_dir");
    try {
      profile = parse_profile(cfg.get("degrade.profile"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    scale = static_cast<int>(cfg.get_int("degrade.scale"));
    if (scale < 1 || scale > 16) throw ConfigError("degrade.scale must lie in [1, 16]");
    ranges = cfg.realistic_ranges();
    seed = cfg.get_u64("seed");
    channels = static_cast<int>(cfg.get_int("train.channels"));
    files = png_files(hr_dir);
    if (files.empty()) throw ConfigError("no png files under " + hr_dir.string());
    apply_runtime_mode(cfg);
    echo_config(cfg, out);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  }
  try {
    std::ofstream manifest(out / "manifest.tsv", std::ios::trunc);
    for (std::size_t k = 0; k < files.size(); ++k) {
      const std::uint64_t s = derive_seed(seed, 0xde9a, static_cast<std::uint64_t>(k));
      const Tensor hr = modcrop(read_png(hr_dir / files[k], channels), scale);
      const DegradationPlan plan = sample_plan(s, profile, scale, ranges);
      const SamplePair p = apply_degradation(unit_to_signed(hr), plan, derive_seed(s, 1));
      const fs::path dst = out / files[k];
      fs::create_directories(dst.parent_path());
      write_png(dst, signed_to_unit(p.lr));
      manifest << files[k].string() << '\t' << s << '\t' << plan.to_string() << '\n';
    }
    log << "degraded " << files.size() << " images into " << out.string() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "degrade failed: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_synth(const RunConfig& cfg, std::ostream& log) {
  fs::path out;
  std::int64_t count = 0, size = 0;
  int channels = 3;
  std::uint64_t seed = 0;
  try {
    out = cfg.get("out");
    count = cfg.get_int("synth.count");
    size = cfg.get_int("synth.size");
    channels = static_cast<int>(cfg.get_int("train.channels"));
    seed = cfg.get_u64("seed");
    if (count < 1 || size < 4 || size > 4096) throw ConfigError("synth.count must be positive and synth.size in [4, 4096]");
    echo_config(cfg, out);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  }
  try {
    for (int k = 0; k < count; ++k) {
      char name[32];
      std::snprintf(name, sizeof name, "tex_%03d.png", k);
      write_png(out / name, synthetic_image(seed, k, static_cast<int>(size), channels));
    }
    log << "wrote " << count << " textures to " << out.string() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "synth failed: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace lddpm
