// lddpm: train, sample, eval, degrade and synth commands.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lddpm/cli_config.hpp"

using namespace lddpm;

int main(int argc, char** argv) {
  CLI::App app{"Conditional diffusion super-resolution"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out, seed;
  bool deterministic = false;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "key = value configuration file");
  app.add_option("--seed", seed, "global seed (u64)");
  app.add_flag("--deterministic", deterministic, "single-threaded numerics");
  app.add_option("--out", out, "output directory");
  app.add_option("--set", sets, "override, e.g. --set train.batch_size=4")->take_all();

  bool force = false;
  std::string resume, epochs, steps;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--epochs", epochs, "number of epochs (0 echoes the config and exits)");
  train->add_option("--steps", steps, "stop after this global step");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_flag("--force", force, "accept a checkpoint whose config hash differs");

  std::string checkpoint, lr_dir, sample_steps;
  auto* samp = app.add_subcommand("sample", "super-resolve every LR png in a directory");
  samp->add_option("--checkpoint", checkpoint, "trained checkpoint");
  samp->add_option("--lr-dir", lr_dir, "directory of LR pngs");
  samp->add_option("--steps", sample_steps, "reverse steps (0 = full chain)");
  samp->add_flag("--force", force, "accept a checkpoint whose config hash differs");

  std::string pred, ref;
  bool histogram = false, y_only = false;
  auto* eval = app.add_subcommand("eval", "PSNR / SSIM between two directories");
  eval->add_option("--pred", pred, "predicted images");
  eval->add_option("--ref", ref, "reference images");
  eval->add_flag("--histogram", histogram, "write the 256-bin gray histogram of the predictions");
  eval->add_flag("--y-only", y_only, "score the luma channel only");

  std::string hr_dir, profile, scale;
  auto* degrade = app.add_subcommand("degrade", "synthesize LR images");
  degrade->add_option("--hr-dir", hr_dir, "directory of HR pngs");
  degrade->add_option("--profile", profile, "clean | realistic");
  degrade->add_option("--scale", scale, "downscaling factor");

  std::string count, size;
  auto* synth = app.add_subcommand("synth", "write synthetic texture images");
  synth->add_option("--count", count, "number of images");
  synth->add_option("--size", size, "side length in pixels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = RunConfig::load(config_path);
    auto put = [&](const std::string& key, const std::string& value) {
      if (!value.empty()) cfg.set(key, value);
    };
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    put("seed", seed);
    put("out", out);
    if (deterministic) cfg.set("deterministic", "true");
    put("train.epochs", epochs);
    put("train.max_steps", steps);
    put("train.resume", resume);
    put("sample.checkpoint", checkpoint);
    put("sample.lr_dir", lr_dir);
    put("sample.steps", sample_steps);
    put("eval.pred_dir", pred);
    put("eval.ref_dir", ref);
    if (histogram) cfg.set("eval.histogram", "true");
    if (y_only) cfg.set("eval.y_only", "true");
    put("degrade.hr_dir", hr_dir);
    put("degrade.profile", profile);
    put("degrade.scale", scale);
    put("synth.count", count);
    put("synth.size", size);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  }

  if (*train) return cmd_train(cfg, force, std::cout);
  if (*samp) return cmd_sample(cfg, force, std::cout);
  if (*eval) return cmd_eval(cfg, std::cout);
  if (*degrade) return cmd_degrade(cfg, std::cout);
  return cmd_synth(cfg, std::cout);
}
