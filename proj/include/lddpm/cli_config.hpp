#pragma once

// Run configuration and the train / sample / eval / degrade / synth commands.
//
// Config files are flat `key = value` lines; `#` starts a comment. Keys carry a
// section prefix (`train.batch_size`); `seed`, `deterministic` and `out` are
// global. Every known key has a default, unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lddpm/data_pipeline.hpp"
#include "lddpm/engine.hpp"
#include "lddpm/metrics.hpp"

namespace lddpm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitRuntime = 3 };

class RunConfig {
 public:
  /// Every key at its default.
  RunConfig();

  static RunConfig load(const std::filesystem::path& path);
  /// Applies `key = value` lines over the current values; `origin` names the source in errors.
  void merge_text(const std::string& text, const std::string& origin = "config");
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::vector<std::string> keys() const;

  std::string get_string(const std::string& key) const { return get(key); }
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  /// Resolved configuration, one `key = value` per line in key order. Feeding it back
  /// through merge_text reproduces this object.
  std::string to_text() const;

  /// Throws ConfigError on malformed values or an inconsistent model.
  TrainConfig train_config() const;
  DatasetOptions dataset_options() const;
  RealisticRanges realistic_ranges() const;
  EvalOptions eval_options() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Writes `out/config.resolved`, creating `out`.
void echo_config(const RunConfig& cfg, const std::filesystem::path& out);

/// Single-threaded numerics when `deterministic` is set.
void apply_runtime_mode(const RunConfig& cfg);

/// Trains per the config; writes config.resolved, loss.csv and checkpoint.ckpt under `out`.
/// `force` accepts a resume checkpoint whose config hash differs.
int cmd_train(const RunConfig& cfg, bool force, std::ostream& log);
/// Samples one HR image per LR png under sample.lr_dir; prints a timing line per image.
int cmd_sample(const RunConfig& cfg, bool force, std::ostream& log);
/// Compares eval.pred_dir with eval.ref_dir; writes report.txt, metrics.tsv and optionally histogram.csv.
int cmd_eval(const RunConfig& cfg, std::ostream& log);
/// Degrades every png under degrade.hr_dir; writes LR pngs and manifest.tsv (`file<TAB>seed<TAB>plan`).
int cmd_degrade(const RunConfig& cfg, std::ostream& log);
/// Writes synth.count synthetic textures of synth.size pixels.
int cmd_synth(const RunConfig& cfg, std::ostream& log);

/// The `k`-th synthetic training image for a given base seed.
Tensor synthetic_image(std::uint64_t base_seed, int k, int size, int channels);

}  // namespace lddpm
