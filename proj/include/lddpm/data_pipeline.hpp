#pragma once

// LR synthesis: resizing kernels, blur, noise and JPEG stages driven by a
// seeded DegradationPlan, plus a seeded patch stream over an image folder.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lddpm/image_io.hpp"
#include "lddpm/rng.hpp"

namespace lddpm {

enum class ResizeKind { nearest, bilinear, bicubic };
enum class BlurKind { none, isotropic, anisotropic };
enum class Stage { blur, resize, noise, jpeg };
enum class Profile { clean, realistic };

std::string to_string(ResizeKind k);
std::string to_string(Stage s);
std::string to_string(Profile p);
Profile parse_profile(const std::string& name);

/// Separable bicubic (a = -0.5), half-pixel centres, edge clamp, no antialiasing.
Tensor bicubic_resize(const Tensor& image, int out_h, int out_w);
Tensor bilinear_resize(const Tensor& image, int out_h, int out_w);
Tensor nearest_resize(const Tensor& image, int out_h, int out_w);
Tensor resize(const Tensor& image, int out_h, int out_w, ResizeKind kind);
/// Bicubic on a batch [N, C, H, W].
Tensor bicubic_resize_batch(const Tensor& batch, int out_h, int out_w);

/// Cubic convolution kernel with a = -0.5.
double cubic_weight(double x);

struct BlurSpec {
  BlurKind kind = BlurKind::none;
  double sigma_x = 0.0;
  double sigma_y = 0.0;
  double angle = 0.0;  ///< radians
  int kernel_size = 0; ///< odd
};

/// Normalized k x k Gaussian with covariance R diag(sx^2, sy^2) R^T.
Tensor gaussian_kernel(const BlurSpec& spec);
/// Per-channel correlation with edge clamping; `kernel` is [k, k].
Tensor filter2d(const Tensor& image, const Tensor& kernel);

struct DegradationPlan {
  BlurSpec blur;
  ResizeKind resize_kind = ResizeKind::bicubic;
  int scale = 2;
  double noise_sigma = 0.0;  ///< in [0, 1] pixel units
  std::optional<int> jpeg_quality;
  std::vector<Stage> order{Stage::resize};

  /// Stages with an effect; resize is always present.
  std::vector<Stage> enabled_stages() const;
  /// Throws std::invalid_argument on bad parameters or an order that does not cover the enabled stages.
  void validate() const;
  /// Single-line `key=value` form used in manifests.
  std::string to_string() const;
  static DegradationPlan parse(const std::string& line);
  bool operator==(const DegradationPlan&) const = default;
};

bool operator==(const BlurSpec& a, const BlurSpec& b);

struct SamplePair {
  Tensor hr;  ///< [C, s h, s w] in [-1, 1]
  Tensor lr;  ///< [C, h, w] in [-1, 1]
  DegradationPlan plan;
};

struct RealisticRanges {
  int kernel_min = 7;
  int kernel_max = 21;
  double sigma_min = 0.2;
  double sigma_max = 3.0;
  double noise_max = 25.0 / 255.0;
  double noise_prob = 0.8;
  int jpeg_min = 30;
  int jpeg_max = 95;
  double jpeg_prob = 0.5;
};

DegradationPlan sample_plan(std::uint64_t seed, Profile profile, int scale = 2, const RealisticRanges& ranges = {});

/// `hr` in [-1, 1]; stages run in plan.order on the [0, 1] image, noise drawn from `seed`.
SamplePair apply_degradation(const Tensor& hr, const DegradationPlan& plan, std::uint64_t seed);

struct DatasetOptions {
  int patch_size = 32;
  int scale = 2;
  Profile profile = Profile::clean;
  std::uint64_t seed = 0;
  int crops_per_image = 1;
  int channels = 3;
  RealisticRanges ranges;
  /// Random flip / transpose of each crop (one of the 8 square symmetries).
  bool augment = false;
};

/// Seeded, epoch-aware stream of random crops. Order, crop position, plan and
/// noise for item k of epoch e depend only on (seed, e, k).
class DatasetIterator {
 public:
  /// Loads every *.png under `root` (sorted). Unreadable or too small files are
  /// skipped with a warning on stderr; an empty result throws.
  DatasetIterator(const std::filesystem::path& root, DatasetOptions opts);
  /// In-memory images in [0, 1].
  DatasetIterator(std::vector<Tensor> images, std::vector<std::string> names, DatasetOptions opts);

  std::int64_t epoch_length() const;
  int epoch() const { return epoch_; }
  std::int64_t position() const { return pos_; }
  SamplePair next();
  /// Index of the source image behind the most recent next().
  int last_image() const { return last_image_; }
  /// Jump to (epoch, position); used when resuming.
  void seek(int epoch, std::int64_t position);
  const std::vector<std::string>& names() const { return names_; }
  std::size_t image_count() const { return images_.size(); }

  /// Stacks `n` pairs into [n, C, H, W] tensors.
  std::pair<Tensor, Tensor> next_batch(int n);

 private:
  void check_images();
  void shuffle_epoch();

  std::vector<Tensor> images_;
  std::vector<std::string> names_;
  DatasetOptions opts_;
  std::vector<std::int64_t> order_;
  int epoch_ = 0;
  std::int64_t pos_ = 0;
  int last_image_ = -1;
};

/// Symmetry k in [0, 8) of a [C, H, W] image: bit 0 flips x, bit 1 flips y, bit 2
/// transposes first.
Tensor dihedral(const Tensor& img, int k);

/// Smooth-plus-edge synthetic texture in [0, 1]: oriented sinusoids, a few hard
/// edged shapes, and a colour mix. Deterministic in `seed`.
Tensor synthetic_texture(std::uint64_t seed, int size, int channels = 3);

}  // namespace lddpm
