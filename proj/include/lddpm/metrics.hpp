#pragma once

// PSNR, windowed SSIM and grayscale histograms, plus folder evaluation and report files.
// Metric inputs are [C, H, W] tensors on the 8-bit scale (0..255) unless a peak is given.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lddpm/tensor.hpp"

namespace lddpm {

constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE); identical inputs give `cap`.
double psnr(const Tensor& a, const Tensor& b, double peak = 255.0, double cap = kPsnrCap);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 255.0;
};

/// Mean SSIM over all valid window positions, averaged over channels.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts = {});

/// 256-bin counts of the 8-bit ITU-R 601 gray level.
std::array<std::int64_t, 256> gray_histogram(const Tensor& image);

/// [0, 1] image to the 8-bit scale, rounded like the saved PNG.
Tensor to_8bit_scale(const Tensor& unit_image);

struct ImageMetrics {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  double psnr_db = 0.0;
  double ssim_percent = 0.0;
  std::vector<ImageMetrics> per_image;
  std::optional<std::array<std::int64_t, 256>> histogram;
};

class UnmatchedFilesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalOptions {
  bool y_only = false;
  bool histogram = false;
  double cap = kPsnrCap;
};

/// Aggregates are means of the per-image values.
MetricReport summarize(std::vector<ImageMetrics> per_image);
/// Pairs *.png files by relative name. Throws UnmatchedFilesError listing missing pairs,
/// std::runtime_error when there is nothing to compare.
MetricReport evaluate_dirs(const std::filesystem::path& pred, const std::filesystem::path& ref,
                           const EvalOptions& opts = {});

/// Plain-text table.
std::string format_report(const MetricReport& r);
/// One `name<TAB>psnr<TAB>ssim` line per image.
void write_report_tsv(const std::filesystem::path& path, const MetricReport& r);
/// 256 comma-separated integers.
void write_histogram_csv(const std::filesystem::path& path, const std::array<std::int64_t, 256>& h);

}  // namespace lddpm
