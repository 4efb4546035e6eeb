#pragma once

// Training losses: noise matching, perceptual content and style terms, and the
// weighted total that also gathers KL, adversarial and flow terms.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "lddpm/nn.hpp"

namespace lddpm {

using ag::Var;

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean squared error over all elements.
Var ddpm_loss(const Var& eps, const Var& eps_hat);

/// 1-based (block, conv) position inside the extractor.
struct Tap {
  int block = 5;
  int conv = 2;
};

/// Frozen convolutional pyramid: blocks of 3x3 convs, average pooling between blocks.
/// Inputs in [-1, 1] are mapped to [0, 1]; single-channel inputs are replicated to 3.
class PerceptualExtractor {
 public:
  struct Layer {
    Tensor weight;  ///< [out, in, k, k]
    Tensor bias;    ///< [out]
  };

  PerceptualExtractor() = default;
  /// Random frozen weights (He-normal), `widths[b]` channels in block b, `convs_per_block` each.
  PerceptualExtractor(std::uint64_t seed, std::vector<int> widths = {16, 32, 64, 64, 64}, int convs_per_block = 2);
  /// Explicit layers; `relu` off gives a linear extractor.
  PerceptualExtractor(std::vector<std::vector<Layer>> blocks, bool relu);

  /// Reads the layout written by save(): u32 block count; per block u32 conv count;
  /// per conv u32 out, in, kh, kw, then weight and bias as little-endian float32.
  static PerceptualExtractor load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  bool has_tap(Tap tap) const;
  /// Features at `tap`, taken after the activation and before pooling.
  Var features(const Var& image, Tap tap) const;
  int blocks() const { return static_cast<int>(blocks_.size()); }

 private:
  std::vector<std::vector<Layer>> blocks_;
  bool relu_ = true;
};

enum class L1Mode { mean, sum };

/// Squared feature distance averaged over positions (and channels, batch).
Var content_feature_term(const Var& fa, const Var& fb);
/// Squared differences of per-channel spatial mean and std, averaged over channels and batch.
Var style_from_features(const Var& fa, const Var& fb);

/// Feature term between x_i and x_i_hat at `tap` plus the L1 distance between y and y_hat.
Var content_loss(const Var& x_i, const Var& x_i_hat, const Var& y, const Var& y_hat,
                 const PerceptualExtractor& extractor, Tap tap = {}, L1Mode l1 = L1Mode::mean);
Var style_loss(const Var& x_i, const Var& x_i_hat, const PerceptualExtractor& extractor, Tap tap = {});

struct LossWeights {
  double ddpm = 1.0;
  double kl = 1.0;
  double adv = 1.0;
  double content = 1.0;
  double style = 1.0;
  double flow = 1.0;
};

/// Undefined terms count as zero.
struct LossTerms {
  Var ddpm;
  Var kl;
  Var adv_g;
  Var adv_d;
  Var content;
  Var style;
  Var flow;
};

struct LossBreakdown {
  double ddpm = 0.0;
  double kl = 0.0;
  double adv_g = 0.0;
  double adv_d = 0.0;
  double content = 0.0;
  double style = 0.0;
  double flow_nll = 0.0;
  double total = 0.0;
  LossWeights weights;
};

struct TotalLoss {
  Var total;  ///< generator-side objective; adv_d is reported only
  LossBreakdown breakdown;
};

/// Weighted sum of generator-side terms. Throws NonFiniteLossError naming the first bad term.
TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights);

}  // namespace lddpm
