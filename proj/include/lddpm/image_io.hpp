#pragma once

// Image files and 8-bit conversions. Images are [C, H, W] float tensors with
// values in [0, 1] unless stated otherwise; C is 1 or 3.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "lddpm/tensor.hpp"

namespace lddpm {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// value/255, channel-planar. `channels` 0 keeps the file's layout (gray stays 1, anything else becomes 3).
Tensor read_png(const std::filesystem::path& path, int channels = 0);
/// Clamps to [0, 1] and rounds to 8 bits.
void write_png(const std::filesystem::path& path, const Tensor& image);

/// Interleaved 8-bit pixels, round(clamp(v) * 255).
std::vector<std::uint8_t> to_u8(const Tensor& image);
Tensor from_u8(const std::vector<std::uint8_t>& pixels, int channels, int height, int width);

/// 8-bit encode at `quality` (1..100) and decode back, in memory.
Tensor jpeg_roundtrip(const Tensor& image, int quality);

/// [0, 1] <-> [-1, 1].
Tensor unit_to_signed(const Tensor& image);
Tensor signed_to_unit(const Tensor& image);

/// ITU-R 601 luma of a 3-channel image, [1, H, W]; 1-channel input is returned as is.
Tensor luma(const Tensor& image);

void check_image(const Tensor& image, const char* what);

}  // namespace lddpm
