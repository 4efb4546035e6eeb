#include "lddpm/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <string>

namespace lddpm {

void check_image(const Tensor& image, const char* what) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3) || image.dim(1) < 1 || image.dim(2) < 1) {
    throw ShapeError(std::string(what) + ": expected a [1|3, H, W] image, got " + shape_str(image.shape()));
  }
}

std::vector<std::uint8_t> to_u8(const Tensor& image) {
  check_image(image, "to_u8");
  const int c = image.dim(0), hw = image.dim(1) * image.dim(2);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(c) * hw);
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < hw; ++p) {
      const float v = std::clamp(image[static_cast<std::int64_t>(ch) * hw + p], 0.0f, 1.0f);
      out[static_cast<std::size_t>(p) * c + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

Tensor from_u8(const std::vector<std::uint8_t>& pixels, int channels, int height, int width) {
  const int hw = height * width;
  if (pixels.size() != static_cast<std::size_t>(channels) * hw) throw ShapeError("from_u8: buffer size mismatch");
  Tensor t({channels, height, width});
  for (int ch = 0; ch < channels; ++ch) {
    for (int p = 0; p < hw; ++p) {
      t[static_cast<std::int64_t>(ch) * hw + p] = pixels[static_cast<std::size_t>(p) * channels + ch] / 255.0f;
    }
  }
  return t;
}

Tensor read_png(const std::filesystem::path& path, int channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageIoError("cannot read " + path.string() + ": " + img.message);
  }
  const bool gray = channels == 1 || (channels == 0 && (img.format & PNG_FORMAT_FLAG_COLOR) == 0);
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageIoError("cannot decode " + path.string() + ": " + msg);
  }
  return from_u8(buf, gray ? 1 : 3, static_cast<int>(img.height), static_cast<int>(img.width));
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  check_image(image, "write_png");
  std::vector<std::uint8_t> buf = to_u8(image);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(2));
  img.height = static_cast<png_uint_32>(image.dim(1));
  img.format = image.dim(0) == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw ImageIoError("cannot write " + path.string() + ": " + img.message);
  }
}

namespace {

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void on_jpeg_error(j_common_ptr info) {
  auto* err = reinterpret_cast<JpegError*>(info->err);
  (*info->err->format_message)(info, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace

// setjmp/longjmp only crosses libjpeg frames here; nothing with a destructor is
// created between setjmp and the library calls.
Tensor jpeg_roundtrip(const Tensor& image, int quality) {
  check_image(image, "jpeg_roundtrip");
  if (quality < 1 || quality > 100) throw std::invalid_argument("jpeg quality must be in [1, 100]");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::vector<std::uint8_t> pixels = to_u8(image);
  std::vector<std::uint8_t> decoded(pixels.size());

  unsigned char* encoded = nullptr;
  unsigned long encoded_size = 0;
  JpegError err{};
  jpeg_compress_struct cinfo{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = on_jpeg_error;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(encoded);
    throw ImageIoError(std::string("jpeg encode: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &encoded, &encoded_size);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = c;
  cinfo.in_color_space = c == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(pixels.data() + static_cast<std::size_t>(cinfo.next_scanline) * w * c);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);

  JpegError derr{};
  jpeg_decompress_struct dinfo{};
  dinfo.err = jpeg_std_error(&derr.mgr);
  derr.mgr.error_exit = on_jpeg_error;
  if (setjmp(derr.jump)) {
    jpeg_destroy_decompress(&dinfo);
    std::free(encoded);
    throw ImageIoError(std::string("jpeg decode: ") + derr.message);
  }
  jpeg_create_decompress(&dinfo);
  jpeg_mem_src(&dinfo, encoded, encoded_size);
  jpeg_read_header(&dinfo, TRUE);
  dinfo.out_color_space = c == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&dinfo);
  while (dinfo.output_scanline < dinfo.output_height) {
    JSAMPROW row = decoded.data() + static_cast<std::size_t>(dinfo.output_scanline) * w * c;
    jpeg_read_scanlines(&dinfo, &row, 1);
  }
  jpeg_finish_decompress(&dinfo);
  jpeg_destroy_decompress(&dinfo);
  std::free(encoded);
  return from_u8(decoded, c, h, w);
}

Tensor unit_to_signed(const Tensor& image) {
  Tensor out = image;
  for (float& v : out.values()) v = v * 2.0f - 1.0f;
  return out;
}

Tensor signed_to_unit(const Tensor& image) {
  Tensor out = image;
  for (float& v : out.values()) v = (v + 1.0f) * 0.5f;
  return out;
}

Tensor luma(const Tensor& image) {
  check_image(image, "luma");
  if (image.dim(0) == 1) return image;
  const int hw = image.dim(1) * image.dim(2);
  Tensor out({1, image.dim(1), image.dim(2)});
  for (int p = 0; p < hw; ++p) {
    out[p] = static_cast<float>(0.299 * image[p] + 0.587 * image[hw + p] + 0.114 * image[2 * hw + p]);
  }
  return out;
}

}  // namespace lddpm
