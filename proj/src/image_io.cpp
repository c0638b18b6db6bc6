#include "xprotonet/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

namespace xprotonet {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Decoded rows plus header; filled inside the setjmp-guarded section.
struct RawPng {
  png_uint_32 width = 0;
  png_uint_32 height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<png_byte> data;
};

bool decode(std::FILE* file, RawPng& raw) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, file);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  raw.width = png_get_image_width(png, info);
  raw.height = png_get_image_height(png, info);
  raw.channels = png_get_channels(png, info);
  raw.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.data.resize(rowbytes * raw.height);
  rows.resize(raw.height);
  for (png_uint_32 y = 0; y < raw.height; ++y) rows[y] = raw.data.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

bool encode(std::FILE* file, const std::vector<png_byte>& data, png_uint_32 width, png_uint_32 height,
            int channels, int bit_depth) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(data.data() + y * rowbytes);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, width, height, bit_depth, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw IoError("cannot open image " + path.string());
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw IoError("not a PNG image: " + path.string());
  }
  std::rewind(file.get());
  RawPng raw;
  if (!decode(file.get(), raw)) throw IoError("corrupt PNG image: " + path.string());

  Image image(raw.channels, static_cast<int>(raw.height), static_cast<int>(raw.width));
  const std::size_t pixels = static_cast<std::size_t>(raw.width) * raw.height;
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int c = 0; c < raw.channels; ++c) {
      const std::size_t i = p * raw.channels + c;
      float v;
      if (raw.bit_depth == 16) {
        v = static_cast<float>((raw.data[2 * i] << 8) | raw.data[2 * i + 1]) / 65535.0f;
      } else {
        v = static_cast<float>(raw.data[i]) / 255.0f;
      }
      image.pixels[c * pixels + p] = v;
    }
  }
  return image;
}

void write_png(const std::filesystem::path& path, const Image& image, int bit_depth) {
  if (image.channels != 1 && image.channels != 3) throw IoError("write_png: only 1 or 3 channels supported");
  if (bit_depth != 8 && bit_depth != 16) throw IoError("write_png: bit depth must be 8 or 16");
  const std::size_t pixels = static_cast<std::size_t>(image.width) * image.height;
  const int bytes = bit_depth / 8;
  std::vector<png_byte> data(pixels * image.channels * bytes);
  const double max_value = bit_depth == 16 ? 65535.0 : 255.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int c = 0; c < image.channels; ++c) {
      const double v = std::clamp(static_cast<double>(image.pixels[c * pixels + p]), 0.0, 1.0);
      const auto q = static_cast<unsigned>(std::lround(v * max_value));
      const std::size_t i = p * image.channels + c;
      if (bytes == 2) {
        data[2 * i] = static_cast<png_byte>(q >> 8);
        data[2 * i + 1] = static_cast<png_byte>(q & 0xff);
      } else {
        data[i] = static_cast<png_byte>(q);
      }
    }
  }
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw IoError("cannot write image " + path.string());
  if (!encode(file.get(), data, image.width, image.height, image.channels, bit_depth)) {
    throw IoError("failed to encode PNG " + path.string());
  }
}

}  // namespace xprotonet
