#ifndef XPROTONET_IMAGE_IO_HPP_
#define XPROTONET_IMAGE_IO_HPP_

#include <filesystem>

#include "xprotonet/imaging.hpp"

namespace xprotonet {

/// Reads an 8- or 16-bit PNG into [0,1] floats. Palette images are expanded,
/// alpha is dropped. Throws IoError naming the file on failure.
Image read_png(const std::filesystem::path& path);

/// Writes a 1- or 3-channel image with values clamped to [0,1].
void write_png(const std::filesystem::path& path, const Image& image, int bit_depth = 8);

}  // namespace xprotonet

#endif  // XPROTONET_IMAGE_IO_HPP_
