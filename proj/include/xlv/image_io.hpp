#pragma once

#include <string>
#include <vector>

#include "xlv/tensor.hpp"

namespace xlv {

/// 8-bit interleaved pixels, row-major; channels is 1 (gray) or 3 (RGB).
struct RawImage {
  Index height = 0, width = 0, channels = 0;
  std::vector<unsigned char> pixels;

  unsigned char at(Index r, Index c, Index ch) const {
    return pixels[std::size_t((r * width + c) * channels + ch)];
  }
};

/// Decodes a PNG or JPEG file, dispatching on its magic bytes. Gray stays
/// 1-channel, color becomes 3; alpha and palettes are resolved by the codec.
RawImage read_image(const std::string& path);

void write_png(const std::string& path, const RawImage& image);

}  // namespace xlv
