#pragma once

#include "hitrans/metrics.hpp"
#include "hitrans/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace hitrans {

class ImageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// 8-bit RGB raster, row-major, interleaved.
struct RgbImage {
    Index width = 0;
    Index height = 0;
    std::vector<std::uint8_t> pixels;

    RgbImage() = default;
    RgbImage(Index w, Index h, std::array<std::uint8_t, 3> fill = {0, 0, 0});

    std::uint8_t& at(Index y, Index x, int c) { return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
    std::uint8_t at(Index y, Index x, int c) const {
        return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)];
    }
    void set(Index y, Index x, std::array<std::uint8_t, 3> rgb) {
        for (int c = 0; c < 3; ++c) at(y, x, c) = rgb[c];
    }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

RgbImage read_rgb_png(const std::filesystem::path& path);
void write_rgb_png(const std::filesystem::path& path, const RgbImage& image);
/// Single-channel PNG; any nonzero sample becomes 1.
Mask read_mask_png(const std::filesystem::path& path);
/// Writes 0 / 255.
void write_mask_png(const std::filesystem::path& path, const Mask& mask);

RgbImage crop(const RgbImage& image, Index x, Index y, Index w, Index h);

/// Integer luma (299 R + 587 G + 114 B) / 1000, rounded.
std::uint8_t gray_level(std::uint8_t r, std::uint8_t g, std::uint8_t b);

/// Reflect-pads (no edge repeat) on the right and bottom; pads may exceed the image size.
RgbImage reflect_pad(const RgbImage& image, Index pad_right, Index pad_bottom);
/// Mirror index for reflect padding: ..., 2, 1, 0, 1, 2, ..., n-1, n-2, ...
Index reflect_index(Index i, Index n);

}  // namespace hitrans
