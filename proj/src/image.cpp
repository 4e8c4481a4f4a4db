#include "hitrans/image.hpp"

#include <png.h>

#include <cstring>

namespace hitrans {

RgbImage::RgbImage(Index w, Index h, std::array<std::uint8_t, 3> fill) : width(w), height(h) {
    if (w < 0 || h < 0) throw ImageError("negative image size");
    pixels.resize(static_cast<std::size_t>(w * h * 3));
    for (std::size_t i = 0; i < pixels.size(); i += 3) std::memcpy(&pixels[i], fill.data(), 3);
}

namespace {

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, png_uint_32 format, Index& width, Index& height) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw ImageError("cannot read PNG " + path.string() + ": " + img.message);
    }
    img.format = format;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw ImageError("cannot decode PNG " + path.string() + ": " + msg);
    }
    width = img.width;
    height = img.height;
    return buf;
}

void write_png(const std::filesystem::path& path, png_uint_32 format, Index width, Index height, const void* data) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = format;
    if (!png_image_write_to_file(&img, path.c_str(), 0, data, 0, nullptr)) {
        throw ImageError("cannot write PNG " + path.string() + ": " + img.message);
    }
}

}  // namespace

RgbImage read_rgb_png(const std::filesystem::path& path) {
    RgbImage out;
    out.pixels = read_png(path, PNG_FORMAT_RGB, out.width, out.height);
    return out;
}

void write_rgb_png(const std::filesystem::path& path, const RgbImage& image) {
    if (image.width == 0 || image.height == 0) throw ImageError("cannot write empty image " + path.string());
    write_png(path, PNG_FORMAT_RGB, image.width, image.height, image.pixels.data());
}

Mask read_mask_png(const std::filesystem::path& path) {
    Index w = 0, h = 0;
    const auto buf = read_png(path, PNG_FORMAT_GRAY, w, h);
    Mask m(h, w);
    for (Index i = 0; i < w * h; ++i) m.data()[i] = buf[static_cast<std::size_t>(i)] != 0 ? 1 : 0;
    return m;
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
    if (mask.size() == 0) throw ImageError("cannot write empty mask " + path.string());
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(mask.size()));
    for (Index i = 0; i < mask.size(); ++i) buf[static_cast<std::size_t>(i)] = mask.data()[i] ? 255 : 0;
    write_png(path, PNG_FORMAT_GRAY, mask.cols(), mask.rows(), buf.data());
}

RgbImage crop(const RgbImage& image, Index x, Index y, Index w, Index h) {
    if (x < 0 || y < 0 || w < 0 || h < 0 || x + w > image.width || y + h > image.height) {
        throw ImageError("crop outside image bounds");
    }
    RgbImage out(w, h);
    for (Index r = 0; r < h; ++r) {
        std::memcpy(&out.pixels[static_cast<std::size_t>(r * w * 3)],
                    &image.pixels[static_cast<std::size_t>(((y + r) * image.width + x) * 3)],
                    static_cast<std::size_t>(w * 3));
    }
    return out;
}

std::uint8_t gray_level(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    return static_cast<std::uint8_t>((299u * r + 587u * g + 114u * b + 500u) / 1000u);
}

Index reflect_index(Index i, Index n) {
    if (n == 1) return 0;
    const Index period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

RgbImage reflect_pad(const RgbImage& image, Index pad_right, Index pad_bottom) {
    if (image.width == 0 || image.height == 0) throw ImageError("cannot pad an empty image");
    RgbImage out(image.width + pad_right, image.height + pad_bottom);
    for (Index y = 0; y < out.height; ++y) {
        const Index sy = reflect_index(y, image.height);
        for (Index x = 0; x < out.width; ++x) {
            const Index sx = reflect_index(x, image.width);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, c);
        }
    }
    return out;
}

}  // namespace hitrans
