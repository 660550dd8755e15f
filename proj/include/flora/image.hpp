#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "flora/tensor.hpp"

namespace flora {

/// 8-bit RGB image, row-major, 3 interleaved channels.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::uint8_t fill = 0);
    Image(std::size_t w, std::size_t h, std::vector<std::uint8_t> data);

    static constexpr std::size_t channels = 3;

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

inline constexpr std::size_t kDefaultSide = 224;

struct CropWindow {
    std::size_t x = 0;
    std::size_t y = 0;
    std::size_t width = 0;
    std::size_t height = 0;
};

/// Window of `w` x `h` centered in the image; an odd leftover pixel is taken
/// off the leading (left/top) edge.
CropWindow centered_window(const Image& img, std::size_t w, std::size_t h);

Image crop(const Image& img, const CropWindow& window);

/// Square crop of side min(width, height), trimming the horizontal or vertical
/// extremes so the later resize does not distort the aspect ratio.
Image center_crop_square(const Image& img);

/// Bilinear resampling with pixel-center alignment:
/// src = (dst + 0.5) * in / out - 0.5, clamped to the image.
Image resize_to(const Image& img, std::size_t width, std::size_t height);
Image resize(const Image& img, std::size_t side = kDefaultSide);

/// center_crop_square followed by resize; the order the whole pipeline uses.
Image prepare(const Image& img, std::size_t side = kDefaultSide);

Image flip_horizontal(const Image& img);

struct AugmentParams {
    bool flip = false;
    /// Central zoom factor; the window kept is (w / zoom) x (h / zoom).
    double zoom = 1.0;
};

inline constexpr double kMinZoom = 1.0;
inline constexpr double kMaxZoom = 1.2;

/// Horizontal flip with p = 0.5 and zoom ~ U[1.0, 1.2], from a seeded generator.
AugmentParams draw_augment_params(std::uint64_t seed);
Image apply_augment(const Image& img, const AugmentParams& params);
Image augment(const Image& img, std::uint64_t seed);

/// pixel / 255 into a height x width x 3 tensor.
Tensor to_tensor(const Image& img);

/// Decodes PNG or JPEG bytes; throws DataError when the bytes are not an image.
Image decode_image(std::span<const std::uint8_t> bytes);
Image read_image(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const Image& img);
void write_png(const std::filesystem::path& path, const Image& img);

}  // namespace flora
