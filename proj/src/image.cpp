#include "flora/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "flora/errors.hpp"

namespace flora {

Image::Image(std::size_t w, std::size_t h, std::uint8_t fill) : width(w), height(h), pixels(w * h * 3, fill) {}

Image::Image(std::size_t w, std::size_t h, std::vector<std::uint8_t> data)
    : width(w), height(h), pixels(std::move(data)) {
    if (pixels.size() != w * h * 3) {
        throw ShapeError("image buffer holds " + std::to_string(pixels.size()) + " bytes, " + std::to_string(w) + "x" +
                         std::to_string(h) + "x3 needs " + std::to_string(w * h * 3));
    }
}

namespace {

void require_nonempty(const Image& img) {
    if (img.width == 0 || img.height == 0) {
        throw ShapeError("image has a zero dimension (" + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + ")");
    }
}

std::size_t leading_offset(std::size_t full, std::size_t keep) {
    const std::size_t excess = full - keep;
    return (excess + 1) / 2;
}

}  // namespace

CropWindow centered_window(const Image& img, std::size_t w, std::size_t h) {
    require_nonempty(img);
    if (w == 0 || h == 0 || w > img.width || h > img.height) {
        throw ShapeError("crop window " + std::to_string(w) + "x" + std::to_string(h) + " does not fit a " +
                         std::to_string(img.width) + "x" + std::to_string(img.height) + " image");
    }
    return {leading_offset(img.width, w), leading_offset(img.height, h), w, h};
}

Image crop(const Image& img, const CropWindow& window) {
    require_nonempty(img);
    if (window.width == 0 || window.height == 0 || window.x + window.width > img.width ||
        window.y + window.height > img.height) {
        throw ShapeError("crop window outside the image");
    }
    Image out(window.width, window.height);
    const std::size_t row_bytes = window.width * 3;
    for (std::size_t y = 0; y < window.height; ++y) {
        const auto src = img.pixels.begin() +
                         static_cast<std::ptrdiff_t>(((window.y + y) * img.width + window.x) * 3);
        std::copy(src, src + static_cast<std::ptrdiff_t>(row_bytes),
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(y * row_bytes));
    }
    return out;
}

Image center_crop_square(const Image& img) {
    require_nonempty(img);
    const std::size_t side = std::min(img.width, img.height);
    if (img.width == img.height) {
        return img;
    }
    return crop(img, centered_window(img, side, side));
}

Image resize_to(const Image& img, std::size_t width, std::size_t height) {
    require_nonempty(img);
    if (width == 0 || height == 0) {
        throw ShapeError("resize target must be positive");
    }
    if (width == img.width && height == img.height) {
        return img;
    }
    struct Tap {
        std::size_t lo, hi;
        double frac;
    };
    auto taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> result(out);
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t i = 0; i < out; ++i) {
            double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<std::size_t>(std::floor(src));
            result[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
        }
        return result;
    };
    const std::vector<Tap> xs = taps(img.width, width);
    const std::vector<Tap> ys = taps(img.height, height);
    Image out(width, height);
    for (std::size_t y = 0; y < height; ++y) {
        const Tap& ty = ys[y];
        for (std::size_t x = 0; x < width; ++x) {
            const Tap& tx = xs[x];
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = img.at(tx.lo, ty.lo, c) * (1.0 - tx.frac) + img.at(tx.hi, ty.lo, c) * tx.frac;
                const double bottom = img.at(tx.lo, ty.hi, c) * (1.0 - tx.frac) + img.at(tx.hi, ty.hi, c) * tx.frac;
                const double v = top * (1.0 - ty.frac) + bottom * ty.frac;
                out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
            }
        }
    }
    return out;
}

Image resize(const Image& img, std::size_t side) { return resize_to(img, side, side); }

Image prepare(const Image& img, std::size_t side) { return resize(center_crop_square(img), side); }

Image flip_horizontal(const Image& img) {
    Image out(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                out.at(img.width - 1 - x, y, c) = img.at(x, y, c);
            }
        }
    }
    return out;
}

AugmentParams draw_augment_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    AugmentParams params;
    params.flip = std::bernoulli_distribution(0.5)(rng);
    params.zoom = std::uniform_real_distribution<double>(kMinZoom, kMaxZoom)(rng);
    return params;
}

Image apply_augment(const Image& img, const AugmentParams& params) {
    require_nonempty(img);
    if (!(params.zoom >= 1.0)) {
        throw ShapeError("zoom factor must be >= 1");
    }
    Image out = params.flip ? flip_horizontal(img) : img;
    if (params.zoom > 1.0) {
        const auto keep = [&](std::size_t extent) {
            const auto v = static_cast<std::size_t>(std::lround(static_cast<double>(extent) / params.zoom));
            return std::clamp<std::size_t>(v, 1, extent);
        };
        const std::size_t w = keep(img.width), h = keep(img.height);
        if (w != img.width || h != img.height) {
            out = resize_to(crop(out, centered_window(out, w, h)), img.width, img.height);
        }
    }
    return out;
}

Image augment(const Image& img, std::uint64_t seed) { return apply_augment(img, draw_augment_params(seed)); }

Tensor to_tensor(const Image& img) {
    require_nonempty(img);
    Tensor out({img.height, img.width, 3});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        out[i] = static_cast<float>(img.pixels[i]) / 255.0F;
    }
    return out;
}

Image decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) {
        throw DataError("empty image payload");
    }
    const cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat bgr;
    try {
        bgr = cv::imdecode(raw, cv::IMREAD_COLOR);
    } catch (const cv::Exception& e) {
        throw DataError(std::string("cannot decode image: ") + e.what());
    }
    if (bgr.empty() || bgr.type() != CV_8UC3) {
        throw DataError("payload is not a decodable PNG or JPEG image");
    }
    Image img(static_cast<std::size_t>(bgr.cols), static_cast<std::size_t>(bgr.rows));
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<std::uint8_t>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            for (int c = 0; c < 3; ++c) {
                img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(c)) =
                    row[x * 3 + (2 - c)];
            }
        }
    }
    return img;
}

Image read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open image " + path.string());
    }
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_image(bytes);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

std::vector<std::uint8_t> encode_png(const Image& img) {
    require_nonempty(img);
    cv::Mat bgr(static_cast<int>(img.height), static_cast<int>(img.width), CV_8UC3);
    for (std::size_t y = 0; y < img.height; ++y) {
        auto* row = bgr.ptr<std::uint8_t>(static_cast<int>(y));
        for (std::size_t x = 0; x < img.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                row[x * 3 + (2 - c)] = img.at(x, y, c);
            }
        }
    }
    std::vector<std::uint8_t> bytes;
    if (!cv::imencode(".png", bgr, bytes)) {
        throw DataError("PNG encoding failed");
    }
    return bytes;
}

void write_png(const std::filesystem::path& path, const Image& img) {
    const std::vector<std::uint8_t> bytes = encode_png(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace flora
