#include <filesystem>
#include <random>

#include "doctest.h"
#include "flora/errors.hpp"
#include "flora/image.hpp"
#include "oracles.hpp"

using namespace flora;

namespace {

// Each pixel encodes its own coordinates so crops can be traced back.
Image coordinate_image(std::size_t w, std::size_t h) {
    Image img(w, h);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            img.at(x, y, 0) = static_cast<std::uint8_t>(x & 0xFF);
            img.at(x, y, 1) = static_cast<std::uint8_t>(y & 0xFF);
            img.at(x, y, 2) = static_cast<std::uint8_t>((x >> 8) | ((y >> 8) << 4));
        }
    }
    return img;
}

Image random_image(std::size_t w, std::size_t h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> u(0, 255);
    Image img(w, h);
    for (auto& p : img.pixels) {
        p = static_cast<std::uint8_t>(u(rng));
    }
    return img;
}

void check_traceable_crop(const Image& in, const Image& out, std::size_t x0, std::size_t y0) {
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                REQUIRE(out.at(x, y, c) == in.at(x + x0, y + y0, c));
            }
        }
    }
}

}  // namespace

TEST_CASE("center crop of 300x200 keeps x in [50, 250)") {
    const Image in = coordinate_image(300, 200);
    const CropWindow w = centered_window(in, 200, 200);
    CHECK(w.x == 50);
    CHECK(w.y == 0);
    const Image out = center_crop_square(in);
    REQUIRE(out.width == 200);
    REQUIRE(out.height == 200);
    check_traceable_crop(in, out, 50, 0);
}

TEST_CASE("center crop of a 200x300 portrait keeps y in [50, 250)") {
    const Image in = coordinate_image(200, 300);
    const Image out = center_crop_square(in);
    REQUIRE(out.width == 200);
    check_traceable_crop(in, out, 0, 50);
}

TEST_CASE("an odd leftover pixel is cut from the leading edge") {
    const Image in = coordinate_image(301, 200);
    const Image out = center_crop_square(in);
    check_traceable_crop(in, out, 51, 0);
    CHECK(centered_window(coordinate_image(200, 203), 200, 200).y == 2);
}

TEST_CASE("square images pass through the crop unchanged") {
    const Image in = random_image(37, 37, 1);
    CHECK(center_crop_square(in) == in);
}

TEST_CASE("crop property: square output, every pixel from its mapped source") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> dim(1, 300);
    for (int i = 0; i < 50; ++i) {
        const std::size_t w = dim(rng), h = dim(rng);
        const Image in = coordinate_image(w, h);
        const Image out = center_crop_square(in);
        const std::size_t side = std::min(w, h);
        REQUIRE(out.width == side);
        REQUIRE(out.height == side);
        check_traceable_crop(in, out, (w - side + 1) / 2, (h - side + 1) / 2);
    }
}

TEST_CASE("zero-sized images are rejected") {
    CHECK_THROWS(center_crop_square(Image{}));
    CHECK_THROWS(resize(Image{}, 4));
    CHECK_THROWS(resize(Image(3, 3), 0));
}

TEST_CASE("resize keeps constant colours constant") {
    Image in(13, 7);
    for (std::size_t i = 0; i < in.pixels.size(); i += 3) {
        in.pixels[i] = 10;
        in.pixels[i + 1] = 200;
        in.pixels[i + 2] = 77;
    }
    for (std::size_t side : {1, 5, 31, 224}) {
        const Image out = resize(in, side);
        for (std::size_t i = 0; i < out.pixels.size(); i += 3) {
            REQUIRE(out.pixels[i] == 10);
            REQUIRE(out.pixels[i + 1] == 200);
            REQUIRE(out.pixels[i + 2] == 77);
        }
    }
}

TEST_CASE("resizing a 1x1 image replicates it") {
    const Image in(1, 1, std::vector<std::uint8_t>{9, 99, 199});
    const Image out = resize(in, 6);
    CHECK(out.width == 6);
    for (std::size_t i = 0; i < out.pixels.size(); i += 3) {
        CHECK(out.pixels[i] == 9);
        CHECK(out.pixels[i + 1] == 99);
        CHECK(out.pixels[i + 2] == 199);
    }
}

TEST_CASE("bilinear resize matches the reference within 1 per channel") {
    Image grad(4, 4);
    for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 4; ++x) {
            grad.at(x, y, 0) = static_cast<std::uint8_t>(x * 80);
            grad.at(x, y, 1) = static_cast<std::uint8_t>(y * 80);
            grad.at(x, y, 2) = static_cast<std::uint8_t>((x + y) * 40);
        }
    }
    std::vector<std::pair<Image, std::pair<std::size_t, std::size_t>>> cases{
        {grad, {8, 8}}, {grad, {3, 3}}, {grad, {7, 5}}, {random_image(19, 11, 3), {6, 9}},
        {random_image(10, 10, 4), {23, 23}}};
    for (const auto& [img, size] : cases) {
        const Image out = resize_to(img, size.first, size.second);
        const std::vector<int> px(img.pixels.begin(), img.pixels.end());
        const std::vector<int> ref = oracle::bilinear(px, img.width, img.height, size.first, size.second);
        REQUIRE(out.pixels.size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            REQUIRE(std::abs(static_cast<int>(out.pixels[i]) - ref[i]) <= 1);
        }
    }
}

TEST_CASE("augment: identity parameters, double flip, seeded determinism") {
    const Image img = random_image(16, 16, 5);
    CHECK(apply_augment(img, {false, 1.0}) == img);
    CHECK(flip_horizontal(flip_horizontal(img)) == img);
    const AugmentParams p{true, 1.13};
    CHECK(flip_horizontal(apply_augment(img, p)) == apply_augment(img, {false, 1.13}));
    for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 123456789ULL}) {
        CHECK(augment(img, seed) == augment(img, seed));
        const AugmentParams a = draw_augment_params(seed);
        CHECK(a.zoom >= kMinZoom);
        CHECK(a.zoom <= kMaxZoom);
        CHECK(augment(img, seed).width == 16);
    }
    // Both flip outcomes occur and the zoom spreads over its range.
    int flips = 0;
    double lo = 2, hi = 0;
    for (std::uint64_t s = 0; s < 400; ++s) {
        const AugmentParams a = draw_augment_params(s);
        flips += a.flip ? 1 : 0;
        lo = std::min(lo, a.zoom);
        hi = std::max(hi, a.zoom);
    }
    CHECK(flips > 150);
    CHECK(flips < 250);
    CHECK(lo < 1.02);
    CHECK(hi > 1.18);
}

TEST_CASE("to_tensor maps pixels to [0, 1]") {
    const Image img(3, 1, std::vector<std::uint8_t>{0, 255, 128, 1, 2, 3, 4, 5, 6});
    const Tensor t = to_tensor(img);
    CHECK(t.shape() == Shape{1, 3, 3});
    CHECK(t[0] == 0.0F);
    CHECK(t[1] == 1.0F);
    CHECK(std::abs(t[2] - 128.0 / 255.0) <= 1e-7);
}

TEST_CASE("PNG round trip and decode errors") {
    const Image img = random_image(9, 5, 6);
    CHECK(decode_image(encode_png(img)) == img);
    const auto tmp = std::filesystem::temp_directory_path() / "flora_test_image.png";
    write_png(tmp, img);
    CHECK(read_image(tmp) == img);
    std::filesystem::remove(tmp);
    const std::vector<std::uint8_t> junk{1, 2, 3, 4, 5};
    CHECK_THROWS_AS(decode_image(junk), DataError);
    CHECK_THROWS_AS(decode_image({}), DataError);
    CHECK_THROWS_AS(read_image("/nonexistent/flora.png"), DataError);
}
