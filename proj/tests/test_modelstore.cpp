#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"
#include "flora/errors.hpp"
#include "flora/modelstore.hpp"
#include "test_util.hpp"

using namespace flora;
namespace fs = std::filesystem;
using testutil::random_tensor;

namespace {

// Independent binary16 decoder.
double half_value(std::uint16_t h) {
    const int s = h >> 15, e = (h >> 10) & 0x1F, m = h & 0x3FF;
    const double mag = e == 0 ? std::ldexp(m / 1024.0, -14) : std::ldexp(1.0 + m / 1024.0, e - 15);
    return s ? -mag : mag;
}

// Nearest finite half by exhaustive search, ties to the even code.
std::uint16_t nearest_half(float x) {
    std::uint16_t best = 0;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::uint32_t h = 0; h < 0x10000; ++h) {
        if (((h >> 10) & 0x1F) == 0x1F) {
            continue;
        }
        const double err = std::abs(half_value(static_cast<std::uint16_t>(h)) - x);
        if (err < best_err || (err == best_err && (h & 1) == 0 && (std::signbit(x) == ((h >> 15) != 0)))) {
            best_err = err;
            best = static_cast<std::uint16_t>(h);
        }
    }
    return best;
}

ModelSpec small_spec(std::size_t classes = 3) {
    MicroNetOptions opt;
    opt.side = 8;
    opt.num_classes = classes;
    opt.stem_channels = 4;
    return make_micro_mobilenet(opt);
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("flora_test_" + name); }

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string error_of(const std::vector<std::uint8_t>& bytes) {
    try {
        deserialize(bytes);
    } catch (const FormatError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("f32 save/load is bit exact and reproduces outputs") {
    const ModelSpec spec = small_spec();
    const ModelWeights w = init_weights(spec, 21);
    const std::vector<std::string> classes{"disk", "triangle", "Platanus × hispanica"};
    const fs::path path = temp_file("roundtrip.fmdl");
    save(spec, w, classes, path);
    const LoadedModel m = load(path);
    CHECK(m.spec == spec);
    CHECK(m.class_names == classes);
    CHECK(m.weights.precision == Precision::f32);
    CHECK(m.weights.tensors == w.tensors);
    std::mt19937_64 rng(22);
    for (int i = 0; i < 10; ++i) {
        const Tensor x = random_tensor(spec.input_shape, rng, 0.0F, 1.0F);
        CHECK(forward_one(m.spec, m.weights, x) == forward_one(spec, w, x));
    }
    fs::remove(path);
}

TEST_CASE("format errors: magic, version, truncation, trailing bytes") {
    const ModelSpec spec = small_spec();
    const ModelBundle bundle{{"a", "b", "c"}, {{spec, init_weights(spec, 1)}}};
    const std::vector<std::uint8_t> good = serialize(bundle);

    auto bad_magic = good;
    bad_magic[0] = 'X';
    CHECK(error_of(bad_magic).find("magic") != std::string::npos);

    auto next_version = good;
    next_version[4] = static_cast<std::uint8_t>(kModelFormatVersion + 1);
    const std::string version_error = error_of(next_version);
    CHECK(version_error.find("unsupported") != std::string::npos);
    CHECK(version_error.find(std::to_string(kModelFormatVersion + 1)) != std::string::npos);

    const std::vector<std::uint8_t> truncated(good.begin(), good.end() - 10);
    const std::string trunc_error = error_of(truncated);
    const std::uint64_t payload = payload_bytes(bundle);
    CHECK(trunc_error.find("expected " + std::to_string(payload)) != std::string::npos);
    CHECK(trunc_error.find("got " + std::to_string(payload - 10)) != std::string::npos);

    auto trailing = good;
    trailing.push_back(0);
    CHECK(!error_of(trailing).empty());
    CHECK(!error_of({}).empty());

    const fs::path path = temp_file("corrupt.fmdl");
    write_bytes(path, bad_magic);
    CHECK_THROWS_AS(load_bundle(path), FormatError);
    fs::remove(path);
    CHECK_THROWS_AS(load_bundle(temp_file("missing.fmdl")), DataError);
}

TEST_CASE("empty model is a fixed-size header") {
    const fs::path path = temp_file("empty.fmdl");
    save_bundle(ModelBundle{}, path);
    CHECK(model_size_bytes(path) == kEmptyModelFileBytes);
    CHECK(read_bytes(path).size() == 16);
    CHECK(load_bundle(path).members.empty());
    fs::remove(path);
}

TEST_CASE("half conversion") {
    // Every finite half survives half -> float -> half.
    for (std::uint32_t h = 0; h < 0x10000; ++h) {
        if (((h >> 10) & 0x1F) == 0x1F) {
            continue;
        }
        const float f = half_to_float(static_cast<std::uint16_t>(h));
        REQUIRE(static_cast<double>(f) == half_value(static_cast<std::uint16_t>(h)));
        REQUIRE(float_to_half(f) == h);
    }
    CHECK(half_to_float(float_to_half(0.5F)) == 0.5F);
    CHECK(std::isinf(half_to_float(float_to_half(1e6F))));
    CHECK(std::isnan(half_to_float(float_to_half(std::numeric_limits<float>::quiet_NaN()))));

    // Rounding matches an exhaustive nearest-value search.
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> mant(1.0F, 2.0F);
    std::uniform_int_distribution<int> expo(-26, 15);
    for (int i = 0; i < 300; ++i) {
        const float x = std::ldexp(mant(rng), expo(rng)) * (i % 2 ? -1.0F : 1.0F);
        REQUIRE(float_to_half(x) == nearest_half(x));
    }
    // Exact ties go to the even mantissa.
    const float tie = std::ldexp(1.0F + 1.5F / 1024.0F, 0);  // halfway between codes 0x3C01 and 0x3C02
    CHECK(float_to_half(tie) == 0x3C02);
    const float tie2 = std::ldexp(1.0F + 0.5F / 1024.0F, 0);
    CHECK(float_to_half(tie2) == 0x3C00);
}

TEST_CASE("f16 and i8 payload ratios") {
    const ModelSpec spec = small_spec();
    const ModelWeights w = init_weights(spec, 3);
    const double f32 = static_cast<double>(payload_bytes(w));
    CHECK(std::abs(payload_bytes(quantize_f16(w)) / f32 - 0.5) <= 0.02);
    CHECK(std::abs(payload_bytes(quantize_i8(w)) / f32 - 0.25) <= 0.02);
    CHECK(payload_bytes(w) == parameter_count(spec) * 4);
}

TEST_CASE("i8 error bound, constant tensors, and file round trip") {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 20; ++t) {
        const Tensor x = random_tensor({257}, rng, -3.0F, 2.0F);
        const AffineParams p = affine_params_for(x.values());
        const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
        CHECK(quantize_value(*lo, p) == -128);
        CHECK(quantize_value(*hi, p) == 127);
        for (float v : x.values()) {
            const float back = dequantize_value(quantize_value(v, p), p);
            // scale/2 plus float rounding of the reconstruction itself
            REQUIRE(std::abs(back - v) <= p.scale / 2 * (1 + 1e-5) + 4 * std::numeric_limits<float>::epsilon());
        }
    }
    ModelWeights w;
    w.tensors = {Tensor({5}, 0.37F), Tensor({3}, 0.0F)};
    const ModelWeights q = quantize_i8(w);
    CHECK(q.tensors == w.tensors);
    CHECK(q.affine[0].scale == 0.0F);

    const ModelSpec spec = small_spec();
    const ModelWeights qw = quantize_i8(init_weights(spec, 4));
    const fs::path path = temp_file("i8.fmdl");
    save(spec, qw, {"a", "b", "c"}, path);
    const LoadedModel back = load(path);
    CHECK(back.weights.precision == Precision::i8_affine);
    CHECK(back.weights.tensors == qw.tensors);

    const ModelWeights hw = quantize_f16(init_weights(spec, 4));
    save(spec, hw, {"a", "b", "c"}, path);
    CHECK(load(path).weights.tensors == hw.tensors);
    fs::remove(path);
}

TEST_CASE("quantized inference agrees with f32 on random inputs") {
    MicroNetOptions opt;
    opt.side = 16;
    opt.num_classes = 5;
    const ModelSpec spec = make_micro_mobilenet(opt);
    const ModelWeights w = init_weights(spec, 31);
    const ModelWeights h = quantize_f16(w);
    const ModelWeights q = quantize_i8(w);
    std::mt19937_64 rng(32);
    int agree16 = 0, agree8 = 0;
    for (int i = 0; i < 500; ++i) {
        const Tensor x = random_tensor(spec.input_shape, rng, 0.0F, 1.0F);
        const std::size_t ref = argmax(forward_one(spec, w, x).values());
        agree16 += argmax(forward_one(spec, h, x).values()) == ref ? 1 : 0;
        agree8 += argmax(forward_one(spec, q, x).values()) == ref ? 1 : 0;
    }
    CHECK(agree16 >= 495);
    CHECK(agree8 >= 475);
}

TEST_CASE("ensemble file: payload is the member sum, one shared header") {
    const ModelSpec a = small_spec();
    MicroNetOptions opt;
    opt.side = 8;
    opt.num_classes = 3;
    opt.extra_dense = 16;
    const ModelSpec b = make_micro_mobilenet(opt);
    const ModelBundle one_a{{"x", "y", "z"}, {{a, init_weights(a, 1)}}};
    const ModelBundle one_b{{"x", "y", "z"}, {{b, init_weights(b, 2)}}};
    const ModelBundle both{{"x", "y", "z"}, {one_a.members[0], one_b.members[0]}};
    CHECK(payload_bytes(both) == payload_bytes(one_a) + payload_bytes(one_b));

    const fs::path pa = temp_file("a.fmdl"), pb = temp_file("b.fmdl"), pe = temp_file("ens.fmdl");
    save_bundle(one_a, pa);
    save_bundle(one_b, pb);
    save_bundle(both, pe);
    // Each single file repeats the class table; the ensemble carries it once.
    const std::uint64_t class_table = 4 + 3 * (4 + 1);
    CHECK(model_size_bytes(pe) == model_size_bytes(pa) + model_size_bytes(pb) - 12 - class_table);
    const ModelBundle back = load_bundle(pe);
    REQUIRE(back.members.size() == 2);
    CHECK(back.members[1].spec == b);
    CHECK_THROWS_AS(load(pe), DataError);
    for (const auto& p : {pa, pb, pe}) fs::remove(p);
}

TEST_CASE("model descriptor JSON round trip") {
    const ModelSpec spec = small_spec(4);
    CHECK(spec_from_json(spec_to_json(spec)) == spec);
    auto j = spec_to_json(spec);
    j["layers"][0]["padding"] = "reflect";
    CHECK_THROWS(spec_from_json(j));
}
