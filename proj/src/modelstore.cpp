#include "flora/modelstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "flora/errors.hpp"

namespace flora {

namespace {

class Writer {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        out_.insert(out_.end(), p, p + n);
    }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void string(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n) {
            throw FormatError(std::string("truncated model file while reading ") + what + ": expected " +
                              std::to_string(n) + " bytes, got " + std::to_string(data_.size() - pos_));
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return data_[pos_++];
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::string string(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

nlohmann::json layer_to_json(const LayerSpec& layer) {
    nlohmann::json j{{"kind", to_string(layer.kind)}};
    switch (layer.kind) {
        case LayerKind::standard_conv:
        case LayerKind::depthwise_conv:
        case LayerKind::pointwise_conv:
            j["kernel"] = layer.kernel;
            j["stride"] = layer.stride;
            j["padding"] = layer.padding == Padding::same ? "same" : "valid";
            if (layer.kind != LayerKind::depthwise_conv) {
                j["units"] = layer.units;
            }
            break;
        case LayerKind::dense:
            j["units"] = layer.units;
            break;
        default:
            break;
    }
    return j;
}

LayerSpec layer_from_json(const nlohmann::json& j) {
    LayerSpec layer;
    layer.kind = layer_kind_from_string(j.at("kind").get<std::string>());
    layer.kernel = j.value("kernel", std::size_t{1});
    layer.stride = j.value("stride", std::size_t{1});
    const std::string padding = j.value("padding", std::string("same"));
    if (padding != "same" && padding != "valid") {
        throw DataError("unknown padding '" + padding + "'");
    }
    layer.padding = padding == "same" ? Padding::same : Padding::valid;
    layer.units = j.value("units", std::size_t{0});
    return layer;
}

Precision precision_from_byte(std::uint8_t tag) {
    if (tag > static_cast<std::uint8_t>(Precision::i8_affine)) {
        throw FormatError("unknown tensor precision tag " + std::to_string(tag));
    }
    return static_cast<Precision>(tag);
}

void write_member(Writer& w, const MemberModel& m) {
    check_weights(m.spec, m.weights);
    w.string(spec_to_json(m.spec).dump());
    w.u32(static_cast<std::uint32_t>(m.weights.tensors.size()));
    const Precision precision = m.weights.precision;
    for (std::size_t i = 0; i < m.weights.tensors.size(); ++i) {
        const Tensor& t = m.weights.tensors[i];
        w.u8(static_cast<std::uint8_t>(precision));
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) {
            w.u32(static_cast<std::uint32_t>(d));
        }
        if (precision == Precision::i8_affine) {
            w.f32(m.weights.affine[i].scale);
            w.f32(m.weights.affine[i].min);
        }
    }
    w.u64(payload_bytes(m.weights));
    for (std::size_t i = 0; i < m.weights.tensors.size(); ++i) {
        for (float v : m.weights.tensors[i].values()) {
            switch (precision) {
                case Precision::f32: w.f32(v); break;
                case Precision::f16: w.u16(float_to_half(v)); break;
                case Precision::i8_affine:
                    w.u8(static_cast<std::uint8_t>(quantize_value(v, m.weights.affine[i])));
                    break;
            }
        }
    }
}

MemberModel read_member(Reader& r, std::size_t index) {
    MemberModel m;
    const std::string descriptor = r.string("model descriptor");
    try {
        m.spec = spec_from_json(nlohmann::json::parse(descriptor));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("member " + std::to_string(index) + ": malformed model descriptor: " + e.what());
    } catch (const ShapeError& e) {
        throw FormatError("member " + std::to_string(index) + ": invalid model descriptor: " + e.what());
    }
    const std::uint32_t count = r.u32("tensor count");
    struct Entry {
        Precision precision;
        Shape shape;
        AffineParams affine;
    };
    std::vector<Entry> table;
    std::uint64_t expected = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.precision = precision_from_byte(r.u8("tensor precision"));
        const std::uint8_t rank = r.u8("tensor rank");
        for (std::uint8_t d = 0; d < rank; ++d) {
            e.shape.push_back(r.u32("tensor dims"));
        }
        if (e.precision == Precision::i8_affine) {
            e.affine.scale = r.f32("i8 scale");
            e.affine.min = r.f32("i8 min");
        }
        expected += shape_size(e.shape) * bytes_per_element(e.precision);
        table.push_back(std::move(e));
    }
    const std::uint64_t declared = r.u64("payload length");
    if (declared != expected) {
        throw FormatError("member " + std::to_string(index) + ": payload length field says " +
                          std::to_string(declared) + " bytes, tensor table needs " + std::to_string(expected));
    }
    if (r.remaining() < expected) {
        throw FormatError("truncated payload in member " + std::to_string(index) + ": expected " +
                          std::to_string(expected) + " bytes, got " + std::to_string(r.remaining()));
    }
    if (!table.empty()) {
        m.weights.precision = table.front().precision;
    }
    for (const Entry& e : table) {
        if (e.precision != m.weights.precision) {
            throw FormatError("member " + std::to_string(index) + " mixes tensor precisions");
        }
        Tensor t;
        try {
            t = Tensor(e.shape);
        } catch (const ShapeError& err) {
            throw FormatError(std::string("bad tensor shape: ") + err.what());
        }
        const auto raw = r.take(shape_size(e.shape) * bytes_per_element(e.precision));
        for (std::size_t k = 0; k < t.size(); ++k) {
            switch (e.precision) {
                case Precision::f32: {
                    std::uint32_t bits = 0;
                    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[4 * k + b]) << (8 * b);
                    t[k] = std::bit_cast<float>(bits);
                    break;
                }
                case Precision::f16: {
                    const auto bits = static_cast<std::uint16_t>(raw[2 * k] | (raw[2 * k + 1] << 8));
                    t[k] = half_to_float(bits);
                    break;
                }
                case Precision::i8_affine:
                    t[k] = dequantize_value(static_cast<std::int8_t>(raw[k]), e.affine);
                    break;
            }
        }
        m.weights.tensors.push_back(std::move(t));
        if (e.precision == Precision::i8_affine) {
            m.weights.affine.push_back(e.affine);
        }
    }
    try {
        check_weights(m.spec, m.weights);
    } catch (const ShapeError& e) {
        throw FormatError("member " + std::to_string(index) + ": " + e.what());
    }
    return m;
}

}  // namespace

nlohmann::json spec_to_json(const ModelSpec& spec) {
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerSpec& layer : spec.layers) {
        layers.push_back(layer_to_json(layer));
    }
    return nlohmann::json{{"name", spec.name},
                          {"input_shape", spec.input_shape},
                          {"num_classes", spec.num_classes},
                          {"layers", layers}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.name = j.value("name", std::string{});
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    for (const auto& layer : j.at("layers")) {
        spec.layers.push_back(layer_from_json(layer));
    }
    validate(spec);
    return spec;
}

std::vector<std::uint8_t> serialize(const ModelBundle& bundle) {
    Writer w;
    w.bytes(kModelMagic.data(), kModelMagic.size());
    w.u32(kModelFormatVersion);
    w.u32(static_cast<std::uint32_t>(bundle.class_names.size()));
    for (const std::string& name : bundle.class_names) {
        w.string(name);
    }
    w.u32(static_cast<std::uint32_t>(bundle.members.size()));
    for (const MemberModel& m : bundle.members) {
        if (m.spec.num_classes != bundle.class_names.size()) {
            throw DataError("model '" + m.spec.name + "' has " + std::to_string(m.spec.num_classes) +
                            " outputs but the file lists " + std::to_string(bundle.class_names.size()) + " classes");
        }
        write_member(w, m);
    }
    return w.take();
}

ModelBundle deserialize(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    r.need(4, "magic");
    const auto magic = r.take(4);
    if (!std::equal(magic.begin(), magic.end(), kModelMagic.begin(),
                    [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); })) {
        throw FormatError("not a model file: bad magic bytes");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kModelFormatVersion) {
        throw FormatError("unsupported model format version " + std::to_string(version) + " (this build reads " +
                          std::to_string(kModelFormatVersion) + ")");
    }
    ModelBundle bundle;
    const std::uint32_t classes = r.u32("class count");
    for (std::uint32_t i = 0; i < classes; ++i) {
        bundle.class_names.push_back(r.string("class name"));
    }
    const std::uint32_t members = r.u32("member count");
    for (std::uint32_t i = 0; i < members; ++i) {
        MemberModel m = read_member(r, i);
        if (m.spec.num_classes != bundle.class_names.size()) {
            throw FormatError("member " + std::to_string(i) + " predicts " + std::to_string(m.spec.num_classes) +
                              " classes but the file lists " + std::to_string(bundle.class_names.size()));
        }
        bundle.members.push_back(std::move(m));
    }
    if (r.remaining() != 0) {
        throw FormatError(std::to_string(r.remaining()) + " trailing bytes after the last member");
    }
    return bundle;
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = serialize(bundle);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write model file " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("failed writing model file " + path.string());
    }
}

ModelBundle load_bundle(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open model file " + path.string());
    }
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return deserialize(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save(const ModelSpec& spec, const ModelWeights& weights, const std::vector<std::string>& class_names,
          const std::filesystem::path& path) {
    save_bundle(ModelBundle{class_names, {MemberModel{spec, weights}}}, path);
}

LoadedModel load(const std::filesystem::path& path) {
    ModelBundle bundle = load_bundle(path);
    if (bundle.members.size() != 1) {
        throw DataError(path.string() + " holds " + std::to_string(bundle.members.size()) +
                        " models; load it as an ensemble");
    }
    return {std::move(bundle.members.front().spec), std::move(bundle.members.front().weights),
            std::move(bundle.class_names)};
}

EnsembleModel to_ensemble(const ModelBundle& bundle) { return EnsembleModel(bundle.class_names, bundle.members); }

std::uint16_t float_to_half(float value) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const std::uint32_t sign = (bits >> 16) & 0x8000U;
    const std::uint32_t exponent = (bits >> 23) & 0xFFU;
    std::uint32_t mantissa = bits & 0x7FFFFFU;

    if (exponent == 0xFFU) {
        // Inf stays Inf, NaN stays a quiet NaN.
        return static_cast<std::uint16_t>(sign | 0x7C00U | (mantissa != 0 ? 0x200U : 0U));
    }
    const int unbiased = static_cast<int>(exponent) - 127;
    if (unbiased > 15) {
        return static_cast<std::uint16_t>(sign | 0x7C00U);
    }
    if (unbiased >= -14) {
        // Normal half: keep 10 mantissa bits, round to nearest even.
        std::uint32_t half = (static_cast<std::uint32_t>(unbiased + 15) << 10) | (mantissa >> 13);
        const std::uint32_t rest = mantissa & 0x1FFFU;
        if (rest > 0x1000U || (rest == 0x1000U && (half & 1U) != 0)) {
            ++half;  // may carry into the exponent, which is the correct result
        }
        return static_cast<std::uint16_t>(sign | half);
    }
    if (unbiased < -25) {
        return static_cast<std::uint16_t>(sign);
    }
    // Subnormal half.
    mantissa |= 0x800000U;
    const int shift = -unbiased - 14 + 13;
    std::uint32_t half = mantissa >> shift;
    const std::uint32_t rest = mantissa & ((1U << shift) - 1U);
    const std::uint32_t halfway = 1U << (shift - 1);
    if (rest > halfway || (rest == halfway && (half & 1U) != 0)) {
        ++half;
    }
    return static_cast<std::uint16_t>(sign | half);
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000U) << 16;
    const std::uint32_t exponent = (h >> 10) & 0x1FU;
    std::uint32_t mantissa = h & 0x3FFU;
    std::uint32_t bits = 0;
    if (exponent == 0) {
        if (mantissa == 0) {
            bits = sign;
        } else {
            int e = -1;
            do {
                ++e;
                mantissa <<= 1;
            } while ((mantissa & 0x400U) == 0);
            bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mantissa & 0x3FFU) << 13);
        }
    } else if (exponent == 0x1FU) {
        bits = sign | 0x7F800000U | (mantissa << 13);
    } else {
        bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
    }
    return std::bit_cast<float>(bits);
}

ModelWeights quantize_f16(const ModelWeights& weights) {
    ModelWeights out;
    out.precision = Precision::f16;
    for (const Tensor& t : weights.tensors) {
        Tensor q = t;
        for (float& v : q.values()) {
            const float h = half_to_float(float_to_half(v));
            if (std::isinf(h) && !std::isinf(v)) {
                throw NumericalError("weight " + std::to_string(v) + " overflows 16-bit storage");
            }
            v = h;
        }
        out.tensors.push_back(std::move(q));
    }
    return out;
}

AffineParams affine_params_for(std::span<const float> values) {
    if (values.empty()) {
        return {};
    }
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    AffineParams p;
    p.min = *lo;
    p.scale = static_cast<float>((static_cast<double>(*hi) - static_cast<double>(*lo)) / 255.0);
    return p;
}

std::int8_t quantize_value(float value, const AffineParams& params) {
    if (params.scale == 0.0F) {
        return -128;
    }
    const double steps = (static_cast<double>(value) - params.min) / params.scale;
    const long code = std::lround(steps) - 128;
    return static_cast<std::int8_t>(std::clamp(code, -128L, 127L));
}

float dequantize_value(std::int8_t code, const AffineParams& params) {
    return static_cast<float>(static_cast<double>(params.min) +
                              static_cast<double>(params.scale) * (static_cast<int>(code) + 128));
}

ModelWeights quantize_i8(const ModelWeights& weights) {
    ModelWeights out;
    out.precision = Precision::i8_affine;
    for (const Tensor& t : weights.tensors) {
        const AffineParams params = affine_params_for(t.values());
        Tensor q = t;
        for (float& v : q.values()) {
            v = dequantize_value(quantize_value(v, params), params);
        }
        out.tensors.push_back(std::move(q));
        out.affine.push_back(params);
    }
    return out;
}

std::size_t bytes_per_element(Precision precision) {
    switch (precision) {
        case Precision::f32: return 4;
        case Precision::f16: return 2;
        case Precision::i8_affine: return 1;
    }
    return 4;
}

std::uint64_t payload_bytes(const ModelWeights& weights) {
    std::uint64_t total = 0;
    for (const Tensor& t : weights.tensors) {
        total += t.size() * bytes_per_element(weights.precision);
    }
    return total;
}

std::uint64_t payload_bytes(const ModelBundle& bundle) {
    std::uint64_t total = 0;
    for (const MemberModel& m : bundle.members) {
        total += payload_bytes(m.weights);
    }
    return total;
}

std::uint64_t model_size_bytes(const std::filesystem::path& path) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) {
        throw DataError("cannot stat " + path.string() + ": " + ec.message());
    }
    return size;
}

}  // namespace flora
