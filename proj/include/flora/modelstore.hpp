#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "flora/ensemble.hpp"
#include "flora/model.hpp"

namespace flora {

// .fmdl layout (all integers little-endian, see docs/format.md):
//
//   "FMDL"  u32 version
//   u32 class_count   { u32 byte_len, UTF-8 name } * class_count
//   u32 member_count
//   per member:
//     u32 descriptor_len, UTF-8 JSON model descriptor
//     u32 tensor_count
//     per tensor: u8 precision, u8 rank, u32 dims[rank], [f32 scale, f32 min if i8]
//     u64 payload_len, payload (tensors back to back in table order)
//
// A single model is a bundle with one member; an ensemble stores every member.

inline constexpr std::array<char, 4> kModelMagic{'F', 'M', 'D', 'L'};
inline constexpr std::uint32_t kModelFormatVersion = 1;
/// Size of a file with no classes and no members.
inline constexpr std::size_t kEmptyModelFileBytes = 16;

struct ModelBundle {
    std::vector<std::string> class_names;
    std::vector<MemberModel> members;
};

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> serialize(const ModelBundle& bundle);
/// Throws FormatError on bad magic, unsupported versions, malformed tables or
/// truncated payloads (the message carries expected and actual byte counts).
ModelBundle deserialize(std::span<const std::uint8_t> bytes);

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_bundle(const std::filesystem::path& path);

void save(const ModelSpec& spec, const ModelWeights& weights, const std::vector<std::string>& class_names,
          const std::filesystem::path& path);

struct LoadedModel {
    ModelSpec spec;
    ModelWeights weights;
    std::vector<std::string> class_names;
};

/// Loads a single-model file; DataError if the file holds an ensemble.
LoadedModel load(const std::filesystem::path& path);

EnsembleModel to_ensemble(const ModelBundle& bundle);

std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

/// Rounds every value to the nearest binary16 and tags the set f16.
ModelWeights quantize_f16(const ModelWeights& weights);

/// Per-tensor affine 8-bit codes: scale = (max - min) / 255 and code -128
/// stands for min, so value = min + scale * (code + 128). A constant tensor
/// gets scale 0 and reconstructs exactly.
ModelWeights quantize_i8(const ModelWeights& weights);

AffineParams affine_params_for(std::span<const float> values);
std::int8_t quantize_value(float value, const AffineParams& params);
float dequantize_value(std::int8_t code, const AffineParams& params);

std::size_t bytes_per_element(Precision precision);
/// Sum of element count x bytes per element, headers excluded.
std::uint64_t payload_bytes(const ModelWeights& weights);
std::uint64_t payload_bytes(const ModelBundle& bundle);

/// Whole file size on disk.
std::uint64_t model_size_bytes(const std::filesystem::path& path);

}  // namespace flora
