#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flora/layers.hpp"
#include "flora/tensor.hpp"

namespace flora {

enum class LayerKind {
    standard_conv,
    depthwise_conv,
    pointwise_conv,
    relu,
    global_avg_pool,
    dense,
    softmax,
};

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    Padding padding = Padding::same;
    /// Output channels for convolutions, output units for dense.
    std::size_t units = 0;

    static LayerSpec conv(std::size_t kernel, std::size_t out_channels, std::size_t stride = 1,
                          Padding padding = Padding::same);
    static LayerSpec depthwise(std::size_t kernel, std::size_t stride = 1, Padding padding = Padding::same);
    static LayerSpec pointwise(std::size_t out_channels);
    static LayerSpec relu_layer();
    static LayerSpec pool();
    static LayerSpec dense_layer(std::size_t units);
    static LayerSpec softmax_layer();

    bool trainable() const;
    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
    std::string name;
    /// HxWxC for image models, or [N] for models that start at a feature vector.
    Shape input_shape;
    std::size_t num_classes = 0;
    std::vector<LayerSpec> layers;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Appends depthwise -> relu -> pointwise -> relu.
void add_separable_block(ModelSpec& spec, std::size_t out_channels, std::size_t stride);

struct MicroNetOptions {
    std::size_t side = 16;
    std::size_t channels = 3;
    std::size_t num_classes = 3;
    std::size_t stem_channels = 8;
    std::size_t blocks = 2;
    /// Extra dense layer before the classifier; 0 keeps the plain head.
    std::size_t extra_dense = 0;
    std::string name;
};

/// Desk-scale MobileNet analogue: 3x3 stride-2 stem, separable blocks that
/// double the channel count (stride 2 on every second block), global average
/// pooling, optional extra dense + relu, dense(num_classes), softmax.
ModelSpec make_micro_mobilenet(const MicroNetOptions& options);

/// Activation shape after every layer; throws ShapeError when the spec is not
/// well formed. Element 0 is the input shape.
std::vector<Shape> infer_shapes(const ModelSpec& spec);
void validate(const ModelSpec& spec);

/// Trainable tensors in order: for each parametric layer, kernel then bias.
std::vector<Shape> parameter_shapes(const ModelSpec& spec);
std::vector<std::string> parameter_names(const ModelSpec& spec);
std::size_t parameter_count(const ModelSpec& spec);

enum class Precision : std::uint8_t { f32 = 0, f16 = 1, i8_affine = 2 };

std::string to_string(Precision precision);
Precision precision_from_string(const std::string& name);

/// Per-tensor affine code mapping for i8 storage: value = min + scale * (code + 128).
struct AffineParams {
    float scale = 0.0F;
    float min = 0.0F;
    friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

/// Parameter payload. Values are always held dequantized in f32 for inference;
/// the precision tag says how they are stored on disk.
struct ModelWeights {
    Precision precision = Precision::f32;
    std::vector<Tensor> tensors;
    /// One entry per tensor when precision == i8_affine, empty otherwise.
    std::vector<AffineParams> affine;
};

struct GradientSet {
    std::vector<Tensor> tensors;
};

/// He-uniform kernels (limit sqrt(6 / fan_in)) and zero biases.
ModelWeights init_weights(const ModelSpec& spec, std::uint64_t seed);

void check_weights(const ModelSpec& spec, const ModelWeights& weights);

/// Input tensor of one sample must equal spec.input_shape.
std::vector<Tensor> forward(const ModelSpec& spec, const ModelWeights& weights, std::span<const Tensor> batch);
Tensor forward_one(const ModelSpec& spec, const ModelWeights& weights, const Tensor& input);

struct BackwardResult {
    double mean_loss = 0.0;
    GradientSet gradients;
};

/// Gradient of the mean cross-entropy over the batch. The final layer must be
/// softmax; its composite gradient with the loss is (p - onehot(y)).
BackwardResult backward(const ModelSpec& spec, const ModelWeights& weights, std::span<const Tensor> batch,
                        std::span<const std::size_t> true_classes);

struct GradCheckOptions {
    double step = 1e-3;
    double tolerance = 1e-3;
    /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
    double floor = 1e-4;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    /// Coordinates skipped because a +/- step flipped a relu input sign.
    std::size_t skipped_kinks = 0;
    bool passed = true;
    std::string message;
};

/// Compares backward() against central differences of the loss, evaluated in
/// double precision, coordinate by coordinate.
GradCheckReport grad_check(const ModelSpec& spec, const ModelWeights& weights, std::span<const Tensor> batch,
                           std::span<const std::size_t> true_classes, const GradCheckOptions& options = {});

std::size_t argmax(std::span<const float> values);

}  // namespace flora
