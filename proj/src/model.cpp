#include "flora/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace flora {

namespace {

constexpr std::size_t kNoParams = std::numeric_limits<std::size_t>::max();

// Index of the first parameter tensor of every layer, kNoParams for
// parameterless layers.
std::vector<std::size_t> parameter_offsets(const ModelSpec& spec) {
    std::vector<std::size_t> offsets;
    offsets.reserve(spec.layers.size());
    std::size_t next = 0;
    for (const LayerSpec& layer : spec.layers) {
        if (layer.trainable()) {
            offsets.push_back(next);
            next += 2;
        } else {
            offsets.push_back(kNoParams);
        }
    }
    return offsets;
}

template <typename T>
BasicTensor<T> apply_layer(const LayerSpec& layer, const BasicTensor<T>* params, const BasicTensor<T>& x) {
    switch (layer.kind) {
        case LayerKind::standard_conv:
        case LayerKind::pointwise_conv:
            return conv2d(x, params[0], params[1], layer.stride, layer.padding);
        case LayerKind::depthwise_conv:
            return depthwise_conv2d(x, params[0], params[1], layer.stride, layer.padding);
        case LayerKind::relu:
            return relu(x);
        case LayerKind::global_avg_pool:
            return global_avg_pool(x);
        case LayerKind::dense:
            return dense(x, params[0], params[1]);
        case LayerKind::softmax:
            return softmax(x);
    }
    throw ShapeError("unknown layer kind");
}

// Runs the network on one sample. When `inputs` is given it receives the input
// of every layer, which is what the backward pass needs.
template <typename T>
BasicTensor<T> run_forward(const ModelSpec& spec, const std::vector<std::size_t>& offsets,
                           const std::vector<BasicTensor<T>>& params, const BasicTensor<T>& input,
                           std::vector<BasicTensor<T>>* inputs) {
    BasicTensor<T> x = input;
    if (inputs != nullptr) {
        inputs->clear();
        inputs->reserve(spec.layers.size());
    }
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const BasicTensor<T>* p = offsets[i] == kNoParams ? nullptr : &params[offsets[i]];
        BasicTensor<T> y = apply_layer(spec.layers[i], p, x);
        if (inputs != nullptr) {
            inputs->push_back(std::move(x));
        }
        x = std::move(y);
    }
    return x;
}

void check_input(const ModelSpec& spec, const Tensor& input) {
    if (input.shape() != spec.input_shape) {
        throw ShapeError("input shape " + shape_string(input.shape()) + " does not match model input " +
                         shape_string(spec.input_shape));
    }
}

}  // namespace

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::standard_conv: return "standard-conv";
        case LayerKind::depthwise_conv: return "depthwise-conv";
        case LayerKind::pointwise_conv: return "pointwise-conv";
        case LayerKind::relu: return "relu";
        case LayerKind::global_avg_pool: return "global-avg-pool";
        case LayerKind::dense: return "dense";
        case LayerKind::softmax: return "softmax";
    }
    return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
    for (LayerKind kind : {LayerKind::standard_conv, LayerKind::depthwise_conv, LayerKind::pointwise_conv,
                           LayerKind::relu, LayerKind::global_avg_pool, LayerKind::dense, LayerKind::softmax}) {
        if (to_string(kind) == name) {
            return kind;
        }
    }
    throw DataError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv(std::size_t kernel, std::size_t out_channels, std::size_t stride, Padding padding) {
    return {LayerKind::standard_conv, kernel, stride, padding, out_channels};
}

LayerSpec LayerSpec::depthwise(std::size_t kernel, std::size_t stride, Padding padding) {
    return {LayerKind::depthwise_conv, kernel, stride, padding, 0};
}

LayerSpec LayerSpec::pointwise(std::size_t out_channels) {
    return {LayerKind::pointwise_conv, 1, 1, Padding::same, out_channels};
}

LayerSpec LayerSpec::relu_layer() { return {LayerKind::relu, 1, 1, Padding::same, 0}; }
LayerSpec LayerSpec::pool() { return {LayerKind::global_avg_pool, 1, 1, Padding::same, 0}; }
LayerSpec LayerSpec::dense_layer(std::size_t units) { return {LayerKind::dense, 1, 1, Padding::same, units}; }
LayerSpec LayerSpec::softmax_layer() { return {LayerKind::softmax, 1, 1, Padding::same, 0}; }

bool LayerSpec::trainable() const {
    return kind == LayerKind::standard_conv || kind == LayerKind::depthwise_conv ||
           kind == LayerKind::pointwise_conv || kind == LayerKind::dense;
}

void add_separable_block(ModelSpec& spec, std::size_t out_channels, std::size_t stride) {
    spec.layers.push_back(LayerSpec::depthwise(3, stride));
    spec.layers.push_back(LayerSpec::relu_layer());
    spec.layers.push_back(LayerSpec::pointwise(out_channels));
    spec.layers.push_back(LayerSpec::relu_layer());
}

ModelSpec make_micro_mobilenet(const MicroNetOptions& options) {
    ModelSpec spec;
    spec.input_shape = {options.side, options.side, options.channels};
    spec.num_classes = options.num_classes;
    spec.name = options.name.empty()
                    ? (options.extra_dense == 0 ? std::string("MicroNet")
                                                : "MicroNetD" + std::to_string(options.extra_dense))
                    : options.name;
    spec.layers.push_back(LayerSpec::conv(3, options.stem_channels, 2));
    spec.layers.push_back(LayerSpec::relu_layer());
    std::size_t channels = options.stem_channels;
    for (std::size_t b = 0; b < options.blocks; ++b) {
        channels *= 2;
        add_separable_block(spec, channels, b % 2 == 1 ? 2 : 1);
    }
    spec.layers.push_back(LayerSpec::pool());
    if (options.extra_dense > 0) {
        spec.layers.push_back(LayerSpec::dense_layer(options.extra_dense));
        spec.layers.push_back(LayerSpec::relu_layer());
    }
    spec.layers.push_back(LayerSpec::dense_layer(options.num_classes));
    spec.layers.push_back(LayerSpec::softmax_layer());
    validate(spec);
    return spec;
}

std::vector<Shape> infer_shapes(const ModelSpec& spec) {
    if (spec.input_shape.size() != 3 && spec.input_shape.size() != 1) {
        throw ShapeError("model input must be HxWxC or a feature vector, got " + shape_string(spec.input_shape));
    }
    for (std::size_t d : spec.input_shape) {
        if (d == 0) {
            throw ShapeError("model input has a zero dimension: " + shape_string(spec.input_shape));
        }
    }
    if (spec.num_classes == 0) {
        throw ShapeError("model must have at least one class");
    }
    std::vector<Shape> shapes{spec.input_shape};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& layer = spec.layers[i];
        const Shape& in = shapes.back();
        const std::string where = "layer " + std::to_string(i) + " (" + to_string(layer.kind) + ")";
        const bool spatial = in.size() == 3;
        Shape out;
        switch (layer.kind) {
            case LayerKind::standard_conv:
            case LayerKind::depthwise_conv:
            case LayerKind::pointwise_conv: {
                if (!spatial) {
                    throw ShapeError(where + " needs a HxWxC input, got " + shape_string(in));
                }
                if (layer.kernel == 0 || layer.stride == 0) {
                    throw ShapeError(where + " needs kernel and stride >= 1");
                }
                if (layer.kind == LayerKind::pointwise_conv && layer.kernel != 1) {
                    throw ShapeError(where + " must use a 1x1 kernel");
                }
                const std::size_t ch = layer.kind == LayerKind::depthwise_conv ? in[2] : layer.units;
                if (ch == 0) {
                    throw ShapeError(where + " needs a positive output channel count");
                }
                const ConvGeometry g =
                    conv_geometry(in[0], in[1], layer.kernel, layer.kernel, layer.stride, layer.padding);
                out = {g.out_h, g.out_w, ch};
                break;
            }
            case LayerKind::relu:
                out = in;
                break;
            case LayerKind::global_avg_pool:
                if (!spatial) {
                    throw ShapeError(where + " needs a HxWxC input, got " + shape_string(in));
                }
                out = {in[2]};
                break;
            case LayerKind::dense:
                if (spatial) {
                    throw ShapeError(where + " must follow global-avg-pool");
                }
                if (layer.units == 0) {
                    throw ShapeError(where + " needs a positive unit count");
                }
                out = {layer.units};
                break;
            case LayerKind::softmax:
                if (spatial) {
                    throw ShapeError(where + " must follow global-avg-pool");
                }
                if (i + 1 != spec.layers.size()) {
                    throw ShapeError(where + " must be the final layer");
                }
                out = in;
                break;
        }
        shapes.push_back(std::move(out));
    }
    const std::size_t n = spec.layers.size();
    if (n < 2 || spec.layers[n - 1].kind != LayerKind::softmax || spec.layers[n - 2].kind != LayerKind::dense) {
        throw ShapeError("model must end with dense(num_classes) followed by softmax");
    }
    if (spec.layers[n - 2].units != spec.num_classes) {
        throw ShapeError("final dense layer has " + std::to_string(spec.layers[n - 2].units) + " units but the model has " +
                         std::to_string(spec.num_classes) + " classes");
    }
    return shapes;
}

void validate(const ModelSpec& spec) { (void)infer_shapes(spec); }

std::vector<Shape> parameter_shapes(const ModelSpec& spec) {
    const std::vector<Shape> shapes = infer_shapes(spec);
    std::vector<Shape> params;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& layer = spec.layers[i];
        const Shape& in = shapes[i];
        switch (layer.kind) {
            case LayerKind::standard_conv:
            case LayerKind::pointwise_conv:
                params.push_back({layer.kernel, layer.kernel, in[2], layer.units});
                params.push_back({layer.units});
                break;
            case LayerKind::depthwise_conv:
                params.push_back({layer.kernel, layer.kernel, in[2]});
                params.push_back({in[2]});
                break;
            case LayerKind::dense:
                params.push_back({in[0], layer.units});
                params.push_back({layer.units});
                break;
            default:
                break;
        }
    }
    return params;
}

std::vector<std::string> parameter_names(const ModelSpec& spec) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (spec.layers[i].trainable()) {
            const std::string prefix = "layer" + std::to_string(i) + "." + to_string(spec.layers[i].kind);
            names.push_back(prefix + ".kernel");
            names.push_back(prefix + ".bias");
        }
    }
    return names;
}

std::size_t parameter_count(const ModelSpec& spec) {
    std::size_t total = 0;
    for (const Shape& s : parameter_shapes(spec)) {
        total += shape_size(s);
    }
    return total;
}

std::string to_string(Precision precision) {
    switch (precision) {
        case Precision::f32: return "f32";
        case Precision::f16: return "f16";
        case Precision::i8_affine: return "i8-affine";
    }
    return "unknown";
}

Precision precision_from_string(const std::string& name) {
    if (name == "f32") return Precision::f32;
    if (name == "f16") return Precision::f16;
    if (name == "i8-affine" || name == "i8") return Precision::i8_affine;
    throw DataError("unknown precision '" + name + "'");
}

ModelWeights init_weights(const ModelSpec& spec, std::uint64_t seed) {
    const std::vector<Shape> shapes = parameter_shapes(spec);
    std::mt19937_64 rng(seed);
    ModelWeights weights;
    for (std::size_t i = 0; i < shapes.size(); i += 2) {
        const Shape& k = shapes[i];
        // Fan-in is every kernel dimension except the output axis.
        std::size_t fan_in = shape_size(k);
        if (k.size() == 4) {
            fan_in /= k[3];
        } else if (k.size() == 2) {
            fan_in = k[0];
        } else if (k.size() == 3) {
            fan_in = k[0] * k[1];
        }
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-limit, limit);
        Tensor kernel(k);
        for (float& v : kernel.values()) {
            v = static_cast<float>(dist(rng));
        }
        weights.tensors.push_back(std::move(kernel));
        weights.tensors.emplace_back(shapes[i + 1]);
    }
    return weights;
}

void check_weights(const ModelSpec& spec, const ModelWeights& weights) {
    const std::vector<Shape> shapes = parameter_shapes(spec);
    if (shapes.size() != weights.tensors.size()) {
        throw ShapeError("model '" + spec.name + "' expects " + std::to_string(shapes.size()) +
                         " parameter tensors, weights carry " + std::to_string(weights.tensors.size()));
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (shapes[i] != weights.tensors[i].shape()) {
            throw ShapeError("parameter " + std::to_string(i) + " has shape " +
                             shape_string(weights.tensors[i].shape()) + ", expected " + shape_string(shapes[i]));
        }
    }
    if (weights.precision == Precision::i8_affine && weights.affine.size() != weights.tensors.size()) {
        throw ShapeError("i8-affine weights need one scale/min pair per tensor");
    }
}

Tensor forward_one(const ModelSpec& spec, const ModelWeights& weights, const Tensor& input) {
    check_input(spec, input);
    return run_forward<float>(spec, parameter_offsets(spec), weights.tensors, input, nullptr);
}

std::vector<Tensor> forward(const ModelSpec& spec, const ModelWeights& weights, std::span<const Tensor> batch) {
    check_weights(spec, weights);
    const auto offsets = parameter_offsets(spec);
    std::vector<Tensor> outputs;
    outputs.reserve(batch.size());
    for (const Tensor& input : batch) {
        check_input(spec, input);
        outputs.push_back(run_forward<float>(spec, offsets, weights.tensors, input, nullptr));
    }
    return outputs;
}

BackwardResult backward(const ModelSpec& spec, const ModelWeights& weights, std::span<const Tensor> batch,
                        std::span<const std::size_t> true_classes) {
    check_weights(spec, weights);
    if (batch.size() != true_classes.size()) {
        throw ShapeError("backward: " + std::to_string(batch.size()) + " samples but " +
                         std::to_string(true_classes.size()) + " labels");
    }
    if (batch.empty()) {
        throw ShapeError("backward: empty batch");
    }
    for (std::size_t label : true_classes) {
        if (label >= spec.num_classes) {
            throw DataError("class index " + std::to_string(label) + " out of range for " +
                            std::to_string(spec.num_classes) + " classes");
        }
    }
    const auto offsets = parameter_offsets(spec);
    BackwardResult result;
    for (const Tensor& p : weights.tensors) {
        result.gradients.tensors.emplace_back(p.shape());
    }
    auto accumulate = [](Tensor& into, const Tensor& g) {
        for (std::size_t i = 0; i < into.size(); ++i) {
            into[i] += g[i];
        }
    };

    std::vector<Tensor> inputs;
    double total_loss = 0.0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        check_input(spec, batch[s]);
        const Tensor probs = run_forward<float>(spec, offsets, weights.tensors, batch[s], &inputs);
        total_loss += cross_entropy(probs, true_classes[s]);

        // Softmax + cross-entropy collapse to p - onehot(y) at the logits.
        Tensor grad = probs;
        grad[true_classes[s]] -= 1.0F;
        for (std::size_t li = spec.layers.size() - 1; li-- > 0;) {
            const LayerSpec& layer = spec.layers[li];
            const Tensor& x = inputs[li];
            const std::size_t off = offsets[li];
            switch (layer.kind) {
                case LayerKind::standard_conv:
                case LayerKind::pointwise_conv: {
                    auto g = conv2d_backward(x, weights.tensors[off], grad, layer.stride, layer.padding);
                    accumulate(result.gradients.tensors[off], g.kernel);
                    accumulate(result.gradients.tensors[off + 1], g.bias);
                    grad = std::move(g.input);
                    break;
                }
                case LayerKind::depthwise_conv: {
                    auto g = depthwise_conv2d_backward(x, weights.tensors[off], grad, layer.stride, layer.padding);
                    accumulate(result.gradients.tensors[off], g.kernel);
                    accumulate(result.gradients.tensors[off + 1], g.bias);
                    grad = std::move(g.input);
                    break;
                }
                case LayerKind::dense: {
                    auto g = dense_backward(x, weights.tensors[off], grad);
                    accumulate(result.gradients.tensors[off], g.weights);
                    accumulate(result.gradients.tensors[off + 1], g.bias);
                    grad = std::move(g.input);
                    break;
                }
                case LayerKind::relu:
                    grad = relu_backward(x, grad);
                    break;
                case LayerKind::global_avg_pool:
                    grad = global_avg_pool_backward(x.shape(), grad);
                    break;
                case LayerKind::softmax:
                    throw ShapeError("softmax may only appear as the final layer");
            }
        }
    }
    const float inv = 1.0F / static_cast<float>(batch.size());
    for (Tensor& g : result.gradients.tensors) {
        for (float& v : g.values()) {
            v *= inv;
        }
    }
    result.mean_loss = total_loss / static_cast<double>(batch.size());
    return result;
}

namespace {

struct DoubleEval {
    double loss = 0.0;
    std::vector<bool> relu_signs;
};

DoubleEval evaluate_double(const ModelSpec& spec, const std::vector<std::size_t>& offsets,
                           const std::vector<BasicTensor<double>>& params, std::span<const BasicTensor<double>> batch,
                           std::span<const std::size_t> classes) {
    DoubleEval eval;
    std::vector<BasicTensor<double>> inputs;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto probs = run_forward<double>(spec, offsets, params, batch[s], &inputs);
        eval.loss += cross_entropy(probs, classes[s]);
        for (std::size_t li = 0; li < spec.layers.size(); ++li) {
            if (spec.layers[li].kind == LayerKind::relu) {
                for (double v : inputs[li].values()) {
                    eval.relu_signs.push_back(v > 0.0);
                }
            }
        }
    }
    eval.loss /= static_cast<double>(batch.size());
    return eval;
}

}  // namespace

GradCheckReport grad_check(const ModelSpec& spec, const ModelWeights& weights, std::span<const Tensor> batch,
                           std::span<const std::size_t> true_classes, const GradCheckOptions& options) {
    const BackwardResult analytic = backward(spec, weights, batch, true_classes);
    const auto offsets = parameter_offsets(spec);
    const std::vector<std::string> names = parameter_names(spec);

    std::vector<BasicTensor<double>> params;
    for (const Tensor& t : weights.tensors) {
        params.push_back(t.cast<double>());
    }
    std::vector<BasicTensor<double>> inputs;
    for (const Tensor& t : batch) {
        inputs.push_back(t.cast<double>());
    }
    const DoubleEval base = evaluate_double(spec, offsets, params, inputs, true_classes);

    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double original = params[p][i];
            params[p][i] = original + options.step;
            const DoubleEval plus = evaluate_double(spec, offsets, params, inputs, true_classes);
            params[p][i] = original - options.step;
            const DoubleEval minus = evaluate_double(spec, offsets, params, inputs, true_classes);
            params[p][i] = original;
            if (plus.relu_signs != base.relu_signs || minus.relu_signs != base.relu_signs) {
                ++report.skipped_kinks;
                continue;
            }
            const double numeric = (plus.loss - minus.loss) / (2.0 * options.step);
            const double a = analytic.gradients.tensors[p][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
            const double rel = std::abs(a - numeric) / denom;
            ++report.checked;
            if (rel > report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst_parameter = names[p];
                report.worst_index = i;
            }
        }
    }
    report.passed = report.max_relative_error < options.tolerance;
    std::ostringstream msg;
    if (report.passed) {
        msg << "gradient check passed: max relative error " << report.max_relative_error << " over "
            << report.checked << " coordinates";
    } else {
        msg << "gradient check failed: parameter " << report.worst_parameter << "[" << report.worst_index
            << "] has relative error " << report.max_relative_error << " > tolerance " << options.tolerance;
    }
    report.message = msg.str();
    return report;
}

std::size_t argmax(std::span<const float> values) {
    if (values.empty()) {
        throw ShapeError("argmax of an empty vector");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) {
            best = i;
        }
    }
    return best;
}

}  // namespace flora
