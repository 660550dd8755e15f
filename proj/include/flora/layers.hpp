#pragma once

// Forward and backward kernels for the layer set used by the MobileNet-style
// classifiers. Kernels are templates over the element type; the engine
// instantiates them for float, the gradient checker for double.
//
// Padding convention ("same"): output extent is ceil(in / stride) and the
// total zero padding is max((out - 1) * stride + k - in, 0), with the smaller
// half (floor) placed on the top/left edge. "valid" uses no padding and an
// output extent of (in - k) / stride + 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "flora/errors.hpp"
#include "flora/tensor.hpp"

namespace flora {

enum class Padding { same, valid };

struct ConvGeometry {
    std::size_t out_h = 0;
    std::size_t out_w = 0;
    std::size_t pad_top = 0;
    std::size_t pad_left = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, Padding padding) {
    if (stride == 0) {
        throw ShapeError("convolution stride must be >= 1");
    }
    if (padding == Padding::same) {
        return (in + stride - 1) / stride;
    }
    if (in < k) {
        throw ShapeError("valid convolution produces an empty output: input extent " + std::to_string(in) +
                         " < kernel extent " + std::to_string(k));
    }
    return (in - k) / stride + 1;
}

inline ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t kh, std::size_t kw,
                                  std::size_t stride, Padding padding) {
    ConvGeometry g;
    g.out_h = conv_out_extent(in_h, kh, stride, padding);
    g.out_w = conv_out_extent(in_w, kw, stride, padding);
    if (padding == Padding::same) {
        const auto total = [&](std::size_t out, std::size_t k, std::size_t in) -> std::size_t {
            const std::size_t covered = (out - 1) * stride + k;
            return covered > in ? covered - in : 0;
        };
        g.pad_top = total(g.out_h, kh, in_h) / 2;
        g.pad_left = total(g.out_w, kw, in_w) / 2;
    }
    return g;
}

namespace detail {

inline void require_rank(const Shape& shape, std::size_t rank, const char* what) {
    if (shape.size() != rank) {
        throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                         shape_string(shape));
    }
}

// Maps output coordinate + kernel offset to an input coordinate; false when it
// lands in the zero padding.
inline bool source_index(std::size_t out, std::size_t k, std::size_t stride, std::size_t pad, std::size_t extent,
                         std::size_t& src) {
    const std::size_t pos = out * stride + k;
    if (pos < pad || pos - pad >= extent) {
        return false;
    }
    src = pos - pad;
    return true;
}

}  // namespace detail

/// Standard cross-correlation. input HxWxCin, kernel KhxKwxCinxCout, bias Cout.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      std::size_t stride, Padding padding) {
    detail::require_rank(input.shape(), 3, "conv2d input");
    detail::require_rank(kernel.shape(), 4, "conv2d kernel");
    const std::size_t in_h = input.dim(0), in_w = input.dim(1), cin = input.dim(2);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    if (kernel.dim(2) != cin) {
        throw ShapeError("conv2d channel mismatch: input " + shape_string(input.shape()) + ", kernel " +
                         shape_string(kernel.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != cout) {
        throw ShapeError("conv2d bias must be [" + std::to_string(cout) + "], got " + shape_string(bias.shape()));
    }
    const ConvGeometry g = conv_geometry(in_h, in_w, kh, kw, stride, padding);
    BasicTensor<T> out({g.out_h, g.out_w, cout});
    const T* in = input.data();
    const T* ker = kernel.data();
    T* dst = out.data();
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            T* o = dst + (oy * g.out_w + ox) * cout;
            std::copy(bias.data(), bias.data() + cout, o);
            for (std::size_t ky = 0; ky < kh; ++ky) {
                std::size_t iy = 0;
                if (!detail::source_index(oy, ky, stride, g.pad_top, in_h, iy)) {
                    continue;
                }
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    std::size_t ix = 0;
                    if (!detail::source_index(ox, kx, stride, g.pad_left, in_w, ix)) {
                        continue;
                    }
                    const T* src = in + (iy * in_w + ix) * cin;
                    const T* wk = ker + (ky * kw + kx) * cin * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const T v = src[ci];
                        const T* wrow = wk + ci * cout;
                        for (std::size_t co = 0; co < cout; ++co) {
                            o[co] += v * wrow[co];
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
struct ConvGrads {
    BasicTensor<T> input;
    BasicTensor<T> kernel;
    BasicTensor<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_out, std::size_t stride, Padding padding) {
    const std::size_t in_h = input.dim(0), in_w = input.dim(1), cin = input.dim(2);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    const ConvGeometry g = conv_geometry(in_h, in_w, kh, kw, stride, padding);
    if (grad_out.shape() != Shape{g.out_h, g.out_w, cout}) {
        throw ShapeError("conv2d backward: gradient shape " + shape_string(grad_out.shape()) + " mismatches output");
    }
    ConvGrads<T> grads{BasicTensor<T>(input.shape()), BasicTensor<T>(kernel.shape()), BasicTensor<T>({cout})};
    const T* in = input.data();
    const T* ker = kernel.data();
    T* gin = grads.input.data();
    T* gker = grads.kernel.data();
    T* gbias = grads.bias.data();
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const T* go = grad_out.data() + (oy * g.out_w + ox) * cout;
            for (std::size_t co = 0; co < cout; ++co) {
                gbias[co] += go[co];
            }
            for (std::size_t ky = 0; ky < kh; ++ky) {
                std::size_t iy = 0;
                if (!detail::source_index(oy, ky, stride, g.pad_top, in_h, iy)) {
                    continue;
                }
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    std::size_t ix = 0;
                    if (!detail::source_index(ox, kx, stride, g.pad_left, in_w, ix)) {
                        continue;
                    }
                    const T* src = in + (iy * in_w + ix) * cin;
                    T* gsrc = gin + (iy * in_w + ix) * cin;
                    const std::size_t base = (ky * kw + kx) * cin * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const T* wrow = ker + base + ci * cout;
                        T* gwrow = gker + base + ci * cout;
                        T acc{0};
                        for (std::size_t co = 0; co < cout; ++co) {
                            gwrow[co] += src[ci] * go[co];
                            acc += wrow[co] * go[co];
                        }
                        gsrc[ci] += acc;
                    }
                }
            }
        }
    }
    return grads;
}

/// Per-channel spatial convolution. input HxWxC, kernel KhxKwxC, bias C.
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                const BasicTensor<T>& bias, std::size_t stride, Padding padding) {
    detail::require_rank(input.shape(), 3, "depthwise input");
    detail::require_rank(kernel.shape(), 3, "depthwise kernel");
    const std::size_t in_h = input.dim(0), in_w = input.dim(1), ch = input.dim(2);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
    if (kernel.dim(2) != ch) {
        throw ShapeError("depthwise channel mismatch: input " + shape_string(input.shape()) + ", kernel " +
                         shape_string(kernel.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != ch) {
        throw ShapeError("depthwise bias must be [" + std::to_string(ch) + "], got " + shape_string(bias.shape()));
    }
    const ConvGeometry g = conv_geometry(in_h, in_w, kh, kw, stride, padding);
    BasicTensor<T> out({g.out_h, g.out_w, ch});
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            T* o = out.data() + (oy * g.out_w + ox) * ch;
            std::copy(bias.data(), bias.data() + ch, o);
            for (std::size_t ky = 0; ky < kh; ++ky) {
                std::size_t iy = 0;
                if (!detail::source_index(oy, ky, stride, g.pad_top, in_h, iy)) {
                    continue;
                }
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    std::size_t ix = 0;
                    if (!detail::source_index(ox, kx, stride, g.pad_left, in_w, ix)) {
                        continue;
                    }
                    const T* src = input.data() + (iy * in_w + ix) * ch;
                    const T* wk = kernel.data() + (ky * kw + kx) * ch;
                    for (std::size_t c = 0; c < ch; ++c) {
                        o[c] += src[c] * wk[c];
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                       const BasicTensor<T>& grad_out, std::size_t stride, Padding padding) {
    const std::size_t in_h = input.dim(0), in_w = input.dim(1), ch = input.dim(2);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
    const ConvGeometry g = conv_geometry(in_h, in_w, kh, kw, stride, padding);
    if (grad_out.shape() != Shape{g.out_h, g.out_w, ch}) {
        throw ShapeError("depthwise backward: gradient shape " + shape_string(grad_out.shape()) +
                         " mismatches output");
    }
    ConvGrads<T> grads{BasicTensor<T>(input.shape()), BasicTensor<T>(kernel.shape()), BasicTensor<T>({ch})};
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const T* go = grad_out.data() + (oy * g.out_w + ox) * ch;
            for (std::size_t c = 0; c < ch; ++c) {
                grads.bias[c] += go[c];
            }
            for (std::size_t ky = 0; ky < kh; ++ky) {
                std::size_t iy = 0;
                if (!detail::source_index(oy, ky, stride, g.pad_top, in_h, iy)) {
                    continue;
                }
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    std::size_t ix = 0;
                    if (!detail::source_index(ox, kx, stride, g.pad_left, in_w, ix)) {
                        continue;
                    }
                    const std::size_t src_off = (iy * in_w + ix) * ch;
                    const std::size_t k_off = (ky * kw + kx) * ch;
                    for (std::size_t c = 0; c < ch; ++c) {
                        grads.kernel[k_off + c] += input[src_off + c] * go[c];
                        grads.input[src_off + c] += kernel[k_off + c] * go[c];
                    }
                }
            }
        }
    }
    return grads;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
    BasicTensor<T> out = input;
    for (T& v : out.values()) {
        v = std::max(v, T{0});
    }
    return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_out) {
    BasicTensor<T> grad = grad_out;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!(input[i] > T{0})) {
            grad[i] = T{0};
        }
    }
    return grad;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
    detail::require_rank(input.shape(), 3, "global_avg_pool input");
    const std::size_t hw = input.dim(0) * input.dim(1), ch = input.dim(2);
    std::vector<T> sums(ch, T{0});
    for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t c = 0; c < ch; ++c) {
            sums[c] += input[p * ch + c];
        }
    }
    for (T& s : sums) {
        s /= static_cast<T>(hw);
    }
    return BasicTensor<T>({ch}, std::move(sums));
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape, const BasicTensor<T>& grad_out) {
    const std::size_t hw = input_shape[0] * input_shape[1], ch = input_shape[2];
    BasicTensor<T> grad(input_shape);
    for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t c = 0; c < ch; ++c) {
            grad[p * ch + c] = grad_out[c] / static_cast<T>(hw);
        }
    }
    return grad;
}

/// Affine map input(N) . weights(NxM) + bias(M).
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weights, const BasicTensor<T>& bias) {
    detail::require_rank(input.shape(), 1, "dense input");
    detail::require_rank(weights.shape(), 2, "dense weights");
    const std::size_t n = weights.dim(0), m = weights.dim(1);
    if (input.dim(0) != n) {
        throw ShapeError("dense input length " + std::to_string(input.dim(0)) + " does not match weights " +
                         shape_string(weights.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != m) {
        throw ShapeError("dense bias must be [" + std::to_string(m) + "], got " + shape_string(bias.shape()));
    }
    BasicTensor<T> out = bias;
    for (std::size_t i = 0; i < n; ++i) {
        const T v = input[i];
        const T* row = weights.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            out[j] += v * row[j];
        }
    }
    return out;
}

template <typename T>
struct DenseGrads {
    BasicTensor<T> input;
    BasicTensor<T> weights;
    BasicTensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                             const BasicTensor<T>& grad_out) {
    const std::size_t n = weights.dim(0), m = weights.dim(1);
    DenseGrads<T> grads{BasicTensor<T>({n}), BasicTensor<T>(weights.shape()), grad_out};
    for (std::size_t i = 0; i < n; ++i) {
        const T v = input[i];
        const T* row = weights.data() + i * m;
        T* grow = grads.weights.data() + i * m;
        T acc{0};
        for (std::size_t j = 0; j < m; ++j) {
            grow[j] = v * grad_out[j];
            acc += row[j] * grad_out[j];
        }
        grads.input[i] = acc;
    }
    return grads;
}

/// Max-subtracted softmax; accumulation runs in double regardless of T.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
    detail::require_rank(logits.shape(), 1, "softmax input");
    const T peak = *std::max_element(logits.values().begin(), logits.values().end());
    std::vector<double> e(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        e[i] = std::exp(static_cast<double>(logits[i]) - static_cast<double>(peak));
        total += e[i];
    }
    BasicTensor<T> out(logits.shape());
    for (std::size_t i = 0; i < e.size(); ++i) {
        out[i] = static_cast<T>(e[i] / total);
    }
    return out;
}

inline constexpr double kProbabilityFloor = 1e-12;

/// -ln(p[true_class]) with p clamped to >= 1e-12.
template <typename T>
double cross_entropy(const BasicTensor<T>& probabilities, std::size_t true_class) {
    if (true_class >= probabilities.size()) {
        throw DataError("class index " + std::to_string(true_class) + " out of range for " +
                        std::to_string(probabilities.size()) + " classes");
    }
    return -std::log(std::max(static_cast<double>(probabilities[true_class]), kProbabilityFloor));
}

}  // namespace flora
