#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flora/model.hpp"
#include "flora/tensor.hpp"

namespace flora {

enum class OptimizerKind { sgd, adam, adamax, adagrad };

std::string to_string(OptimizerKind kind);
/// Accepts the canonical names case-insensitively ("SGD", "adam", ...).
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adagrad;
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// Moment accumulators, one per parameter tensor, plus the step counter.
/// Adam: first/second raw moments. Adamax: first moment / infinity norm.
/// Adagrad: running sum of squared gradients in `second`. SGD keeps none.
struct OptimizerState {
    std::uint64_t step = 0;
    std::vector<BasicTensor<double>> first;
    std::vector<BasicTensor<double>> second;
};

/// Applies one update to every parameter tensor and advances state.step by 1.
///
/// SGD:     w -= lr * g
/// Adagrad: G += g^2;  w -= lr * g / (sqrt(G) + eps)
/// Adam:    bias-corrected moments, w -= lr * m_hat / (sqrt(v_hat) + eps)
/// Adamax:  u = max(b2 * u, |g|);  w -= (lr / (1 - b1^t)) * m / (u + eps)
///
/// Throws ShapeError when gradients and parameters disagree and
/// NumericalError naming the parameter when a gradient is NaN/Inf.
template <typename T>
void optimizer_step(const OptimizerConfig& config, OptimizerState& state, std::vector<BasicTensor<T>>& params,
                    const std::vector<BasicTensor<T>>& grads, std::span<const std::string> names = {});

void optimizer_step(const OptimizerConfig& config, OptimizerState& state, ModelWeights& weights,
                    const GradientSet& grads, std::span<const std::string> names = {});

extern template void optimizer_step<float>(const OptimizerConfig&, OptimizerState&, std::vector<BasicTensor<float>>&,
                                           const std::vector<BasicTensor<float>>&, std::span<const std::string>);
extern template void optimizer_step<double>(const OptimizerConfig&, OptimizerState&,
                                            std::vector<BasicTensor<double>>&, const std::vector<BasicTensor<double>>&,
                                            std::span<const std::string>);

}  // namespace flora
