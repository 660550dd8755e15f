#include "flora/optim.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace flora {

std::string to_string(OptimizerKind kind) {
    switch (kind) {
        case OptimizerKind::sgd: return "SGD";
        case OptimizerKind::adam: return "Adam";
        case OptimizerKind::adamax: return "Adamax";
        case OptimizerKind::adagrad: return "Adagrad";
    }
    return "unknown";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
    std::string lower = name;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "sgd") return OptimizerKind::sgd;
    if (lower == "adam") return OptimizerKind::adam;
    if (lower == "adamax") return OptimizerKind::adamax;
    if (lower == "adagrad") return OptimizerKind::adagrad;
    throw DataError("unknown optimizer '" + name + "'");
}

void OptimizerConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw DataError("learning rate must be positive, got " + std::to_string(learning_rate));
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw DataError("beta1 and beta2 must lie in [0, 1)");
    }
    if (!(epsilon >= 0.0)) {
        throw DataError("epsilon must be non-negative");
    }
}

template <typename T>
void optimizer_step(const OptimizerConfig& config, OptimizerState& state, std::vector<BasicTensor<T>>& params,
                    const std::vector<BasicTensor<T>>& grads, std::span<const std::string> names) {
    config.validate();
    auto name_of = [&](std::size_t i) {
        return i < names.size() ? names[i] : "parameter #" + std::to_string(i);
    };
    if (params.size() != grads.size()) {
        throw ShapeError("optimizer: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape()) {
            throw ShapeError("optimizer: gradient of " + name_of(i) + " has shape " +
                             shape_string(grads[i].shape()) + ", parameter has " + shape_string(params[i].shape()));
        }
        for (T g : grads[i].values()) {
            if (!std::isfinite(g)) {
                throw NumericalError("non-finite gradient in " + name_of(i));
            }
        }
    }
    const bool needs_first = config.kind == OptimizerKind::adam || config.kind == OptimizerKind::adamax;
    const bool needs_second = config.kind != OptimizerKind::sgd;
    if (state.step == 0) {
        state.first.clear();
        state.second.clear();
        for (const auto& p : params) {
            if (needs_first) state.first.emplace_back(p.shape());
            if (needs_second) state.second.emplace_back(p.shape());
        }
    } else if ((needs_first && state.first.size() != params.size()) ||
               (needs_second && state.second.size() != params.size())) {
        throw ShapeError("optimizer state does not match the parameter list");
    }

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double lr = config.learning_rate, b1 = config.beta1, b2 = config.beta2, eps = config.epsilon;
    const double b1_correction = 1.0 - std::pow(b1, t);
    const double b2_correction = 1.0 - std::pow(b2, t);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].values();
        auto g = grads[i].values();
        switch (config.kind) {
            case OptimizerKind::sgd:
                for (std::size_t j = 0; j < w.size(); ++j) {
                    w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * static_cast<double>(g[j]));
                }
                break;
            case OptimizerKind::adagrad: {
                auto acc = state.second[i].values();
                for (std::size_t j = 0; j < w.size(); ++j) {
                    const double gj = g[j];
                    acc[j] += gj * gj;
                    w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * gj / (std::sqrt(acc[j]) + eps));
                }
                break;
            }
            case OptimizerKind::adam: {
                auto m = state.first[i].values();
                auto v = state.second[i].values();
                for (std::size_t j = 0; j < w.size(); ++j) {
                    const double gj = g[j];
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    const double m_hat = m[j] / b1_correction;
                    const double v_hat = v[j] / b2_correction;
                    w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * m_hat / (std::sqrt(v_hat) + eps));
                }
                break;
            }
            case OptimizerKind::adamax: {
                auto m = state.first[i].values();
                auto u = state.second[i].values();
                const double step_size = lr / b1_correction;
                for (std::size_t j = 0; j < w.size(); ++j) {
                    const double gj = g[j];
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    u[j] = std::max(b2 * u[j], std::abs(gj));
                    w[j] = static_cast<T>(static_cast<double>(w[j]) - step_size * m[j] / (u[j] + eps));
                }
                break;
            }
        }
    }
}

template void optimizer_step<float>(const OptimizerConfig&, OptimizerState&, std::vector<BasicTensor<float>>&,
                                    const std::vector<BasicTensor<float>>&, std::span<const std::string>);
template void optimizer_step<double>(const OptimizerConfig&, OptimizerState&, std::vector<BasicTensor<double>>&,
                                     const std::vector<BasicTensor<double>>&, std::span<const std::string>);

void optimizer_step(const OptimizerConfig& config, OptimizerState& state, ModelWeights& weights,
                    const GradientSet& grads, std::span<const std::string> names) {
    optimizer_step<float>(config, state, weights.tensors, grads.tensors, names);
}

}  // namespace flora
