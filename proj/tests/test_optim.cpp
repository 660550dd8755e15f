#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "flora/errors.hpp"
#include "flora/optim.hpp"

using namespace flora;

namespace {

template <typename T>
T one_step(OptimizerConfig config, T w, T g) {
    OptimizerState state;
    std::vector<BasicTensor<T>> params{BasicTensor<T>({1}, w)};
    const std::vector<BasicTensor<T>> grads{BasicTensor<T>({1}, g)};
    optimizer_step(config, state, params, grads);
    return params[0][0];
}

}  // namespace

TEST_CASE("SGD first step") {
    CHECK(one_step<float>({OptimizerKind::sgd, 0.1}, 1.0F, 0.5F) == doctest::Approx(0.95).epsilon(1e-7));
}

TEST_CASE("Adagrad first step") {
    // G = 4, w = 1 - 0.1 * 2 / (2 + 1e-8)
    const double expected = 1.0 - 0.1 * 2.0 / (std::sqrt(4.0) + 1e-8);
    const float w = one_step<float>({OptimizerKind::adagrad, 0.1}, 1.0F, 2.0F);
    CHECK(std::abs(w - 0.9) <= 1e-6);
    CHECK(std::abs(w - expected) <= 1e-6);
}

TEST_CASE("Adamax first step") {
    // m = 0.05, u = 0.5, step = (0.001 / 0.1) * 0.05 / 0.5 = 0.001
    const double m = (1 - 0.9) * 0.5;
    const double u = 0.5;
    const double expected = 1.0 - (0.001 / (1 - 0.9)) * m / (u + 1e-8);
    const double w = one_step<double>({OptimizerKind::adamax, 0.001}, 1.0, 0.5);
    CHECK(std::abs(w - 0.999) <= 1e-9);
    CHECK(std::abs(w - expected) <= 1e-15);
    // float storage carries the same rule at single precision.
    CHECK(std::abs(one_step<float>({OptimizerKind::adamax, 0.001}, 1.0F, 0.5F) - 0.999) <= 1e-6);
}

TEST_CASE("Adam first step magnitude is at most lr") {
    for (double g : {1e-3, 0.5, 3.0, -7.0}) {
        const double w = one_step<double>({OptimizerKind::adam, 0.01}, 0.0, g);
        CHECK(std::abs(w) <= 0.01 * (1 + 1e-6));
    }
}

TEST_CASE("zero gradient leaves weights unchanged") {
    for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adamax, OptimizerKind::adagrad}) {
        OptimizerState state;
        std::vector<BasicTensor<float>> params{BasicTensor<float>({3}, std::vector<float>{1, -2, 3})};
        const std::vector<BasicTensor<float>> grads{BasicTensor<float>({3})};
        for (int i = 0; i < 3; ++i) {
            optimizer_step({kind, 0.1}, state, params, grads);
        }
        CHECK(params[0].storage() == std::vector<float>{1, -2, 3});
        CHECK(state.step == 3);
    }
}

TEST_CASE("quadratic bowl: 200 steps of f(w) = |w|^2 from w0 = 1 reach |w| < 1e-2") {
    for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adamax, OptimizerKind::adagrad}) {
        CAPTURE(to_string(kind));
        OptimizerState state;
        std::vector<BasicTensor<float>> params{BasicTensor<float>({4}, 1.0F)};
        for (int t = 0; t < 200; ++t) {
            BasicTensor<float> g = params[0];
            for (float& v : g.values()) {
                v *= 2.0F;
            }
            optimizer_step({kind, 0.1}, state, params, std::vector{g});
        }
        double norm = 0;
        for (float v : params[0].values()) {
            norm += static_cast<double>(v) * v;
        }
        CHECK(std::sqrt(norm) < 1e-2);
    }
}

TEST_CASE("determinism") {
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n;
    BasicTensor<float> w({10}), g({10});
    for (std::size_t i = 0; i < 10; ++i) {
        w[i] = n(rng);
        g[i] = n(rng);
    }
    for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adamax, OptimizerKind::adagrad}) {
        OptimizerState s1, s2;
        std::vector p1{w}, p2{w};
        for (int i = 0; i < 5; ++i) {
            optimizer_step({kind, 0.01}, s1, p1, std::vector{g});
            optimizer_step({kind, 0.01}, s2, p2, std::vector{g});
        }
        CHECK(p1 == p2);
    }
}

TEST_CASE("errors") {
    OptimizerState state;
    std::vector<BasicTensor<float>> params{BasicTensor<float>({2}, 1.0F)};
    CHECK_THROWS_AS(optimizer_step({OptimizerKind::sgd, 0.1}, state, params, std::vector{BasicTensor<float>({3})}),
                    ShapeError);
    const std::vector<std::string> names{"layer0.dense.kernel"};
    BasicTensor<float> nan_grad({2});
    nan_grad[1] = std::numeric_limits<float>::quiet_NaN();
    try {
        optimizer_step({OptimizerKind::adam, 0.1}, state, params, std::vector{nan_grad}, names);
        FAIL("expected a numerical error");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("layer0.dense.kernel") != std::string::npos);
    }
    CHECK_THROWS(OptimizerConfig{OptimizerKind::sgd, 0.0}.validate());
    CHECK_THROWS(OptimizerConfig{OptimizerKind::adam, 0.1, 1.0}.validate());
}

TEST_CASE("names round trip, case-insensitively") {
    for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adamax, OptimizerKind::adagrad}) {
        CHECK(optimizer_kind_from_string(to_string(kind)) == kind);
    }
    CHECK(optimizer_kind_from_string("adamax") == OptimizerKind::adamax);
    CHECK_THROWS(optimizer_kind_from_string("rmsprop"));
}
