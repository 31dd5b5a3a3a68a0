#include "mdbdp/optimizer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace mdbdp;

namespace {

/// A single affine layer 1 -> n used as a plain parameter vector: the weight
/// column holds theta.
NetworkParams<double> vector_params(const Vector& theta) {
    auto p = init_params<double>({1, {}, static_cast<int>(theta.size()), Activation::tanh()}, 0);
    p.layers[0].weight.col(0) = theta;
    p.layers[0].bias.setZero();
    return p;
}

NetworkParams<double> vector_grads(const NetworkParams<double>& like, const Vector& g) {
    auto out = zeros_like(like);
    out.layers[0].weight.col(0) = g;
    return out;
}

} // namespace

TEST(LrAt, Endpoints) {
    TrainConfig c;
    EXPECT_DOUBLE_EQ(lr_at(c, 0, 100), 1e-2);
    EXPECT_DOUBLE_EQ(lr_at(c, 99, 100), 1e-4);
    EXPECT_DOUBLE_EQ(lr_at(c, 0, 1), 1e-2);
}

TEST(LrAt, GeometricMidpoint) {
    TrainConfig c;
    EXPECT_NEAR(lr_at(c, 1, 3), 1e-3, 1e-17);
}

TEST(LrAt, NonIncreasing) {
    TrainConfig c;
    c.lr_initial = 0.05;
    c.lr_final = 0.001;
    double prev = lr_at(c, 0, 500);
    for (long i = 1; i < 500; ++i) {
        const double lr = lr_at(c, i, 500);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.lr_final = 0.1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.lr_final = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.iterations_per_step = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    const auto p = vector_params(Vector::Random(4));
    auto [state, q] = adam_update(AdamState<double>(p), p, zeros_like(p), 0.1);
    EXPECT_TRUE(q == p);
    EXPECT_EQ(state.step_count, 1);
}

TEST(Adam, FirstStepClosedForm) {
    Vector theta(3), g(3);
    theta << 1.0, -2.0, 0.5;
    g << 3.0, -0.25, 1e-9;
    const auto p = vector_params(theta);
    const double lr = 0.01;
    const auto [state, q] = adam_update(AdamState<double>(p), p, vector_grads(p, g), lr);
    for (int i = 0; i < 3; ++i) {
        // m_hat = g, v_hat = g^2 after one bias-corrected step
        const double expect = theta(i) - lr * g(i) / (std::abs(g(i)) + 1e-8);
        EXPECT_NEAR(q.layers[0].weight(i, 0), expect, 1e-15);
    }
    EXPECT_NEAR(q.layers[0].weight(0, 0), 1.0 - lr, 1e-8);
    EXPECT_NEAR(q.layers[0].weight(1, 0), -2.0 + lr, 1e-7);
}

TEST(Adam, ScalarQuadraticConverges) {
    auto p = vector_params(Vector::Zero(1));
    AdamState<double> state(p);
    for (int s = 0; s < 2000; ++s) {
        const double th = p.layers[0].weight(0, 0);
        adam_step(state, p, vector_grads(p, Vector::Constant(1, 2 * (th - 3))), 0.05);
    }
    EXPECT_LE(std::abs(p.layers[0].weight(0, 0) - 3.0), 1e-3);
}

TEST(Adam, PositiveDefiniteQuadraticUpTo50Dims) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0, 1);
    TrainConfig config;
    for (int dim : {2, 10, 50}) {
        Matrix B(dim, dim);
        for (Eigen::Index i = 0; i < B.size(); ++i) B.data()[i] = n(rng);
        const Matrix A = B * B.transpose() / dim + 0.5 * Matrix::Identity(dim, dim);
        Vector target(dim);
        for (int i = 0; i < dim; ++i) target(i) = n(rng);
        auto p = vector_params(Vector::Zero(dim));
        AdamState<double> state(p);
        const long total = 5000;
        for (long s = 0; s < total; ++s) {
            const Vector th = p.layers[0].weight.col(0);
            adam_step(state, p, vector_grads(p, A * (th - target)), lr_at(config, s, total));
        }
        const Vector e = p.layers[0].weight.col(0) - target;
        EXPECT_LE(0.5 * e.dot(A * e), 1e-6) << "dim " << dim;
    }
}

TEST(Adam, NonFiniteGradientNamesParameter) {
    const auto p = vector_params(Vector::Zero(3));
    auto g = zeros_like(p);
    g.layers[0].weight(2, 0) = std::nan("");
    AdamState<double> state(p);
    auto q = p;
    try {
        adam_step(state, q, g, 0.1);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("layers[0].weight(2,0)"), std::string::npos) << e.what();
    }
    EXPECT_TRUE(q == p);
}

TEST(Adam, ShapeMismatchRejected) {
    const auto p = vector_params(Vector::Zero(3));
    const auto other = vector_params(Vector::Zero(4));
    AdamState<double> state(p);
    auto q = p;
    EXPECT_THROW(adam_step(state, q, zeros_like(other), 0.1), std::invalid_argument);
}

TEST(Adam, PureUpdate) {
    const auto p = vector_params(Vector::Random(3));
    const auto g = vector_grads(p, Vector::Random(3));
    const AdamState<double> s(p);
    const auto a = adam_update(s, p, g, 0.01);
    const auto b = adam_update(s, p, g, 0.01);
    EXPECT_TRUE(a.second == b.second);
    EXPECT_TRUE(a.first.first_moment == b.first.first_moment);
    EXPECT_TRUE(a.first.second_moment == b.first.second_moment);
}
