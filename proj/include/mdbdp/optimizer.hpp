#pragma once

#include "mdbdp/neuralnet.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace mdbdp {

/// How the deep splitting scheme obtains its terminal approximation.
enum class TerminalMode { fit, exact };

struct TrainConfig {
    int iterations_per_step = 5000;
    int final_step_iterations = 20000;
    int batch_size = 1000;
    double lr_initial = 1e-2;
    double lr_final = 1e-4;
    std::uint64_t seed = 0;
    TerminalMode ds_terminal = TerminalMode::fit;

    void validate() const {
        if (iterations_per_step < 1 || final_step_iterations < 1 || batch_size < 1)
            throw std::invalid_argument("TrainConfig: iteration counts and batch size must be >= 1");
        if (!(lr_final > 0.0) || !(lr_initial >= lr_final))
            throw std::invalid_argument("TrainConfig: need lr_initial >= lr_final > 0");
    }
};

/// Exponential decay from lr_initial at iteration 0 to lr_final at total-1.
inline double lr_at(const TrainConfig& config, long iteration, long total) {
    if (total <= 1) return config.lr_initial;
    const double frac = static_cast<double>(iteration) / static_cast<double>(total - 1);
    if (frac >= 1.0) return config.lr_final;
    return config.lr_initial * std::pow(config.lr_final / config.lr_initial, frac);
}

template <typename Scalar>
struct AdamState {
    NetworkParams<Scalar> first_moment;
    NetworkParams<Scalar> second_moment;
    long step_count = 0;
    Scalar beta1 = Scalar(0.9);
    Scalar beta2 = Scalar(0.999);
    Scalar epsilon = Scalar(1e-8);

    AdamState() = default;
    explicit AdamState(const NetworkParams<Scalar>& like)
        : first_moment(zeros_like(like)), second_moment(zeros_like(like)) {}
};

namespace detail {

template <typename Scalar>
void check_gradient_finite(const NetworkParams<Scalar>& grads) {
    for (std::size_t l = 0; l < grads.layers.size(); ++l) {
        const auto& g = grads.layers[l];
        for (Eigen::Index c = 0; c < g.weight.cols(); ++c)
            for (Eigen::Index r = 0; r < g.weight.rows(); ++r)
                if (!std::isfinite(static_cast<double>(g.weight(r, c))))
                    throw std::runtime_error("adam_update: non-finite gradient at layers[" + std::to_string(l) +
                                             "].weight(" + std::to_string(r) + "," + std::to_string(c) + ")");
        for (Eigen::Index r = 0; r < g.bias.size(); ++r)
            if (!std::isfinite(static_cast<double>(g.bias(r))))
                throw std::runtime_error("adam_update: non-finite gradient at layers[" + std::to_string(l) + "].bias(" +
                                         std::to_string(r) + ")");
    }
}

} // namespace detail

/// In-place Adam step with bias correction.
template <typename Scalar>
void adam_step(AdamState<Scalar>& state, NetworkParams<Scalar>& params, const NetworkParams<Scalar>& grads,
               Scalar lr) {
    if (grads.layers.size() != params.layers.size() || state.first_moment.layers.size() != params.layers.size())
        throw std::invalid_argument("adam_update: shape mismatch");
    for (const auto& g : grads.layers) {
        if (!g.weight.allFinite() || !g.bias.allFinite()) detail::check_gradient_finite(grads);
    }

    ++state.step_count;
    const Scalar b1 = state.beta1, b2 = state.beta2;
    const Scalar c1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(state.step_count));
    const Scalar c2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(state.step_count));
    auto update = [&](auto& theta, auto& m, auto& v, const auto& g) {
        if (theta.size() != g.size() || m.size() != g.size())
            throw std::invalid_argument("adam_update: shape mismatch");
        m.array() = b1 * m.array() + (Scalar(1) - b1) * g.array();
        v.array() = b2 * v.array() + (Scalar(1) - b2) * g.array().square();
        theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        update(params.layers[l].weight, state.first_moment.layers[l].weight, state.second_moment.layers[l].weight,
               grads.layers[l].weight);
        update(params.layers[l].bias, state.first_moment.layers[l].bias, state.second_moment.layers[l].bias,
               grads.layers[l].bias);
    }
}

template <typename Scalar>
std::pair<AdamState<Scalar>, NetworkParams<Scalar>> adam_update(AdamState<Scalar> state, NetworkParams<Scalar> params,
                                                                 const NetworkParams<Scalar>& grads, Scalar lr) {
    adam_step(state, params, grads, lr);
    return {std::move(state), std::move(params)};
}

} // namespace mdbdp
