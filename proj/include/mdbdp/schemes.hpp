#pragma once

#include "mdbdp/neuralnet.hpp"
#include "mdbdp/optimizer.hpp"
#include "mdbdp/random.hpp"
#include "mdbdp/stochastics.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mdbdp {

enum class Scheme { mdbdp, dbdp1, dbdp2, ds, dbsde };

inline std::string to_string(Scheme s) {
    switch (s) {
    case Scheme::mdbdp: return "mdbdp";
    case Scheme::dbdp1: return "dbdp1";
    case Scheme::dbdp2: return "dbdp2";
    case Scheme::ds: return "ds";
    case Scheme::dbsde: return "dbsde";
    }
    return "unknown";
}

inline Scheme parse_scheme(const std::string& name) {
    for (Scheme s : {Scheme::mdbdp, Scheme::dbdp1, Scheme::dbdp2, Scheme::ds, Scheme::dbsde})
        if (to_string(s) == name) return s;
    throw std::invalid_argument("unknown scheme '" + name + "' (expected mdbdp, dbdp1, dbdp2, ds or dbsde)");
}

/// Hidden part of the architecture shared by the value (U) and gradient (Z)
/// networks. U maps R^d -> R, Z maps R^d -> R^d.
struct HiddenLayout {
    std::vector<int> hidden_sizes;
    Activation activation = Activation::tanh();

    /// Two hidden layers of d + 10 tanh units.
    static HiddenLayout standard(int d) { return {{d + 10, d + 10}, Activation::tanh()}; }

    NetworkArchitecture value_arch(int d) const { return {d, hidden_sizes, 1, activation}; }
    NetworkArchitecture gradient_arch(int d) const { return {d, hidden_sizes, d, activation}; }
};

/// Trained approximators per time step.
///   mdbdp, dbdp1: u_nets[0..N-1], z_nets[0..N-1]
///   dbdp2:        u_nets[0..N-1]; Z derived as sigma^T D_x U
///   ds:           u_nets[0..N] (entry N is the terminal fit, empty when g is
///                 used directly); Z derived as sigma^T D_x U for i < N
///   dbsde:        u_nets[0] only, z_nets[0..N-1]
template <typename Scalar>
struct SchemeSolution {
    Scheme scheme = Scheme::mdbdp;
    std::vector<std::optional<NetworkParams<Scalar>>> u_nets;
    std::vector<std::optional<NetworkParams<Scalar>>> z_nets;
    TimeGrid<Scalar> grid;
    ModelSpec<Scalar> model;
};

template <typename Scalar>
SchemeSolution<Scalar> make_empty_solution(Scheme scheme, const ModelSpec<Scalar>& model, const TimeGrid<Scalar>& grid) {
    SchemeSolution<Scalar> sol;
    sol.scheme = scheme;
    sol.model = model;
    sol.grid = grid;
    const std::size_t N = static_cast<std::size_t>(grid.n_steps());
    switch (scheme) {
    case Scheme::mdbdp:
    case Scheme::dbdp1:
        sol.u_nets.resize(N);
        sol.z_nets.resize(N);
        break;
    case Scheme::dbdp2: sol.u_nets.resize(N); break;
    case Scheme::ds: sol.u_nets.resize(N + 1); break;
    case Scheme::dbsde:
        sol.u_nets.resize(1);
        sol.z_nets.resize(N);
        break;
    }
    return sol;
}

/// A scalar function of x evaluated on batches, optionally with its gradient.
/// Stands in for a trained network, the terminal condition or an analytic
/// solution wherever a frozen approximation is needed.
template <typename Scalar>
struct ScalarField {
    std::function<RowVec<Scalar>(const Mat<Scalar>&)> value;
    std::function<std::pair<RowVec<Scalar>, Mat<Scalar>>(const Mat<Scalar>&)> value_and_gradient;
};

template <typename Scalar>
ScalarField<Scalar> network_field(const NetworkParams<Scalar>& net) {
    ScalarField<Scalar> f;
    f.value = [&net](const Mat<Scalar>& x) { return RowVec<Scalar>(forward_batch(net, x)); };
    f.value_and_gradient = [&net](const Mat<Scalar>& x) {
        auto [out, jac] = forward_with_jacobian(net, x);
        return std::make_pair(RowVec<Scalar>(out), jacobian_to_gradients(jac, x.cols()));
    };
    return f;
}

template <typename Scalar>
ScalarField<Scalar> terminal_field(const ModelSpec<Scalar>& model) {
    ScalarField<Scalar> f;
    f.value = [&model](const Mat<Scalar>& x) { return model.terminal(x); };
    f.value_and_gradient = [&model](const Mat<Scalar>& x) {
        if (!model.terminal_gradient)
            throw std::invalid_argument("terminal condition has no gradient; cannot use it as a C1 approximation");
        return std::make_pair(model.terminal(x), model.terminal_gradient(x));
    };
    return f;
}

/// Frozen (U_j, Z_j) used inside the multistep target, for j in (i, N).
template <typename Scalar>
using FrozenPair = std::function<std::pair<RowVec<Scalar>, Mat<Scalar>>(int step, const Mat<Scalar>& x)>;

template <typename Scalar>
FrozenPair<Scalar> frozen_from_solution(const SchemeSolution<Scalar>& sol) {
    return [&sol](int j, const Mat<Scalar>& x) {
        const auto& u = sol.u_nets.at(static_cast<std::size_t>(j));
        const auto& z = sol.z_nets.at(static_cast<std::size_t>(j));
        if (!u || !z) throw std::invalid_argument("missing frozen network for step " + std::to_string(j));
        return std::make_pair(RowVec<Scalar>(forward_batch(*u, x)), forward_batch(*z, x));
    };
}

template <typename Scalar>
struct LossAndGradient {
    Scalar value = 0;
    NetworkParams<Scalar> grad_u;
    NetworkParams<Scalar> grad_z;  // empty for dbdp2 and ds
};

namespace detail {

template <typename Scalar>
void require_steps(const PathBatch<Scalar>& paths, int last) {
    if (paths.simulated_steps() < last)
        throw std::invalid_argument("paths cover " + std::to_string(paths.simulated_steps()) + " steps, need " +
                                    std::to_string(last));
}

template <typename Scalar>
const Mat<Scalar>& state(const PathBatch<Scalar>& p, int i) {
    return p.states[static_cast<std::size_t>(i)];
}

template <typename Scalar>
const Mat<Scalar>& increment(const PathBatch<Scalar>& p, int i) {
    return p.increments[static_cast<std::size_t>(i)];
}

/// Residual r = target - U - f(t_i, X_i, U, Z) dt_i - Z.dW_i and its
/// sensitivities dr/dU (1 x K) and dr/dZ (d x K).
template <typename Scalar>
struct LocalResidual {
    RowVec<Scalar> r;
    RowVec<Scalar> dr_du;
    Mat<Scalar> dr_dz;
};

template <typename Scalar>
LocalResidual<Scalar> local_residual(const ModelSpec<Scalar>& model, Scalar t, Scalar dt, const Mat<Scalar>& x,
                                     const Mat<Scalar>& dw, const RowVec<Scalar>& target, const RowVec<Scalar>& u,
                                     const Mat<Scalar>& z, bool with_sensitivities) {
    LocalResidual<Scalar> res;
    const RowVec<Scalar> f = model.generator(t, x, u, z);
    res.r = target - u - dt * f - z.cwiseProduct(dw).colwise().sum();
    if (with_sensitivities) {
        const auto p = generator_partials(model, t, x, u, z);
        res.dr_du = (-Scalar(1) - dt * p.dy.array()).matrix();
        res.dr_dz = -(dt * p.dz + dw);
    }
    return res;
}

} // namespace detail

/// Multistep target g(X_N) - sum_{j=i+1}^{N-1} [f(t_j, X_j, U_j, Z_j) dt_j + Z_j.dW_j]
/// with (U_j, Z_j) frozen.
template <typename Scalar>
RowVec<Scalar> multistep_target(const ModelSpec<Scalar>& model, const PathBatch<Scalar>& paths, int i,
                                const FrozenPair<Scalar>& frozen) {
    const TimeGrid<Scalar>& grid = paths.grid;
    const int N = grid.n_steps();
    detail::require_steps(paths, N);
    RowVec<Scalar> target = model.terminal(detail::state(paths, N));
    for (int j = i + 1; j < N; ++j) {
        const Mat<Scalar>& x = detail::state(paths, j);
        const auto [u, z] = frozen(j, x);
        target -= grid.dt(j) * model.generator(grid.time(j), x, u, z);
        target -= z.cwiseProduct(detail::increment(paths, j)).colwise().sum();
    }
    return target;
}

/// Quadratic loss of (U_i, Z_i) against a precomputed target (the common
/// kernel of the multistep and one-step DBDP losses).
template <typename Scalar>
LossAndGradient<Scalar> local_pair_loss(const ModelSpec<Scalar>& model, const PathBatch<Scalar>& paths, int i,
                                        const RowVec<Scalar>& target, const NetworkParams<Scalar>& u_net,
                                        const NetworkParams<Scalar>& z_net, bool with_gradient) {
    detail::require_steps(paths, i + 1);
    const auto& grid = paths.grid;
    const Mat<Scalar>& x = detail::state(paths, i);
    const Mat<Scalar>& dw = detail::increment(paths, i);
    const Eigen::Index K = x.cols();
    ForwardCache<Scalar> cu, cz;
    const RowVec<Scalar> u = forward_batch(u_net, x, with_gradient ? &cu : nullptr);
    const Mat<Scalar> z = forward_batch(z_net, x, with_gradient ? &cz : nullptr);
    const auto res = detail::local_residual(model, grid.time(i), grid.dt(i), x, dw, target, u, z, with_gradient);

    LossAndGradient<Scalar> out;
    out.value = res.r.squaredNorm() / Scalar(K);
    if (with_gradient) {
        const RowVec<Scalar> a = (Scalar(2) / Scalar(K)) * res.r;
        out.grad_u = zeros_like(u_net);
        out.grad_z = zeros_like(z_net);
        const Mat<Scalar> up_u = res.dr_du.cwiseProduct(a);
        const Mat<Scalar> up_z = res.dr_dz.array().rowwise() * a.array();
        backward_batch(u_net, cu, up_u, out.grad_u);
        backward_batch(z_net, cz, up_z, out.grad_z);
    }
    return out;
}

/// Multistep loss at step i with all later steps frozen.
template <typename Scalar>
LossAndGradient<Scalar> mdbdp_loss_and_gradient(const NetworkParams<Scalar>& u_i, const NetworkParams<Scalar>& z_i,
                                                const FrozenPair<Scalar>& frozen, const PathBatch<Scalar>& paths,
                                                const ModelSpec<Scalar>& model, int i, bool with_gradient = true) {
    const RowVec<Scalar> target = multistep_target(model, paths, i, frozen);
    return local_pair_loss(model, paths, i, target, u_i, z_i, with_gradient);
}

template <typename Scalar>
Scalar loss_mdbdp(const NetworkParams<Scalar>& u_i, const NetworkParams<Scalar>& z_i,
                  const SchemeSolution<Scalar>& frozen, const PathBatch<Scalar>& paths, int i) {
    return mdbdp_loss_and_gradient(u_i, z_i, frozen_from_solution(frozen), paths, frozen.model, i, false).value;
}

/// Multistep loss with every approximation (including the trained pair at
/// step i) supplied as a function. Used to measure the discretisation
/// residual of a known solution.
template <typename Scalar>
Scalar mdbdp_residual(const ModelSpec<Scalar>& model, const PathBatch<Scalar>& paths, int i,
                      const FrozenPair<Scalar>& approx) {
    const RowVec<Scalar> target = multistep_target(model, paths, i, approx);
    const auto& grid = paths.grid;
    const Mat<Scalar>& x = detail::state(paths, i);
    const auto [u, z] = approx(i, x);
    const auto res = detail::local_residual(model, grid.time(i), grid.dt(i), x, detail::increment(paths, i), target,
                                            u, z, false);
    return res.r.squaredNorm() / Scalar(x.cols());
}

template <typename Scalar>
LossAndGradient<Scalar> dbdp1_loss_and_gradient(const NetworkParams<Scalar>& u_i, const NetworkParams<Scalar>& z_i,
                                                const ScalarField<Scalar>& next, const PathBatch<Scalar>& paths,
                                                const ModelSpec<Scalar>& model, int i, bool with_gradient = true) {
    detail::require_steps(paths, i + 1);
    const RowVec<Scalar> target = next.value(detail::state(paths, i + 1));
    return local_pair_loss(model, paths, i, target, u_i, z_i, with_gradient);
}

/// One-step loss E|U_{i+1}(X_{i+1}) - U_i - f dt - Z_i.dW|^2 where u_next is
/// the trained network at step i+1 (g itself when i = N-1: pass nullptr).
template <typename Scalar>
Scalar loss_dbdp1(const NetworkParams<Scalar>& u_i, const NetworkParams<Scalar>& z_i,
                  const NetworkParams<Scalar>* u_next, const PathBatch<Scalar>& paths, const ModelSpec<Scalar>& model,
                  int i) {
    const auto next = u_next ? network_field(*u_next) : terminal_field(model);
    return dbdp1_loss_and_gradient(u_i, z_i, next, paths, model, i, false).value;
}

/// One-step loss with Z_i = sigma(t_i, X_i)^T D_x U_i(X_i); the gradient
/// flows through the input derivative of U_i.
template <typename Scalar>
LossAndGradient<Scalar> dbdp2_loss_and_gradient(const NetworkParams<Scalar>& u_i, const ScalarField<Scalar>& next,
                                                const PathBatch<Scalar>& paths, const ModelSpec<Scalar>& model, int i,
                                                bool with_gradient = true) {
    detail::require_steps(paths, i + 1);
    const auto& grid = paths.grid;
    const Scalar t = grid.time(i);
    const Mat<Scalar>& x = detail::state(paths, i);
    const Mat<Scalar>& dw = detail::increment(paths, i);
    const Eigen::Index K = x.cols();
    const RowVec<Scalar> target = next.value(detail::state(paths, i + 1));

    TangentCache<Scalar> cache;
    const auto [out, jac] = forward_with_jacobian(u_i, x, &cache);
    const RowVec<Scalar> u = out;
    const Mat<Scalar> z = apply_diffusion_transposed(model, t, x, jacobian_to_gradients(jac, K));
    const auto res = detail::local_residual(model, t, grid.dt(i), x, dw, target, u, z, with_gradient);

    LossAndGradient<Scalar> result;
    result.value = res.r.squaredNorm() / Scalar(K);
    if (with_gradient) {
        const RowVec<Scalar> a = (Scalar(2) / Scalar(K)) * res.r;
        const Mat<Scalar> up_u = res.dr_du.cwiseProduct(a);
        const Mat<Scalar> up_z = res.dr_dz.array().rowwise() * a.array();
        const Mat<Scalar> up_grad = apply_diffusion(model, t, x, up_z);
        result.grad_u = zeros_like(u_i);
        backward_with_jacobian(u_i, cache, up_u, gradients_to_jacobian(up_grad), result.grad_u);
    }
    return result;
}

template <typename Scalar>
Scalar loss_dbdp2(const NetworkParams<Scalar>& u_i, const NetworkParams<Scalar>* u_next,
                  const PathBatch<Scalar>& paths, const ModelSpec<Scalar>& model, int i) {
    const auto next = u_next ? network_field(*u_next) : terminal_field(model);
    return dbdp2_loss_and_gradient(u_i, next, paths, model, i, false).value;
}

/// Explicit deep-splitting target
/// U_{i+1}(X_{i+1}) - f(t_i, X_{i+1}, U_{i+1}(X_{i+1}), sigma(t_i, X_i)^T D_x U_{i+1}(X_{i+1})) dt_i.
template <typename Scalar>
RowVec<Scalar> splitting_target(const ModelSpec<Scalar>& model, const PathBatch<Scalar>& paths, int i,
                                const ScalarField<Scalar>& next) {
    detail::require_steps(paths, i + 1);
    const auto& grid = paths.grid;
    const Mat<Scalar>& x = detail::state(paths, i);
    const Mat<Scalar>& x_next = detail::state(paths, i + 1);
    const auto [v, grad] = next.value_and_gradient(x_next);
    const Mat<Scalar> z = apply_diffusion_transposed(model, grid.time(i), x, grad);
    return v - grid.dt(i) * model.generator(grid.time(i), x_next, v, z);
}

/// Mean squared error of a scalar network against a fixed target at step i.
template <typename Scalar>
LossAndGradient<Scalar> regression_loss(const NetworkParams<Scalar>& net, const Mat<Scalar>& x,
                                        const RowVec<Scalar>& target, bool with_gradient) {
    const Eigen::Index K = x.cols();
    ForwardCache<Scalar> cache;
    const RowVec<Scalar> u = forward_batch(net, x, with_gradient ? &cache : nullptr);
    const RowVec<Scalar> r = target - u;
    LossAndGradient<Scalar> out;
    out.value = r.squaredNorm() / Scalar(K);
    if (with_gradient) {
        out.grad_u = zeros_like(net);
        const Mat<Scalar> up = (Scalar(-2) / Scalar(K)) * r;
        backward_batch(net, cache, up, out.grad_u);
    }
    return out;
}

/// Deep-splitting loss. `next` is frozen: only U_i receives a gradient.
template <typename Scalar>
LossAndGradient<Scalar> ds_loss_and_gradient(const NetworkParams<Scalar>& u_i, const ScalarField<Scalar>& next,
                                             const PathBatch<Scalar>& paths, const ModelSpec<Scalar>& model, int i,
                                             bool with_gradient = true) {
    const RowVec<Scalar> target = splitting_target(model, paths, i, next);
    return regression_loss(u_i, detail::state(paths, i), target, with_gradient);
}

template <typename Scalar>
Scalar loss_ds(const NetworkParams<Scalar>& u_i, const NetworkParams<Scalar>* u_next, const PathBatch<Scalar>& paths,
               const ModelSpec<Scalar>& model, int i) {
    const auto next = u_next ? network_field(*u_next) : terminal_field(model);
    return ds_loss_and_gradient(u_i, next, paths, model, i, false).value;
}

template <typename Scalar>
struct GlobalLossAndGradient {
    Scalar value = 0;
    NetworkParams<Scalar> grad_u0;
    std::vector<NetworkParams<Scalar>> grad_z;
};

/// Deep BSDE loss: roll Y forward from U_0(X_0) with the Z networks and
/// penalise the terminal mismatch; gradients flow through the whole rollout.
template <typename Scalar>
GlobalLossAndGradient<Scalar> dbsde_loss_and_gradient(const NetworkParams<Scalar>& u0,
                                                      const std::vector<NetworkParams<Scalar>>& z_nets,
                                                      const PathBatch<Scalar>& paths, const ModelSpec<Scalar>& model,
                                                      bool with_gradient = true) {
    const auto& grid = paths.grid;
    const int N = grid.n_steps();
    detail::require_steps(paths, N);
    if (static_cast<int>(z_nets.size()) != N)
        throw std::invalid_argument("dbsde loss: expected " + std::to_string(N) + " Z networks, got " +
                                    std::to_string(z_nets.size()));
    const Eigen::Index K = paths.batch();

    ForwardCache<Scalar> c0;
    std::vector<ForwardCache<Scalar>> cz(with_gradient ? static_cast<std::size_t>(N) : 0);
    std::vector<RowVec<Scalar>> dfdy(with_gradient ? static_cast<std::size_t>(N) : 0);
    std::vector<Mat<Scalar>> dfdz(with_gradient ? static_cast<std::size_t>(N) : 0);

    RowVec<Scalar> y = forward_batch(u0, detail::state(paths, 0), with_gradient ? &c0 : nullptr);
    for (int i = 0; i < N; ++i) {
        const Mat<Scalar>& x = detail::state(paths, i);
        const Mat<Scalar>& dw = detail::increment(paths, i);
        const Mat<Scalar> z =
            forward_batch(z_nets[static_cast<std::size_t>(i)], x, with_gradient ? &cz[static_cast<std::size_t>(i)] : nullptr);
        const Scalar t = grid.time(i), dt = grid.dt(i);
        if (with_gradient) {
            auto p = generator_partials(model, t, x, y, z);
            dfdy[static_cast<std::size_t>(i)] = std::move(p.dy);
            dfdz[static_cast<std::size_t>(i)] = dt * p.dz + dw;
        }
        y += dt * model.generator(t, x, y, z) + z.cwiseProduct(dw).colwise().sum();
    }
    const RowVec<Scalar> mismatch = y - model.terminal(detail::state(paths, N));

    GlobalLossAndGradient<Scalar> out;
    out.value = mismatch.squaredNorm() / Scalar(K);
    if (!with_gradient) return out;

    out.grad_z.reserve(static_cast<std::size_t>(N));
    for (const auto& z : z_nets) out.grad_z.push_back(zeros_like(z));
    RowVec<Scalar> ybar = (Scalar(2) / Scalar(K)) * mismatch;
    for (int i = N - 1; i >= 0; --i) {
        const auto idx = static_cast<std::size_t>(i);
        const Mat<Scalar> up_z = dfdz[idx].array().rowwise() * ybar.array();
        backward_batch(z_nets[idx], cz[idx], up_z, out.grad_z[idx]);
        ybar = ybar.cwiseProduct((Scalar(1) + grid.dt(i) * dfdy[idx].array()).matrix());
    }
    out.grad_u0 = zeros_like(u0);
    backward_batch(u0, c0, Mat<Scalar>(ybar), out.grad_u0);
    return out;
}

template <typename Scalar>
Scalar loss_dbsde(const NetworkParams<Scalar>& u0, const std::vector<NetworkParams<Scalar>>& z_nets,
                  const PathBatch<Scalar>& paths, const ModelSpec<Scalar>& model) {
    return dbsde_loss_and_gradient(u0, z_nets, paths, model, false).value;
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename Scalar>
struct StepValue {
    Scalar u = 0;
    Vec<Scalar> z;
};

/// (U_i(x), Z_i(x)) for a single point.
template <typename Scalar>
StepValue<Scalar> evaluate(const SchemeSolution<Scalar>& sol, int i, const Vec<Scalar>& x) {
    const int N = sol.grid.n_steps();
    auto net_at = [](const auto& list, int j, const char* what) -> const NetworkParams<Scalar>& {
        if (j < 0 || j >= static_cast<int>(list.size()) || !list[static_cast<std::size_t>(j)])
            throw std::out_of_range(std::string("evaluate: no ") + what + " network stored for step " +
                                    std::to_string(j));
        return *list[static_cast<std::size_t>(j)];
    };
    StepValue<Scalar> out;
    switch (sol.scheme) {
    case Scheme::mdbdp:
    case Scheme::dbdp1:
        if (i < 0 || i >= N) throw std::out_of_range("evaluate: step " + std::to_string(i) + " out of range");
        out.u = forward(net_at(sol.u_nets, i, "U"), x)(0);
        out.z = forward(net_at(sol.z_nets, i, "Z"), x);
        break;
    case Scheme::dbdp2:
    case Scheme::ds: {
        const int last = sol.scheme == Scheme::ds ? N : N - 1;
        if (i < 0 || i > last) throw std::out_of_range("evaluate: step " + std::to_string(i) + " out of range");
        if (sol.scheme == Scheme::ds && i == N) {
            // Z is not defined at the terminal step of the splitting scheme
            const Mat<Scalar> xm = x;
            out.u = sol.u_nets.back() ? forward(*sol.u_nets.back(), x)(0) : sol.model.terminal(xm)(0);
            break;
        }
        const auto& net = net_at(sol.u_nets, i, "U");
        out.u = forward(net, x)(0);
        const Mat<Scalar> xm = x;
        const Mat<Scalar> grad = grad_input(net, x).transpose();
        out.z = apply_diffusion_transposed(sol.model, sol.grid.time(i), xm, grad).col(0);
        break;
    }
    case Scheme::dbsde:
        if (i < 0 || i >= N) throw std::out_of_range("evaluate: step " + std::to_string(i) + " out of range");
        out.z = forward(net_at(sol.z_nets, i, "Z"), x);
        if (i != 0) throw std::invalid_argument("evaluate: dbsde only provides U at step 0");
        out.u = forward(net_at(sol.u_nets, 0, "U"), x)(0);
        break;
    }
    return out;
}

/// Z_i(x) for schemes that store it at step i (including dbsde at any step).
template <typename Scalar>
Vec<Scalar> evaluate_z(const SchemeSolution<Scalar>& sol, int i, const Vec<Scalar>& x) {
    if (sol.scheme == Scheme::dbsde) {
        if (i < 0 || i >= sol.grid.n_steps() || !sol.z_nets[static_cast<std::size_t>(i)])
            throw std::out_of_range("evaluate_z: no Z network stored for step " + std::to_string(i));
        return forward(*sol.z_nets[static_cast<std::size_t>(i)], x);
    }
    return evaluate(sol, i, x).z;
}

// ---------------------------------------------------------------------------
// Training drivers

/// Observation points of a solver run. All callbacks are optional.
template <typename Scalar>
struct SolverHooks {
    /// Before training step i, with the (warm-started) initial parameters.
    std::function<void(int step, const NetworkParams<Scalar>& u, const NetworkParams<Scalar>* z)> on_step_start;
    /// After training step i: mean loss over the final iterations and U_i(x0).
    std::function<void(int step, double loss, double y0_estimate)> on_step_end;
    std::function<void(int step, long iteration, long total, double loss)> on_iteration;
};

struct DivergenceGuard {
    double threshold = 1e6;
    int patience = 50;
};

namespace detail {

enum : std::uint64_t { tag_mdbdp = 11, tag_dbdp1 = 12, tag_dbdp2 = 13, tag_ds = 14, tag_dbsde = 15 };
enum : std::uint64_t { role_u = 1, role_z = 2, role_paths = 3 };

inline std::uint64_t scheme_tag(Scheme s) {
    switch (s) {
    case Scheme::mdbdp: return tag_mdbdp;
    case Scheme::dbdp1: return tag_dbdp1;
    case Scheme::dbdp2: return tag_dbdp2;
    case Scheme::ds: return tag_ds;
    case Scheme::dbsde: return tag_dbsde;
    }
    return 0;
}

/// Runs Adam on a set of networks. `step_fn(iteration, grads)` returns the
/// mini-batch loss and fills one gradient per network. Returns the mean loss
/// over the last iterations.
template <typename Scalar, typename StepFn>
double run_adam(const TrainConfig& config, const DivergenceGuard& guard, int step, long iterations,
                std::vector<NetworkParams<Scalar>*> nets, const SolverHooks<Scalar>& hooks, StepFn&& step_fn) {
    std::vector<AdamState<Scalar>> states;
    states.reserve(nets.size());
    for (auto* n : nets) states.emplace_back(*n);
    std::vector<NetworkParams<Scalar>> grads(nets.size());

    const long tail = std::max<long>(1, std::min<long>(100, iterations));
    double tail_sum = 0;
    int bad_streak = 0;
    for (long s = 0; s < iterations; ++s) {
        const double loss = static_cast<double>(step_fn(s, grads));
        if (hooks.on_iteration) hooks.on_iteration(step, s, iterations, loss);
        const bool finite = std::isfinite(loss);
        if (!finite || loss > guard.threshold) {
            if (++bad_streak >= guard.patience)
                throw DivergenceError(step, s,
                                      "training diverged at step " + std::to_string(step) + ", iteration " +
                                          std::to_string(s) + " (loss " + std::to_string(loss) + ")");
            if (!finite) continue;
        } else {
            bad_streak = 0;
        }
        if (s >= iterations - tail) tail_sum += loss;
        const Scalar lr = static_cast<Scalar>(lr_at(config, s, iterations));
        for (std::size_t n = 0; n < nets.size(); ++n) adam_step(states[n], *nets[n], grads[n], lr);
    }
    return tail_sum / static_cast<double>(tail);
}

template <typename Scalar>
double value_at(const NetworkParams<Scalar>& u, const Vec<Scalar>& x0) {
    return static_cast<double>(forward(u, x0)(0));
}

template <typename Scalar>
void check_solver_inputs(const ModelSpec<Scalar>& model, const Vec<Scalar>& x0, const TimeGrid<Scalar>& grid,
                         const TrainConfig& train) {
    model.validate();
    train.validate();
    if (x0.size() != model.dim) throw std::invalid_argument("solver: x0 dimension does not match model");
    if (std::abs(static_cast<double>(grid.horizon() - model.horizon)) > 1e-12)
        throw std::invalid_argument("solver: grid horizon does not match model horizon");
}

} // namespace detail

/// Multistep deep backward dynamic programming: backward induction where the
/// target at step i aggregates g(X_N) and every frozen later step. Step i is
/// warm-started from the trained step i+1.
template <typename Scalar>
SchemeSolution<Scalar> solve_mdbdp(const ModelSpec<Scalar>& model, const Vec<Scalar>& x0, const TimeGrid<Scalar>& grid,
                                   const HiddenLayout& layout, const TrainConfig& train,
                                   const SolverHooks<Scalar>& hooks = {}, const DivergenceGuard& guard = {}) {
    detail::check_solver_inputs(model, x0, grid, train);
    const int N = grid.n_steps(), d = model.dim;
    const std::uint64_t tag = detail::tag_mdbdp;
    auto sol = make_empty_solution(Scheme::mdbdp, model, grid);
    const FrozenPair<Scalar> frozen = frozen_from_solution(sol);

    auto u = init_params<Scalar>(layout.value_arch(d), derive_seed(train.seed, {tag, detail::role_u}));
    auto z = init_params<Scalar>(layout.gradient_arch(d), derive_seed(train.seed, {tag, detail::role_z}));
    for (int i = N - 1; i >= 0; --i) {
        if (hooks.on_step_start) hooks.on_step_start(i, u, &z);
        const long iters = i == N - 1 ? train.final_step_iterations : train.iterations_per_step;
        const double loss = detail::run_adam<Scalar>(
            train, guard, i, iters, {&u, &z}, hooks, [&](long s, std::vector<NetworkParams<Scalar>>& g) {
                const auto paths = simulate_paths(
                    model, grid, x0, train.batch_size,
                    derive_seed(train.seed, {tag, detail::role_paths, static_cast<std::uint64_t>(i),
                                             static_cast<std::uint64_t>(s)}));
                auto lg = mdbdp_loss_and_gradient(u, z, frozen, paths, model, i);
                g[0] = std::move(lg.grad_u);
                g[1] = std::move(lg.grad_z);
                return lg.value;
            });
        sol.u_nets[static_cast<std::size_t>(i)] = u;
        sol.z_nets[static_cast<std::size_t>(i)] = z;
        if (hooks.on_step_end) hooks.on_step_end(i, loss, detail::value_at(u, x0));
    }
    return sol;
}

/// One-step scheme learning (U_i, Z_i) against the next trained U only.
template <typename Scalar>
SchemeSolution<Scalar> solve_dbdp1(const ModelSpec<Scalar>& model, const Vec<Scalar>& x0, const TimeGrid<Scalar>& grid,
                                   const HiddenLayout& layout, const TrainConfig& train,
                                   const SolverHooks<Scalar>& hooks = {}, const DivergenceGuard& guard = {}) {
    detail::check_solver_inputs(model, x0, grid, train);
    const int N = grid.n_steps(), d = model.dim;
    const std::uint64_t tag = detail::tag_dbdp1;
    auto sol = make_empty_solution(Scheme::dbdp1, model, grid);

    auto u = init_params<Scalar>(layout.value_arch(d), derive_seed(train.seed, {tag, detail::role_u}));
    auto z = init_params<Scalar>(layout.gradient_arch(d), derive_seed(train.seed, {tag, detail::role_z}));
    for (int i = N - 1; i >= 0; --i) {
        if (hooks.on_step_start) hooks.on_step_start(i, u, &z);
        const auto next = i == N - 1 ? terminal_field(model) : network_field(*sol.u_nets[static_cast<std::size_t>(i) + 1]);
        const long iters = i == N - 1 ? train.final_step_iterations : train.iterations_per_step;
        const double loss = detail::run_adam<Scalar>(
            train, guard, i, iters, {&u, &z}, hooks, [&](long s, std::vector<NetworkParams<Scalar>>& g) {
                const auto paths = simulate_paths(
                    model, grid, x0, train.batch_size,
                    derive_seed(train.seed, {tag, detail::role_paths, static_cast<std::uint64_t>(i),
                                             static_cast<std::uint64_t>(s)}),
                    i + 1);
                auto lg = dbdp1_loss_and_gradient(u, z, next, paths, model, i);
                g[0] = std::move(lg.grad_u);
                g[1] = std::move(lg.grad_z);
                return lg.value;
            });
        sol.u_nets[static_cast<std::size_t>(i)] = u;
        sol.z_nets[static_cast<std::size_t>(i)] = z;
        if (hooks.on_step_end) hooks.on_step_end(i, loss, detail::value_at(u, x0));
    }
    return sol;
}

/// One-step scheme with Z taken from the input derivative of U_i.
template <typename Scalar>
SchemeSolution<Scalar> solve_dbdp2(const ModelSpec<Scalar>& model, const Vec<Scalar>& x0, const TimeGrid<Scalar>& grid,
                                   const HiddenLayout& layout, const TrainConfig& train,
                                   const SolverHooks<Scalar>& hooks = {}, const DivergenceGuard& guard = {}) {
    detail::check_solver_inputs(model, x0, grid, train);
    const int N = grid.n_steps(), d = model.dim;
    const std::uint64_t tag = detail::tag_dbdp2;
    auto sol = make_empty_solution(Scheme::dbdp2, model, grid);

    auto u = init_params<Scalar>(layout.value_arch(d), derive_seed(train.seed, {tag, detail::role_u}));
    for (int i = N - 1; i >= 0; --i) {
        if (hooks.on_step_start) hooks.on_step_start(i, u, nullptr);
        const auto next = i == N - 1 ? terminal_field(model) : network_field(*sol.u_nets[static_cast<std::size_t>(i) + 1]);
        const long iters = i == N - 1 ? train.final_step_iterations : train.iterations_per_step;
        const double loss = detail::run_adam<Scalar>(
            train, guard, i, iters, {&u}, hooks, [&](long s, std::vector<NetworkParams<Scalar>>& g) {
                const auto paths = simulate_paths(
                    model, grid, x0, train.batch_size,
                    derive_seed(train.seed, {tag, detail::role_paths, static_cast<std::uint64_t>(i),
                                             static_cast<std::uint64_t>(s)}),
                    i + 1);
                auto lg = dbdp2_loss_and_gradient(u, next, paths, model, i);
                g[0] = std::move(lg.grad_u);
                return lg.value;
            });
        sol.u_nets[static_cast<std::size_t>(i)] = u;
        if (hooks.on_step_end) hooks.on_step_end(i, loss, detail::value_at(u, x0));
    }
    return sol;
}

/// Deep splitting: optional regression of g at t_N, then explicit backward
/// regressions using the next network and its input gradient.
template <typename Scalar>
SchemeSolution<Scalar> solve_ds(const ModelSpec<Scalar>& model, const Vec<Scalar>& x0, const TimeGrid<Scalar>& grid,
                                const HiddenLayout& layout, const TrainConfig& train,
                                const SolverHooks<Scalar>& hooks = {}, const DivergenceGuard& guard = {}) {
    detail::check_solver_inputs(model, x0, grid, train);
    const int N = grid.n_steps(), d = model.dim;
    const std::uint64_t tag = detail::tag_ds;
    auto sol = make_empty_solution(Scheme::ds, model, grid);
    auto path_seed = [&](int i, long s) {
        return derive_seed(train.seed,
                           {tag, detail::role_paths, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(s)});
    };

    auto u = init_params<Scalar>(layout.value_arch(d), derive_seed(train.seed, {tag, detail::role_u}));
    if (train.ds_terminal == TerminalMode::fit) {
        if (hooks.on_step_start) hooks.on_step_start(N, u, nullptr);
        const double loss = detail::run_adam<Scalar>(
            train, guard, N, train.final_step_iterations, {&u}, hooks,
            [&](long s, std::vector<NetworkParams<Scalar>>& g) {
                const auto paths = simulate_paths(model, grid, x0, train.batch_size, path_seed(N, s));
                const Mat<Scalar>& xN = detail::state(paths, N);
                auto lg = regression_loss(u, xN, model.terminal(xN), true);
                g[0] = std::move(lg.grad_u);
                return lg.value;
            });
        sol.u_nets[static_cast<std::size_t>(N)] = u;
        if (hooks.on_step_end) hooks.on_step_end(N, loss, detail::value_at(u, x0));
    } else if (!model.terminal_gradient) {
        throw std::invalid_argument("solve_ds: exact terminal mode needs the gradient of g");
    }

    for (int i = N - 1; i >= 0; --i) {
        if (hooks.on_step_start) hooks.on_step_start(i, u, nullptr);
        const auto& stored_next = sol.u_nets[static_cast<std::size_t>(i) + 1];
        const auto next = stored_next ? network_field(*stored_next) : terminal_field(model);
        const double loss = detail::run_adam<Scalar>(
            train, guard, i, train.iterations_per_step, {&u}, hooks,
            [&](long s, std::vector<NetworkParams<Scalar>>& g) {
                const auto paths = simulate_paths(model, grid, x0, train.batch_size, path_seed(i, s), i + 1);
                auto lg = ds_loss_and_gradient(u, next, paths, model, i);
                g[0] = std::move(lg.grad_u);
                return lg.value;
            });
        sol.u_nets[static_cast<std::size_t>(i)] = u;
        if (hooks.on_step_end) hooks.on_step_end(i, loss, detail::value_at(u, x0));
    }
    return sol;
}

/// Global scheme: one optimisation over (U_0, Z_0..Z_{N-1}). The iteration
/// budget is the sum of the per-step budgets of the local schemes.
template <typename Scalar>
SchemeSolution<Scalar> solve_dbsde(const ModelSpec<Scalar>& model, const Vec<Scalar>& x0, const TimeGrid<Scalar>& grid,
                                   const HiddenLayout& layout, const TrainConfig& train,
                                   const SolverHooks<Scalar>& hooks = {}, const DivergenceGuard& guard = {}) {
    detail::check_solver_inputs(model, x0, grid, train);
    const int N = grid.n_steps(), d = model.dim;
    const std::uint64_t tag = detail::tag_dbsde;
    auto sol = make_empty_solution(Scheme::dbsde, model, grid);

    auto u0 = init_params<Scalar>(layout.value_arch(d), derive_seed(train.seed, {tag, detail::role_u}));
    std::vector<NetworkParams<Scalar>> z;
    z.reserve(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i)
        z.push_back(init_params<Scalar>(layout.gradient_arch(d),
                                        derive_seed(train.seed, {tag, detail::role_z, static_cast<std::uint64_t>(i)})));
    std::vector<NetworkParams<Scalar>*> nets{&u0};
    for (auto& zi : z) nets.push_back(&zi);

    const long total = static_cast<long>(N - 1) * train.iterations_per_step + train.final_step_iterations;
    if (hooks.on_step_start) hooks.on_step_start(0, u0, &z.front());
    const double loss = detail::run_adam<Scalar>(
        train, guard, 0, total, nets, hooks, [&](long s, std::vector<NetworkParams<Scalar>>& g) {
            const auto paths = simulate_paths(
                model, grid, x0, train.batch_size,
                derive_seed(train.seed, {tag, detail::role_paths, static_cast<std::uint64_t>(s)}));
            auto lg = dbsde_loss_and_gradient(u0, z, paths, model);
            g[0] = std::move(lg.grad_u0);
            for (int i = 0; i < N; ++i) g[static_cast<std::size_t>(i) + 1] = std::move(lg.grad_z[static_cast<std::size_t>(i)]);
            return lg.value;
        });
    sol.u_nets[0] = u0;
    for (int i = 0; i < N; ++i) sol.z_nets[static_cast<std::size_t>(i)] = std::move(z[static_cast<std::size_t>(i)]);
    if (hooks.on_step_end) hooks.on_step_end(0, loss, detail::value_at(u0, x0));
    return sol;
}

template <typename Scalar>
SchemeSolution<Scalar> solve(Scheme scheme, const ModelSpec<Scalar>& model, const Vec<Scalar>& x0,
                             const TimeGrid<Scalar>& grid, const HiddenLayout& layout, const TrainConfig& train,
                             const SolverHooks<Scalar>& hooks = {}, const DivergenceGuard& guard = {}) {
    switch (scheme) {
    case Scheme::mdbdp: return solve_mdbdp(model, x0, grid, layout, train, hooks, guard);
    case Scheme::dbdp1: return solve_dbdp1(model, x0, grid, layout, train, hooks, guard);
    case Scheme::dbdp2: return solve_dbdp2(model, x0, grid, layout, train, hooks, guard);
    case Scheme::ds: return solve_ds(model, x0, grid, layout, train, hooks, guard);
    case Scheme::dbsde: return solve_dbsde(model, x0, grid, layout, train, hooks, guard);
    }
    throw std::invalid_argument("solve: unknown scheme");
}

} // namespace mdbdp
