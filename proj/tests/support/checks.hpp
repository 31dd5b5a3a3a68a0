#pragma once

// Property checks shared by the unit tests and the acceptance binary. Each
// returns the worst observed error so callers can compare against their own
// tolerance and print it.

#include "oracles.hpp"

#include "mdbdp/neuralnet.hpp"
#include "mdbdp/problems.hpp"
#include "mdbdp/schemes.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace checks {

using mdbdp::Matrix;
using mdbdp::NetworkParams;
using mdbdp::Vector;

// ---------------------------------------------------------------------------
// PDE residual of an analytic solution, all derivatives by central differences

struct ResidualStats {
    double max_abs = 0;
    int points = 0;
};

inline double u_at(const mdbdp::ModelSpec<double>& m, double t, const Vector& x) {
    return m.analytic_solution(t, Matrix(x))(0);
}

struct FdDerivatives {
    double u = 0, dt = 0;
    Vector grad;
    Matrix hess;
};

inline FdDerivatives fd_derivatives(const mdbdp::ModelSpec<double>& m, double t, const Vector& x, double h) {
    const int d = static_cast<int>(x.size());
    FdDerivatives out;
    out.u = u_at(m, t, x);
    out.dt = (u_at(m, t + h, x) - u_at(m, t - h, x)) / (2 * h);
    out.grad.resize(d);
    out.hess.resize(d, d);
    for (int i = 0; i < d; ++i) {
        Vector xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        const double up = u_at(m, t, xp), um = u_at(m, t, xm);
        out.grad(i) = (up - um) / (2 * h);
        out.hess(i, i) = (up - 2 * out.u + um) / (h * h);
        for (int j = i + 1; j < d; ++j) {
            Vector a = x, b = x, c = x, e = x;
            a(i) += h, a(j) += h;
            b(i) += h, b(j) -= h;
            c(i) -= h, c(j) += h;
            e(i) -= h, e(j) -= h;
            out.hess(i, j) = out.hess(j, i) =
                (u_at(m, t, a) - u_at(m, t, b) - u_at(m, t, c) + u_at(m, t, e)) / (4 * h * h);
        }
    }
    return out;
}

/// |d_t u + mu.Du + 1/2 Tr(sigma sigma^T D2u) - f(t, x, u, sigma^T Du)| at
/// random (t, x), t in [0, T - 2h], x uniform in [-2, 2]^d.
inline ResidualStats pde_residual(const mdbdp::ProblemInstance<double>& p, int points, std::uint64_t seed) {
    const auto& m = p.model;
    const int d = m.dim;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ut(0.01, m.horizon - 0.01), ux(-2, 2);
    const double h = 1e-4;
    ResidualStats s;
    for (int n = 0; n < points; ++n) {
        const double t = ut(rng);
        Vector x(d);
        for (int i = 0; i < d; ++i) x(i) = ux(rng);
        const auto D = fd_derivatives(m, t, x, h);
        const Matrix sigma = m.diffusion(t, x);
        const Vector mu = m.drift(t, Matrix(x)).col(0);
        const Vector z = sigma.transpose() * D.grad;
        mdbdp::RowVector y(1);
        y(0) = D.u;
        const double f = m.generator(t, Matrix(x), y, Matrix(z))(0);
        const double r = D.dt + mu.dot(D.grad) + 0.5 * (sigma * sigma.transpose() * D.hess).trace() - f;
        s.max_abs = std::max(s.max_abs, std::abs(r));
        ++s.points;
    }
    return s;
}

/// Worst |k_closed - k_fd| for the unbounded problem, where k_fd assembles
/// d_t u + (1/2d) Tr D2u + (u/sqrt d) 1.(sigma^T Du) + u^2/2 from finite differences.
inline double unbounded_source_fd_error(int d, int points, std::uint64_t seed) {
    const auto p = mdbdp::unbounded_problem(d);
    const mdbdp::detail::UnboundedSolution<double> sol{d, 1.0};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ut(0.01, 0.99), ux(-2, 2);
    double worst = 0;
    for (int n = 0; n < points; ++n) {
        const double t = ut(rng);
        Vector x(d);
        for (int i = 0; i < d; ++i) x(i) = ux(rng);
        const auto D = fd_derivatives(p.model, t, x, 1e-4);
        const double sd = std::sqrt(static_cast<double>(d));
        const double k_fd = D.dt + D.hess.trace() / (2.0 * d) + D.u / sd * (D.grad / sd).sum() + D.u * D.u / 2;
        worst = std::max(worst, std::abs(k_fd - sol.source(t, x.data())));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Random small instances for the loss kernels

struct Instance {
    std::string model_name;
    mdbdp::ModelSpec<double> model;
    mdbdp::TimeGrid<double> grid;
    mdbdp::PathBatch<double> paths;
    int d = 1;
    int N = 1;
    int i = 0;
    std::vector<NetworkParams<double>> u;  // one per step 0..N-1
    std::vector<NetworkParams<double>> z;
};

inline mdbdp::ModelSpec<double> model_by_index(int which, int d, std::string& name) {
    switch (which % 3) {
    case 0: name = "coupled"; return oracle::coupled_test_model(d);
    case 1: name = "bounded"; return mdbdp::bounded_problem(d).model;
    default: name = "unbounded"; return mdbdp::unbounded_problem(d).model;
    }
}

/// batch <= 8, N <= 3, d <= max_dim, random weights on every network.
inline Instance random_instance(std::mt19937_64& rng, int max_dim, const std::vector<int>& hidden, int which) {
    Instance in;
    in.d = std::uniform_int_distribution<int>(1, max_dim)(rng);
    in.N = std::uniform_int_distribution<int>(1, 3)(rng);
    in.i = std::uniform_int_distribution<int>(0, in.N - 1)(rng);
    const int batch = std::uniform_int_distribution<int>(1, 8)(rng);
    in.model = model_by_index(which, in.d, in.model_name);
    in.grid = mdbdp::TimeGrid<double>::uniform(1.0, in.N);
    Vector x0 = Vector::Random(in.d);
    in.paths = mdbdp::simulate_paths(in.model, in.grid, x0, batch, rng());
    for (int j = 0; j < in.N; ++j) {
        in.u.push_back(oracle::random_network({in.d, hidden, 1, mdbdp::Activation::tanh()}, rng));
        in.z.push_back(oracle::random_network({in.d, hidden, in.d, mdbdp::Activation::tanh()}, rng));
    }
    return in;
}

inline const NetworkParams<double>* next_net(const Instance& in) {
    return in.i + 1 < in.N ? &in.u[static_cast<std::size_t>(in.i) + 1] : nullptr;
}

inline mdbdp::SchemeSolution<double> frozen_solution(const Instance& in) {
    auto sol = mdbdp::make_empty_solution(mdbdp::Scheme::mdbdp, in.model, in.grid);
    for (int j = in.i + 1; j < in.N; ++j) {
        sol.u_nets[static_cast<std::size_t>(j)] = in.u[static_cast<std::size_t>(j)];
        sol.z_nets[static_cast<std::size_t>(j)] = in.z[static_cast<std::size_t>(j)];
    }
    return sol;
}

inline double relative_gap(double a, double ref) {
    return std::abs(a - ref) / std::max(std::abs(ref), 1e-300);
}

/// Worst relative gap between each kernel and its straight-line oracle.
inline std::map<std::string, double> loss_oracle_suite(int instances, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::map<std::string, double> worst{{"mdbdp", 0}, {"dbdp1", 0}, {"dbdp2", 0}, {"ds", 0}, {"dbsde", 0}};
    auto note = [&](const char* k, double v) { worst[k] = std::max(worst[k], v); };
    for (int n = 0; n < instances; ++n) {
        const auto in = random_instance(rng, 3, {4, 3}, n);
        const auto& ui = in.u[static_cast<std::size_t>(in.i)];
        const auto& zi = in.z[static_cast<std::size_t>(in.i)];
        const auto* next = next_net(in);
        note("mdbdp", relative_gap(mdbdp::loss_mdbdp(ui, zi, frozen_solution(in), in.paths, in.i),
                                   oracle::mdbdp_loss(in.model, ui, zi, in.u, in.z, in.paths, in.i)));
        note("dbdp1", relative_gap(mdbdp::loss_dbdp1(ui, zi, next, in.paths, in.model, in.i),
                                   oracle::dbdp1_loss(in.model, ui, zi, next, in.paths, in.i)));
        note("dbdp2", relative_gap(mdbdp::loss_dbdp2(ui, next, in.paths, in.model, in.i),
                                   oracle::dbdp2_loss(in.model, ui, next, in.paths, in.i)));
        note("ds", relative_gap(mdbdp::loss_ds(ui, next, in.paths, in.model, in.i),
                                oracle::ds_loss(in.model, ui, next, in.paths, in.i)));
        note("dbsde", relative_gap(mdbdp::loss_dbsde(in.u[0], in.z, in.paths, in.model),
                                   oracle::dbsde_loss(in.model, in.u[0], in.z, in.paths)));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks

inline Vector concat(const std::vector<Vector>& parts) {
    Eigen::Index n = 0;
    for (const auto& p : parts) n += p.size();
    Vector out(n);
    Eigen::Index pos = 0;
    for (const auto& p : parts) {
        out.segment(pos, p.size()) = p;
        pos += p.size();
    }
    return out;
}

/// Splits a flat vector back into networks shaped like `likes`.
inline std::vector<NetworkParams<double>> split(const std::vector<const NetworkParams<double>*>& likes,
                                                const Vector& theta) {
    std::vector<NetworkParams<double>> out;
    Eigen::Index pos = 0;
    for (const auto* l : likes) {
        const Eigen::Index n = l->parameter_count();
        out.push_back(mdbdp::unflatten(*l, Vector(theta.segment(pos, n))));
        pos += n;
    }
    return out;
}

inline double fd_gap(const std::function<double(const std::vector<NetworkParams<double>>&)>& loss,
                     const std::vector<const NetworkParams<double>*>& nets, const Vector& analytic) {
    std::vector<Vector> parts;
    for (const auto* n : nets) parts.push_back(mdbdp::flatten(*n));
    const Vector theta = concat(parts);
    const Vector fd = oracle::central_difference([&](const Vector& t) { return loss(split(nets, t)); }, theta, 1e-5);
    return oracle::max_relative_error(analytic, fd);
}

/// Worst per-coordinate relative error of every analytic gradient against
/// central differences (networks of at most 30 parameters each).
inline std::map<std::string, double> gradient_suite(int instances, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::map<std::string, double> worst{{"grad_params", 0}, {"grad_input", 0}, {"mdbdp", 0}, {"dbdp1", 0},
                                        {"dbdp2", 0},       {"ds", 0},         {"dbsde", 0}};
    auto note = [&](const char* k, double v) { worst[k] = std::max(worst[k], v); };
    for (int n = 0; n < instances; ++n) {
        // network-level gradients, finite differences in long double
        {
            const int d = std::uniform_int_distribution<int>(1, 3)(rng);
            const int out_dim = std::uniform_int_distribution<int>(1, 2)(rng);
            const auto p = oracle::random_network({d, {4, 3}, out_dim, mdbdp::Activation::tanh()}, rng);
            const auto pl = oracle::cast_params<long double>(p);
            const Vector x = Vector::Random(d);
            const Vector up = Vector::Random(out_dim);
            const Vector g = mdbdp::flatten(mdbdp::grad_params<double>(p, x, up));
            const mdbdp::Vec<long double> theta = mdbdp::flatten(pl), xl = x.cast<long double>();
            const mdbdp::Vec<long double> upl = up.cast<long double>();
            Vector fd(theta.size());
            for (Eigen::Index i = 0; i < theta.size(); ++i) {
                mdbdp::Vec<long double> t = theta;
                t(i) += 1e-6L;
                const long double fp = upl.dot(mdbdp::forward(mdbdp::unflatten(pl, t), xl));
                t(i) = theta(i) - 1e-6L;
                fd(i) = static_cast<double>((fp - upl.dot(mdbdp::forward(mdbdp::unflatten(pl, t), xl))) / 2e-6L);
            }
            note("grad_params", oracle::max_relative_error(g, fd));
            const Matrix J = mdbdp::grad_input<double>(p, x);
            Matrix Jfd(out_dim, d);
            for (int j = 0; j < d; ++j) {
                mdbdp::Vec<long double> xp = xl, xm = xl;
                xp(j) += 1e-6L;
                xm(j) -= 1e-6L;
                Jfd.col(j) = ((mdbdp::forward(pl, xp) - mdbdp::forward(pl, xm)) / 2e-6L).cast<double>();
            }
            note("grad_input", oracle::max_relative_error(J.reshaped(), Jfd.reshaped()));
        }

        const auto in = random_instance(rng, 2, {3}, n);
        const int i = in.i;
        const auto& ui = in.u[static_cast<std::size_t>(i)];
        const auto& zi = in.z[static_cast<std::size_t>(i)];
        const auto* next = next_net(in);
        const auto next_field = next ? mdbdp::network_field(*next) : mdbdp::terminal_field(in.model);
        {
            const auto frozen = frozen_solution(in);
            const auto lg = mdbdp::mdbdp_loss_and_gradient(ui, zi, mdbdp::frozen_from_solution(frozen), in.paths,
                                                           in.model, i);
            const Vector g = concat({mdbdp::flatten(lg.grad_u), mdbdp::flatten(lg.grad_z)});
            note("mdbdp", fd_gap(
                              [&](const auto& nets) {
                                  return oracle::mdbdp_loss(in.model, nets[0], nets[1], in.u, in.z, in.paths, i);
                              },
                              {&ui, &zi}, g));
        }
        {
            const auto lg = mdbdp::dbdp1_loss_and_gradient(ui, zi, next_field, in.paths, in.model, i);
            const Vector g = concat({mdbdp::flatten(lg.grad_u), mdbdp::flatten(lg.grad_z)});
            note("dbdp1", fd_gap(
                              [&](const auto& nets) {
                                  return oracle::dbdp1_loss(in.model, nets[0], nets[1], next, in.paths, i);
                              },
                              {&ui, &zi}, g));
        }
        {
            const auto lg = mdbdp::dbdp2_loss_and_gradient(ui, next_field, in.paths, in.model, i);
            note("dbdp2", fd_gap([&](const auto& nets) { return oracle::dbdp2_loss(in.model, nets[0], next, in.paths, i); },
                                 {&ui}, mdbdp::flatten(lg.grad_u)));
        }
        {
            // only the parameters of U_i are differentiated; U_{i+1} stays frozen
            const auto lg = mdbdp::ds_loss_and_gradient(ui, next_field, in.paths, in.model, i);
            note("ds", fd_gap([&](const auto& nets) { return oracle::ds_loss(in.model, nets[0], next, in.paths, i); },
                              {&ui}, mdbdp::flatten(lg.grad_u)));
        }
        {
            const auto lg = mdbdp::dbsde_loss_and_gradient(in.u[0], in.z, in.paths, in.model);
            std::vector<Vector> parts{mdbdp::flatten(lg.grad_u0)};
            std::vector<const NetworkParams<double>*> nets{&in.u[0]};
            for (std::size_t j = 0; j < in.z.size(); ++j) {
                parts.push_back(mdbdp::flatten(lg.grad_z[j]));
                nets.push_back(&in.z[j]);
            }
            note("dbsde", fd_gap(
                              [&](const auto& ns) {
                                  std::vector<NetworkParams<double>> zs(ns.begin() + 1, ns.end());
                                  return oracle::dbsde_loss(in.model, ns[0], zs, in.paths);
                              },
                              nets, concat(parts)));
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// GroupSort Lipschitz property

struct LipschitzStats {
    long pairs = 0;
    long violations = 0;
    double worst_excess = -1e300;  // max of |f(x)-f(y)| - |x-y|_2
};

inline LipschitzStats lipschitz_suite(int networks, int pairs_per_network, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0, 1);
    LipschitzStats s;
    for (int k = 0; k < networks; ++k) {
        const int d = std::uniform_int_distribution<int>(1, 5)(rng);
        const int width = 2 * std::uniform_int_distribution<int>(1, 4)(rng);
        const auto raw = oracle::random_network({d, {width, width}, 1, mdbdp::Activation::groupsort(2)}, rng, 3.0);
        const auto p = mdbdp::project_lipschitz(raw, 1.0);
        Matrix X(d, pairs_per_network), Y(d, pairs_per_network);
        for (int j = 0; j < pairs_per_network; ++j) {
            const double scale = std::exp(std::uniform_real_distribution<double>(-4, 1)(rng));
            for (int i = 0; i < d; ++i) {
                X(i, j) = 2 * n(rng);
                Y(i, j) = X(i, j) + scale * n(rng);
            }
        }
        const mdbdp::RowVector fx = mdbdp::forward_batch(p, X), fy = mdbdp::forward_batch(p, Y);
        for (int j = 0; j < pairs_per_network; ++j) {
            const double excess = std::abs(fx(j) - fy(j)) - (X.col(j) - Y.col(j)).norm();
            s.worst_excess = std::max(s.worst_excess, excess);
            if (excess > 1e-9) ++s.violations;
            ++s.pairs;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Discretisation consistency: MDBDP loss at step 0 with exact (U, Z)

inline double frozen_analytic_mdbdp_loss(int n_steps, int batch, std::uint64_t seed) {
    const auto p = mdbdp::bounded_problem(1);
    const auto grid = mdbdp::TimeGrid<double>::uniform(p.model.horizon, n_steps);
    const auto paths = mdbdp::simulate_paths(p.model, grid, p.x0, batch, seed);
    const auto& m = p.model;
    const mdbdp::FrozenPair<double> exact = [&](int j, const Matrix& x) {
        return std::make_pair(mdbdp::RowVector(m.analytic_solution(grid.time(j), x)), Matrix(m.analytic_z(grid.time(j), x)));
    };
    return mdbdp::mdbdp_residual(m, paths, 0, exact);
}

} // namespace checks
