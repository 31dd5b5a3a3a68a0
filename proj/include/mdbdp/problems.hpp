#pragma once

#include "mdbdp/stochastics.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace mdbdp {

template <typename Scalar>
struct ProblemInstance {
    ModelSpec<Scalar> model;
    Vec<Scalar> x0;
    std::optional<Scalar> reference_y0;
    std::string label;
};

namespace detail {

inline void check_problem_dim(int d, const char* name) {
    if (d < 1) throw std::invalid_argument(std::string(name) + ": dimension must be >= 1, got " + std::to_string(d));
}

template <typename Scalar>
ModelSpec<Scalar> scaled_brownian_model(int d, Scalar horizon, Scalar scale) {
    ModelSpec<Scalar> m;
    m.dim = d;
    m.horizon = horizon;
    m.drift = [d](Scalar, const Mat<Scalar>& x) { return Mat<Scalar>::Zero(d, x.cols()).eval(); };
    const Mat<Scalar> sigma = scale * Mat<Scalar>::Identity(d, d);
    m.diffusion = [sigma](Scalar, const Vec<Scalar>&) { return sigma; };
    m.diffusion_state_independent = true;
    return m;
}

} // namespace detail

/// u(t, x) = cos(sum x) exp((T - t)/2) with mu = 0.2/d, sigma = I/sqrt(d),
/// x0 = 1_d, T = 1.
template <typename Scalar = double>
ProblemInstance<Scalar> bounded_problem(int d) {
    detail::check_problem_dim(d, "bounded_problem");
    const Scalar T = 1;
    const Scalar inv_d = Scalar(1) / Scalar(d);
    auto m = detail::scaled_brownian_model<Scalar>(d, T, Scalar(1) / std::sqrt(Scalar(d)));
    m.drift = [d, inv_d](Scalar, const Mat<Scalar>& x) {
        return Mat<Scalar>::Constant(d, x.cols(), Scalar(0.2) * inv_d).eval();
    };
    m.generator = [T, inv_d](Scalar t, const Mat<Scalar>& x, const RowVec<Scalar>& y, const Mat<Scalar>& z) {
        const auto xbar = x.colwise().sum().array().eval();
        const Scalar e = std::exp((T - t) / Scalar(2));
        const auto c = xbar.cos().eval();
        const auto s = xbar.sin().eval();
        const auto yz = (y.array() * z.colwise().sum().array()).eval();
        return (-(c + Scalar(0.2) * s) * e + Scalar(0.5) * (s * c * e * e).square() - Scalar(0.5) * inv_d * yz.square())
            .matrix()
            .eval();
    };
    m.generator_partials = [d, inv_d](Scalar, const Mat<Scalar>&, const RowVec<Scalar>& y, const Mat<Scalar>& z) {
        const auto zsum = z.colwise().sum().array().eval();
        GeneratorPartials<Scalar> p;
        p.dy = (-inv_d * y.array() * zsum.square()).matrix();
        const RowVec<Scalar> dz_row = (-inv_d * y.array().square() * zsum).matrix();
        p.dz = dz_row.replicate(d, 1);
        return p;
    };
    m.terminal = [](const Mat<Scalar>& x) { return x.colwise().sum().array().cos().matrix().eval(); };
    m.terminal_gradient = [d](const Mat<Scalar>& x) {
        const RowVec<Scalar> s = -x.colwise().sum().array().sin().matrix();
        return s.replicate(d, 1).eval();
    };
    m.analytic_solution = [T](Scalar t, const Mat<Scalar>& x) {
        return (x.colwise().sum().array().cos() * std::exp((T - t) / Scalar(2))).matrix().eval();
    };
    m.analytic_z = [T, d](Scalar t, const Mat<Scalar>& x) {
        const RowVec<Scalar> s =
            (-x.colwise().sum().array().sin() * std::exp((T - t) / Scalar(2)) / std::sqrt(Scalar(d))).matrix();
        return s.replicate(d, 1).eval();
    };

    ProblemInstance<Scalar> p;
    p.model = std::move(m);
    p.x0 = Vec<Scalar>::Ones(d);
    p.reference_y0 = std::cos(Scalar(d)) * std::exp(T / Scalar(2));
    p.label = "bounded";
    return p;
}

namespace detail {

/// Closed-form pieces of u(t,x) = ((T-t)/d) sum_i h(x_i) + cos(sum_i i x_i),
/// with h(x) = sin(x) for x < 0 and x otherwise.
template <typename Scalar>
struct UnboundedSolution {
    int d;
    Scalar T;

    static Scalar h(Scalar x) { return x < 0 ? std::sin(x) : x; }
    static Scalar dh(Scalar x) { return x < 0 ? std::cos(x) : Scalar(1); }
    static Scalar d2h(Scalar x) { return x < 0 ? -std::sin(x) : Scalar(0); }

    Scalar weighted_sum(const Scalar* x) const {
        Scalar s = 0;
        for (int i = 0; i < d; ++i) s += Scalar(i + 1) * x[i];
        return s;
    }

    Scalar value(Scalar t, const Scalar* x) const {
        Scalar hs = 0;
        for (int i = 0; i < d; ++i) hs += h(x[i]);
        return (T - t) / Scalar(d) * hs + std::cos(weighted_sum(x));
    }

    /// k(t,x) = du/dt + (1/2d) tr D2u + (u/sqrt(d)) 1.(sigma^T Du) + u^2/2.
    Scalar source(Scalar t, const Scalar* x) const {
        const Scalar S = weighted_sum(x);
        const Scalar sinS = std::sin(S), cosS = std::cos(S);
        const Scalar tau = (T - t) / Scalar(d);
        Scalar hs = 0, grad_sum = 0, lap = 0;
        for (int i = 0; i < d; ++i) {
            const Scalar w = Scalar(i + 1);
            hs += h(x[i]);
            grad_sum += tau * dh(x[i]) - w * sinS;
            lap += tau * d2h(x[i]) - w * w * cosS;
        }
        const Scalar u = tau * hs + cosS;
        const Scalar dt_u = -hs / Scalar(d);
        return dt_u + lap / (Scalar(2) * Scalar(d)) + u * grad_sum / Scalar(d) + u * u / Scalar(2);
    }

    /// source() for every column of x.
    RowVec<Scalar> source_batch(Scalar t, const Mat<Scalar>& x) const {
        const Vec<Scalar> w = Vec<Scalar>::LinSpaced(d, Scalar(1), Scalar(d));
        const Scalar w_sum = w.sum(), w_sq = w.squaredNorm();
        const auto S = (w.transpose() * x).array().eval();
        const auto sinS = S.sin().eval();
        const auto cosS = S.cos().eval();
        const auto neg = (x.array() < Scalar(0)).eval();
        const auto sx = x.array().sin().eval();
        const auto hs = neg.select(sx, x.array()).colwise().sum().eval();
        const auto dhs = neg.select(x.array().cos(), Scalar(1)).colwise().sum().eval();
        const auto d2hs = neg.select(-sx, Scalar(0)).colwise().sum().eval();
        const Scalar tau = (T - t) / Scalar(d);
        const auto u = (tau * hs + cosS).eval();
        const auto grad_sum = (tau * dhs - w_sum * sinS).eval();
        const auto lap = (tau * d2hs - w_sq * cosS).eval();
        return (-hs / Scalar(d) + lap / (Scalar(2) * Scalar(d)) + u * grad_sum / Scalar(d) + u.square() / Scalar(2))
            .matrix();
    }
};

} // namespace detail

/// u(t,x) = ((T-t)/d) sum_i h(x_i) + cos(sum_i i x_i) with mu = 0,
/// sigma = I/sqrt(d), f = k(t,x) - y (1.z)/sqrt(d) - y^2/2, x0 = 0.5 1_d.
template <typename Scalar = double>
ProblemInstance<Scalar> unbounded_problem(int d) {
    detail::check_problem_dim(d, "unbounded_problem");
    const Scalar T = 1;
    const Scalar rsd = Scalar(1) / std::sqrt(Scalar(d));
    const detail::UnboundedSolution<Scalar> sol{d, T};
    auto m = detail::scaled_brownian_model<Scalar>(d, T, rsd);
    m.generator = [sol, rsd](Scalar t, const Mat<Scalar>& x, const RowVec<Scalar>& y, const Mat<Scalar>& z) {
        return (sol.source_batch(t, x).array() - rsd * y.array() * z.colwise().sum().array() -
                y.array().square() / Scalar(2))
            .matrix()
            .eval();
    };
    m.generator_partials = [d, rsd](Scalar, const Mat<Scalar>&, const RowVec<Scalar>& y, const Mat<Scalar>& z) {
        GeneratorPartials<Scalar> p;
        p.dy = (-rsd * z.colwise().sum().array() - y.array()).matrix();
        const RowVec<Scalar> dz_row = -rsd * y;
        p.dz = dz_row.replicate(d, 1);
        return p;
    };
    m.terminal = [sol](const Mat<Scalar>& x) {
        RowVec<Scalar> out(x.cols());
        for (Eigen::Index k = 0; k < x.cols(); ++k) out(k) = std::cos(sol.weighted_sum(x.col(k).data()));
        return out;
    };
    m.terminal_gradient = [sol, d](const Mat<Scalar>& x) {
        Mat<Scalar> out(d, x.cols());
        for (Eigen::Index k = 0; k < x.cols(); ++k) {
            const Scalar s = std::sin(sol.weighted_sum(x.col(k).data()));
            for (int i = 0; i < d; ++i) out(i, k) = -Scalar(i + 1) * s;
        }
        return out;
    };
    m.analytic_solution = [sol](Scalar t, const Mat<Scalar>& x) {
        RowVec<Scalar> out(x.cols());
        for (Eigen::Index k = 0; k < x.cols(); ++k) out(k) = sol.value(t, x.col(k).data());
        return out;
    };
    m.analytic_z = [sol, d, rsd](Scalar t, const Mat<Scalar>& x) {
        Mat<Scalar> out(d, x.cols());
        const Scalar tau = (sol.T - t) / Scalar(d);
        for (Eigen::Index k = 0; k < x.cols(); ++k) {
            const Scalar s = std::sin(sol.weighted_sum(x.col(k).data()));
            for (int i = 0; i < d; ++i)
                out(i, k) = rsd * (tau * detail::UnboundedSolution<Scalar>::dh(x(i, k)) - Scalar(i + 1) * s);
        }
        return out;
    };

    ProblemInstance<Scalar> p;
    p.x0 = Vec<Scalar>::Constant(d, Scalar(0.5));
    p.reference_y0 = sol.value(0, p.x0.data());
    p.model = std::move(m);
    p.label = "unbounded";
    return p;
}

/// Heat equation with u(t,x) = |x|^2 + d (T - t): mu = 0, sigma = I, f = 0,
/// x0 = 0, T = 1.
template <typename Scalar = double>
ProblemInstance<Scalar> heat_oracle_problem(int d) {
    detail::check_problem_dim(d, "heat_oracle_problem");
    const Scalar T = 1;
    auto m = detail::scaled_brownian_model<Scalar>(d, T, Scalar(1));
    m.generator = [](Scalar, const Mat<Scalar>& x, const RowVec<Scalar>&, const Mat<Scalar>&) {
        return RowVec<Scalar>::Zero(x.cols()).eval();
    };
    m.generator_partials = [d](Scalar, const Mat<Scalar>& x, const RowVec<Scalar>&, const Mat<Scalar>&) {
        return GeneratorPartials<Scalar>{RowVec<Scalar>::Zero(x.cols()), Mat<Scalar>::Zero(d, x.cols())};
    };
    m.terminal = [](const Mat<Scalar>& x) { return x.colwise().squaredNorm().eval(); };
    m.terminal_gradient = [](const Mat<Scalar>& x) { return (Scalar(2) * x).eval(); };
    m.analytic_solution = [T, d](Scalar t, const Mat<Scalar>& x) {
        return (x.colwise().squaredNorm().array() + Scalar(d) * (T - t)).matrix().eval();
    };
    m.analytic_z = [](Scalar, const Mat<Scalar>& x) { return (Scalar(2) * x).eval(); };

    ProblemInstance<Scalar> p;
    p.model = std::move(m);
    p.x0 = Vec<Scalar>::Zero(d);
    p.reference_y0 = Scalar(d) * T;
    p.label = "heat";
    return p;
}

/// Looks a problem up by its CLI label ("bounded", "unbounded", "heat").
template <typename Scalar = double>
ProblemInstance<Scalar> make_problem(const std::string& label, int d) {
    if (label == "bounded") return bounded_problem<Scalar>(d);
    if (label == "unbounded") return unbounded_problem<Scalar>(d);
    if (label == "heat") return heat_oracle_problem<Scalar>(d);
    throw std::invalid_argument("unknown problem '" + label + "' (expected bounded, unbounded or heat)");
}

} // namespace mdbdp
