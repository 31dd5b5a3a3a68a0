#pragma once

#include "mdbdp/random.hpp"
#include "mdbdp/types.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mdbdp {

/// Subdivision 0 = t_0 < t_1 < ... < t_N = T of the time horizon.
template <typename Scalar>
class TimeGrid {
public:
    TimeGrid() = default;

    explicit TimeGrid(std::vector<Scalar> times) : times_(std::move(times)) {
        if (times_.size() < 2) throw std::invalid_argument("TimeGrid: need at least two points");
        for (std::size_t i = 0; i < times_.size(); ++i) {
            if (!std::isfinite(static_cast<double>(times_[i])))
                throw std::invalid_argument("TimeGrid: non-finite time at index " + std::to_string(i));
        }
        if (times_.front() != Scalar(0)) throw std::invalid_argument("TimeGrid: first time must be 0");
        for (std::size_t i = 0; i + 1 < times_.size(); ++i) {
            if (!(times_[i + 1] > times_[i]))
                throw std::invalid_argument("TimeGrid: times must be strictly increasing (index " +
                                            std::to_string(i + 1) + ")");
        }
    }

    static TimeGrid uniform(Scalar horizon, int n_steps) {
        if (n_steps < 1) throw std::invalid_argument("TimeGrid: n_steps must be >= 1");
        if (!(horizon > Scalar(0)) || !std::isfinite(static_cast<double>(horizon)))
            throw std::invalid_argument("TimeGrid: horizon must be positive and finite");
        std::vector<Scalar> t(static_cast<std::size_t>(n_steps) + 1);
        for (int i = 0; i <= n_steps; ++i) t[i] = horizon * Scalar(i) / Scalar(n_steps);
        t.back() = horizon;
        return TimeGrid(std::move(t));
    }

    int n_steps() const noexcept { return static_cast<int>(times_.size()) - 1; }
    Scalar time(int i) const { return times_.at(static_cast<std::size_t>(i)); }
    Scalar dt(int i) const { return time(i + 1) - time(i); }
    Scalar horizon() const noexcept { return times_.back(); }
    const std::vector<Scalar>& times() const noexcept { return times_; }

    /// Largest step size |pi|.
    Scalar modulus() const {
        Scalar m = 0;
        for (int i = 0; i < n_steps(); ++i) m = std::max(m, dt(i));
        return m;
    }

private:
    std::vector<Scalar> times_;
};

template <typename Scalar>
struct GeneratorPartials {
    RowVec<Scalar> dy;  // 1 x K
    Mat<Scalar> dz;     // d x K
};

/// Forward diffusion dX = mu dt + sigma dW together with the BSDE data
/// (generator f and terminal g). All batched callables take points as the
/// columns of a d x K matrix.
template <typename Scalar>
struct ModelSpec {
    using Matrix = Mat<Scalar>;
    using Vector = Vec<Scalar>;
    using Row = RowVec<Scalar>;

    int dim = 0;
    Scalar horizon = 1;

    std::function<Matrix(Scalar t, const Matrix& x)> drift;
    std::function<Matrix(Scalar t, const Vector& x)> diffusion;
    /// When set, sigma(t, x) is evaluated once per time step and applied as a GEMM.
    bool diffusion_state_independent = false;

    std::function<Row(Scalar t, const Matrix& x, const Row& y, const Matrix& z)> generator;
    /// Optional exact partials of the generator in (y, z); central differences otherwise.
    std::function<GeneratorPartials<Scalar>(Scalar t, const Matrix& x, const Row& y, const Matrix& z)>
        generator_partials;

    std::function<Row(const Matrix& x)> terminal;
    std::function<Matrix(const Matrix& x)> terminal_gradient;

    std::function<Row(Scalar t, const Matrix& x)> analytic_solution;
    std::function<Matrix(Scalar t, const Matrix& x)> analytic_z;

    void validate() const {
        if (dim < 1) throw std::invalid_argument("ModelSpec: dim must be >= 1");
        if (!(horizon > Scalar(0))) throw std::invalid_argument("ModelSpec: horizon must be positive");
        if (!drift) throw std::invalid_argument("ModelSpec: missing drift");
        if (!diffusion) throw std::invalid_argument("ModelSpec: missing diffusion");
        if (!generator) throw std::invalid_argument("ModelSpec: missing generator");
        if (!terminal) throw std::invalid_argument("ModelSpec: missing terminal condition");
    }
};

/// Batch of Euler paths. states[i] and increments[i] are d x K matrices whose
/// column k belongs to path k.
template <typename Scalar>
struct PathBatch {
    std::vector<Mat<Scalar>> states;      // X_0 .. X_n (n = simulated steps)
    std::vector<Mat<Scalar>> increments;  // dW_0 .. dW_{n-1}
    TimeGrid<Scalar> grid;

    int batch() const { return states.empty() ? 0 : static_cast<int>(states.front().cols()); }
    int dim() const { return states.empty() ? 0 : static_cast<int>(states.front().rows()); }
    int simulated_steps() const { return static_cast<int>(increments.size()); }
};

namespace detail {

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    // NaN * 0 and inf * 0 are NaN, so one vectorized reduction suffices
    return (m.array() * typename Derived::Scalar(0)).sum() == typename Derived::Scalar(0);
}

inline std::string format_time(double t) {
    std::ostringstream os;
    os << t;
    return os.str();
}

} // namespace detail

/// sigma(t, x_k) * v_k for every column k.
template <typename Scalar>
Mat<Scalar> apply_diffusion(const ModelSpec<Scalar>& model, Scalar t, const Mat<Scalar>& x, const Mat<Scalar>& v) {
    if (model.diffusion_state_independent) {
        const Mat<Scalar> sigma = model.diffusion(t, x.col(0));
        return sigma * v;
    }
    Mat<Scalar> out(v.rows(), v.cols());
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
        const Vec<Scalar> xk = x.col(k);
        out.col(k) = model.diffusion(t, xk) * v.col(k);
    }
    return out;
}

/// sigma(t, x_k)^T * v_k for every column k.
template <typename Scalar>
Mat<Scalar> apply_diffusion_transposed(const ModelSpec<Scalar>& model, Scalar t, const Mat<Scalar>& x,
                                       const Mat<Scalar>& v) {
    if (model.diffusion_state_independent) {
        const Mat<Scalar> sigma = model.diffusion(t, x.col(0));
        return sigma.transpose() * v;
    }
    Mat<Scalar> out(v.rows(), v.cols());
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
        const Vec<Scalar> xk = x.col(k);
        out.col(k) = model.diffusion(t, xk).transpose() * v.col(k);
    }
    return out;
}

/// Partials of f in (y, z); uses the model's closed form when available.
template <typename Scalar>
GeneratorPartials<Scalar> generator_partials(const ModelSpec<Scalar>& model, Scalar t, const Mat<Scalar>& x,
                                             const RowVec<Scalar>& y, const Mat<Scalar>& z) {
    if (model.generator_partials) return model.generator_partials(t, x, y, z);
    const Scalar h = Scalar(1e-6);
    GeneratorPartials<Scalar> p;
    RowVec<Scalar> yp = y.array() + h, ym = y.array() - h;
    p.dy = (model.generator(t, x, yp, z) - model.generator(t, x, ym, z)) / (Scalar(2) * h);
    p.dz.resize(z.rows(), z.cols());
    Mat<Scalar> zs = z;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        zs.row(r).array() += h;
        const RowVec<Scalar> fp = model.generator(t, x, y, zs);
        zs.row(r).array() -= Scalar(2) * h;
        const RowVec<Scalar> fm = model.generator(t, x, y, zs);
        zs.row(r) = z.row(r);
        p.dz.row(r) = (fp - fm) / (Scalar(2) * h);
    }
    return p;
}

/// Brownian increments for `batch` paths over the first `up_to` steps of the
/// grid (all steps when up_to < 0). Entry (k, i, j) is drawn from counter
/// i * dim + j of the stream (seed, k), scaled by sqrt(dt_i).
template <typename Scalar>
std::vector<Mat<Scalar>> sample_increments(const TimeGrid<Scalar>& grid, int dim, int batch, std::uint64_t seed,
                                           int up_to = -1) {
    if (batch < 1) throw std::invalid_argument("sample_increments: batch must be >= 1");
    if (dim < 1) throw std::invalid_argument("sample_increments: dim must be >= 1");
    const int n = up_to < 0 ? grid.n_steps() : up_to;
    if (n > grid.n_steps()) throw std::invalid_argument("sample_increments: up_to exceeds grid size");
    for (int i = 0; i < n; ++i) {
        if (!std::isfinite(static_cast<double>(grid.dt(i))) || !(grid.dt(i) > Scalar(0)))
            throw std::invalid_argument("sample_increments: invalid step size at index " + std::to_string(i));
    }

    std::vector<Mat<Scalar>> inc(static_cast<std::size_t>(n), Mat<Scalar>(dim, batch));
    std::vector<double> draws(static_cast<std::size_t>(n) * static_cast<std::size_t>(dim));
    for (int k = 0; k < batch; ++k) {
        const CounterRng rng(seed, static_cast<std::uint64_t>(k));
        fill_normals(rng, 0, draws.data(), draws.size());
        for (int i = 0; i < n; ++i) {
            const Scalar scale = std::sqrt(grid.dt(i));
            const double* src = draws.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(dim);
            Scalar* col = inc[static_cast<std::size_t>(i)].col(k).data();
            for (int j = 0; j < dim; ++j) col[j] = scale * static_cast<Scalar>(src[j]);
        }
    }
    return inc;
}

/// One Euler-Maruyama step applied to every column of x.
template <typename Scalar>
Mat<Scalar> euler_step_batch(const Mat<Scalar>& x, Scalar t, Scalar dt, const Mat<Scalar>& dw,
                             const ModelSpec<Scalar>& model) {
    if (!(dt > Scalar(0))) throw std::invalid_argument("euler_step: dt must be positive");
    if (x.rows() != model.dim || dw.rows() != model.dim || dw.cols() != x.cols())
        throw std::invalid_argument("euler_step: dimension mismatch");
    const Mat<Scalar> mu = model.drift(t, x);
    if (mu.rows() != x.rows() || mu.cols() != x.cols())
        throw std::invalid_argument("euler_step: drift returned wrong shape");
    if (!detail::all_finite(mu))
        throw std::runtime_error("euler_step: drift returned a non-finite value at t=" +
                                 detail::format_time(static_cast<double>(t)));
    const Mat<Scalar> noise = apply_diffusion(model, t, x, dw);
    if (!detail::all_finite(noise))
        throw std::runtime_error("euler_step: diffusion produced a non-finite value at t=" +
                                 detail::format_time(static_cast<double>(t)));
    return x + dt * mu + noise;
}

template <typename Scalar>
Vec<Scalar> euler_step(const Vec<Scalar>& x, Scalar t, Scalar dt, const Vec<Scalar>& dw,
                       const ModelSpec<Scalar>& model) {
    const Mat<Scalar> xm = x;
    const Mat<Scalar> dwm = dw;
    return euler_step_batch<Scalar>(xm, t, dt, dwm, model).col(0);
}

/// Simulates the Euler scheme from the deterministic point x0 for the first
/// `up_to` steps (all steps when up_to < 0). Simulating fewer steps yields a
/// prefix of the full simulation under the same seed.
template <typename Scalar>
PathBatch<Scalar> simulate_paths(const ModelSpec<Scalar>& model, const TimeGrid<Scalar>& grid, const Vec<Scalar>& x0,
                                 int batch, std::uint64_t seed, int up_to = -1) {
    if (x0.size() != model.dim)
        throw std::invalid_argument("simulate_paths: x0 has dimension " + std::to_string(x0.size()) +
                                    ", model expects " + std::to_string(model.dim));
    PathBatch<Scalar> paths;
    paths.grid = grid;
    paths.increments = sample_increments(grid, model.dim, batch, seed, up_to);
    const int n = static_cast<int>(paths.increments.size());
    paths.states.reserve(static_cast<std::size_t>(n) + 1);
    paths.states.emplace_back(x0.replicate(1, batch));
    for (int i = 0; i < n; ++i) {
        try {
            paths.states.push_back(euler_step_batch<Scalar>(paths.states.back(), grid.time(i), grid.dt(i),
                                                            paths.increments[static_cast<std::size_t>(i)], model));
        } catch (const std::exception& e) {
            throw std::runtime_error("simulate_paths: step " + std::to_string(i) + ": " + e.what());
        }
    }
    return paths;
}

} // namespace mdbdp
