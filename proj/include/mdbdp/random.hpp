#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>

namespace mdbdp {

/// SplitMix64 finalizer: a bijective 64-bit mixing function.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Folds a list of integers into one 64-bit key. Used to derive independent
/// seeds for (run, time step, iteration, ...) tuples.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) noexcept {
    std::uint64_t key = mix64(base);
    for (std::uint64_t p : parts) key = mix64(key ^ mix64(p + 0x632BE59BD9B4E019ULL));
    return key;
}

/// Counter-based generator: the n-th draw of stream s under key k is a pure
/// function of (k, s, n), so a batch can be filled in any order or partition.
class CounterRng {
public:
    CounterRng(std::uint64_t key, std::uint64_t stream) noexcept
        : state_(mix64(key ^ mix64(stream ^ 0xD1B54A32D192ED03ULL))) {}

    std::uint64_t bits(std::uint64_t counter) const noexcept {
        return mix64(state_ + counter * 0x9E3779B97F4A7C15ULL);
    }

    /// Uniform on the open interval (0, 1).
    double uniform(std::uint64_t counter) const noexcept {
        return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal(std::uint64_t counter) const noexcept;

private:
    std::uint64_t state_;
};

namespace detail {

// Acklam's rational approximation of the inverse normal CDF
inline constexpr double acklam_a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                      1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
inline constexpr double acklam_b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                      6.680131188771972e+01,  -1.328068155288572e+01};
inline constexpr double acklam_c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                      -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
inline constexpr double acklam_d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                      3.754408661907416e+00};
inline constexpr double acklam_p_low = 0.02425;

inline double acklam_central(double p) noexcept {
    const auto& a = acklam_a;
    const auto& b = acklam_b;
    const double q = p - 0.5;
    const double r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

inline double acklam_tail(double q) noexcept {
    const auto& c = acklam_c;
    const auto& d = acklam_d;
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
}

} // namespace detail

/// Inverse of the standard normal CDF (Acklam's rational approximation,
/// relative error below 1.2e-9 over (0, 1)).
inline double inverse_normal_cdf(double p) noexcept {
    if (p < detail::acklam_p_low) return detail::acklam_tail(std::sqrt(-2.0 * std::log(p)));
    if (p > 1.0 - detail::acklam_p_low) return -detail::acklam_tail(std::sqrt(-2.0 * std::log1p(-p)));
    return detail::acklam_central(p);
}

inline double CounterRng::normal(std::uint64_t counter) const noexcept {
    return inverse_normal_cdf(uniform(counter));
}

/// out[j] = rng.normal(first + j) for j < n. The central branch runs over
/// whole chunks so the compiler vectorizes it; tails (about 5% of draws) are
/// patched afterwards.
inline void fill_normals(const CounterRng& rng, std::uint64_t first, double* out, std::size_t n) noexcept {
    constexpr std::size_t chunk = 256;
    double u[chunk];
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t m = n - start < chunk ? n - start : chunk;
        double* o = out + start;
        for (std::size_t j = 0; j < m; ++j) u[j] = rng.uniform(first + start + j);
        for (std::size_t j = 0; j < m; ++j) o[j] = detail::acklam_central(u[j]);
        for (std::size_t j = 0; j < m; ++j)
            if (u[j] < detail::acklam_p_low || u[j] > 1.0 - detail::acklam_p_low) o[j] = inverse_normal_cdf(u[j]);
    }
}

} // namespace mdbdp
