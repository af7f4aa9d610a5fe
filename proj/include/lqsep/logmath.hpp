#pragma once

// Log-space helpers shared by the priors, the separator and the selector.
// Everything subtracts the maximum before exponentiating.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

namespace lqsep {

template <typename Derived>
double log_sum_exp(const Eigen::DenseBase<Derived>& x) {
    const double m = x.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((x.derived().array() - m).exp().sum());
}

template <typename Derived>
Eigen::Matrix<double, Eigen::Dynamic, 1> log_softmax(const Eigen::MatrixBase<Derived>& x) {
    return x.array() - log_sum_exp(x);
}

/// Uniform double in [0, 1) with 53 random bits; independent of the
/// standard library's distribution implementations.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Draws an index from normalized log-probabilities laid out contiguously.
template <typename Derived>
Eigen::Index sample_log_categorical(const Eigen::DenseBase<Derived>& log_p, std::mt19937_64& rng) {
    const double u = uniform01(rng);
    double cdf = 0.0;
    const Eigen::Index n = log_p.size();
    for (Eigen::Index i = 0; i < n; ++i) {
        cdf += std::exp(log_p.derived().coeff(i));
        if (u < cdf) return i;
    }
    // Rounding left the total slightly below one: fall back to the last
    // entry with non-zero mass.
    for (Eigen::Index i = n; i-- > 0;) {
        if (log_p.derived().coeff(i) > -std::numeric_limits<double>::infinity()) return i;
    }
    return n - 1;
}

}  // namespace lqsep
