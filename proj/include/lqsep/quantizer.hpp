#pragma once

// Nearest-neighbour vector quantization over a codebook and the table of
// quantized half-sums used by the latent likelihood.
//
// Distances are always evaluated as (v - e_k).squaredNorm() so that a vector
// equal to a code has distance exactly zero. The half-sum of two codes is
// equidistant from both, so exact ties are common and the summation order
// would otherwise decide them: distances within kTieTolerance (relative) count
// as tied and the lowest index wins.

#include <Eigen/Dense>

#include <limits>
#include <string>

#include "lqsep/types.hpp"

namespace lqsep {

inline constexpr double kTieTolerance = 1e-12;

template <typename DerivedV, typename DerivedC>
int nearest_code(const Eigen::MatrixBase<DerivedV>& v, const Eigen::MatrixBase<DerivedC>& codes) {
    using Scalar = typename DerivedC::Scalar;
    int best = 0;
    Scalar best_d = std::numeric_limits<Scalar>::infinity();
    for (Index k = 0; k < codes.rows(); ++k) {
        const Scalar d = (codes.row(k) - v.derived().reshaped().transpose()).squaredNorm();
        if (d < best_d * (1.0 - kTieTolerance)) {
            best_d = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

/// Index of the nearest code for every row of `h`.
template <typename DerivedH, typename DerivedC>
LatentIndices nearest_codes(const Eigen::MatrixBase<DerivedH>& h, const Eigen::MatrixBase<DerivedC>& codes) {
    if (h.cols() != codes.cols()) {
        throw DimensionError("latent has " + std::to_string(h.cols()) + " channels, codebook has " +
                             std::to_string(codes.cols()));
    }
    LatentIndices z(static_cast<std::size_t>(h.rows()));
    for (Index s = 0; s < h.rows(); ++s) z[static_cast<std::size_t>(s)] = nearest_code(h.row(s), codes);
    return z;
}

/// Rows of the codebook selected by `z`.
template <typename DerivedC>
Eigen::Matrix<typename DerivedC::Scalar, Eigen::Dynamic, Eigen::Dynamic> gather_codes(
    const LatentIndices& z, const Eigen::MatrixBase<DerivedC>& codes) {
    Eigen::Matrix<typename DerivedC::Scalar, Eigen::Dynamic, Eigen::Dynamic> out(
        static_cast<Index>(z.size()), codes.cols());
    for (std::size_t s = 0; s < z.size(); ++s) out.row(static_cast<Index>(s)) = codes.row(z[s]);
    return out;
}

struct Quantized {
    LatentIndices indices;
    LatentVectors codes;
};

/// B_Q followed by B_I: nearest codes and their indices.
inline Quantized quantize(const LatentVectors& h, const Codebook& cb) {
    Quantized q;
    q.indices = nearest_codes(h, cb.codes);
    q.codes = gather_codes(q.indices, cb.codes);
    return q;
}

/// Quantized half-sum of every pair of codes: entry (a, b) is the index of
/// the code nearest to (e_a + e_b) / 2. Symmetric with identity diagonal.
class SumCodeTable {
public:
    SumCodeTable() = default;
    explicit SumCodeTable(const Codebook& cb);

    Index size() const { return indices_.rows(); }
    const Eigen::MatrixXi& indices() const { return indices_; }
    int operator()(Index a, Index b) const { return indices_(a, b); }

    /// Materializes B_Q((e_a + e_b) / 2).
    auto code(Index a, Index b) const { return codes_.row(indices_(a, b)); }
    const Eigen::MatrixXd& codebook_codes() const { return codes_; }

private:
    Eigen::MatrixXi indices_;
    Eigen::MatrixXd codes_;
};

inline SumCodeTable::SumCodeTable(const Codebook& cb) : codes_(cb.codes) {
    cb.validate();
    const Index K = cb.size();
    indices_.resize(K, K);
    Eigen::RowVectorXd half_sum(cb.dim());
    for (Index a = 0; a < K; ++a) {
        for (Index b = a; b < K; ++b) {
            half_sum = 0.5 * cb.codes.row(a) + 0.5 * cb.codes.row(b);
            const int j = nearest_code(half_sum, cb.codes);
            indices_(a, b) = j;
            indices_(b, a) = j;
        }
    }
}

inline SumCodeTable build_sum_code_table(const Codebook& cb) { return SumCodeTable(cb); }

}  // namespace lqsep
