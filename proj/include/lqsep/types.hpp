#pragma once

#include <Eigen/Dense>

#include <vector>

#include "lqsep/error.hpp"

namespace lqsep {

using Index = Eigen::Index;

/// A mono waveform, normalized to [-1, 1].
struct AudioChunk {
    Eigen::VectorXd samples;
    int sample_rate = 8000;

    Index length() const { return samples.size(); }
};

/// S x D matrix of continuous latents, one row per latent step.
using LatentVectors = Eigen::MatrixXd;

/// Code indices in [0, K).
using LatentIndices = std::vector<int>;

/// K learned D-dimensional codes, one per row.
struct Codebook {
    Eigen::MatrixXd codes;

    Index size() const { return codes.rows(); }
    Index dim() const { return codes.cols(); }

    void validate() const {
        if (codes.rows() < 2) throw ValidationError("codebook needs at least two codes");
        if (!codes.allFinite()) throw ValidationError("codebook contains non-finite entries");
    }
};

inline void check_indices(const LatentIndices& z, Index K) {
    for (int k : z) {
        if (k < 0 || k >= K) {
            throw ValidationError("latent index " + std::to_string(k) + " outside [0, " +
                                  std::to_string(K) + ")");
        }
    }
}

}  // namespace lqsep
