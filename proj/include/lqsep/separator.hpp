#pragma once

// Latent-domain separation. At every step s each candidate draws a code
// pair (k1, k2) from
//   p1(k1 | z1_<s) p2(k2 | z2_<s) exp(-|y_s - B_Q((e_k1 + e_k2) / 2)|^2 / 2 sigma^2)
// normalized over all K^2 pairs, where y is the quantized mixture latent.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lqsep/codec.hpp"
#include "lqsep/prior.hpp"
#include "lqsep/quantizer.hpp"

namespace lqsep {

struct MixtureLatent {
    LatentVectors m_latent;  // S x D, rows of the standardized codebook
    LatentIndices m_indices;
    AudioChunk source_mixture;
};

MixtureLatent mixture_latent(const LqVae& codec, const AudioChunk& m);

/// Entry (k1, k2) = -|m_s - e_{table(k1, k2)}|^2 / (2 sigma^2).
Eigen::MatrixXd likelihood_log_matrix(const Eigen::Ref<const Eigen::RowVectorXd>& m_latent_s,
                                      const SumCodeTable& table, const Codebook& cb, double sigma);

struct StepPosterior {
    Eigen::MatrixXd log_post;  // K x K, rows index source 1
    std::optional<double> sigma;
};

StepPosterior step_posterior(const Eigen::Ref<const Eigen::VectorXd>& prior1,
                             const Eigen::Ref<const Eigen::VectorXd>& prior2, const Eigen::MatrixXd& lik);

struct CandidateBatch {
    std::vector<LatentIndices> z1, z2;
    std::vector<double> prior_logprob_1, prior_logprob_2;
    std::vector<std::uint64_t> rng_seeds;

    Index size() const { return static_cast<Index>(z1.size()); }
    Index length() const { return z1.empty() ? 0 : static_cast<Index>(z1.front().size()); }
    void validate() const;
};

struct SeparationConfig {
    double sigma = 0.1;
    int batch = 32;
    std::uint64_t seed = 0;
};

/// Seed of candidate b's private generator.
std::uint64_t candidate_seed(std::uint64_t seed, Index b);

/// Samples cfg.batch candidates; all of them advance one step at a time so
/// each prior is queried once per step for the whole batch.
CandidateBatch separate_latent(const LatentVectors& m_latent, const SumCodeTable& table, const Codebook& cb,
                               const PriorModel& p1, const PriorModel& p2, const SeparationConfig& cfg);

CandidateBatch separate(const AudioChunk& m, const LqVae& codec, const SumCodeTable& table, const PriorModel& p1,
                        const PriorModel& p2, const SeparationConfig& cfg);

/// Exhaustive posterior over all (z1, z2) sequence pairs, scored as
/// log p1(z1) + log p2(z2) + sum_s lik_s(z1_s, z2_s). Outcome i encodes
/// i = index(z1) * K^S + index(z2), with z_0 the most significant digit.
struct JointPosterior {
    int K = 0;
    Index S = 0;
    std::vector<double> probs;

    Index sequences() const;
    Index index_of(const LatentIndices& z1, const LatentIndices& z2) const;
    std::pair<LatentIndices, LatentIndices> outcome(Index i) const;
    double prob(const LatentIndices& z1, const LatentIndices& z2) const { return probs[index_of(z1, z2)]; }
};

inline constexpr double kMaxEnumeratedOutcomes = 1e7;

JointPosterior enumerate_posterior_exact(const LatentIndices& m_indices, const SumCodeTable& table,
                                         const Codebook& cb, const PriorModel& p1, const PriorModel& p2,
                                         double sigma);

/// <dir>/<chunk_id>.z1.lqz, .z2.lqz in the corpus format and a JSON sidecar
/// holding sigma, B, seeds, chunk id, prior log-probs and `extra`.
void write_candidate_archive(const std::filesystem::path& dir, const std::string& chunk_id,
                             const CandidateBatch& batch, double sigma, int vocabulary_size,
                             const nlohmann::json& extra = nlohmann::json::object());
CandidateBatch read_candidate_archive(const std::filesystem::path& dir, const std::string& chunk_id);

}  // namespace lqsep
