#pragma once

// Candidate selection by batch-normalized prior scores, optionally blended
// with a time-domain likelihood of the mixture given the decoded stems.

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lqsep/codec.hpp"
#include "lqsep/separator.hpp"

namespace lqsep {

/// Two length-B vectors: log softmax over the batch of prior_logprob_i / S.
std::pair<Eigen::VectorXd, Eigen::VectorXd> batch_prior_scores(const CandidateBatch& batch);

/// -|m - (y1 + y2) / 2|^2 / (2 sigma_rej^2) for already decoded stems.
double global_log_likelihood(const AudioChunk& m, const Eigen::VectorXd& y1, const Eigen::VectorXd& y2,
                             double sigma_rej);
double global_log_likelihood(const AudioChunk& m, const LatentIndices& z1, const LatentIndices& z2,
                             const LqVae& codec, double sigma_rej);

struct SigmaRej {
    double value = 0.0;
    bool clamped = false;  // residuals were all zero; `value` is the configured minimum
};

/// Solves E[log_scores] = -E[residuals] / (2 sigma^2) for sigma, where
/// `squared_residuals` holds |m - (y1 + y2) / 2|^2 per candidate.
SigmaRej solve_sigma_rej(const Eigen::VectorXd& squared_residuals, const Eigen::VectorXd& log_scores,
                         double min_sigma);

struct SelectionConfig {
    double alpha = 0.0;
    double min_sigma_rej = 1e-4;
    std::optional<double> fixed_sigma_rej;  // skips the balance solve
};

struct SelectionScores {
    Eigen::VectorXd prior_score_1, prior_score_2;
    Eigen::VectorXd global_loglik;  // empty when alpha = 0
    Eigen::VectorXd combined;
    double alpha = 0.0;
    std::optional<double> sigma_rej;
    Index selected = 0;
    std::vector<std::string> warnings;
};

/// Decoded stems of every candidate, in batch order.
struct DecodedBatch {
    std::vector<Eigen::VectorXd> y1, y2;
};

DecodedBatch decode_batch(const CandidateBatch& batch, const LqVae& codec);

/// Scores from prior terms alone when alpha = 0; otherwise `decoded` must
/// hold every candidate's stems.
SelectionScores score_candidates(const CandidateBatch& batch, const AudioChunk& m, const SelectionConfig& cfg,
                                 const DecodedBatch* decoded);

/// Decodes the batch only when alpha > 0.
SelectionScores score_candidates(const CandidateBatch& batch, const AudioChunk& m, const LqVae& codec,
                                 const SelectionConfig& cfg);

struct SeparationResult {
    SelectionScores scores;
    AudioChunk stem1, stem2;
};

SeparationResult select(const CandidateBatch& batch, const AudioChunk& m, const LqVae& codec,
                        const SelectionConfig& cfg);

nlohmann::json selection_report(const SelectionScores& scores, const std::string& stem1_path,
                                const std::string& stem2_path);

}  // namespace lqsep
