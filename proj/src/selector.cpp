#include "lqsep/selector.hpp"

#include <cmath>

#include "lqsep/logmath.hpp"

namespace lqsep {

namespace {

// Scores that tie exactly in the log-probabilities can differ by rounding
// after normalization; differences within 1e-12 count as ties and the lowest
// index wins.
Index first_argmax(const Eigen::VectorXd& v) {
    Index best = 0;
    for (Index i = 1; i < v.size(); ++i) {
        if (v[i] > v[best] + 1e-12 * std::max(1.0, std::abs(v[best]))) best = i;
    }
    return best;
}

Eigen::VectorXd as_vector(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace

std::pair<Eigen::VectorXd, Eigen::VectorXd> batch_prior_scores(const CandidateBatch& batch) {
    batch.validate();
    if (batch.size() == 0) throw ValidationError("empty candidate batch");
    const double S = static_cast<double>(std::max<Index>(batch.length(), 1));
    return {log_softmax(as_vector(batch.prior_logprob_1) / S), log_softmax(as_vector(batch.prior_logprob_2) / S)};
}

double global_log_likelihood(const AudioChunk& m, const Eigen::VectorXd& y1, const Eigen::VectorXd& y2,
                             double sigma_rej) {
    if (!(sigma_rej > 0.0)) throw ValidationError("sigma_rej must be positive");
    if (y1.size() != m.length() || y2.size() != m.length()) {
        throw DimensionError("decoded stems and mixture differ in length");
    }
    return -(m.samples - 0.5 * y1 - 0.5 * y2).squaredNorm() / (2.0 * sigma_rej * sigma_rej);
}

double global_log_likelihood(const AudioChunk& m, const LatentIndices& z1, const LatentIndices& z2,
                             const LqVae& codec, double sigma_rej) {
    return global_log_likelihood(m, codec.decode(z1).samples, codec.decode(z2).samples, sigma_rej);
}

SigmaRej solve_sigma_rej(const Eigen::VectorXd& squared_residuals, const Eigen::VectorXd& log_scores,
                         double min_sigma) {
    if (squared_residuals.size() != log_scores.size() || log_scores.size() == 0) {
        throw DimensionError("residuals and scores must be non-empty and equal-sized");
    }
    const double mean_r = squared_residuals.mean();
    const double mean_lp = log_scores.mean();
    if (!(mean_r > 0.0)) return {min_sigma, true};
    if (!(mean_lp < 0.0)) throw NumericError("mean prior score must be negative to balance the likelihood");
    return {std::sqrt(-mean_r / (2.0 * mean_lp)), false};
}

DecodedBatch decode_batch(const CandidateBatch& batch, const LqVae& codec) {
    DecodedBatch out;
    for (Index b = 0; b < batch.size(); ++b) {
        out.y1.push_back(codec.decode(batch.z1[b]).samples);
        out.y2.push_back(codec.decode(batch.z2[b]).samples);
    }
    return out;
}

SelectionScores score_candidates(const CandidateBatch& batch, const AudioChunk& m, const SelectionConfig& cfg,
                                 const DecodedBatch* decoded) {
    if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
    SelectionScores out;
    out.alpha = cfg.alpha;
    std::tie(out.prior_score_1, out.prior_score_2) = batch_prior_scores(batch);
    out.combined = out.prior_score_1 + out.prior_score_2;
    if (cfg.alpha > 0.0) {
        if (!decoded || static_cast<Index>(decoded->y1.size()) != batch.size() ||
            static_cast<Index>(decoded->y2.size()) != batch.size()) {
            throw ValidationError("likelihood scoring needs every candidate decoded");
        }
        const Index B = batch.size();
        Eigen::VectorXd residuals(B);
        for (Index b = 0; b < B; ++b) {
            if (decoded->y1[b].size() != m.length() || decoded->y2[b].size() != m.length()) {
                throw DimensionError("decoded stems and mixture differ in length");
            }
            residuals[b] = (m.samples - 0.5 * decoded->y1[b] - 0.5 * decoded->y2[b]).squaredNorm();
        }
        SigmaRej sr;
        if (cfg.fixed_sigma_rej) {
            if (!(*cfg.fixed_sigma_rej > 0.0)) throw ValidationError("fixed sigma_rej must be positive");
            sr.value = *cfg.fixed_sigma_rej;
        } else {
            sr = solve_sigma_rej(residuals, out.combined, cfg.min_sigma_rej);
        }
        if (sr.clamped) out.warnings.push_back("all residuals are zero; sigma_rej set to the configured minimum");
        out.sigma_rej = sr.value;
        const double var = cfg.alpha * sr.value * sr.value;
        out.global_loglik = -residuals / (2.0 * var);
        out.combined += out.global_loglik;
    }
    out.selected = first_argmax(out.combined);
    return out;
}

SelectionScores score_candidates(const CandidateBatch& batch, const AudioChunk& m, const LqVae& codec,
                                 const SelectionConfig& cfg) {
    if (cfg.alpha == 0.0) return score_candidates(batch, m, cfg, nullptr);
    const DecodedBatch decoded = decode_batch(batch, codec);
    return score_candidates(batch, m, cfg, &decoded);
}

SeparationResult select(const CandidateBatch& batch, const AudioChunk& m, const LqVae& codec,
                        const SelectionConfig& cfg) {
    SeparationResult out;
    out.scores = score_candidates(batch, m, codec, cfg);
    out.stem1 = codec.decode(batch.z1[out.scores.selected], m.sample_rate);
    out.stem2 = codec.decode(batch.z2[out.scores.selected], m.sample_rate);
    return out;
}

nlohmann::json selection_report(const SelectionScores& scores, const std::string& stem1_path,
                                const std::string& stem2_path) {
    nlohmann::json j;
    j["alpha"] = scores.alpha;
    j["sigma_rej"] = scores.sigma_rej ? nlohmann::json(*scores.sigma_rej) : nlohmann::json(nullptr);
    j["selected"] = scores.selected;
    j["stems"] = {stem1_path, stem2_path};
    j["warnings"] = scores.warnings;
    nlohmann::json rows = nlohmann::json::array();
    for (Index b = 0; b < scores.combined.size(); ++b) {
        nlohmann::json r{{"index", b},
                         {"prior_score_1", scores.prior_score_1[b]},
                         {"prior_score_2", scores.prior_score_2[b]},
                         {"combined", scores.combined[b]}};
        if (scores.global_loglik.size() > 0) r["global_loglik"] = scores.global_loglik[b];
        rows.push_back(r);
    }
    j["candidates"] = rows;
    return j;
}

}  // namespace lqsep
