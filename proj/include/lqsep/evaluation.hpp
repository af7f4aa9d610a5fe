#pragma once

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lqsep/selector.hpp"

namespace lqsep {

inline constexpr double kSdrCapDb = 60.0;

/// 10 log10(|ref|^2 / |ref - est|^2), capped at kSdrCapDb.
double sdr(const Eigen::VectorXd& estimate, const Eigen::VectorXd& reference);
inline double sdr(const AudioChunk& estimate, const AudioChunk& reference) {
    return sdr(estimate.samples, reference.samples);
}

struct EvalPair {
    AudioChunk x1, x2, m;
    std::string chunk_id;

    static EvalPair make(AudioChunk x1, AudioChunk x2, std::string chunk_id);
};

enum class EvalMode { rejection, oracle_best, mixture };
std::string to_string(EvalMode mode);

struct ChunkResult {
    std::string chunk_id;
    std::optional<std::string> error;
    // Indexed by EvalMode, then source (0, 1).
    double sdr[3][2] = {};
    Index selected = -1;
    Index oracle_index[2] = {-1, -1};
    std::optional<double> sigma_rej;
};

struct Aggregate {
    double mean = 0.0;
    double median = 0.0;
    int count = 0;
};

struct SDRReport {
    double alpha = 0.0;
    std::vector<ChunkResult> chunks;
    nlohmann::json metadata = nlohmann::json::object();

    Aggregate aggregate(EvalMode mode, int source) const;
    nlohmann::json to_json() const;
    std::string to_csv() const;
};

struct EvalConfig {
    SeparationConfig separation;
    std::vector<double> alphas{0.0};
    double min_sigma_rej = 1e-4;
    std::optional<double> fixed_sigma_rej;
};

/// Seed used to separate the i-th pair.
std::uint64_t chunk_seed(std::uint64_t seed, Index i);

using EvalProgress = std::function<void(Index done, Index total, const ChunkResult& chunk0)>;
/// Called with each chunk's candidates, e.g. to archive them.
using CandidateSink = std::function<void(const EvalPair&, const CandidateBatch&, std::uint64_t seed)>;

/// One report per alpha; every alpha reuses the same candidate batches.
std::vector<SDRReport> evaluate_run(const std::vector<EvalPair>& pairs, const LqVae& codec,
                                    const SumCodeTable& table, const PriorModel& p1, const PriorModel& p2,
                                    const EvalConfig& cfg, const EvalProgress& progress = {},
                                    const CandidateSink& sink = {});

}  // namespace lqsep
