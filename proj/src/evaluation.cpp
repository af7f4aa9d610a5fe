#include "lqsep/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

namespace lqsep {

double sdr(const Eigen::VectorXd& estimate, const Eigen::VectorXd& reference) {
    if (estimate.size() != reference.size()) throw DimensionError("estimate and reference differ in length");
    const double num = reference.squaredNorm();
    if (num == 0.0) throw ValidationError("SDR reference is all zeros");
    const double den = (reference - estimate).squaredNorm();
    if (den == 0.0) return kSdrCapDb;
    return std::min(kSdrCapDb, 10.0 * std::log10(num / den));
}

EvalPair EvalPair::make(AudioChunk x1, AudioChunk x2, std::string chunk_id) {
    if (x1.length() != x2.length()) throw DimensionError("stems differ in length");
    if (x1.sample_rate != x2.sample_rate) throw ValidationError("stems differ in sample rate");
    AudioChunk m{0.5 * x1.samples + 0.5 * x2.samples, x1.sample_rate};
    return {std::move(x1), std::move(x2), std::move(m), std::move(chunk_id)};
}

std::string to_string(EvalMode mode) {
    switch (mode) {
        case EvalMode::rejection: return "rejection";
        case EvalMode::oracle_best: return "oracle_best";
        case EvalMode::mixture: return "mixture";
    }
    return "?";
}

namespace {

constexpr EvalMode kModes[] = {EvalMode::rejection, EvalMode::oracle_best, EvalMode::mixture};

std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

Aggregate SDRReport::aggregate(EvalMode mode, int source) const {
    std::vector<double> v;
    for (const auto& c : chunks) {
        if (!c.error) v.push_back(c.sdr[static_cast<int>(mode)][source]);
    }
    Aggregate a;
    a.count = static_cast<int>(v.size());
    if (v.empty()) return a;
    for (double x : v) a.mean += x;
    a.mean /= static_cast<double>(v.size());
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    a.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    return a;
}

nlohmann::json SDRReport::to_json() const {
    nlohmann::json j;
    j["alpha"] = alpha;
    j["metadata"] = metadata;
    nlohmann::json rows = nlohmann::json::array();
    nlohmann::json errors = nlohmann::json::array();
    for (const auto& c : chunks) {
        if (c.error) {
            errors.push_back({{"chunk", c.chunk_id}, {"error", *c.error}});
            continue;
        }
        for (EvalMode mode : kModes) {
            for (int s = 0; s < 2; ++s) {
                nlohmann::json r{{"chunk", c.chunk_id},
                                 {"source", s + 1},
                                 {"mode", to_string(mode)},
                                 {"sdr", c.sdr[static_cast<int>(mode)][s]}};
                if (mode == EvalMode::rejection) r["candidate"] = c.selected;
                if (mode == EvalMode::oracle_best) r["candidate"] = c.oracle_index[s];
                rows.push_back(r);
            }
        }
    }
    j["rows"] = rows;
    j["errors"] = errors;
    nlohmann::json agg;
    for (EvalMode mode : kModes) {
        for (int s = 0; s < 2; ++s) {
            const Aggregate a = aggregate(mode, s);
            agg[to_string(mode)]["source" + std::to_string(s + 1)] = {
                {"mean", a.mean}, {"median", a.median}, {"count", a.count}};
        }
    }
    j["aggregates"] = agg;
    return j;
}

std::string SDRReport::to_csv() const {
    std::ostringstream os;
    os << "chunk,source,mode,sdr_db\n";
    for (const auto& c : chunks) {
        if (c.error) continue;
        for (EvalMode mode : kModes) {
            for (int s = 0; s < 2; ++s) {
                os << c.chunk_id << ',' << s + 1 << ',' << to_string(mode) << ','
                   << format_double(c.sdr[static_cast<int>(mode)][s]) << '\n';
            }
        }
    }
    for (const char* stat : {"mean", "median"}) {
        for (EvalMode mode : kModes) {
            for (int s = 0; s < 2; ++s) {
                const Aggregate a = aggregate(mode, s);
                os << stat << ',' << s + 1 << ',' << to_string(mode) << ','
                   << format_double(std::string(stat) == "mean" ? a.mean : a.median) << '\n';
            }
        }
    }
    return os.str();
}

std::uint64_t chunk_seed(std::uint64_t seed, Index i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5eedu,
                      static_cast<std::uint32_t>(i)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::vector<SDRReport> evaluate_run(const std::vector<EvalPair>& pairs, const LqVae& codec,
                                    const SumCodeTable& table, const PriorModel& p1, const PriorModel& p2,
                                    const EvalConfig& cfg, const EvalProgress& progress,
                                    const CandidateSink& sink) {
    if (cfg.alphas.empty()) throw ValidationError("at least one alpha is required");
    std::vector<SDRReport> reports(cfg.alphas.size());
    for (std::size_t a = 0; a < cfg.alphas.size(); ++a) {
        reports[a].alpha = cfg.alphas[a];
        reports[a].metadata = {{"sigma", cfg.separation.sigma},
                               {"B", cfg.separation.batch},
                               {"seed", cfg.separation.seed},
                               {"alpha", cfg.alphas[a]},
                               {"chunks", pairs.size()}};
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const EvalPair& pair = pairs[i];
        std::vector<ChunkResult> results(cfg.alphas.size());
        try {
            SeparationConfig sc = cfg.separation;
            sc.seed = chunk_seed(cfg.separation.seed, static_cast<Index>(i));
            const CandidateBatch batch = separate(pair.m, codec, table, p1, p2, sc);
            if (sink) sink(pair, batch, sc.seed);
            const DecodedBatch decoded = decode_batch(batch, codec);

            ChunkResult base;
            base.chunk_id = pair.chunk_id;
            const AudioChunk* refs[2] = {&pair.x1, &pair.x2};
            const std::vector<Eigen::VectorXd>* ys[2] = {&decoded.y1, &decoded.y2};
            for (int s = 0; s < 2; ++s) {
                base.sdr[static_cast<int>(EvalMode::mixture)][s] = sdr(pair.m, *refs[s]);
                double best = -std::numeric_limits<double>::infinity();
                for (Index b = 0; b < batch.size(); ++b) {
                    const double v = sdr((*ys[s])[b], refs[s]->samples);
                    if (v > best) {
                        best = v;
                        base.oracle_index[s] = b;
                    }
                }
                base.sdr[static_cast<int>(EvalMode::oracle_best)][s] = best;
            }
            for (std::size_t a = 0; a < cfg.alphas.size(); ++a) {
                const SelectionScores sel =
                    score_candidates(batch, pair.m, {cfg.alphas[a], cfg.min_sigma_rej, cfg.fixed_sigma_rej}, &decoded);
                ChunkResult r = base;
                r.selected = sel.selected;
                r.sigma_rej = sel.sigma_rej;
                for (int s = 0; s < 2; ++s) {
                    r.sdr[static_cast<int>(EvalMode::rejection)][s] = sdr((*ys[s])[sel.selected], refs[s]->samples);
                }
                results[a] = r;
            }
        } catch (const Error& e) {
            for (auto& r : results) {
                r.chunk_id = pair.chunk_id;
                r.error = e.what();
            }
        }
        for (std::size_t a = 0; a < cfg.alphas.size(); ++a) reports[a].chunks.push_back(results[a]);
        if (progress) progress(static_cast<Index>(i + 1), static_cast<Index>(pairs.size()), results.front());
    }
    return reports;
}

}  // namespace lqsep
