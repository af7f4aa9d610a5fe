#include "lqsep/separator.hpp"

#include <cmath>
#include <random>

#include "lqsep/logmath.hpp"
#include "lqsep/tensor_io.hpp"

namespace lqsep {

namespace fs = std::filesystem;

MixtureLatent mixture_latent(const LqVae& codec, const AudioChunk& m) {
    const Quantized q = codec.quantize(codec.encode(m));
    return {q.codes / codec.config().latent_rms, q.indices, m};
}

Eigen::MatrixXd likelihood_log_matrix(const Eigen::Ref<const Eigen::RowVectorXd>& m_latent_s,
                                      const SumCodeTable& table, const Codebook& cb, double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("sigma must be positive and finite");
    if (table.size() != cb.size()) throw DimensionError("sum table and codebook disagree on K");
    if (m_latent_s.size() != cb.dim()) throw DimensionError("mixture latent has the wrong number of channels");
    const Index K = cb.size();
    const double scale = -1.0 / (2.0 * sigma * sigma);
    Eigen::VectorXd per_code(K);
    for (Index j = 0; j < K; ++j) per_code[j] = scale * (m_latent_s - cb.codes.row(j)).squaredNorm();
    Eigen::MatrixXd lik(K, K);
    for (Index b = 0; b < K; ++b) {
        for (Index a = 0; a < K; ++a) lik(a, b) = per_code[table(a, b)];
    }
    return lik;
}

StepPosterior step_posterior(const Eigen::Ref<const Eigen::VectorXd>& prior1,
                             const Eigen::Ref<const Eigen::VectorXd>& prior2, const Eigen::MatrixXd& lik) {
    const Index K = prior1.size();
    if (prior2.size() != K || lik.rows() != K || lik.cols() != K) throw DimensionError("posterior shapes disagree");
    // -inf is a legitimate log-probability; NaN and +inf are not.
    const auto bad = [](const auto& a) { return (a.array().isNaN() || a.array() == std::numeric_limits<double>::infinity()).any(); };
    if (bad(prior1) || bad(prior2) || !lik.allFinite()) throw NumericError("non-finite input to the step posterior");
    const Eigen::VectorXd lp1 = log_softmax(prior1);
    const Eigen::VectorXd lp2 = log_softmax(prior2);
    StepPosterior post;
    post.log_post = lik;
    post.log_post.colwise() += lp1;
    post.log_post.rowwise() += lp2.transpose();
    const double z = log_sum_exp(post.log_post);
    if (!std::isfinite(z)) throw NumericError("the step posterior has no support");
    post.log_post.array() -= z;
    return post;
}

void CandidateBatch::validate() const {
    const std::size_t B = z1.size();
    if (z2.size() != B || prior_logprob_1.size() != B || prior_logprob_2.size() != B || rng_seeds.size() != B) {
        throw DimensionError("candidate batch fields disagree on B");
    }
    for (std::size_t b = 0; b < B; ++b) {
        if (z1[b].size() != z1.front().size() || z2[b].size() != z1.front().size()) {
            throw DimensionError("candidate sequences must share one length");
        }
    }
}

std::uint64_t candidate_seed(std::uint64_t seed, Index b) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(static_cast<std::uint64_t>(b) >> 32)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

CandidateBatch separate_latent(const LatentVectors& m_latent, const SumCodeTable& table, const Codebook& cb,
                               const PriorModel& p1, const PriorModel& p2, const SeparationConfig& cfg) {
    const int K = static_cast<int>(cb.size());
    if (p1.vocabulary_size() != K || p2.vocabulary_size() != K || table.size() != K) {
        throw ValidationError("priors, sum table and codebook must share K");
    }
    if (m_latent.cols() != cb.dim()) throw ValidationError("mixture latent has the wrong number of channels");
    if (cfg.batch < 1) throw ValidationError("candidate batch size must be >= 1");
    const Index S = m_latent.rows();
    check_context(p1, S);
    check_context(p2, S);
    const Index B = cfg.batch;

    CandidateBatch out;
    out.z1.assign(B, LatentIndices(S));
    out.z2.assign(B, LatentIndices(S));
    out.prior_logprob_1.assign(B, 0.0);
    out.prior_logprob_2.assign(B, 0.0);
    std::vector<std::mt19937_64> rngs;
    for (Index b = 0; b < B; ++b) {
        out.rng_seeds.push_back(candidate_seed(cfg.seed, b));
        rngs.emplace_back(out.rng_seeds.back());
    }

    auto s1 = p1.start(B);
    auto s2 = p2.start(B);
    std::vector<int> tok1(B), tok2(B);
    Eigen::MatrixXd post(K, K);
    for (Index s = 0; s < S; ++s) {
        const Eigen::MatrixXd lik = likelihood_log_matrix(m_latent.row(s), table, cb, cfg.sigma);
        const Eigen::MatrixXd& l1 = s1->logits();
        const Eigen::MatrixXd& l2 = s2->logits();
        for (Index b = 0; b < B; ++b) {
            const StepPosterior sp = step_posterior(l1.col(b), l2.col(b), lik);
            // Column-major flattening: i = k1 + K * k2.
            const Index i = sample_log_categorical(sp.log_post.reshaped(), rngs[b]);
            const int k1 = static_cast<int>(i % K);
            const int k2 = static_cast<int>(i / K);
            out.z1[b][s] = tok1[b] = k1;
            out.z2[b][s] = tok2[b] = k2;
            out.prior_logprob_1[b] += log_softmax(l1.col(b))[k1];
            out.prior_logprob_2[b] += log_softmax(l2.col(b))[k2];
        }
        s1->advance(tok1);
        s2->advance(tok2);
    }
    return out;
}

CandidateBatch separate(const AudioChunk& m, const LqVae& codec, const SumCodeTable& table, const PriorModel& p1,
                        const PriorModel& p2, const SeparationConfig& cfg) {
    const MixtureLatent ml = mixture_latent(codec, m);
    return separate_latent(ml.m_latent, table, codec.standardized_codebook(), p1, p2, cfg);
}

// ---- enumeration oracle ----------------------------------------------------

Index JointPosterior::sequences() const {
    Index n = 1;
    for (Index s = 0; s < S; ++s) n *= K;
    return n;
}

namespace {

Index sequence_index(const LatentIndices& z, int K) {
    Index i = 0;
    for (int k : z) i = i * K + k;
    return i;
}

LatentIndices sequence_at(Index i, int K, Index S) {
    LatentIndices z(S);
    for (Index s = S; s-- > 0;) {
        z[s] = static_cast<int>(i % K);
        i /= K;
    }
    return z;
}

// log p(z) for every sequence of length S, in index order.
Eigen::VectorXd all_sequence_log_probs(const PriorModel& p, int K, Index S, Index n) {
    Eigen::VectorXd lp = Eigen::VectorXd::Zero(n);
    auto session = p.start(n);
    std::vector<int> tok(n);
    for (Index s = 0; s < S; ++s) {
        const Eigen::MatrixXd& logits = session->logits();
        for (Index i = 0; i < n; ++i) {
            const LatentIndices z = sequence_at(i, K, S);
            tok[i] = z[s];
            lp[i] += log_softmax(logits.col(i))[z[s]];
        }
        session->advance(tok);
    }
    return lp;
}

}  // namespace

Index JointPosterior::index_of(const LatentIndices& z1, const LatentIndices& z2) const {
    if (static_cast<Index>(z1.size()) != S || static_cast<Index>(z2.size()) != S) {
        throw DimensionError("sequence length does not match the enumeration");
    }
    check_indices(z1, K);
    check_indices(z2, K);
    return sequence_index(z1, K) * sequences() + sequence_index(z2, K);
}

std::pair<LatentIndices, LatentIndices> JointPosterior::outcome(Index i) const {
    const Index n = sequences();
    return {sequence_at(i / n, K, S), sequence_at(i % n, K, S)};
}

JointPosterior enumerate_posterior_exact(const LatentIndices& m_indices, const SumCodeTable& table,
                                         const Codebook& cb, const PriorModel& p1, const PriorModel& p2,
                                         double sigma) {
    const int K = static_cast<int>(cb.size());
    if (p1.vocabulary_size() != K || p2.vocabulary_size() != K || table.size() != K) {
        throw ValidationError("priors, sum table and codebook must share K");
    }
    check_indices(m_indices, K);
    const Index S = static_cast<Index>(m_indices.size());
    if (S == 0) throw ValidationError("empty mixture");
    if (std::pow(static_cast<double>(K), 2.0 * static_cast<double>(S)) > kMaxEnumeratedOutcomes) {
        throw GuardError("enumeration of K^(2S) outcomes exceeds the limit");
    }
    check_context(p1, S);
    check_context(p2, S);

    JointPosterior post;
    post.K = K;
    post.S = S;
    const Index n = post.sequences();
    const Eigen::VectorXd lp1 = all_sequence_log_probs(p1, K, S, n);
    const Eigen::VectorXd lp2 = all_sequence_log_probs(p2, K, S, n);
    std::vector<Eigen::MatrixXd> lik;
    for (Index s = 0; s < S; ++s) lik.push_back(likelihood_log_matrix(cb.codes.row(m_indices[s]), table, cb, sigma));

    Eigen::VectorXd score(n * n);
    std::vector<LatentIndices> seqs;
    for (Index i = 0; i < n; ++i) seqs.push_back(sequence_at(i, K, S));
    for (Index a = 0; a < n; ++a) {
        for (Index b = 0; b < n; ++b) {
            double v = lp1[a] + lp2[b];
            for (Index s = 0; s < S; ++s) v += lik[s](seqs[a][s], seqs[b][s]);
            score[a * n + b] = v;
        }
    }
    const double log_z = log_sum_exp(score);
    post.probs.resize(static_cast<std::size_t>(n * n));
    for (Index i = 0; i < n * n; ++i) post.probs[i] = std::exp(score[i] - log_z);
    return post;
}

// ---- archive ---------------------------------------------------------------

void write_candidate_archive(const fs::path& dir, const std::string& chunk_id, const CandidateBatch& batch,
                             double sigma, int vocabulary_size, const nlohmann::json& extra) {
    batch.validate();
    fs::create_directories(dir);
    write_corpus(dir / (chunk_id + ".z1.lqz"), {batch.z1, vocabulary_size, "source1"});
    write_corpus(dir / (chunk_id + ".z2.lqz"), {batch.z2, vocabulary_size, "source2"});
    nlohmann::json j = extra;
    j["chunk_id"] = chunk_id;
    j["sigma"] = sigma;
    j["B"] = batch.size();
    j["S"] = batch.length();
    j["K"] = vocabulary_size;
    j["rng_seeds"] = batch.rng_seeds;
    j["prior_logprob_1"] = batch.prior_logprob_1;
    j["prior_logprob_2"] = batch.prior_logprob_2;
    write_json(dir / (chunk_id + ".json"), j);
}

CandidateBatch read_candidate_archive(const fs::path& dir, const std::string& chunk_id) {
    const nlohmann::json j = read_json(dir / (chunk_id + ".json"));
    CandidateBatch batch;
    batch.z1 = read_corpus(dir / (chunk_id + ".z1.lqz")).sequences;
    batch.z2 = read_corpus(dir / (chunk_id + ".z2.lqz")).sequences;
    batch.prior_logprob_1 = j.at("prior_logprob_1").get<std::vector<double>>();
    batch.prior_logprob_2 = j.at("prior_logprob_2").get<std::vector<double>>();
    batch.rng_seeds = j.at("rng_seeds").get<std::vector<std::uint64_t>>();
    batch.validate();
    return batch;
}

}  // namespace lqsep
