#pragma once

// Autoregressive priors over latent index sequences. Every model is queried
// through an incremental batched session so that single-prefix evaluation,
// batched evaluation and sequence scoring share one arithmetic path.

#include <Eigen/Dense>

#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lqsep/types.hpp"

namespace lqsep {

enum class PriorKind { transformer, ngram };

std::string to_string(PriorKind k);
PriorKind parse_prior_kind(const std::string& name);

/// Sequences of code indices extracted from one source class.
struct LatentCorpus {
    std::vector<LatentIndices> sequences;
    int vocabulary_size = 0;
    std::string source_label;

    void validate(int context_length) const;
};

/// Corpus files: magic "LQZC", then little-endian u32 version, count, K, S,
/// a u32-length-prefixed source label, and count*S u16 indices. Every
/// sequence in a file has length S.
void write_corpus(const std::filesystem::path& file, const LatentCorpus& corpus);
LatentCorpus read_corpus(const std::filesystem::path& file);

/// Running state for B sequences advancing in lockstep.
class PriorSession {
public:
    virtual ~PriorSession() = default;

    virtual Index batch() const = 0;
    /// Number of tokens consumed so far (0 right after start()).
    virtual Index position() const = 0;
    /// K x B next-step logits, one column per sequence.
    virtual const Eigen::MatrixXd& logits() const = 0;
    /// Appends one token to every sequence.
    virtual void advance(std::span<const int> tokens) = 0;
};

class PriorModel {
public:
    virtual ~PriorModel() = default;

    virtual PriorKind kind() const = 0;
    virtual int vocabulary_size() const = 0;
    virtual int context_length() const = 0;

    virtual std::unique_ptr<PriorSession> start(Index batch) const = 0;
    virtual void save(const std::filesystem::path& dir) const = 0;

    /// Logits for the step after `prefix`.
    Eigen::VectorXd next_logits(const LatentIndices& prefix) const;
    /// One column per prefix; prefixes of equal length share a session.
    Eigen::MatrixXd next_logits(const std::vector<LatentIndices>& prefixes) const;
};

/// Sum over steps of log softmax(next_logits(prefix))[z_s].
double sequence_log_prob(const PriorModel& model, const LatentIndices& z);

/// Mean per-token negative log-likelihood in nats.
double cross_entropy(const PriorModel& model, const std::vector<LatentIndices>& sequences);

/// Temperature-1 ancestral sampling.
LatentIndices ancestral_sample(const PriorModel& model, Index length, std::mt19937_64& rng);

std::unique_ptr<PriorModel> load_prior(const std::filesystem::path& dir);

/// Throws ContextError unless `length` tokens fit in the model's window.
void check_context(const PriorModel& model, Index length);

}  // namespace lqsep
