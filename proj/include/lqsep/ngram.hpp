#pragma once

#include "lqsep/prior.hpp"

namespace lqsep {

/// Count-based n-gram prior with add-one smoothing:
/// p(k | ctx) = (count(ctx, k) + 1) / (count(ctx) + K).
/// Contexts shorter than order-1 are left-padded with a start symbol.
class NgramPrior final : public PriorModel {
public:
    NgramPrior(int vocabulary_size, int order, int context_length);

    static NgramPrior fit(const LatentCorpus& corpus, int order, int context_length);

    PriorKind kind() const override { return PriorKind::ngram; }
    int vocabulary_size() const override { return vocab_; }
    int context_length() const override { return context_length_; }
    int order() const { return order_; }

    std::unique_ptr<PriorSession> start(Index batch) const override;
    void save(const std::filesystem::path& dir) const override;
    static NgramPrior load(const std::filesystem::path& dir);

    /// Count table: one row per context id, one column per next symbol.
    const Eigen::MatrixXd& counts() const { return counts_; }
    /// Context id after appending `token` to the context `ctx`.
    Index shift_context(Index ctx, int token) const;
    Index start_context() const { return start_ctx_; }
    const Eigen::MatrixXd& log_probs() const { return log_probs_; }

private:
    void set_counts(Eigen::MatrixXd counts);

    int vocab_, order_, context_length_;
    Index num_contexts_ = 1, start_ctx_ = 0;
    Eigen::MatrixXd counts_;     // contexts x K
    Eigen::MatrixXd log_probs_;  // K x contexts
};

}  // namespace lqsep
