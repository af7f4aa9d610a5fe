#include "lqsep/ngram.hpp"

#include <cmath>

#include "lqsep/tensor_io.hpp"

namespace lqsep {

namespace {

class NgramSession final : public PriorSession {
public:
    NgramSession(const NgramPrior& model, Index batch)
        : model_(model), ctx_(static_cast<std::size_t>(batch), model.start_context()) {
        refresh();
    }

    Index batch() const override { return static_cast<Index>(ctx_.size()); }
    Index position() const override { return position_; }
    const Eigen::MatrixXd& logits() const override { return logits_; }

    void advance(std::span<const int> tokens) override {
        if (tokens.size() != ctx_.size()) throw DimensionError("one token per sequence expected");
        if (position_ >= model_.context_length()) throw ContextError("session advanced past the context length");
        for (std::size_t b = 0; b < ctx_.size(); ++b) {
            if (tokens[b] < 0 || tokens[b] >= model_.vocabulary_size()) {
                throw ValidationError("token outside the vocabulary");
            }
            ctx_[b] = model_.shift_context(ctx_[b], tokens[b]);
        }
        ++position_;
        refresh();
    }

private:
    void refresh() {
        logits_.resize(model_.vocabulary_size(), static_cast<Index>(ctx_.size()));
        for (std::size_t b = 0; b < ctx_.size(); ++b) logits_.col(static_cast<Index>(b)) = model_.log_probs().col(ctx_[b]);
    }

    const NgramPrior& model_;
    std::vector<Index> ctx_;
    Index position_ = 0;
    Eigen::MatrixXd logits_;
};

}  // namespace

NgramPrior::NgramPrior(int vocabulary_size, int order, int context_length)
    : vocab_(vocabulary_size), order_(order), context_length_(context_length) {
    if (vocab_ < 1) throw ValidationError("vocabulary size must be positive");
    if (order_ < 1) throw ValidationError("n-gram order must be >= 1");
    if (context_length_ < 1) throw ValidationError("context length must be positive");
    for (int i = 1; i < order_; ++i) num_contexts_ *= vocab_ + 1;
    start_ctx_ = num_contexts_ - 1;  // every slot holds the start symbol K
    set_counts(Eigen::MatrixXd::Zero(num_contexts_, vocab_));
}

Index NgramPrior::shift_context(Index ctx, int token) const {
    if (order_ == 1) return 0;
    return (ctx * (vocab_ + 1) + token) % num_contexts_;
}

void NgramPrior::set_counts(Eigen::MatrixXd counts) {
    counts_ = std::move(counts);
    log_probs_.resize(vocab_, num_contexts_);
    for (Index c = 0; c < num_contexts_; ++c) {
        const double denom = counts_.row(c).sum() + vocab_;
        for (Index k = 0; k < vocab_; ++k) log_probs_(k, c) = std::log((counts_(c, k) + 1.0) / denom);
    }
}

NgramPrior NgramPrior::fit(const LatentCorpus& corpus, int order, int context_length) {
    corpus.validate(context_length);
    NgramPrior model(corpus.vocabulary_size, order, context_length);
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(model.num_contexts_, model.vocab_);
    for (const auto& z : corpus.sequences) {
        Index ctx = model.start_ctx_;
        for (int token : z) {
            counts(ctx, token) += 1.0;
            ctx = model.shift_context(ctx, token);
        }
    }
    model.set_counts(std::move(counts));
    return model;
}

std::unique_ptr<PriorSession> NgramPrior::start(Index batch) const {
    return std::make_unique<NgramSession>(*this, batch);
}

void NgramPrior::save(const std::filesystem::path& dir) const {
    CheckpointWriter w(dir, {{"kind", "ngram"},
                             {"K", vocab_},
                             {"order", order_},
                             {"context_length", context_length_},
                             {"smoothing", "add-one"}});
    w.add("counts", counts_);
    w.finish();
}

NgramPrior NgramPrior::load(const std::filesystem::path& dir) {
    CheckpointReader r(dir);
    const auto& m = r.manifest();
    if (m.at("kind") != "ngram") throw ValidationError(dir.string() + " is not an n-gram checkpoint");
    NgramPrior model(m.at("K").get<int>(), m.at("order").get<int>(), m.at("context_length").get<int>());
    Eigen::MatrixXd counts = r.get("counts");
    if (counts.rows() != model.num_contexts_ || counts.cols() != model.vocab_) {
        throw DimensionError("n-gram count table has the wrong shape");
    }
    model.set_counts(std::move(counts));
    return model;
}

}  // namespace lqsep
