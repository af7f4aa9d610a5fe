#include "lqsep/prior_training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "lqsep/ngram.hpp"

namespace lqsep {

namespace {

struct Split {
    std::vector<LatentIndices> train, heldout;
};

Split split_corpus(const LatentCorpus& corpus, double fraction, std::mt19937_64& rng) {
    std::vector<std::size_t> order(corpus.sequences.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_held = 0;
    if (order.size() > 1 && fraction > 0.0) {
        n_held = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(fraction * order.size())), 1,
                                         order.size() - 1);
    }
    Split s;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < n_held ? s.heldout : s.train).push_back(corpus.sequences[order[i]]);
    }
    if (s.heldout.empty()) s.heldout = s.train;
    return s;
}

// Batches of equal-length sequences, in random order.
std::vector<std::vector<LatentIndices>> make_batches(const std::vector<LatentIndices>& seqs, int batch_size,
                                                     std::mt19937_64& rng) {
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return seqs[a].size() < seqs[b].size(); });
    std::vector<std::vector<LatentIndices>> batches;
    for (std::size_t i = 0; i < order.size();) {
        std::vector<LatentIndices> batch;
        const std::size_t len = seqs[order[i]].size();
        while (i < order.size() && seqs[order[i]].size() == len && static_cast<int>(batch.size()) < batch_size) {
            batch.push_back(seqs[order[i++]]);
        }
        batches.push_back(std::move(batch));
    }
    std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
}

}  // namespace

PriorTrainingResult train_prior(const LatentCorpus& corpus, const PriorTrainingConfig& cfg) {
    if (corpus.sequences.empty()) throw ValidationError("cannot train a prior on an empty corpus");
    std::size_t max_len = 0;
    for (const auto& z : corpus.sequences) max_len = std::max(max_len, z.size());
    if (max_len == 0) throw ValidationError("corpus sequences are empty");
    const int context = cfg.context_length > 0 ? cfg.context_length : static_cast<int>(max_len);
    corpus.validate(context);
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw ValidationError("epochs and batch size must be positive");

    std::mt19937_64 rng(cfg.seed);
    const Split split = split_corpus(corpus, cfg.heldout_fraction, rng);

    PriorTrainingResult result;
    result.uniform_baseline = std::log(static_cast<double>(corpus.vocabulary_size));

    if (cfg.kind == PriorKind::ngram) {
        LatentCorpus train{split.train, corpus.vocabulary_size, corpus.source_label};
        auto model = std::make_unique<NgramPrior>(NgramPrior::fit(train, cfg.ngram_order, context));
        result.history.push_back({1, cross_entropy(*model, split.train), cross_entropy(*model, split.heldout)});
        result.model = std::move(model);
        return result;
    }

    TransformerConfig tc = cfg.transformer;
    tc.vocabulary_size = corpus.vocabulary_size;
    tc.context_length = context;
    auto model = std::make_unique<TransformerPrior>(tc);
    nn::Adam adam(model->parameters(), {.learning_rate = cfg.learning_rate, .clip_norm = cfg.clip_norm});

    const std::size_t batches_per_epoch = make_batches(split.train, cfg.batch_size, rng).size();
    const double total_steps = static_cast<double>(batches_per_epoch) * cfg.epochs;
    TransformerPrior last_good = *model;
    double step = 0.0;
    for (int epoch = 1; epoch <= cfg.epochs && !result.aborted; ++epoch) {
        double loss_sum = 0.0;
        double tokens = 0.0;
        for (const auto& batch : make_batches(split.train, cfg.batch_size, rng)) {
            const double progress = step / std::max(1.0, total_steps - 1.0);
            const double scale =
                cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
            adam.set_learning_rate(cfg.learning_rate * scale);
            model->zero_grad();
            double loss = 0.0;
            try {
                loss = model->sequence_loss(batch, true);
            } catch (const NumericError&) {
                loss = std::numeric_limits<double>::quiet_NaN();
            }
            if (!std::isfinite(loss) || !std::isfinite(adam.grad_norm())) {
                result.aborted = true;
                break;
            }
            adam.step();
            ++model->steps_trained;
            step += 1.0;
            const double n = static_cast<double>(batch.size() * batch.front().size());
            loss_sum += loss * n;
            tokens += n;
        }
        if (result.aborted) break;
        const double held = cross_entropy(*model, split.heldout);
        if (!std::isfinite(held)) {
            result.aborted = true;
            break;
        }
        result.history.push_back({epoch, loss_sum / tokens, held});
        last_good = *model;
    }
    if (result.aborted) *model = last_good;
    result.model = std::move(model);
    return result;
}

}  // namespace lqsep
