#pragma once

#include <memory>
#include <vector>

#include "lqsep/prior.hpp"
#include "lqsep/transformer.hpp"

namespace lqsep {

struct PriorTrainingConfig {
    PriorKind kind = PriorKind::transformer;
    int context_length = 0;  // 0: the corpus sequence length
    int ngram_order = 3;
    // Vocabulary and context are taken from the corpus.
    TransformerConfig transformer;
    int epochs = 20;
    int batch_size = 16;
    double learning_rate = 1e-3;
    double final_lr_fraction = 0.1;
    double clip_norm = 1.0;
    double heldout_fraction = 0.1;
    std::uint64_t seed = 0;
};

struct PriorEpochRecord {
    int epoch = 0;
    double train_loss = 0.0;    // mean per-token NLL over the epoch's batches
    double heldout_loss = 0.0;  // held-out per-token cross-entropy
};

struct PriorTrainingResult {
    std::unique_ptr<PriorModel> model;
    std::vector<PriorEpochRecord> history;
    double uniform_baseline = 0.0;  // log K
    bool aborted = false;
};

/// Splits off a held-out set (none when the corpus has one sequence, in
/// which case the training set is scored), then counts or runs Adam.
PriorTrainingResult train_prior(const LatentCorpus& corpus, const PriorTrainingConfig& cfg);

}  // namespace lqsep
