#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "lqsep/codec.hpp"

namespace lqsep {

struct CodecTrainingConfig {
    int steps = 2000;
    int batch = 4;                 // pairs per optimizer step
    Index window = 512;            // training crop length in samples
    double learning_rate = 2e-3;
    double final_lr_fraction = 0.1;  // cosine decay target
    int warmup_steps = 0;            // linear learning-rate ramp
    double clip_norm = 1.0;
    bool use_lin = true;
    double mixture_weight = 0.0;   // VQ-VAE terms on the half-sum mixture, relative to a pair
    int dead_code_steps = 20;      // re-seed codes unused this long
    double normalization_momentum = 0.99;  // EMA of encoder output statistics
    int log_every = 100;
    std::uint64_t seed = 1;
};

struct CodecTrainingData {
    std::vector<AudioChunk> source1, source2;    // training pools
    std::vector<AudioChunk> heldout1, heldout2;  // evaluated pairwise
};

struct CodecTrainingRecord {
    int step = 0;
    LossBreakdown train;    // mean over the steps since the previous record
    LossBreakdown heldout;  // includes lin even when training without it
    std::vector<int> code_usage;  // held-out histogram over K codes
};

struct CodecTrainingResult {
    LqVae codec;
    std::vector<CodecTrainingRecord> history;
    bool aborted = false;  // divergence; codec holds the last good parameters
};

/// Held-out LossBreakdown averaged over pairs (heldout1[i], heldout2[i]).
LossBreakdown heldout_loss(const LqVae& codec, const std::vector<AudioChunk>& a, const std::vector<AudioChunk>& b,
                           std::vector<int>* usage = nullptr);

/// Mean (1/T) sum_s ||LQ_s - QL_s||^2 over held-out pairs.
double mean_additivity_error(const LqVae& codec, const std::vector<AudioChunk>& a,
                             const std::vector<AudioChunk>& b);

using CodecTrainingCallback = std::function<void(const CodecTrainingRecord&)>;

/// Trains on pairs drawn independently from the two pools each step.
CodecTrainingResult train_codec(const CodecTrainingData& data, const CodecConfig& codec_cfg,
                                const CodecTrainingConfig& cfg, const CodecTrainingCallback& on_record = {});

}  // namespace lqsep
