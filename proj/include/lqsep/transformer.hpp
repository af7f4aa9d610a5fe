#pragma once

// Small pre-LayerNorm causal transformer over latent indices with learned
// token and position embeddings. A start token outside [0, K) opens every
// sequence and is never emitted.
//
// Activations are width x tokens (one column per token). Training runs a
// full-sequence forward/backward; inference uses a per-sequence key/value
// cache whose products are evaluated column by column, so a sequence's
// logits do not depend on what else shares its batch.

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "lqsep/nn.hpp"
#include "lqsep/prior.hpp"

namespace lqsep {

struct TransformerConfig {
    int vocabulary_size = 64;
    int context_length = 1000;
    int layers = 4;
    int heads = 4;
    int width = 128;
    int mlp_ratio = 4;
    std::uint64_t seed = 0;

    void validate() const;
};

class TransformerPrior final : public PriorModel {
public:
    explicit TransformerPrior(const TransformerConfig& cfg);

    PriorKind kind() const override { return PriorKind::transformer; }
    int vocabulary_size() const override { return cfg_.vocabulary_size; }
    int context_length() const override { return cfg_.context_length; }
    const TransformerConfig& config() const { return cfg_; }

    std::unique_ptr<PriorSession> start(Index batch) const override;
    void save(const std::filesystem::path& dir) const override;
    static TransformerPrior load(const std::filesystem::path& dir);

    /// Full-sequence forward over equal-length sequences. Returns the mean
    /// next-token cross-entropy; with `grads`, accumulates parameter
    /// gradients of that mean.
    double sequence_loss(const std::vector<LatentIndices>& batch, bool grads);
    /// K x L logits for every position of one sequence, full-sequence path.
    Eigen::MatrixXd forward_logits(const LatentIndices& z) const;

    void visit_parameters(const nn::ParameterVisitor& f);
    std::vector<nn::Parameter*> parameters();
    void zero_grad();

    struct Layer {
        nn::Parameter ln1_gain, ln1_bias, qkv_w, qkv_b, out_w, out_b;
        nn::Parameter ln2_gain, ln2_bias, fc1_w, fc1_b, fc2_w, fc2_b;
    };

    const std::vector<Layer>& layers() const { return layers_; }
    const nn::Parameter& token_embedding() const { return tok_emb_; }
    const nn::Parameter& position_embedding() const { return pos_emb_; }
    const nn::Parameter& final_gain() const { return lnf_gain_; }
    const nn::Parameter& final_bias() const { return lnf_bias_; }
    const nn::Parameter& head_weight() const { return head_w_; }
    const nn::Parameter& head_bias() const { return head_b_; }

    std::uint64_t steps_trained = 0;

private:
    struct Tape;
    Eigen::MatrixXd forward(const std::vector<LatentIndices>& batch, Tape* tape) const;

    TransformerConfig cfg_;
    nn::Parameter tok_emb_;  // width x (K + 1)
    nn::Parameter pos_emb_;  // width x context
    std::vector<Layer> layers_;
    nn::Parameter lnf_gain_, lnf_bias_, head_w_, head_b_;
};

}  // namespace lqsep
