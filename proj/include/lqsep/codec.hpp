#pragma once

// Linearly-quantized VQ-VAE: strided convolutional encoder, nearest-neighbour
// quantizer, transposed-convolution decoder, the composite VQ-VAE objective
// and the post-quantization linearization term.

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lqsep/nn.hpp"
#include "lqsep/quantizer.hpp"
#include "lqsep/types.hpp"

namespace lqsep {

struct CodecConfig {
    int codebook_size = 64;      // K
    int latent_dim = 4;          // D
    int channels = 32;
    int downsample_factor = 8;   // power of two
    double latent_rms = 0.3;     // target RMS norm of encoder outputs
    double beta = 0.25;
    double lin_weight = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
    int stages() const;
};

struct LossBreakdown {
    double rec = 0.0;
    double codebook = 0.0;
    double commit = 0.0;
    double lin = 0.0;
    double beta = 0.25;
    double lin_weight = 1.0;
    double total = 0.0;

    bool finite() const;
};

// ---- loss terms on explicit tensors ---------------------------------------

/// (1/T) sum_t (x_t - y_t)^2
double reconstruction_loss(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

/// (1/S) sum_s ||h_s - e_s||^2; the value of both the codebook and the
/// commitment terms (they differ only in where the gradient flows).
double latent_distance_loss(const LatentVectors& h, const LatentVectors& selected);

struct LinearizationTerms {
    LatentIndices lq_indices;  // B_I(B_Q(h_mix))
    LatentIndices ql_indices;  // B_I(B_Q(B_Q(h1)/2 + B_Q(h2)/2))
    double value = 0.0;        // (1/T) sum_s ||LQ_s - QL_s||^2
};

/// Post-quantization linearization error from the three encoder outputs.
/// `T` is the time-domain length used for normalization.
LinearizationTerms linearization_terms(const LatentVectors& h1, const LatentVectors& h2,
                                       const LatentVectors& h_mix, const Codebook& cb, Index T);

// ---- network ---------------------------------------------------------------

class Encoder {
public:
    struct Tape {
        nn::Matrix cols_in;
        std::vector<nn::Matrix> pre_down, cols_down;
        std::vector<nn::ResidualBlock::Tape> res;
        nn::Matrix pre_out, cols_out;
        Index t_in = 0;
    };

    Encoder() = default;
    Encoder(const CodecConfig& cfg);

    void init(std::mt19937_64& rng);
    /// x is 1 x T; returns D x S.
    nn::Matrix forward(const nn::Matrix& x, Tape& tape) const;
    void backward(const nn::Matrix& dh, const Tape& tape);
    void visit(const std::string& prefix, const nn::ParameterVisitor& f);

    /// Output standardization h = (a - shift) * scale, per channel. These are
    /// buffers, not trained by gradient; they are affine so half-sums of
    /// latents are preserved.
    void visit_buffers(const std::string& prefix, const nn::ParameterVisitor& f);
    nn::Vector norm_shift() const { return shift_.value.col(0); }
    nn::Vector norm_scale() const { return scale_.value.col(0); }
    void set_normalization(const nn::Vector& shift, const nn::Vector& scale);

private:
    nn::Conv1d conv_in_, conv_out_;
    std::vector<nn::Conv1d> down_;
    std::vector<nn::ResidualBlock> res_;
    nn::Parameter shift_, scale_;
};

class Decoder {
public:
    struct Tape {
        nn::Matrix cols_in;
        std::vector<nn::ResidualBlock::Tape> res;
        std::vector<nn::Matrix> pre_up;
        nn::Matrix pre_out, cols_out;
        Index t_in = 0;
    };

    Decoder() = default;
    Decoder(const CodecConfig& cfg);

    void init(std::mt19937_64& rng);
    /// z is D x S; returns 1 x T (unclamped).
    nn::Matrix forward(const nn::Matrix& z, Tape& tape) const;
    /// Returns dL/dz.
    nn::Matrix backward(const nn::Matrix& dy, const Tape& tape);
    void visit(const std::string& prefix, const nn::ParameterVisitor& f);

private:
    nn::Conv1d conv_in_, conv_out_;
    std::vector<nn::ResidualBlock> res_;
    std::vector<nn::ConvTranspose1d> up_;
};

/// Quantizer state captured at one parameter point. Re-evaluating the loss
/// with it holds assignments and straight-through offsets fixed, which makes
/// the training surrogate a smooth function of every parameter.
struct FrozenQuantizer {
    LatentIndices z1, z2;
    LatentVectors h1, h2;                 // sg[h] seen by the codebook term
    LatentVectors e1, e2;                 // sg[e_z] seen by the commitment term
    LatentVectors offset1, offset2;       // e_z - h; decoder input is h + offset
    LatentVectors lq_offset, ql_offset;   // e_a - h_mix and e_q - (e_z1 + e_z2)/2
    bool has_lin = false;
};

class LqVae {
public:
    explicit LqVae(const CodecConfig& cfg);

    LqVae(const LqVae& other);
    LqVae& operator=(const LqVae& other);

    const CodecConfig& config() const { return cfg_; }
    const Codebook& codebook() const { return codebook_; }
    /// The codebook divided by latent_rms: the unit-RMS latent domain in
    /// which separation measures sigma. Nearest codes and half-sum indices
    /// are unchanged by the uniform scale.
    Codebook standardized_codebook() const { return Codebook{codebook_.codes / cfg_.latent_rms}; }
    void set_codebook(const Codebook& cb);
    /// Copies the trainable codebook parameter into the public codebook.
    void sync_codebook();

    LatentVectors encode(const AudioChunk& chunk) const;
    Quantized quantize(const LatentVectors& h) const { return lqsep::quantize(h, codebook_); }
    LatentIndices encode_indices(const AudioChunk& chunk) const { return quantize(encode(chunk)).indices; }

    /// Decoded waveform clamped to [-1, 1]. Counts invocations.
    AudioChunk decode(const LatentIndices& z, int sample_rate = 8000) const;
    /// Decoder output before clamping.
    Eigen::VectorXd decode_raw(const LatentIndices& z) const;

    LossBreakdown vqvae_loss(const AudioChunk& x) const;
    double lin_loss(const AudioChunk& x1, const AudioChunk& x2) const;

    /// Objective for one training pair: VQ-VAE terms averaged over x1 and x2
    /// plus the weighted linearization term. With `grads`, gradients are
    /// accumulated into the parameters (straight-through for the quantizer).
    /// `frozen` replays a captured quantizer state; `capture` records one.
    LossBreakdown pair_loss(const AudioChunk& x1, const AudioChunk& x2, bool with_lin, bool grads,
                            const FrozenQuantizer* frozen = nullptr, FrozenQuantizer* capture = nullptr);

    void visit_parameters(const nn::ParameterVisitor& f);
    void visit_buffers(const nn::ParameterVisitor& f);
    std::vector<nn::Parameter*> parameters();

    /// Moves the encoder output standardization towards the statistics of
    /// `latents` (current-normalization encoder outputs, S x D each) with
    /// EMA `momentum`, and maps the codebook along so every code keeps
    /// representing the same pre-normalization point.
    void update_latent_normalization(const std::vector<const LatentVectors*>& latents, double momentum);
    void zero_grad();

    std::uint64_t decode_calls() const { return decode_calls_.load(); }
    std::uint64_t steps_trained = 0;

    /// Checkpoint directory: manifest plus one tensor file per parameter and
    /// normalization buffer.
    void save(const std::filesystem::path& dir) const;
    static LqVae load(const std::filesystem::path& dir);

private:
    void check_chunk(const AudioChunk& chunk) const;

    CodecConfig cfg_;
    Encoder encoder_;
    Decoder decoder_;
    nn::Parameter codebook_param_;  // K x D, trainable copy of codebook_
    Codebook codebook_;
    mutable std::atomic<std::uint64_t> decode_calls_{0};
};

}  // namespace lqsep
