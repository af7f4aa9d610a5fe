#pragma once

// Shared fixtures and hand-rolled generators for the test suites.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>

#include "lqsep/codec.hpp"
#include "lqsep/ngram.hpp"
#include "lqsep/prior.hpp"

namespace lqsep::test {

/// Draws from a fixed seed so a failing case can be replayed by its trial number.
class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng(seed) {}

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
    double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng); }
    int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

    Eigen::MatrixXd matrix(Index rows, Index cols, double sd = 1.0) {
        Eigen::MatrixXd m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(sd);
        return m;
    }

    Codebook codebook(int K, int D, double sd = 1.0) { return Codebook{matrix(K, D, sd)}; }

    AudioChunk chunk(Index T, double amplitude = 0.5) {
        AudioChunk c{Eigen::VectorXd(T), 8000};
        for (Index t = 0; t < T; ++t) c.samples[t] = uniform(-amplitude, amplitude);
        return c;
    }

    LatentIndices indices(Index S, int K) {
        LatentIndices z(static_cast<std::size_t>(S));
        for (auto& k : z) k = integer(0, K - 1);
        return z;
    }

    LatentCorpus corpus(int K, int count, Index S) {
        LatentCorpus c;
        c.vocabulary_size = K;
        for (int i = 0; i < count; ++i) c.sequences.push_back(indices(S, K));
        return c;
    }

    std::mt19937_64 rng;
};

inline CodecConfig tiny_codec_config(std::uint64_t seed = 3) {
    CodecConfig c;
    c.codebook_size = 4;
    c.latent_dim = 2;
    c.channels = 3;
    c.downsample_factor = 2;
    c.seed = seed;
    return c;
}

/// Scalar codebook {0, 1, ..., K-1} scaled by `step`.
inline Codebook lattice_codebook(int K, double step = 1.0) {
    Codebook cb;
    cb.codes.resize(K, 1);
    for (int k = 0; k < K; ++k) cb.codes(k, 0) = step * k;
    return cb;
}

/// Prior whose next-step logits never depend on the prefix.
class FixedPrior final : public PriorModel {
public:
    FixedPrior(Eigen::VectorXd logits, int context_length) : logits_(std::move(logits)), context_(context_length) {}

    PriorKind kind() const override { return PriorKind::ngram; }
    int vocabulary_size() const override { return static_cast<int>(logits_.size()); }
    int context_length() const override { return context_; }
    void save(const std::filesystem::path&) const override { throw UnsupportedError("fixed prior is not saved"); }

    std::unique_ptr<PriorSession> start(Index batch) const override {
        return std::make_unique<Session>(logits_.replicate(1, batch), context_);
    }

private:
    class Session final : public PriorSession {
    public:
        Session(Eigen::MatrixXd logits, int context) : logits_(std::move(logits)), context_(context) {}
        Index batch() const override { return logits_.cols(); }
        Index position() const override { return position_; }
        const Eigen::MatrixXd& logits() const override { return logits_; }
        void advance(std::span<const int>) override {
            if (++position_ > context_) throw ContextError("fixed prior context exhausted");
        }

    private:
        Eigen::MatrixXd logits_;
        Index position_ = 0;
        int context_;
    };

    Eigen::VectorXd logits_;
    int context_;
};

/// Point mass on `symbol`.
inline FixedPrior point_mass_prior(int K, int symbol, int context_length) {
    Eigen::VectorXd logits = Eigen::VectorXd::Constant(K, -std::numeric_limits<double>::infinity());
    logits[symbol] = 0.0;
    return FixedPrior(logits, context_length);
}

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("lqsep_test_" + tag + "_" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path path;
};

}  // namespace lqsep::test
