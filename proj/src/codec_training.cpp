#include "lqsep/codec_training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace lqsep {

namespace {

AudioChunk random_crop(const std::vector<AudioChunk>& pool, Index window, int hop, std::mt19937_64& rng) {
    const AudioChunk& src = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    if (src.length() < window) throw DimensionError("training chunk shorter than the crop window");
    const Index positions = (src.length() - window) / hop;
    const Index start = hop * std::uniform_int_distribution<Index>(0, positions)(rng);
    return AudioChunk{src.samples.segment(start, window), src.sample_rate};
}

void accumulate(LossBreakdown& acc, const LossBreakdown& x, double w) {
    acc.rec += w * x.rec;
    acc.codebook += w * x.codebook;
    acc.commit += w * x.commit;
    acc.lin += w * x.lin;
    acc.total += w * x.total;
    acc.beta = x.beta;
    acc.lin_weight = x.lin_weight;
}

}  // namespace

LossBreakdown heldout_loss(const LqVae& codec, const std::vector<AudioChunk>& a, const std::vector<AudioChunk>& b,
                           std::vector<int>* usage) {
    if (a.size() != b.size()) throw DimensionError("held-out pools differ in size");
    LossBreakdown acc;
    if (usage) usage->assign(static_cast<std::size_t>(codec.config().codebook_size), 0);
    LqVae scratch(codec);
    for (std::size_t i = 0; i < a.size(); ++i) {
        FrozenQuantizer q;
        accumulate(acc, scratch.pair_loss(a[i], b[i], true, false, nullptr, &q), 1.0 / static_cast<double>(a.size()));
        if (usage) {
            for (int k : q.z1) ++(*usage)[static_cast<std::size_t>(k)];
            for (int k : q.z2) ++(*usage)[static_cast<std::size_t>(k)];
        }
    }
    acc.lin_weight = codec.config().lin_weight;
    acc.total = acc.rec + acc.codebook + acc.beta * acc.commit + acc.lin_weight * acc.lin;
    return acc;
}

double mean_additivity_error(const LqVae& codec, const std::vector<AudioChunk>& a,
                             const std::vector<AudioChunk>& b) {
    if (a.size() != b.size() || a.empty()) throw DimensionError("held-out pools must be non-empty and equal-sized");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += codec.lin_loss(a[i], b[i]);
    return acc / static_cast<double>(a.size());
}

CodecTrainingResult train_codec(const CodecTrainingData& data, const CodecConfig& codec_cfg,
                                const CodecTrainingConfig& cfg, const CodecTrainingCallback& on_record) {
    if (data.source1.empty() || data.source2.empty()) throw ValidationError("training pools must be non-empty");
    if (cfg.warmup_steps < 0) throw ValidationError("warmup_steps must be >= 0");
    if (cfg.window % codec_cfg.downsample_factor != 0) {
        throw DimensionError("training window must be a multiple of the downsample factor");
    }

    CodecTrainingResult result{LqVae(codec_cfg), {}, false};
    LqVae& codec = result.codec;
    const int K = codec_cfg.codebook_size;
    std::mt19937_64 rng(cfg.seed);

    nn::Adam opt(codec.parameters(), {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
    nn::Parameter* codebook_param = nullptr;
    codec.visit_parameters([&](const std::string& name, nn::Parameter& p) {
        if (name == "codebook") codebook_param = &p;
    });

    const int hop = codec_cfg.downsample_factor;
    std::vector<int> last_used(static_cast<std::size_t>(K), 0);
    std::vector<Eigen::RowVectorXd> recent;  // reservoir of recent encoder outputs
    const std::size_t recent_cap = 4096;
    const auto remember = [&](const LatentVectors& h) {
        for (Index s = 0; s < h.rows(); ++s) {
            if (recent.size() < recent_cap) {
                recent.emplace_back(h.row(s));
            } else {
                recent[std::uniform_int_distribution<std::size_t>(0, recent_cap - 1)(rng)] = h.row(s);
            }
        }
    };
    const std::vector<nn::Parameter*> params = codec.parameters();

    LqVae last_good(codec);
    LossBreakdown window_acc;
    int window_steps = 0;

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::pair<AudioChunk, AudioChunk>> batch;
        for (int i = 0; i < cfg.batch; ++i) {
            AudioChunk a = random_crop(data.source1, cfg.window, hop, rng);
            AudioChunk b = random_crop(data.source2, cfg.window, hop, rng);
            batch.emplace_back(std::move(a), std::move(b));
        }

        if (step == 0) {
            // Standardize the encoder output on the first batch, then seed
            // the codebook from those outputs.
            std::vector<LatentVectors> first;
            for (const auto& [a, b] : batch) {
                first.push_back(codec.encode(a));
                first.push_back(codec.encode(b));
            }
            std::vector<const LatentVectors*> ptrs;
            for (const auto& h : first) ptrs.push_back(&h);
            codec.update_latent_normalization(ptrs, 0.0);
            std::vector<Eigen::RowVectorXd> rows;
            for (const auto& [a, b] : batch) {
                for (const AudioChunk* x : {&a, &b}) {
                    const LatentVectors h = codec.encode(*x);
                    for (Index s = 0; s < h.rows(); ++s) rows.emplace_back(h.row(s));
                }
            }
            std::shuffle(rows.begin(), rows.end(), rng);
            std::normal_distribution<double> jitter(0.0, 1e-3 * codec_cfg.latent_rms);
            Codebook cb;
            cb.codes.resize(K, codec_cfg.latent_dim);
            for (int k = 0; k < K; ++k) {
                cb.codes.row(k) = rows[static_cast<std::size_t>(k) % rows.size()];
                for (Index d = 0; d < cb.codes.cols(); ++d) cb.codes(k, d) += jitter(rng);
            }
            codec.set_codebook(cb);
        }

        const double progress = static_cast<double>(step) / std::max(1, cfg.steps - 1);
        const double warmup = cfg.warmup_steps > 0 ? std::min(1.0, (step + 1.0) / cfg.warmup_steps) : 1.0;
        const double lr_scale =
            warmup *
            (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
        opt.set_learning_rate(cfg.learning_rate * lr_scale);

        opt.zero_grad();
        LossBreakdown step_loss;
        bool diverged = false;
        std::vector<FrozenQuantizer> states(batch.size());
        std::size_t pair_index = 0;
        for (const auto& [a, b] : batch) {
            FrozenQuantizer& q = states[pair_index++];
            LossBreakdown l;
            try {
                l = codec.pair_loss(a, b, cfg.use_lin, true, nullptr, &q);
            } catch (const NumericError&) {
                diverged = true;
                break;
            }
            accumulate(step_loss, l, 1.0 / cfg.batch);
            for (int k : q.z1) last_used[static_cast<std::size_t>(k)] = step;
            for (int k : q.z2) last_used[static_cast<std::size_t>(k)] = step;
            remember(q.h1);
            remember(q.h2);
            if (cfg.mixture_weight > 0.0) {
                // The mixture is also a codec input at separation time, so it gets the
                // VQ-VAE terms too and its latents may seed codes.
                std::vector<Eigen::MatrixXd> source_grads;
                for (nn::Parameter* p : params) {
                    source_grads.push_back(p->grad);
                    p->grad.setZero();
                }
                const AudioChunk m{0.5 * a.samples + 0.5 * b.samples, a.sample_rate};
                FrozenQuantizer qm;
                try {
                    codec.pair_loss(m, m, false, true, nullptr, &qm);
                } catch (const NumericError&) {
                    diverged = true;
                    break;
                }
                for (std::size_t i = 0; i < params.size(); ++i) {
                    params[i]->grad = source_grads[i] + cfg.mixture_weight * params[i]->grad;
                }
                for (int k : qm.z1) last_used[static_cast<std::size_t>(k)] = step;
                remember(qm.h1);
            }
        }
        if (diverged || !step_loss.finite()) {
            codec = last_good;
            result.aborted = true;
            break;
        }
        for (nn::Parameter* p : params) p->grad /= static_cast<double>(cfg.batch);
        opt.step();
        codec.sync_codebook();
        if (cfg.normalization_momentum < 1.0) {
            std::vector<const LatentVectors*> ptrs;
            for (const auto& q : states) {
                ptrs.push_back(&q.h1);
                ptrs.push_back(&q.h2);
            }
            codec.update_latent_normalization(ptrs, cfg.normalization_momentum);
        }

        if (cfg.dead_code_steps > 0 && !recent.empty()) {
            for (int k = 0; k < K; ++k) {
                if (step - last_used[static_cast<std::size_t>(k)] >= cfg.dead_code_steps) {
                    codebook_param->value.row(k) =
                        recent[std::uniform_int_distribution<std::size_t>(0, recent.size() - 1)(rng)];
                    last_used[static_cast<std::size_t>(k)] = step;
                }
            }
        }
        codec.sync_codebook();
        codec.steps_trained = static_cast<std::uint64_t>(step + 1);

        accumulate(window_acc, step_loss, 1.0);
        ++window_steps;
        const bool last = step + 1 == cfg.steps;
        if ((cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) || last) {
            CodecTrainingRecord rec;
            rec.step = step + 1;
            accumulate(rec.train, window_acc, 1.0 / window_steps);
            if (!data.heldout1.empty()) rec.heldout = heldout_loss(codec, data.heldout1, data.heldout2, &rec.code_usage);
            if (!rec.heldout.finite()) {
                codec = last_good;
                result.aborted = true;
                break;
            }
            result.history.push_back(rec);
            if (on_record) on_record(rec);
            last_good = codec;
            window_acc = LossBreakdown{};
            window_steps = 0;
        }
    }
    return result;
}

}  // namespace lqsep
