#include "lqsep/transformer.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "lqsep/logmath.hpp"
#include "lqsep/tensor_io.hpp"

namespace lqsep {

using nn::Matrix;
using nn::Vector;

namespace {

constexpr double kLayerNormEps = 1e-5;
const double kGeluC = std::sqrt(2.0 / std::numbers::pi);

// Column-wise layer norm. xhat/rstd are kept for the backward pass.
Matrix layer_norm(const Matrix& x, const nn::Parameter& gain, const nn::Parameter& bias, Matrix* xhat_out,
                  Vector* rstd_out) {
    const Index n = x.cols();
    const double d = static_cast<double>(x.rows());
    Matrix xhat(x.rows(), n);
    Vector rstd(n);
    for (Index j = 0; j < n; ++j) {
        const double mean = x.col(j).sum() / d;
        const double var = (x.col(j).array() - mean).square().sum() / d;
        rstd[j] = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.col(j) = (x.col(j).array() - mean) * rstd[j];
    }
    Matrix y = gain.value.col(0).asDiagonal() * xhat;
    y.colwise() += bias.value.col(0);
    if (xhat_out) *xhat_out = std::move(xhat);
    if (rstd_out) *rstd_out = std::move(rstd);
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd, nn::Parameter& gain,
                           nn::Parameter& bias) {
    gain.grad.col(0) += dy.cwiseProduct(xhat).rowwise().sum();
    bias.grad.col(0) += dy.rowwise().sum();
    const Matrix dxhat = gain.value.col(0).asDiagonal() * dy;
    const double d = static_cast<double>(dy.rows());
    Matrix dx(dy.rows(), dy.cols());
    for (Index j = 0; j < dy.cols(); ++j) {
        const double m1 = dxhat.col(j).sum() / d;
        const double m2 = dxhat.col(j).dot(xhat.col(j)) / d;
        dx.col(j) = rstd[j] * (dxhat.col(j).array() - m1 - xhat.col(j).array() * m2);
    }
    return dx;
}

Matrix gelu(const Matrix& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); });
}

Matrix gelu_backward(const Matrix& dy, const Matrix& x) {
    return dy.binaryExpr(x, [](double g, double v) {
        const double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    });
}

// y = W x + b, evaluated one column at a time.
void affine_columns(const nn::Parameter& w, const nn::Parameter& b, const Matrix& x, Matrix& y) {
    y.resize(w.value.rows(), x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
        y.col(j).noalias() = w.value * x.col(j);
        y.col(j) += b.value.col(0);
    }
}

void normal_init(Matrix& m, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, std);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
}

}  // namespace

void TransformerConfig::validate() const {
    if (vocabulary_size < 1) throw ValidationError("vocabulary size must be positive");
    if (context_length < 1) throw ValidationError("context length must be positive");
    if (layers < 1 || heads < 1 || width < 1 || mlp_ratio < 1) throw ValidationError("invalid transformer size");
    if (width % heads != 0) throw ValidationError("width must be divisible by the number of heads");
}

TransformerPrior::TransformerPrior(const TransformerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.width;
    const int hidden = d * cfg_.mlp_ratio;
    std::mt19937_64 rng(cfg_.seed);
    tok_emb_.resize(d, cfg_.vocabulary_size + 1);
    pos_emb_.resize(d, cfg_.context_length);
    normal_init(tok_emb_.value, 0.02, rng);
    normal_init(pos_emb_.value, 0.02, rng);
    const double resid_std = 0.02 / std::sqrt(2.0 * cfg_.layers);
    layers_.resize(static_cast<std::size_t>(cfg_.layers));
    for (Layer& l : layers_) {
        l.ln1_gain.resize(d, 1);
        l.ln1_gain.value.setOnes();
        l.ln1_bias.resize(d, 1);
        l.qkv_w.resize(3 * d, d);
        l.qkv_b.resize(3 * d, 1);
        l.out_w.resize(d, d);
        l.out_b.resize(d, 1);
        l.ln2_gain.resize(d, 1);
        l.ln2_gain.value.setOnes();
        l.ln2_bias.resize(d, 1);
        l.fc1_w.resize(hidden, d);
        l.fc1_b.resize(hidden, 1);
        l.fc2_w.resize(d, hidden);
        l.fc2_b.resize(d, 1);
        normal_init(l.qkv_w.value, 0.02, rng);
        normal_init(l.out_w.value, resid_std, rng);
        normal_init(l.fc1_w.value, 0.02, rng);
        normal_init(l.fc2_w.value, resid_std, rng);
    }
    lnf_gain_.resize(d, 1);
    lnf_gain_.value.setOnes();
    lnf_bias_.resize(d, 1);
    head_w_.resize(cfg_.vocabulary_size, d);
    head_b_.resize(cfg_.vocabulary_size, 1);
    normal_init(head_w_.value, 0.02, rng);
}

void TransformerPrior::visit_parameters(const nn::ParameterVisitor& f) {
    f("tok_emb", tok_emb_);
    f("pos_emb", pos_emb_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Layer& l = layers_[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        f(p + "ln1.gain", l.ln1_gain);
        f(p + "ln1.bias", l.ln1_bias);
        f(p + "attn.qkv.weight", l.qkv_w);
        f(p + "attn.qkv.bias", l.qkv_b);
        f(p + "attn.out.weight", l.out_w);
        f(p + "attn.out.bias", l.out_b);
        f(p + "ln2.gain", l.ln2_gain);
        f(p + "ln2.bias", l.ln2_bias);
        f(p + "mlp.fc1.weight", l.fc1_w);
        f(p + "mlp.fc1.bias", l.fc1_b);
        f(p + "mlp.fc2.weight", l.fc2_w);
        f(p + "mlp.fc2.bias", l.fc2_b);
    }
    f("ln_f.gain", lnf_gain_);
    f("ln_f.bias", lnf_bias_);
    f("head.weight", head_w_);
    f("head.bias", head_b_);
}

std::vector<nn::Parameter*> TransformerPrior::parameters() {
    std::vector<nn::Parameter*> out;
    visit_parameters([&](const std::string&, nn::Parameter& p) { out.push_back(&p); });
    return out;
}

void TransformerPrior::zero_grad() {
    visit_parameters([](const std::string&, nn::Parameter& p) { p.zero_grad(); });
}

// ---- full-sequence path ----------------------------------------------------

struct TransformerPrior::Tape {
    struct LayerTape {
        Matrix x_in, ln1_xhat, a1, qkv, att, x_mid, ln2_xhat, a2, f, g;
        Vector ln1_rstd, ln2_rstd;
        std::vector<Matrix> probs;  // per (sequence, head): L x L
    };
    Index batch = 0, length = 0;
    std::vector<int> inputs, targets;
    std::vector<LayerTape> layers;
    Matrix xf_hat, xf;
    Vector xf_rstd;
};

Matrix TransformerPrior::forward(const std::vector<LatentIndices>& batch, Tape* tape) const {
    if (batch.empty()) throw ValidationError("empty transformer batch");
    const Index L = static_cast<Index>(batch.front().size());
    if (L == 0) throw ValidationError("empty sequence");
    check_context(*this, L);
    const Index B = static_cast<Index>(batch.size());
    const Index N = B * L;
    const int d = cfg_.width;
    const int H = cfg_.heads;
    const int dh = d / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<int> inputs(static_cast<std::size_t>(N)), targets(static_cast<std::size_t>(N));
    for (Index b = 0; b < B; ++b) {
        if (static_cast<Index>(batch[b].size()) != L) throw DimensionError("batch sequences must share a length");
        check_indices(batch[b], cfg_.vocabulary_size);
        for (Index t = 0; t < L; ++t) {
            inputs[b * L + t] = t == 0 ? cfg_.vocabulary_size : batch[b][t - 1];
            targets[b * L + t] = batch[b][t];
        }
    }

    Matrix x(d, N);
    for (Index j = 0; j < N; ++j) x.col(j) = tok_emb_.value.col(inputs[j]) + pos_emb_.value.col(j % L);

    if (tape) {
        tape->batch = B;
        tape->length = L;
        tape->inputs = inputs;
        tape->targets = targets;
        tape->layers.resize(layers_.size());
    }

    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const Layer& l = layers_[li];
        Tape::LayerTape local;
        Tape::LayerTape& lt = tape ? tape->layers[li] : local;
        lt.x_in = x;
        lt.a1 = layer_norm(x, l.ln1_gain, l.ln1_bias, &lt.ln1_xhat, &lt.ln1_rstd);
        lt.qkv = l.qkv_w.value * lt.a1;
        lt.qkv.colwise() += l.qkv_b.value.col(0);
        lt.att.resize(d, N);
        lt.probs.resize(static_cast<std::size_t>(B * H));
        for (Index b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const auto q = lt.qkv.block(h * dh, b * L, dh, L);
                const auto k = lt.qkv.block(d + h * dh, b * L, dh, L);
                const auto v = lt.qkv.block(2 * d + h * dh, b * L, dh, L);
                Matrix p = (q.transpose() * k) * inv_sqrt;
                for (Index i = 0; i < L; ++i) {
                    const double m = p.row(i).head(i + 1).maxCoeff();
                    double z = 0.0;
                    for (Index j = 0; j <= i; ++j) {
                        p(i, j) = std::exp(p(i, j) - m);
                        z += p(i, j);
                    }
                    p.row(i).head(i + 1) /= z;
                    p.row(i).tail(L - i - 1).setZero();
                }
                lt.att.block(h * dh, b * L, dh, L).noalias() = v * p.transpose();
                lt.probs[static_cast<std::size_t>(b * H + h)] = std::move(p);
            }
        }
        x = x + l.out_w.value * lt.att;
        x.colwise() += l.out_b.value.col(0);
        lt.x_mid = x;
        lt.a2 = layer_norm(x, l.ln2_gain, l.ln2_bias, &lt.ln2_xhat, &lt.ln2_rstd);
        lt.f = l.fc1_w.value * lt.a2;
        lt.f.colwise() += l.fc1_b.value.col(0);
        lt.g = gelu(lt.f);
        x = x + l.fc2_w.value * lt.g;
        x.colwise() += l.fc2_b.value.col(0);
    }

    Matrix xf_hat;
    Vector xf_rstd;
    Matrix xf = layer_norm(x, lnf_gain_, lnf_bias_, &xf_hat, &xf_rstd);
    Matrix logits = head_w_.value * xf;
    logits.colwise() += head_b_.value.col(0);
    if (tape) {
        tape->xf_hat = std::move(xf_hat);
        tape->xf_rstd = std::move(xf_rstd);
        tape->xf = std::move(xf);
    }
    return logits;
}

Eigen::MatrixXd TransformerPrior::forward_logits(const LatentIndices& z) const {
    return forward({z}, nullptr);
}

double TransformerPrior::sequence_loss(const std::vector<LatentIndices>& batch, bool grads) {
    Tape tape;
    const Matrix logits = forward(batch, grads ? &tape : nullptr);
    const Index N = logits.cols();
    const double inv_n = 1.0 / static_cast<double>(N);
    Matrix dlogits(logits.rows(), N);
    double loss = 0.0;
    const Index L = static_cast<Index>(batch.front().size());
    for (Index j = 0; j < N; ++j) {
        const Vector lp = log_softmax(logits.col(j));
        const int target = batch[j / L][j % L];
        loss -= lp[target];
        if (grads) {
            dlogits.col(j) = lp.array().exp() * inv_n;
            dlogits(target, j) -= inv_n;
        }
    }
    loss *= inv_n;
    if (!grads) return loss;
    if (!std::isfinite(loss)) throw NumericError("transformer loss is not finite");

    const int d = cfg_.width;
    const int H = cfg_.heads;
    const int dh = d / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const Index B = tape.batch;

    head_w_.grad.noalias() += dlogits * tape.xf.transpose();
    head_b_.grad.col(0) += dlogits.rowwise().sum();
    Matrix dx = layer_norm_backward(head_w_.value.transpose() * dlogits, tape.xf_hat, tape.xf_rstd, lnf_gain_,
                                    lnf_bias_);

    for (std::size_t li = layers_.size(); li-- > 0;) {
        Layer& l = layers_[li];
        const Tape::LayerTape& lt = tape.layers[li];

        // MLP residual branch.
        l.fc2_w.grad.noalias() += dx * lt.g.transpose();
        l.fc2_b.grad.col(0) += dx.rowwise().sum();
        const Matrix df = gelu_backward(l.fc2_w.value.transpose() * dx, lt.f);
        l.fc1_w.grad.noalias() += df * lt.a2.transpose();
        l.fc1_b.grad.col(0) += df.rowwise().sum();
        dx += layer_norm_backward(l.fc1_w.value.transpose() * df, lt.ln2_xhat, lt.ln2_rstd, l.ln2_gain, l.ln2_bias);

        // Attention residual branch.
        l.out_w.grad.noalias() += dx * lt.att.transpose();
        l.out_b.grad.col(0) += dx.rowwise().sum();
        const Matrix datt = l.out_w.value.transpose() * dx;
        Matrix dqkv(3 * d, datt.cols());
        for (Index b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const Matrix& p = lt.probs[static_cast<std::size_t>(b * H + h)];
                const auto q = lt.qkv.block(h * dh, b * L, dh, L);
                const auto k = lt.qkv.block(d + h * dh, b * L, dh, L);
                const auto v = lt.qkv.block(2 * d + h * dh, b * L, dh, L);
                const auto dout = datt.block(h * dh, b * L, dh, L);
                dqkv.block(2 * d + h * dh, b * L, dh, L).noalias() = dout * p;
                const Matrix dp = dout.transpose() * v;
                Matrix ds = p.cwiseProduct(dp);
                const Vector row_dot = ds.rowwise().sum();
                ds -= p.cwiseProduct(row_dot.replicate(1, L));
                ds *= inv_sqrt;
                dqkv.block(h * dh, b * L, dh, L).noalias() = k * ds.transpose();
                dqkv.block(d + h * dh, b * L, dh, L).noalias() = q * ds;
            }
        }
        l.qkv_w.grad.noalias() += dqkv * lt.a1.transpose();
        l.qkv_b.grad.col(0) += dqkv.rowwise().sum();
        dx += layer_norm_backward(l.qkv_w.value.transpose() * dqkv, lt.ln1_xhat, lt.ln1_rstd, l.ln1_gain, l.ln1_bias);
    }

    for (Index j = 0; j < dx.cols(); ++j) {
        tok_emb_.grad.col(tape.inputs[j]) += dx.col(j);
        pos_emb_.grad.col(j % L) += dx.col(j);
    }
    return loss;
}

// ---- incremental path ------------------------------------------------------

namespace {

class TransformerSession final : public PriorSession {
public:
    TransformerSession(const TransformerPrior& model, Index batch) : model_(model), batch_(batch) {
        const auto& cfg = model.config();
        keys_.assign(model.layers().size(), std::vector<Matrix>(static_cast<std::size_t>(batch)));
        values_ = keys_;
        for (auto& layer : keys_) {
            for (auto& m : layer) m.resize(cfg.width, cfg.context_length);
        }
        for (auto& layer : values_) {
            for (auto& m : layer) m.resize(cfg.width, cfg.context_length);
        }
        std::vector<int> bos(static_cast<std::size_t>(batch), cfg.vocabulary_size);
        step(bos);
    }

    Index batch() const override { return batch_; }
    Index position() const override { return position_; }
    const Eigen::MatrixXd& logits() const override {
        if (exhausted_) throw ContextError("no logits past the end of the context window");
        return logits_;
    }

    void advance(std::span<const int> tokens) override {
        if (static_cast<Index>(tokens.size()) != batch_) throw DimensionError("one token per sequence expected");
        if (exhausted_) throw ContextError("session advanced past the context length");
        for (int t : tokens) {
            if (t < 0 || t >= model_.vocabulary_size()) throw ValidationError("token outside the vocabulary");
        }
        ++position_;
        if (position_ >= model_.context_length()) {
            exhausted_ = true;
            return;
        }
        step(std::vector<int>(tokens.begin(), tokens.end()));
    }

private:
    // Feeds one token per sequence at slot `position_` and refreshes logits.
    void step(const std::vector<int>& tokens) {
        const auto& cfg = model_.config();
        const int d = cfg.width;
        const int H = cfg.heads;
        const int dh = d / H;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        const Index t = position_;

        Matrix x(d, batch_);
        for (Index b = 0; b < batch_; ++b) {
            x.col(b) = model_.token_embedding().value.col(tokens[b]) + model_.position_embedding().value.col(t);
        }
        Matrix a, qkv, att(d, batch_), proj, f, y;
        Vector scores(t + 1);
        for (std::size_t li = 0; li < model_.layers().size(); ++li) {
            const auto& l = model_.layers()[li];
            a = layer_norm(x, l.ln1_gain, l.ln1_bias, nullptr, nullptr);
            affine_columns(l.qkv_w, l.qkv_b, a, qkv);
            for (Index b = 0; b < batch_; ++b) {
                Matrix& kc = keys_[li][b];
                Matrix& vc = values_[li][b];
                kc.col(t) = qkv.col(b).segment(d, d);
                vc.col(t) = qkv.col(b).segment(2 * d, d);
                for (int h = 0; h < H; ++h) {
                    const auto q = qkv.col(b).segment(h * dh, dh);
                    for (Index j = 0; j <= t; ++j) scores[j] = kc.col(j).segment(h * dh, dh).dot(q) * inv_sqrt;
                    const double m = scores.maxCoeff();
                    scores = (scores.array() - m).exp();
                    scores /= scores.sum();
                    auto out = att.col(b).segment(h * dh, dh);
                    out.setZero();
                    for (Index j = 0; j <= t; ++j) out += scores[j] * vc.col(j).segment(h * dh, dh);
                }
            }
            affine_columns(l.out_w, l.out_b, att, proj);
            x += proj;
            a = layer_norm(x, l.ln2_gain, l.ln2_bias, nullptr, nullptr);
            affine_columns(l.fc1_w, l.fc1_b, a, f);
            affine_columns(l.fc2_w, l.fc2_b, gelu(f), y);
            x += y;
        }
        a = layer_norm(x, model_.final_gain(), model_.final_bias(), nullptr, nullptr);
        affine_columns(model_.head_weight(), model_.head_bias(), a, logits_);
    }

    const TransformerPrior& model_;
    Index batch_;
    Index position_ = 0;
    bool exhausted_ = false;
    std::vector<std::vector<Matrix>> keys_, values_;  // [layer][sequence]: width x context
    Eigen::MatrixXd logits_;
};

}  // namespace

std::unique_ptr<PriorSession> TransformerPrior::start(Index batch) const {
    if (batch < 1) throw ValidationError("session batch must be >= 1");
    return std::make_unique<TransformerSession>(*this, batch);
}

void TransformerPrior::save(const std::filesystem::path& dir) const {
    CheckpointWriter w(dir, {{"kind", "transformer"},
                             {"K", cfg_.vocabulary_size},
                             {"context_length", cfg_.context_length},
                             {"layers", cfg_.layers},
                             {"heads", cfg_.heads},
                             {"width", cfg_.width},
                             {"mlp_ratio", cfg_.mlp_ratio},
                             {"seed", cfg_.seed},
                             {"step", steps_trained}});
    const_cast<TransformerPrior*>(this)->visit_parameters(
        [&](const std::string& name, nn::Parameter& p) { w.add(name, p.value); });
    w.finish();
}

TransformerPrior TransformerPrior::load(const std::filesystem::path& dir) {
    CheckpointReader r(dir);
    const auto& m = r.manifest();
    if (m.at("kind") != "transformer") throw ValidationError(dir.string() + " is not a transformer checkpoint");
    TransformerConfig cfg;
    cfg.vocabulary_size = m.at("K").get<int>();
    cfg.context_length = m.at("context_length").get<int>();
    cfg.layers = m.at("layers").get<int>();
    cfg.heads = m.at("heads").get<int>();
    cfg.width = m.at("width").get<int>();
    cfg.mlp_ratio = m.at("mlp_ratio").get<int>();
    cfg.seed = m.at("seed").get<std::uint64_t>();
    TransformerPrior model(cfg);
    model.visit_parameters([&](const std::string& name, nn::Parameter& p) { r.load_into(name, p); });
    model.steps_trained = m.value("step", std::uint64_t{0});
    return model;
}

}  // namespace lqsep
