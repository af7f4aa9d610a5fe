#include "lqsep/codec.hpp"

#include <bit>
#include <cmath>

#include "lqsep/tensor_io.hpp"

namespace lqsep {

namespace {

constexpr int kResidualDilation = 3;

nn::Matrix as_row(const Eigen::VectorXd& v) { return v.transpose(); }

}  // namespace

void CodecConfig::validate() const {
    if (codebook_size < 2) throw ValidationError("codebook_size must be >= 2");
    if (latent_dim < 1) throw ValidationError("latent_dim must be >= 1");
    if (channels < 1) throw ValidationError("channels must be >= 1");
    if (downsample_factor < 1 || !std::has_single_bit(static_cast<unsigned>(downsample_factor))) {
        throw ValidationError("downsample_factor must be a power of two");
    }
    if (!(beta >= 0.0)) throw ValidationError("beta must be >= 0");
    if (!(lin_weight >= 0.0)) throw ValidationError("lin_weight must be >= 0");
}

int CodecConfig::stages() const { return std::countr_zero(static_cast<unsigned>(downsample_factor)); }

bool LossBreakdown::finite() const {
    return std::isfinite(rec) && std::isfinite(codebook) && std::isfinite(commit) && std::isfinite(lin) &&
           std::isfinite(total);
}

double reconstruction_loss(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    if (x.size() != y.size()) throw DimensionError("reconstruction length mismatch");
    return (x - y).squaredNorm() / static_cast<double>(x.size());
}

double latent_distance_loss(const LatentVectors& h, const LatentVectors& selected) {
    if (h.rows() != selected.rows() || h.cols() != selected.cols()) {
        throw DimensionError("latent shape mismatch");
    }
    return (h - selected).squaredNorm() / static_cast<double>(h.rows());
}

LinearizationTerms linearization_terms(const LatentVectors& h1, const LatentVectors& h2,
                                       const LatentVectors& h_mix, const Codebook& cb, Index T) {
    if (h1.rows() != h2.rows() || h1.rows() != h_mix.rows()) throw DimensionError("latent length mismatch");
    LinearizationTerms out;
    const LatentVectors e1 = gather_codes(nearest_codes(h1, cb.codes), cb.codes);
    const LatentVectors e2 = gather_codes(nearest_codes(h2, cb.codes), cb.codes);
    const LatentVectors half_sum = 0.5 * e1 + 0.5 * e2;
    out.ql_indices = nearest_codes(half_sum, cb.codes);
    out.lq_indices = nearest_codes(h_mix, cb.codes);
    double acc = 0.0;
    for (Index s = 0; s < h1.rows(); ++s) {
        acc += (cb.codes.row(out.lq_indices[s]) - cb.codes.row(out.ql_indices[s])).squaredNorm();
    }
    out.value = acc / static_cast<double>(T);
    return out;
}

// ---- Encoder ---------------------------------------------------------------

Encoder::Encoder(const CodecConfig& cfg)
    : conv_in_(1, cfg.channels, 3, 1, 1), conv_out_(cfg.channels, cfg.latent_dim, 3, 1, 1) {
    for (int i = 0; i < cfg.stages(); ++i) {
        down_.emplace_back(cfg.channels, cfg.channels, 4, 2, 1);
        res_.emplace_back(cfg.channels, kResidualDilation);
    }
    shift_.resize(cfg.latent_dim, 1);
    scale_.resize(cfg.latent_dim, 1);
    scale_.value.setOnes();
}

void Encoder::set_normalization(const nn::Vector& shift, const nn::Vector& scale) {
    if (shift.size() != shift_.value.rows() || scale.size() != scale_.value.rows()) {
        throw DimensionError("normalization size mismatch");
    }
    shift_.value.col(0) = shift;
    scale_.value.col(0) = scale;
}

void Encoder::visit_buffers(const std::string& prefix, const nn::ParameterVisitor& f) {
    f(prefix + ".norm.shift", shift_);
    f(prefix + ".norm.scale", scale_);
}

void Encoder::init(std::mt19937_64& rng) {
    conv_in_.init(rng);
    for (std::size_t i = 0; i < down_.size(); ++i) {
        down_[i].init(rng);
        res_[i].init(rng);
    }
    conv_out_.init(rng);
}

nn::Matrix Encoder::forward(const nn::Matrix& x, Tape& tape) const {
    tape.t_in = x.cols();
    tape.pre_down.resize(down_.size());
    tape.cols_down.resize(down_.size());
    tape.res.resize(down_.size());
    nn::Matrix a = conv_in_.forward(x, tape.cols_in);
    for (std::size_t i = 0; i < down_.size(); ++i) {
        tape.pre_down[i] = a;
        a = down_[i].forward(nn::relu(a), tape.cols_down[i]);
        a = res_[i].forward(a, tape.res[i]);
    }
    tape.pre_out = a;
    nn::Matrix h = conv_out_.forward(nn::relu(a), tape.cols_out);
    h.colwise() -= shift_.value.col(0);
    return scale_.value.col(0).asDiagonal() * h;
}

void Encoder::backward(const nn::Matrix& dh, const Tape& tape) {
    const nn::Matrix dpre = scale_.value.col(0).asDiagonal() * dh;
    nn::Matrix da = nn::relu_backward(conv_out_.backward(dpre, tape.cols_out, tape.pre_out.cols()), tape.pre_out);
    for (std::size_t i = down_.size(); i-- > 0;) {
        da = res_[i].backward(da, tape.res[i]);
        da = nn::relu_backward(down_[i].backward(da, tape.cols_down[i], tape.pre_down[i].cols()),
                               tape.pre_down[i]);
    }
    conv_in_.backward(da, tape.cols_in, tape.t_in);
}

void Encoder::visit(const std::string& prefix, const nn::ParameterVisitor& f) {
    conv_in_.visit(prefix + ".conv_in", f);
    for (std::size_t i = 0; i < down_.size(); ++i) {
        down_[i].visit(prefix + ".down." + std::to_string(i), f);
        res_[i].visit(prefix + ".res." + std::to_string(i), f);
    }
    conv_out_.visit(prefix + ".conv_out", f);
}

// ---- Decoder ---------------------------------------------------------------

Decoder::Decoder(const CodecConfig& cfg)
    : conv_in_(cfg.latent_dim, cfg.channels, 3, 1, 1), conv_out_(cfg.channels, 1, 3, 1, 1) {
    for (int i = 0; i < cfg.stages(); ++i) {
        res_.emplace_back(cfg.channels, kResidualDilation);
        up_.emplace_back(cfg.channels, cfg.channels, 4, 2, 1);
    }
}

void Decoder::init(std::mt19937_64& rng) {
    conv_in_.init(rng);
    for (std::size_t i = 0; i < up_.size(); ++i) {
        res_[i].init(rng);
        up_[i].init(rng);
    }
    conv_out_.init(rng);
}

nn::Matrix Decoder::forward(const nn::Matrix& z, Tape& tape) const {
    tape.t_in = z.cols();
    tape.res.resize(up_.size());
    tape.pre_up.resize(up_.size());
    nn::Matrix a = conv_in_.forward(z, tape.cols_in);
    for (std::size_t i = 0; i < up_.size(); ++i) {
        a = res_[i].forward(a, tape.res[i]);
        tape.pre_up[i] = a;
        a = up_[i].forward(nn::relu(a));
    }
    tape.pre_out = a;
    return conv_out_.forward(nn::relu(a), tape.cols_out);
}

nn::Matrix Decoder::backward(const nn::Matrix& dy, const Tape& tape) {
    nn::Matrix da = nn::relu_backward(conv_out_.backward(dy, tape.cols_out, tape.pre_out.cols()), tape.pre_out);
    for (std::size_t i = up_.size(); i-- > 0;) {
        da = nn::relu_backward(up_[i].backward(da, nn::relu(tape.pre_up[i])), tape.pre_up[i]);
        da = res_[i].backward(da, tape.res[i]);
    }
    return conv_in_.backward(da, tape.cols_in, tape.t_in);
}

void Decoder::visit(const std::string& prefix, const nn::ParameterVisitor& f) {
    conv_in_.visit(prefix + ".conv_in", f);
    for (std::size_t i = 0; i < up_.size(); ++i) {
        res_[i].visit(prefix + ".res." + std::to_string(i), f);
        up_[i].visit(prefix + ".up." + std::to_string(i), f);
    }
    conv_out_.visit(prefix + ".conv_out", f);
}

// ---- LqVae -----------------------------------------------------------------

LqVae::LqVae(const CodecConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    encoder_ = Encoder(cfg_);
    decoder_ = Decoder(cfg_);
    std::mt19937_64 rng(cfg_.seed);
    encoder_.init(rng);
    decoder_.init(rng);
    codebook_param_.resize(cfg_.codebook_size, cfg_.latent_dim);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index i = 0; i < codebook_param_.value.size(); ++i) codebook_param_.value.data()[i] = normal(rng);
    sync_codebook();
}

LqVae::LqVae(const LqVae& other)
    : cfg_(other.cfg_),
      encoder_(other.encoder_),
      decoder_(other.decoder_),
      codebook_param_(other.codebook_param_),
      codebook_(other.codebook_) {
    steps_trained = other.steps_trained;
}

LqVae& LqVae::operator=(const LqVae& other) {
    if (this != &other) {
        cfg_ = other.cfg_;
        encoder_ = other.encoder_;
        decoder_ = other.decoder_;
        codebook_param_ = other.codebook_param_;
        codebook_ = other.codebook_;
        steps_trained = other.steps_trained;
    }
    return *this;
}

void LqVae::set_codebook(const Codebook& cb) {
    if (cb.size() != cfg_.codebook_size || cb.dim() != cfg_.latent_dim) {
        throw DimensionError("codebook shape does not match codec configuration");
    }
    codebook_param_.value = cb.codes;
    sync_codebook();
}

void LqVae::sync_codebook() { codebook_.codes = codebook_param_.value; }

void LqVae::check_chunk(const AudioChunk& chunk) const {
    const Index T = chunk.length();
    if (T == 0 || T % cfg_.downsample_factor != 0) {
        throw DimensionError("chunk length " + std::to_string(T) + " is not a positive multiple of " +
                             std::to_string(cfg_.downsample_factor));
    }
    if (!chunk.samples.allFinite()) throw ValidationError("chunk contains non-finite samples");
}

LatentVectors LqVae::encode(const AudioChunk& chunk) const {
    check_chunk(chunk);
    Encoder::Tape tape;
    return encoder_.forward(as_row(chunk.samples), tape).transpose();
}

Eigen::VectorXd LqVae::decode_raw(const LatentIndices& z) const {
    check_indices(z, cfg_.codebook_size);
    if (z.empty()) throw DimensionError("cannot decode an empty index sequence");
    Decoder::Tape tape;
    const nn::Matrix e = gather_codes(z, codebook_.codes).transpose();
    return decoder_.forward(e, tape).row(0).transpose();
}

AudioChunk LqVae::decode(const LatentIndices& z, int sample_rate) const {
    decode_calls_.fetch_add(1);
    AudioChunk out;
    out.sample_rate = sample_rate;
    out.samples = decode_raw(z).cwiseMax(-1.0).cwiseMin(1.0);
    return out;
}

LossBreakdown LqVae::vqvae_loss(const AudioChunk& x) const {
    check_chunk(x);
    LossBreakdown out;
    out.beta = cfg_.beta;
    out.lin_weight = cfg_.lin_weight;
    const LatentVectors h = encode(x);
    const Quantized q = quantize(h);
    out.rec = reconstruction_loss(x.samples, decode_raw(q.indices));
    out.codebook = latent_distance_loss(h, q.codes);
    out.commit = out.codebook;
    out.total = out.rec + out.codebook + cfg_.beta * out.commit;
    if (!out.finite()) {
        throw NumericError("vqvae loss diverged: rec=" + std::to_string(out.rec) +
                           " codebook=" + std::to_string(out.codebook) + " commit=" + std::to_string(out.commit));
    }
    return out;
}

double LqVae::lin_loss(const AudioChunk& x1, const AudioChunk& x2) const {
    if (x1.length() != x2.length()) throw DimensionError("lin_loss inputs differ in length");
    AudioChunk mix{0.5 * x1.samples + 0.5 * x2.samples, x1.sample_rate};
    return linearization_terms(encode(x1), encode(x2), encode(mix), codebook_, x1.length()).value;
}

LossBreakdown LqVae::pair_loss(const AudioChunk& x1, const AudioChunk& x2, bool with_lin, bool grads,
                               const FrozenQuantizer* frozen, FrozenQuantizer* capture) {
    check_chunk(x1);
    check_chunk(x2);
    if (x1.length() != x2.length()) throw DimensionError("training pair differs in length");
    if (frozen && with_lin && !frozen->has_lin) throw ValidationError("frozen state lacks linearization data");

    const Index T = x1.length();
    const double Td = static_cast<double>(T);
    const Eigen::MatrixXd& E = codebook_param_.value;

    Encoder::Tape et1, et2, etm;
    Decoder::Tape dt1, dt2;
    const LatentVectors h1 = encoder_.forward(as_row(x1.samples), et1).transpose();
    const LatentVectors h2 = encoder_.forward(as_row(x2.samples), et2).transpose();
    const Index S = h1.rows();
    const double Sd = static_cast<double>(S);

    const LatentIndices z1 = frozen ? frozen->z1 : nearest_codes(h1, E);
    const LatentIndices z2 = frozen ? frozen->z2 : nearest_codes(h2, E);
    const LatentVectors e1 = gather_codes(z1, E);
    const LatentVectors e2 = gather_codes(z2, E);

    const LatentVectors dec_in1 = frozen ? LatentVectors(h1 + frozen->offset1) : e1;
    const LatentVectors dec_in2 = frozen ? LatentVectors(h2 + frozen->offset2) : e2;
    const Eigen::VectorXd y1 = decoder_.forward(dec_in1.transpose(), dt1).row(0).transpose();
    const Eigen::VectorXd y2 = decoder_.forward(dec_in2.transpose(), dt2).row(0).transpose();

    const LatentVectors& h1_sg = frozen ? frozen->h1 : h1;
    const LatentVectors& h2_sg = frozen ? frozen->h2 : h2;
    const LatentVectors& e1_sg = frozen ? frozen->e1 : e1;
    const LatentVectors& e2_sg = frozen ? frozen->e2 : e2;

    LossBreakdown out;
    out.beta = cfg_.beta;
    out.lin_weight = with_lin ? cfg_.lin_weight : 0.0;
    out.rec = 0.5 * (reconstruction_loss(x1.samples, y1) + reconstruction_loss(x2.samples, y2));
    out.codebook = 0.5 * (latent_distance_loss(h1_sg, e1) + latent_distance_loss(h2_sg, e2));
    out.commit = 0.5 * (latent_distance_loss(h1, e1_sg) + latent_distance_loss(h2, e2_sg));

    LatentVectors hm, lq, ql, u;
    LatentIndices lq_idx, ql_idx;
    if (with_lin) {
        const Eigen::VectorXd mix = 0.5 * x1.samples + 0.5 * x2.samples;
        hm = encoder_.forward(as_row(mix), etm).transpose();
        u = 0.5 * e1 + 0.5 * e2;
        if (frozen) {
            lq = hm + frozen->lq_offset;
            ql = u + frozen->ql_offset;
        } else {
            lq_idx = nearest_codes(hm, E);
            ql_idx = nearest_codes(u, E);
            lq = gather_codes(lq_idx, E);
            ql = gather_codes(ql_idx, E);
        }
        out.lin = (lq - ql).squaredNorm() / Td;
    }
    out.total = out.rec + out.codebook + cfg_.beta * out.commit + out.lin_weight * out.lin;

    if (capture) {
        capture->z1 = z1;
        capture->z2 = z2;
        capture->h1 = h1;
        capture->h2 = h2;
        capture->e1 = e1;
        capture->e2 = e2;
        capture->offset1 = e1 - h1;
        capture->offset2 = e2 - h2;
        capture->has_lin = with_lin;
        if (with_lin) {
            capture->lq_offset = lq - hm;
            capture->ql_offset = ql - u;
        }
    }

    if (!grads) return out;
    if (!out.finite()) {
        throw NumericError("training loss diverged: rec=" + std::to_string(out.rec) +
                           " codebook=" + std::to_string(out.codebook) + " commit=" + std::to_string(out.commit) +
                           " lin=" + std::to_string(out.lin));
    }

    // Reconstruction: straight-through copies dL/d(decoder input) onto h.
    const nn::Matrix dy1 = as_row((y1 - x1.samples) * (1.0 / Td));
    const nn::Matrix dy2 = as_row((y2 - x2.samples) * (1.0 / Td));
    LatentVectors dh1 = decoder_.backward(dy1, dt1).transpose();
    LatentVectors dh2 = decoder_.backward(dy2, dt2).transpose();

    // Commitment reaches the encoder, codebook term reaches the codes.
    dh1 += (cfg_.beta / Sd) * (h1 - e1_sg);
    dh2 += (cfg_.beta / Sd) * (h2 - e2_sg);
    Eigen::MatrixXd& dE = codebook_param_.grad;
    for (Index s = 0; s < S; ++s) {
        dE.row(z1[s]) += (1.0 / Sd) * (e1.row(s) - h1_sg.row(s));
        dE.row(z2[s]) += (1.0 / Sd) * (e2.row(s) - h2_sg.row(s));
    }

    if (with_lin) {
        // LQ passes straight through to the mixture encoding, QL to the two
        // selected codes it was built from.
        const LatentVectors g = (2.0 * out.lin_weight / Td) * (lq - ql);
        encoder_.backward(g.transpose(), etm);
        for (Index s = 0; s < S; ++s) {
            dE.row(z1[s]) -= 0.5 * g.row(s);
            dE.row(z2[s]) -= 0.5 * g.row(s);
        }
    }
    encoder_.backward(dh1.transpose(), et1);
    encoder_.backward(dh2.transpose(), et2);
    return out;
}

void LqVae::visit_parameters(const nn::ParameterVisitor& f) {
    encoder_.visit("encoder", f);
    f("codebook", codebook_param_);
    decoder_.visit("decoder", f);
}

void LqVae::visit_buffers(const nn::ParameterVisitor& f) { encoder_.visit_buffers("encoder", f); }

void LqVae::update_latent_normalization(const std::vector<const LatentVectors*>& latents, double momentum) {
    const nn::Vector shift = encoder_.norm_shift();
    const nn::Vector scale = encoder_.norm_scale();
    // Back to pre-normalization activations: a = h / scale + shift.
    Index rows = 0;
    for (const LatentVectors* h : latents) rows += h->rows();
    if (rows < 2) return;
    Eigen::MatrixXd pre(rows, cfg_.latent_dim);
    Index r = 0;
    for (const LatentVectors* h : latents) {
        for (Index s = 0; s < h->rows(); ++s, ++r) {
            pre.row(r) = h->row(s).cwiseQuotient(scale.transpose()) + shift.transpose();
        }
    }
    const Eigen::RowVectorXd mean = pre.colwise().mean();
    const Eigen::RowVectorXd var = (pre.rowwise() - mean).colwise().squaredNorm() / static_cast<double>(rows);
    const double per_channel = cfg_.latent_rms / std::sqrt(static_cast<double>(cfg_.latent_dim));
    const nn::Vector target_scale = (per_channel / (var.array().sqrt() + 1e-8)).transpose();

    const nn::Vector new_shift = momentum * shift + (1.0 - momentum) * mean.transpose();
    const nn::Vector new_scale = momentum * scale + (1.0 - momentum) * target_scale;
    encoder_.set_normalization(new_shift, new_scale);

    Eigen::MatrixXd& E = codebook_param_.value;
    for (Index k = 0; k < E.rows(); ++k) {
        const Eigen::RowVectorXd pre_k = E.row(k).cwiseQuotient(scale.transpose()) + shift.transpose();
        E.row(k) = (pre_k - new_shift.transpose()).cwiseProduct(new_scale.transpose());
    }
    sync_codebook();
}

void LqVae::save(const std::filesystem::path& dir) const {
    CheckpointWriter w(dir, {{"kind", "lqvae"},
                             {"K", cfg_.codebook_size},
                             {"D", cfg_.latent_dim},
                             {"channels", cfg_.channels},
                             {"downsample_factor", cfg_.downsample_factor},
                             {"latent_rms", cfg_.latent_rms},
                             {"beta", cfg_.beta},
                             {"lin_weight", cfg_.lin_weight},
                             {"seed", cfg_.seed},
                             {"step", steps_trained}});
    auto& self = const_cast<LqVae&>(*this);
    const auto add = [&](const std::string& name, nn::Parameter& p) { w.add(name, p.value); };
    self.visit_parameters(add);
    self.visit_buffers(add);
    w.finish();
}

LqVae LqVae::load(const std::filesystem::path& dir) {
    CheckpointReader r(dir);
    const auto& m = r.manifest();
    if (m.value("kind", std::string()) != "lqvae") throw ValidationError(dir.string() + " is not a codec checkpoint");
    CodecConfig cfg;
    cfg.codebook_size = m.at("K").get<int>();
    cfg.latent_dim = m.at("D").get<int>();
    cfg.channels = m.at("channels").get<int>();
    cfg.downsample_factor = m.at("downsample_factor").get<int>();
    cfg.latent_rms = m.at("latent_rms").get<double>();
    cfg.beta = m.at("beta").get<double>();
    cfg.lin_weight = m.at("lin_weight").get<double>();
    cfg.seed = m.at("seed").get<std::uint64_t>();
    LqVae codec(cfg);
    const auto load = [&](const std::string& name, nn::Parameter& p) { r.load_into(name, p); };
    codec.visit_parameters(load);
    codec.visit_buffers(load);
    codec.sync_codebook();
    codec.steps_trained = m.value("step", std::uint64_t{0});
    return codec;
}

std::vector<nn::Parameter*> LqVae::parameters() {
    std::vector<nn::Parameter*> out;
    visit_parameters([&](const std::string&, nn::Parameter& p) { out.push_back(&p); });
    return out;
}

void LqVae::zero_grad() {
    visit_parameters([](const std::string&, nn::Parameter& p) { p.zero_grad(); });
}

}  // namespace lqsep
