#include "lqsep/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "lqsep/evaluation.hpp"
#include "lqsep/selector.hpp"
#include "lqsep/separator.hpp"
#include "lqsep/tensor_io.hpp"
#include "lqsep/wav.hpp"

namespace lqsep {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- RunConfig -------------------------------------------------------------

RunConfig::RunConfig() {
    codec.latent_dim = 4;
    codec.latent_rms = 0.3;
    codec.seed = 1;
    codec_training.seed = 1;
    codec_training.mixture_weight = 0.5;
    codec_training.warmup_steps = 500;
    prior.seed = 2;
    prior.transformer.layers = 2;
    prior.transformer.width = 64;
    prior.epochs = 40;
    prior.learning_rate = 3e-3;
}

Index RunConfig::chunk_samples() const {
    return static_cast<Index>(std::llround(chunk_seconds * sample_rate));
}

void RunConfig::validate() const {
    if (sample_rate <= 0) throw ValidationError("sample_rate must be positive");
    if (!(chunk_seconds > 0.0)) throw ValidationError("chunk_seconds must be positive");
    codec.validate();
    if (codec.codebook_size < 2) throw ValidationError("K must be >= 2");
    if (chunk_samples() % codec.downsample_factor != 0) {
        throw ValidationError("chunk length " + std::to_string(chunk_samples()) +
                              " samples is not divisible by the downsample factor");
    }
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
    if (batch < 1) throw ValidationError("B must be >= 1");
    if (sigma_rej_mode != "solved" && sigma_rej_mode != "fixed") {
        throw ValidationError("sigma_rej_mode must be 'solved' or 'fixed'");
    }
    if (sigma_rej_mode == "fixed" && !(sigma_rej > 0.0)) throw ValidationError("fixed sigma_rej must be positive");
    if (codec_training.window % codec.downsample_factor != 0) {
        throw ValidationError("codec training window must be a multiple of the downsample factor");
    }
}

json RunConfig::to_json() const {
    const auto& ct = codec_training;
    return {
        {"sample_rate", sample_rate},
        {"chunk_seconds", chunk_seconds},
        {"codec",
         {{"K", codec.codebook_size},
          {"D", codec.latent_dim},
          {"channels", codec.channels},
          {"downsample_factor", codec.downsample_factor},
          {"latent_rms", codec.latent_rms},
          {"beta", codec.beta},
          {"lin_weight", codec.lin_weight},
          {"seed", codec.seed}}},
        {"codec_training",
         {{"steps", ct.steps},
          {"batch", ct.batch},
          {"window", ct.window},
          {"learning_rate", ct.learning_rate},
          {"final_lr_fraction", ct.final_lr_fraction},
          {"warmup_steps", ct.warmup_steps},
          {"clip_norm", ct.clip_norm},
          {"use_lin", ct.use_lin},
          {"mixture_weight", ct.mixture_weight},
          {"dead_code_steps", ct.dead_code_steps},
          {"normalization_momentum", ct.normalization_momentum},
          {"log_every", ct.log_every},
          {"seed", ct.seed}}},
        {"prior",
         {{"kind", to_string(prior.kind)},
          {"ngram_order", prior.ngram_order},
          {"layers", prior.transformer.layers},
          {"heads", prior.transformer.heads},
          {"width", prior.transformer.width},
          {"mlp_ratio", prior.transformer.mlp_ratio},
          {"epochs", prior.epochs},
          {"batch", prior.batch_size},
          {"learning_rate", prior.learning_rate},
          {"final_lr_fraction", prior.final_lr_fraction},
          {"clip_norm", prior.clip_norm},
          {"heldout_fraction", prior.heldout_fraction},
          {"seed", prior.seed}}},
        {"separation",
         {{"sigma", sigma},
          {"B", batch},
          {"alpha", alpha},
          {"sigma_rej_mode", sigma_rej_mode},
          {"sigma_rej", sigma_rej},
          {"min_sigma_rej", min_sigma_rej},
          {"seed", separation_seed}}},
        {"data", {{"dir", data_dir}, {"seed", data_seed}}},
        {"run_dir", run_dir},
    };
}

namespace {

// Rejects keys of `j` that do not occur in `reference`, recursively.
void check_keys(const json& j, const json& reference, const std::string& path) {
    if (!j.is_object()) return;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string p = path + "/" + it.key();
        if (!reference.contains(it.key())) throw ValidationError("unknown configuration key " + p);
        if (reference[it.key()].is_object()) {
            if (!it.value().is_object()) throw ValidationError("configuration key " + p + " must be an object");
            check_keys(it.value(), reference[it.key()], p);
        }
    }
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    const json defaults = c.to_json();
    check_keys(j, defaults, "");
    json merged = defaults;
    merged.merge_patch(j);
    try {
        read_key(merged, "sample_rate", c.sample_rate);
        read_key(merged, "chunk_seconds", c.chunk_seconds);
        const json& cj = merged["codec"];
        read_key(cj, "K", c.codec.codebook_size);
        read_key(cj, "D", c.codec.latent_dim);
        read_key(cj, "channels", c.codec.channels);
        read_key(cj, "downsample_factor", c.codec.downsample_factor);
        read_key(cj, "latent_rms", c.codec.latent_rms);
        read_key(cj, "beta", c.codec.beta);
        read_key(cj, "lin_weight", c.codec.lin_weight);
        read_key(cj, "seed", c.codec.seed);
        const json& tj = merged["codec_training"];
        auto& ct = c.codec_training;
        read_key(tj, "steps", ct.steps);
        read_key(tj, "batch", ct.batch);
        read_key(tj, "window", ct.window);
        read_key(tj, "learning_rate", ct.learning_rate);
        read_key(tj, "final_lr_fraction", ct.final_lr_fraction);
        read_key(tj, "warmup_steps", ct.warmup_steps);
        read_key(tj, "clip_norm", ct.clip_norm);
        read_key(tj, "use_lin", ct.use_lin);
        read_key(tj, "mixture_weight", ct.mixture_weight);
        read_key(tj, "dead_code_steps", ct.dead_code_steps);
        read_key(tj, "normalization_momentum", ct.normalization_momentum);
        read_key(tj, "log_every", ct.log_every);
        read_key(tj, "seed", ct.seed);
        const json& pj = merged["prior"];
        c.prior.kind = parse_prior_kind(pj.at("kind").get<std::string>());
        read_key(pj, "ngram_order", c.prior.ngram_order);
        read_key(pj, "layers", c.prior.transformer.layers);
        read_key(pj, "heads", c.prior.transformer.heads);
        read_key(pj, "width", c.prior.transformer.width);
        read_key(pj, "mlp_ratio", c.prior.transformer.mlp_ratio);
        read_key(pj, "epochs", c.prior.epochs);
        read_key(pj, "batch", c.prior.batch_size);
        read_key(pj, "learning_rate", c.prior.learning_rate);
        read_key(pj, "final_lr_fraction", c.prior.final_lr_fraction);
        read_key(pj, "clip_norm", c.prior.clip_norm);
        read_key(pj, "heldout_fraction", c.prior.heldout_fraction);
        read_key(pj, "seed", c.prior.seed);
        const json& sj = merged["separation"];
        read_key(sj, "sigma", c.sigma);
        read_key(sj, "B", c.batch);
        read_key(sj, "alpha", c.alpha);
        read_key(sj, "sigma_rej_mode", c.sigma_rej_mode);
        read_key(sj, "sigma_rej", c.sigma_rej);
        read_key(sj, "min_sigma_rej", c.min_sigma_rej);
        read_key(sj, "seed", c.separation_seed);
        read_key(merged["data"], "dir", c.data_dir);
        read_key(merged["data"], "seed", c.data_seed);
        read_key(merged, "run_dir", c.run_dir);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad configuration value: ") + e.what());
    }
    c.validate();
    return c;
}

fs::path resolve_run_dir(const std::string& run_dir) {
    const fs::path p(run_dir);
    if (p.is_absolute()) return p;
    if (const char* root = std::getenv(kRunRootEnv); root && *root) return fs::path(root) / p;
    return p;
}

// ---- datasets --------------------------------------------------------------

nlohmann::json gen_data(const SyntheticSourceSpec& spec, std::uint64_t count, const fs::path& out_dir,
                        std::uint64_t first_index) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    json files = json::array();
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t index = first_index + i;
        std::ostringstream name;
        name << to_string(spec.family) << '_' << std::setw(5) << std::setfill('0') << index << ".wav";
        write_wav(out_dir / name.str(), generate_chunk(spec, index), WavFormat::float32);
        files.push_back(name.str());
    }
    json manifest = {{"family", to_string(spec.family)},
                     {"seed", spec.seed},
                     {"sample_rate", spec.sample_rate},
                     {"chunk_length", spec.chunk_length},
                     {"band_hz", {spec.band_low_hz, spec.band_high_hz}},
                     {"decay_s", {spec.decay_min_s, spec.decay_max_s}},
                     {"event_rate_hz", {spec.event_rate_min_hz, spec.event_rate_max_hz}},
                     {"partials", {spec.partials_min, spec.partials_max}},
                     {"target_rms", spec.target_rms},
                     {"first_index", first_index},
                     {"count", count},
                     {"files", files}};
    write_json(out_dir / "manifest.json", manifest);
    return manifest;
}

std::vector<AudioChunk> load_chunk_set(const fs::path& dir) {
    const json manifest = read_json(dir / "manifest.json");
    std::vector<AudioChunk> out;
    for (const auto& f : manifest.at("files")) {
        const WavData wav = read_wav(dir / f.get<std::string>());
        out.push_back({wav.frames.rowwise().mean(), wav.sample_rate});
    }
    return out;
}

// ---- command line ----------------------------------------------------------

namespace {

struct FlagSpec {
    const char* flag;
    const char* pointer;
    const char* help;
};

const FlagSpec kConfigFlags[] = {
    {"--sample-rate", "/sample_rate", "sample rate in Hz"},
    {"--chunk-seconds", "/chunk_seconds", "chunk length in seconds"},
    {"--K", "/codec/K", "codebook size"},
    {"--D", "/codec/D", "latent dimension"},
    {"--channels", "/codec/channels", "codec convolution channels"},
    {"--downsample", "/codec/downsample_factor", "codec downsampling factor T/S"},
    {"--latent-rms", "/codec/latent_rms", "target RMS of encoder outputs"},
    {"--beta", "/codec/beta", "commitment weight"},
    {"--lin-weight", "/codec/lin_weight", "linearization loss weight"},
    {"--codec-seed", "/codec/seed", "codec initialization seed"},
    {"--codec-steps", "/codec_training/steps", "codec optimizer steps"},
    {"--codec-batch", "/codec_training/batch", "pairs per codec step"},
    {"--codec-window", "/codec_training/window", "codec training crop length"},
    {"--codec-lr", "/codec_training/learning_rate", "codec learning rate"},
    {"--use-lin", "/codec_training/use_lin", "train with the linearization loss (true/false)"},
    {"--mixture-weight", "/codec_training/mixture_weight", "weight of the VQ-VAE terms on mixtures"},
    {"--prior-kind", "/prior/kind", "transformer or ngram"},
    {"--ngram-order", "/prior/ngram_order", "n-gram order"},
    {"--prior-layers", "/prior/layers", "transformer layers"},
    {"--prior-heads", "/prior/heads", "transformer heads"},
    {"--prior-width", "/prior/width", "transformer width"},
    {"--prior-epochs", "/prior/epochs", "prior training epochs"},
    {"--prior-batch", "/prior/batch", "sequences per prior step"},
    {"--prior-lr", "/prior/learning_rate", "prior learning rate"},
    {"--prior-seed", "/prior/seed", "prior seed"},
    {"--sigma", "/separation/sigma", "latent likelihood scale"},
    {"--batch", "/separation/B", "candidates per mixture"},
    {"--alpha", "/separation/alpha", "weight of the time-domain likelihood in selection"},
    {"--sigma-rej-mode", "/separation/sigma_rej_mode", "solved or fixed"},
    {"--sigma-rej", "/separation/sigma_rej", "sigma_rej when fixed"},
    {"--separation-seed", "/separation/seed", "separation seed"},
    {"--data", "/data/dir", "dataset directory written by gen-data"},
    {"--data-seed", "/data/seed", "synthetic data seed"},
    {"--run-dir", "/run_dir", "run directory"},
};

json parse_flag_value(const std::string& flag, const std::string& text, const json& like) {
    try {
        std::size_t used = 0;
        if (like.is_boolean()) {
            if (text == "true" || text == "1") return true;
            if (text == "false" || text == "0") return false;
            throw std::invalid_argument("not a boolean");
        }
        if (like.is_number_unsigned()) {
            if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
            const auto v = std::stoull(text, &used);
            if (used != text.size()) throw std::invalid_argument("trailing characters");
            return v;
        }
        if (like.is_number_integer()) {
            const auto v = std::stoll(text, &used);
            if (used != text.size()) throw std::invalid_argument("trailing characters");
            return v;
        }
        if (like.is_number_float()) {
            const double v = std::stod(text, &used);
            if (used != text.size()) throw std::invalid_argument("trailing characters");
            return v;
        }
        return text;
    } catch (const std::exception&) {
        throw UsageError("invalid value '" + text + "' for " + flag);
    }
}

std::vector<double> parse_alpha_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw UsageError("invalid alpha '" + item + "'");
        }
        if (!(out.back() >= 0.0 && out.back() <= 1.0)) throw UsageError("alphas must lie in [0, 1]");
    }
    if (out.empty()) throw UsageError("--alphas needs at least one value");
    return out;
}

std::string alpha_tag(double alpha) {
    std::ostringstream os;
    os << alpha;
    return os.str();
}

class Context {
public:
    Context(std::ostream& out, std::ostream& err) : out(out), err(err) {}

    std::ostream& out;
    std::ostream& err;
    RunConfig cfg;
    fs::path run;

    fs::path checkpoint(const std::string& name) const { return run / "checkpoints" / name; }

    void require_checkpoint(const std::string& name) const {
        if (!fs::exists(checkpoint(name) / "manifest.json")) {
            throw UsageError("missing checkpoint " + checkpoint(name).string() + "; run the training step first");
        }
    }

    fs::path data_dir(const char* command) const {
        if (cfg.data_dir.empty()) throw UsageError(std::string(command) + " needs --data (dataset directory)");
        const fs::path d(cfg.data_dir);
        if (!fs::exists(d / "dataset.json")) throw UsageError("no dataset at " + d.string() + "; run gen-data");
        return d;
    }

    void save_config() const {
        fs::create_directories(run);
        write_json(run / "config.json", cfg.to_json());
    }
};

std::vector<AudioChunk> load_split(const fs::path& data, const std::string& family, const std::string& split,
                                   const RunConfig& cfg) {
    std::vector<AudioChunk> chunks = load_chunk_set(data / family / split);
    for (const auto& c : chunks) {
        if (c.sample_rate != cfg.sample_rate) {
            throw ValidationError("dataset sample rate " + std::to_string(c.sample_rate) +
                                  " differs from the configured " + std::to_string(cfg.sample_rate));
        }
    }
    return chunks;
}

void cmd_gen_data(Context& ctx, const fs::path& out, std::uint64_t count, std::uint64_t eval_count) {
    const RunConfig& cfg = ctx.cfg;
    json families = json::object();
    for (SourceFamily family : {SourceFamily::tonal, SourceFamily::percussive}) {
        SyntheticSourceSpec spec = family == SourceFamily::tonal ? SyntheticSourceSpec::tonal(cfg.data_seed)
                                                                 : SyntheticSourceSpec::percussive(cfg.data_seed + 1);
        spec.sample_rate = cfg.sample_rate;
        spec.chunk_length = cfg.chunk_samples();
        const std::string name = to_string(family);
        gen_data(spec, count, out / name / "train", 0);
        gen_data(spec, eval_count, out / name / "eval", count);
        families[name] = {{"train", count}, {"eval", eval_count}, {"seed", spec.seed}};
    }
    write_json(out / "dataset.json", {{"sample_rate", cfg.sample_rate},
                                      {"chunk_length", cfg.chunk_samples()},
                                      {"families", families},
                                      {"source1", "tonal"},
                                      {"source2", "percussive"}});
    ctx.out << "wrote " << count << " training and " << eval_count << " evaluation chunks per family to " << out.string()
            << "\n";
}

void cmd_train_codec(Context& ctx) {
    const fs::path data = ctx.data_dir("train-codec");
    CodecTrainingData td;
    std::vector<AudioChunk> s1 = load_split(data, "tonal", "train", ctx.cfg);
    std::vector<AudioChunk> s2 = load_split(data, "percussive", "train", ctx.cfg);
    if (s1.size() < 2 || s2.size() < 2) throw ValidationError("train-codec needs at least two chunks per family");
    // The last tenth of each pool is held out for monitoring.
    const auto split = [](std::vector<AudioChunk>& pool, std::vector<AudioChunk>& train,
                          std::vector<AudioChunk>& held) {
        const std::size_t n_held = std::max<std::size_t>(1, pool.size() / 10);
        train.assign(pool.begin(), pool.end() - static_cast<std::ptrdiff_t>(n_held));
        held.assign(pool.end() - static_cast<std::ptrdiff_t>(n_held), pool.end());
    };
    split(s1, td.source1, td.heldout1);
    split(s2, td.source2, td.heldout2);
    const std::size_t n_held = std::min(td.heldout1.size(), td.heldout2.size());
    td.heldout1.resize(n_held);
    td.heldout2.resize(n_held);

    json log = json::array();
    const CodecTrainingResult result =
        train_codec(td, ctx.cfg.codec, ctx.cfg.codec_training, [&](const CodecTrainingRecord& rec) {
            int used = 0;
            for (int u : rec.code_usage) used += u > 0;
            ctx.out << "step " << rec.step << "  train total " << rec.train.total << "  held-out rec "
                    << rec.heldout.rec << " lin " << rec.heldout.lin << "  codes used " << used << "\n";
            const auto breakdown = [](const LossBreakdown& l) {
                return json{{"rec", l.rec},       {"codebook", l.codebook}, {"commit", l.commit},
                            {"lin", l.lin},       {"beta", l.beta},         {"lin_weight", l.lin_weight},
                            {"total", l.total}};
            };
            log.push_back({{"step", rec.step},
                           {"train", breakdown(rec.train)},
                           {"heldout", breakdown(rec.heldout)},
                           {"code_usage", rec.code_usage}});
        });
    result.codec.save(ctx.checkpoint("codec"));
    write_tensor(ctx.run / "checkpoints" / "codebook.f32", result.codec.codebook().codes);
    const double additivity = mean_additivity_error(result.codec, td.heldout1, td.heldout2);
    write_json(ctx.run / "reports" / "codec_training.json",
               {{"history", log}, {"aborted", result.aborted}, {"heldout_additivity", additivity}});
    if (result.aborted) {
        throw NumericError("codec training diverged; last good parameters saved to " +
                           ctx.checkpoint("codec").string());
    }
    ctx.out << "held-out additivity error " << additivity << "\n";
}

void cmd_encode_corpus(Context& ctx) {
    const fs::path data = ctx.data_dir("encode-corpus");
    ctx.require_checkpoint("codec");
    const LqVae codec = LqVae::load(ctx.checkpoint("codec"));
    const std::pair<const char*, const char*> sources[] = {{"tonal", "source1"}, {"percussive", "source2"}};
    for (const auto& [family, label] : sources) {
        LatentCorpus corpus;
        corpus.vocabulary_size = codec.config().codebook_size;
        corpus.source_label = family;
        for (const AudioChunk& c : load_split(data, family, "train", ctx.cfg)) {
            corpus.sequences.push_back(codec.encode_indices(c));
        }
        write_corpus(ctx.run / "corpora" / (std::string(label) + ".lqz"), corpus);
        ctx.out << label << " (" << family << "): " << corpus.sequences.size() << " sequences\n";
    }
}

void cmd_train_prior(Context& ctx, const std::string& which) {
    std::vector<int> sources;
    if (which == "1" || which == "both") sources.push_back(1);
    if (which == "2" || which == "both") sources.push_back(2);
    if (sources.empty()) throw UsageError("--source must be 1, 2 or both");
    for (int s : sources) {
        const std::string label = "source" + std::to_string(s);
        const fs::path corpus_file = ctx.run / "corpora" / (label + ".lqz");
        if (!fs::exists(corpus_file)) throw UsageError("missing corpus " + corpus_file.string() + "; run encode-corpus");
        PriorTrainingConfig pc = ctx.cfg.prior;
        pc.seed = ctx.cfg.prior.seed + static_cast<std::uint64_t>(s);
        const PriorTrainingResult r = train_prior(read_corpus(corpus_file), pc);
        json hist = json::array();
        for (const auto& h : r.history) {
            ctx.out << label << " epoch " << h.epoch << "  train " << h.train_loss << "  held-out " << h.heldout_loss
                    << " nats (uniform " << r.uniform_baseline << ")\n";
            hist.push_back({{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"heldout_loss", h.heldout_loss}});
        }
        r.model->save(ctx.checkpoint("prior" + std::to_string(s)));
        write_json(ctx.run / "reports" / ("prior" + std::to_string(s) + "_training.json"),
                   {{"history", hist}, {"uniform_baseline", r.uniform_baseline}, {"aborted", r.aborted}});
        if (r.aborted) throw NumericError(label + " prior training diverged; last good model saved");
    }
}

struct Models {
    LqVae codec;
    std::unique_ptr<PriorModel> p1, p2;
    SumCodeTable table;
};

Models load_models(const Context& ctx) {
    for (const char* name : {"codec", "prior1", "prior2"}) ctx.require_checkpoint(name);
    Models m{LqVae::load(ctx.checkpoint("codec")), load_prior(ctx.checkpoint("prior1")),
             load_prior(ctx.checkpoint("prior2")), {}};
    m.table = SumCodeTable(m.codec.codebook());
    return m;
}

SelectionConfig selection_config(const RunConfig& cfg, double alpha) {
    SelectionConfig sc{alpha, cfg.min_sigma_rej, std::nullopt};
    if (cfg.sigma_rej_mode == "fixed") sc.fixed_sigma_rej = cfg.sigma_rej;
    return sc;
}

void cmd_separate(Context& ctx, const fs::path& mixture, std::string name) {
    if (!fs::exists(mixture)) throw UsageError("mixture file " + mixture.string() + " does not exist");
    const Models models = load_models(ctx);
    const AudioChunk m = ingest_wav(mixture, ctx.cfg.sample_rate, models.codec.config().downsample_factor);
    if (name.empty()) name = mixture.stem().string();
    const SeparationConfig sc{ctx.cfg.sigma, ctx.cfg.batch, ctx.cfg.separation_seed};
    const CandidateBatch batch = separate(m, models.codec, models.table, *models.p1, *models.p2, sc);
    write_candidate_archive(ctx.run / "candidates", name, batch, sc.sigma, models.codec.config().codebook_size,
                            {{"mixture", mixture.string()}, {"seed", sc.seed}});
    const SeparationResult res = select(batch, m, models.codec, selection_config(ctx.cfg, ctx.cfg.alpha));
    const fs::path out_dir = ctx.run / "separations" / name;
    write_wav(out_dir / "stem1.wav", res.stem1);
    write_wav(out_dir / "stem2.wav", res.stem2);
    write_json(out_dir / "selection.json",
               selection_report(res.scores, (out_dir / "stem1.wav").string(), (out_dir / "stem2.wav").string()));
    for (const auto& w : res.scores.warnings) ctx.err << "warning: " << w << "\n";
    ctx.out << "selected candidate " << res.scores.selected << " of " << batch.size() << "; stems in "
            << out_dir.string() << "\n";
}

void cmd_evaluate(Context& ctx, const std::vector<double>& alphas, int limit) {
    const fs::path data = ctx.data_dir("evaluate");
    const Models models = load_models(ctx);
    const std::vector<AudioChunk> e1 = load_split(data, "tonal", "eval", ctx.cfg);
    const std::vector<AudioChunk> e2 = load_split(data, "percussive", "eval", ctx.cfg);
    std::size_t n = std::min(e1.size(), e2.size());
    if (limit > 0) n = std::min(n, static_cast<std::size_t>(limit));
    std::vector<EvalPair> pairs;
    for (std::size_t i = 0; i < n; ++i) {
        std::ostringstream id;
        id << "chunk" << std::setw(4) << std::setfill('0') << i;
        pairs.push_back(EvalPair::make(e1[i], e2[i], id.str()));
    }
    EvalConfig ec;
    ec.separation = {ctx.cfg.sigma, ctx.cfg.batch, ctx.cfg.separation_seed};
    ec.alphas = alphas;
    ec.min_sigma_rej = ctx.cfg.min_sigma_rej;
    if (ctx.cfg.sigma_rej_mode == "fixed") ec.fixed_sigma_rej = ctx.cfg.sigma_rej;
    const fs::path cand_dir = ctx.run / "candidates";
    const int K = models.codec.config().codebook_size;
    const auto reports = evaluate_run(
        pairs, models.codec, models.table, *models.p1, *models.p2, ec,
        [&](Index done, Index total, const ChunkResult& c) {
            ctx.out << "[" << done << "/" << total << "] " << c.chunk_id;
            if (c.error) ctx.out << " error: " << *c.error;
            ctx.out << "\n";
        },
        [&](const EvalPair& pair, const CandidateBatch& batch, std::uint64_t seed) {
            write_candidate_archive(cand_dir, pair.chunk_id, batch, ec.separation.sigma, K, {{"seed", seed}});
        });
    json summary = json::array();
    for (const SDRReport& r : reports) {
        const std::string base = "sdr_alpha_" + alpha_tag(r.alpha);
        write_json(ctx.run / "reports" / (base + ".json"), r.to_json());
        std::ofstream csv(ctx.run / "reports" / (base + ".csv"));
        csv << r.to_csv();
        if (!csv) throw IoError("failed writing " + base + ".csv");
        ctx.out << "alpha " << r.alpha;
        json row{{"alpha", r.alpha}};
        for (EvalMode mode : {EvalMode::rejection, EvalMode::oracle_best, EvalMode::mixture}) {
            for (int s = 0; s < 2; ++s) {
                const double mean = r.aggregate(mode, s).mean;
                row[to_string(mode)]["source" + std::to_string(s + 1)] = mean;
                ctx.out << "  " << to_string(mode) << "/" << s + 1 << " " << std::fixed << std::setprecision(2)
                        << mean << std::defaultfloat;
            }
        }
        ctx.out << "\n";
        summary.push_back(row);
    }
    if (reports.size() > 1) write_json(ctx.run / "reports" / "ablation.json", summary);
}

}  // namespace

int run_subcommand(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Unsupervised two-source separation in a discrete latent domain", "lqsep"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all help");

    std::string config_path;
    std::map<std::string, std::string> flag_values;
    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON configuration file");
        for (const FlagSpec& f : kConfigFlags) sub->add_option(f.flag, flag_values[f.flag], f.help);
    };

    std::string gen_out;
    std::uint64_t gen_count = 64, gen_eval_count = 100;
    auto* gen = app.add_subcommand("gen-data", "Write the synthetic tonal and percussive datasets");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", gen_count, "training chunks per family");
    gen->add_option("--eval-count", gen_eval_count, "evaluation chunks per family");
    add_common(gen);

    auto* train_codec_cmd = app.add_subcommand("train-codec", "Train the codec on the synthetic sources");
    add_common(train_codec_cmd);
    auto* encode_cmd = app.add_subcommand("encode-corpus", "Encode training chunks into latent corpora");
    add_common(encode_cmd);

    std::string prior_source = "both";
    auto* prior_cmd = app.add_subcommand("train-prior", "Train the per-source priors");
    prior_cmd->add_option("--source", prior_source, "1, 2 or both");
    add_common(prior_cmd);

    std::string mixture_path, sep_name;
    auto* sep_cmd = app.add_subcommand("separate", "Separate one mixture WAV");
    sep_cmd->add_option("--mixture", mixture_path, "mixture WAV file")->required();
    sep_cmd->add_option("--name", sep_name, "output name (defaults to the file stem)");
    add_common(sep_cmd);

    int eval_limit = 0;
    auto* eval_cmd = app.add_subcommand("evaluate", "Separate evaluation mixtures and report SDR");
    eval_cmd->add_option("--limit", eval_limit, "evaluate at most this many mixtures");
    add_common(eval_cmd);

    std::string alphas_text = "0,0.5,1";
    int ablate_limit = 0;
    auto* ablate_cmd = app.add_subcommand("ablate-alpha", "Evaluate several alpha values on shared candidates");
    ablate_cmd->add_option("--alphas", alphas_text, "comma-separated alpha values");
    ablate_cmd->add_option("--limit", ablate_limit, "evaluate at most this many mixtures");
    add_common(ablate_cmd);

    auto* config_cmd = app.add_subcommand("config", "Print the effective configuration");
    add_common(config_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    Context ctx(out, err);
    try {
        // Precedence: flag > config file > default.
        json effective = RunConfig().to_json();
        const std::string run_dir_flag = sub->count("--run-dir") > 0 ? flag_values["--run-dir"] : "";
        fs::path file = config_path;
        if (file.empty() && sub != gen) {
            const fs::path candidate =
                resolve_run_dir(run_dir_flag.empty() ? RunConfig().run_dir : run_dir_flag) / "config.json";
            if (fs::exists(candidate)) file = candidate;
        }
        if (!file.empty()) {
            if (!fs::exists(file)) throw UsageError("config file " + file.string() + " does not exist");
            const json from_file = read_json(file);
            check_keys(from_file, effective, "");
            effective.merge_patch(from_file);
        }
        for (const FlagSpec& f : kConfigFlags) {
            if (sub->count(f.flag) == 0) continue;
            const json::json_pointer ptr(f.pointer);
            effective[ptr] = parse_flag_value(f.flag, flag_values[f.flag], effective[ptr]);
        }
        ctx.cfg = RunConfig::from_json(effective);
        ctx.run = resolve_run_dir(ctx.cfg.run_dir);

        if (sub == gen) {
            cmd_gen_data(ctx, gen_out, gen_count, gen_eval_count);
            return 0;
        }
        if (sub == config_cmd) {
            out << ctx.cfg.to_json().dump(2) << "\n";
            return 0;
        }
        if (sub == train_codec_cmd) {
            cmd_train_codec(ctx);
        } else if (sub == encode_cmd) {
            cmd_encode_corpus(ctx);
        } else if (sub == prior_cmd) {
            cmd_train_prior(ctx, prior_source);
        } else if (sub == sep_cmd) {
            cmd_separate(ctx, mixture_path, sep_name);
        } else if (sub == eval_cmd) {
            cmd_evaluate(ctx, {ctx.cfg.alpha}, eval_limit);
        } else if (sub == ablate_cmd) {
            cmd_evaluate(ctx, parse_alpha_list(alphas_text), ablate_limit);
        }
        ctx.save_config();
        return 0;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace lqsep
