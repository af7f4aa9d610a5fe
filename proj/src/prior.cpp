#include "lqsep/prior.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>

#include "lqsep/logmath.hpp"
#include "lqsep/ngram.hpp"
#include "lqsep/tensor_io.hpp"
#include "lqsep/transformer.hpp"

namespace lqsep {

std::string to_string(PriorKind k) { return k == PriorKind::transformer ? "transformer" : "ngram"; }

PriorKind parse_prior_kind(const std::string& name) {
    if (name == "transformer") return PriorKind::transformer;
    if (name == "ngram") return PriorKind::ngram;
    throw ValidationError("unknown prior kind '" + name + "'");
}

void LatentCorpus::validate(int context_length) const {
    if (vocabulary_size < 1) throw ValidationError("corpus vocabulary size must be positive");
    for (const auto& z : sequences) {
        check_indices(z, vocabulary_size);
        if (static_cast<Index>(z.size()) > context_length) {
            throw ContextError("corpus sequence of length " + std::to_string(z.size()) +
                               " exceeds context length " + std::to_string(context_length));
        }
    }
}

namespace {

constexpr std::array<char, 4> kCorpusMagic = {'L', 'Q', 'Z', 'C'};
constexpr std::uint32_t kCorpusVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

class ByteReader {
public:
    explicit ByteReader(std::string data) : data_(std::move(data)) {}

    std::size_t offset() const { return pos_; }
    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n) throw ParseError(std::string("truncated corpus file: missing ") + what, pos_);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        const auto* b = reinterpret_cast<const unsigned char*>(data_.data() + pos_);
        pos_ += 4;
        return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        const auto* b = reinterpret_cast<const unsigned char*>(data_.data() + pos_);
        pos_ += 2;
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

private:
    std::string data_;
    std::size_t pos_ = 0;
};

}  // namespace

void write_corpus(const std::filesystem::path& file, const LatentCorpus& corpus) {
    if (corpus.vocabulary_size < 1 || corpus.vocabulary_size > 65536) {
        throw ValidationError("corpus vocabulary size must be in [1, 65536]");
    }
    const std::size_t len = corpus.sequences.empty() ? 0 : corpus.sequences.front().size();
    for (const auto& z : corpus.sequences) {
        if (z.size() != len) throw DimensionError("corpus sequences must share one length");
        check_indices(z, corpus.vocabulary_size);
    }
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream os(file, std::ios::binary);
    if (!os) throw IoError("cannot write " + file.string());
    os.write(kCorpusMagic.data(), 4);
    put_u32(os, kCorpusVersion);
    put_u32(os, static_cast<std::uint32_t>(corpus.sequences.size()));
    put_u32(os, static_cast<std::uint32_t>(corpus.vocabulary_size));
    put_u32(os, static_cast<std::uint32_t>(len));
    put_u32(os, static_cast<std::uint32_t>(corpus.source_label.size()));
    os.write(corpus.source_label.data(), static_cast<std::streamsize>(corpus.source_label.size()));
    std::vector<unsigned char> buf(len * 2);
    for (const auto& z : corpus.sequences) {
        for (std::size_t i = 0; i < len; ++i) {
            buf[2 * i] = static_cast<unsigned char>(z[i]);
            buf[2 * i + 1] = static_cast<unsigned char>(z[i] >> 8);
        }
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
    if (!os) throw IoError("failed writing " + file.string());
}

LatentCorpus read_corpus(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("cannot open " + file.string());
    ByteReader r(std::string(std::istreambuf_iterator<char>(is), {}));
    const std::string magic = r.bytes(4, "magic");
    if (std::memcmp(magic.data(), kCorpusMagic.data(), 4) != 0) throw ParseError("not a latent corpus file", 0);
    const std::size_t version_at = r.offset();
    if (r.u32("version") != kCorpusVersion) throw ParseError("unsupported corpus version", version_at);
    const std::uint32_t count = r.u32("count");
    LatentCorpus corpus;
    corpus.vocabulary_size = static_cast<int>(r.u32("K"));
    const std::uint32_t len = r.u32("S");
    corpus.source_label = r.bytes(r.u32("label length"), "label");
    r.need(static_cast<std::size_t>(count) * len * 2, "indices");
    corpus.sequences.resize(count);
    for (auto& z : corpus.sequences) {
        z.resize(len);
        for (std::uint32_t i = 0; i < len; ++i) {
            const std::size_t at = r.offset();
            z[i] = r.u16("index");
            if (z[i] >= corpus.vocabulary_size) throw ParseError("corpus index out of range", at);
        }
    }
    return corpus;
}

void check_context(const PriorModel& model, Index length) {
    if (length > model.context_length()) {
        throw ContextError("sequence of length " + std::to_string(length) + " exceeds context length " +
                           std::to_string(model.context_length()));
    }
}

Eigen::VectorXd PriorModel::next_logits(const LatentIndices& prefix) const {
    return next_logits(std::vector<LatentIndices>{prefix}).col(0);
}

Eigen::MatrixXd PriorModel::next_logits(const std::vector<LatentIndices>& prefixes) const {
    std::map<std::size_t, std::vector<std::size_t>> by_length;
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
        if (static_cast<Index>(prefixes[i].size()) >= context_length()) {
            throw ContextError("prefix of length " + std::to_string(prefixes[i].size()) +
                               " leaves no room in context length " + std::to_string(context_length()));
        }
        check_indices(prefixes[i], vocabulary_size());
        by_length[prefixes[i].size()].push_back(i);
    }
    Eigen::MatrixXd out(vocabulary_size(), static_cast<Index>(prefixes.size()));
    for (const auto& [length, members] : by_length) {
        auto session = start(static_cast<Index>(members.size()));
        std::vector<int> tokens(members.size());
        for (std::size_t t = 0; t < length; ++t) {
            for (std::size_t j = 0; j < members.size(); ++j) tokens[j] = prefixes[members[j]][t];
            session->advance(tokens);
        }
        for (std::size_t j = 0; j < members.size(); ++j) {
            out.col(static_cast<Index>(members[j])) = session->logits().col(static_cast<Index>(j));
        }
    }
    return out;
}

double sequence_log_prob(const PriorModel& model, const LatentIndices& z) {
    check_context(model, static_cast<Index>(z.size()));
    check_indices(z, model.vocabulary_size());
    auto session = model.start(1);
    double acc = 0.0;
    for (int token : z) {
        acc += log_softmax(session->logits().col(0))[token];
        session->advance(std::span<const int>(&token, 1));
    }
    return acc;
}

double cross_entropy(const PriorModel& model, const std::vector<LatentIndices>& sequences) {
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& z : sequences) {
        nll -= sequence_log_prob(model, z);
        tokens += z.size();
    }
    if (tokens == 0) throw ValidationError("cross-entropy over an empty set");
    return nll / static_cast<double>(tokens);
}

LatentIndices ancestral_sample(const PriorModel& model, Index length, std::mt19937_64& rng) {
    check_context(model, length);
    auto session = model.start(1);
    LatentIndices z;
    z.reserve(static_cast<std::size_t>(length));
    for (Index s = 0; s < length; ++s) {
        const int token = static_cast<int>(sample_log_categorical(log_softmax(session->logits().col(0)), rng));
        z.push_back(token);
        session->advance(std::span<const int>(&token, 1));
    }
    return z;
}

std::unique_ptr<PriorModel> load_prior(const std::filesystem::path& dir) {
    CheckpointReader reader(dir);
    const PriorKind kind = parse_prior_kind(reader.manifest().at("kind").get<std::string>());
    if (kind == PriorKind::ngram) return std::make_unique<NgramPrior>(NgramPrior::load(dir));
    return std::make_unique<TransformerPrior>(TransformerPrior::load(dir));
}

}  // namespace lqsep
