#include "lqsep/wav.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "lqsep/error.hpp"

namespace lqsep {

namespace {

std::uint32_t le32(const std::string& b, std::size_t at) {
    const auto* p = reinterpret_cast<const unsigned char*>(b.data() + at);
    return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t le16(const std::string& b, std::size_t at) {
    const auto* p = reinterpret_cast<const unsigned char*>(b.data() + at);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xfffe;

}  // namespace

WavData parse_wav(const std::string& b) {
    if (b.size() < 12) throw ParseError("file too short for a RIFF header", b.size());
    if (b.compare(0, 4, "RIFF") != 0) throw ParseError("missing RIFF tag", 0);
    if (b.compare(8, 4, "WAVE") != 0) throw ParseError("missing WAVE tag", 8);

    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    std::size_t pos = 12;
    while (pos < b.size()) {
        if (b.size() - pos < 8) throw ParseError("truncated chunk header", pos);
        const std::string id = b.substr(pos, 4);
        const std::uint32_t size = le32(b, pos + 4);
        const std::size_t body = pos + 8;
        if (id == "fmt ") {
            if (size < 16 || b.size() - body < 16) throw ParseError("truncated fmt chunk", body);
            format = le16(b, body);
            channels = le16(b, body + 2);
            rate = le32(b, body + 4);
            bits = le16(b, body + 14);
            if (format == kFormatExtensible) {
                if (size < 40 || b.size() - body < 26) throw ParseError("truncated extensible fmt chunk", body);
                format = le16(b, body + 24);
            }
            if (channels == 0) throw ParseError("fmt chunk declares zero channels", body + 2);
            if (rate == 0) throw ParseError("fmt chunk declares a zero sample rate", body + 4);
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw ParseError("data chunk before fmt chunk", pos);
            if (b.size() - body < size) {
                throw ParseError("data chunk truncated: declares " + std::to_string(size) + " bytes, file ends",
                                 b.size());
            }
            const bool pcm16 = format == kFormatPcm && bits == 16;
            const bool f32 = format == kFormatFloat && bits == 32;
            if (!pcm16 && !f32) {
                throw UnsupportedError("unsupported WAV encoding: format " + std::to_string(format) + ", " +
                                       std::to_string(bits) + " bits");
            }
            const std::size_t width = bits / 8;
            const std::size_t frame_bytes = width * channels;
            const Index n = static_cast<Index>(size / frame_bytes);
            WavData out;
            out.sample_rate = static_cast<int>(rate);
            out.frames.resize(n, channels);
            for (Index i = 0; i < n; ++i) {
                for (Index c = 0; c < channels; ++c) {
                    const std::size_t at = body + static_cast<std::size_t>(i) * frame_bytes + c * width;
                    if (pcm16) {
                        out.frames(i, c) = static_cast<std::int16_t>(le16(b, at)) / 32768.0;
                    } else {
                        const std::uint32_t u = le32(b, at);
                        float f;
                        std::memcpy(&f, &u, 4);
                        out.frames(i, c) = f;
                    }
                }
            }
            if (!out.frames.allFinite()) throw ParseError("non-finite float sample in data chunk", body);
            return out;
        }
        pos = body + size + (size & 1);
    }
    throw ParseError(have_fmt ? "no data chunk" : "no fmt chunk", b.size());
}

WavData read_wav(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("cannot open " + file.string());
    try {
        return parse_wav(std::string(std::istreambuf_iterator<char>(is), {}));
    } catch (const ParseError& e) {
        throw ParseError(file.string() + ": " + e.what(), e.offset());
    }
}

void write_wav(const std::filesystem::path& file, const Eigen::MatrixXd& frames, int sample_rate,
               WavFormat format) {
    if (sample_rate <= 0) throw ValidationError("sample rate must be positive");
    if (frames.cols() < 1) throw DimensionError("WAV output needs at least one channel");
    const std::uint16_t channels = static_cast<std::uint16_t>(frames.cols());
    const std::uint16_t bits = format == WavFormat::pcm16 ? 16 : 32;
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(frames.rows() * channels * (bits / 8));
    std::string out;
    out.reserve(44 + data_bytes);
    out += "RIFF";
    put32(out, 36 + data_bytes);
    out += "WAVEfmt ";
    put32(out, 16);
    put16(out, format == WavFormat::pcm16 ? kFormatPcm : kFormatFloat);
    put16(out, channels);
    put32(out, static_cast<std::uint32_t>(sample_rate));
    put32(out, static_cast<std::uint32_t>(sample_rate) * channels * (bits / 8));
    put16(out, static_cast<std::uint16_t>(channels * (bits / 8)));
    put16(out, bits);
    out += "data";
    put32(out, data_bytes);
    for (Index i = 0; i < frames.rows(); ++i) {
        for (Index c = 0; c < frames.cols(); ++c) {
            const double v = std::clamp(frames(i, c), -1.0, 1.0);
            if (format == WavFormat::pcm16) {
                put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(v * 32767.0))));
            } else {
                const float f = static_cast<float>(v);
                std::uint32_t u;
                std::memcpy(&u, &f, 4);
                put32(out, u);
            }
        }
    }
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream os(file, std::ios::binary);
    if (!os) throw IoError("cannot write " + file.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw IoError("failed writing " + file.string());
}

Eigen::VectorXd resample(const Eigen::VectorXd& x, int from_rate, int to_rate, int zero_crossings) {
    if (from_rate <= 0 || to_rate <= 0) throw ValidationError("sample rates must be positive");
    if (from_rate == to_rate) return x;
    const double ratio = static_cast<double>(to_rate) / from_rate;
    const double cutoff = std::min(1.0, ratio);  // relative to the input Nyquist
    const double half_width = zero_crossings / cutoff;
    const Index n_out = static_cast<Index>(std::floor(static_cast<double>(x.size()) * ratio));
    Eigen::VectorXd y(n_out);
    for (Index n = 0; n < n_out; ++n) {
        const double t = static_cast<double>(n) / ratio;
        const Index lo = std::max<Index>(0, static_cast<Index>(std::ceil(t - half_width)));
        const Index hi = std::min<Index>(x.size() - 1, static_cast<Index>(std::floor(t + half_width)));
        double acc = 0.0;
        for (Index k = lo; k <= hi; ++k) {
            const double d = static_cast<double>(k) - t;
            const double arg = cutoff * d;
            const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
            const double w_pos = (d + half_width) / (2.0 * half_width);  // window position in [0, 1]
            const double window = 0.42 - 0.5 * std::cos(2.0 * std::numbers::pi * w_pos) +
                                  0.08 * std::cos(4.0 * std::numbers::pi * w_pos);
            acc += x[k] * cutoff * sinc * window;
        }
        y[n] = acc;
    }
    return y;
}

AudioChunk ingest_wav(const std::filesystem::path& file, int sample_rate, int multiple) {
    if (multiple < 1) throw ValidationError("trim multiple must be positive");
    const WavData wav = read_wav(file);
    const Eigen::VectorXd mono = wav.frames.rowwise().mean();
    Eigen::VectorXd x = resample(mono, wav.sample_rate, sample_rate);
    const double peak = x.size() > 0 ? x.cwiseAbs().maxCoeff() : 0.0;
    if (peak > 0.0) x /= peak;
    const Index keep = x.size() - x.size() % multiple;
    if (keep == 0) throw DimensionError(file.string() + " is shorter than one latent step after resampling");
    return {x.head(keep), sample_rate};
}

}  // namespace lqsep
