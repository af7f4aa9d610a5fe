#include <doctest.h>

#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>

#include "lqsep/synth.hpp"
#include "lqsep/wav.hpp"
#include "support.hpp"

using namespace lqsep;
using lqsep::test::Gen;

namespace {

std::string slurp(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void le(std::string& s, std::uint32_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Fraction of the energy of x whose DFT bins lie in [lo, hi] Hz.
double energy_fraction_in_band(const Eigen::VectorXd& x, int rate, double lo, double hi) {
    const Index n = x.size();
    double inside = 0.0, total = 0.0;
    for (Index k = 0; k <= n / 2; ++k) {
        std::complex<double> acc = 0.0;
        for (Index t = 0; t < n; ++t) {
            acc += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * t % n) / n);
        }
        const double e = std::norm(acc);
        const double hz = static_cast<double>(k) * rate / n;
        total += e;
        if (hz >= lo && hz <= hi) inside += e;
    }
    return inside / total;
}

}  // namespace

TEST_CASE("WAV round trips") {
    test::TempDir dir("wav");
    Gen g(1);
    const Eigen::MatrixXd frames = g.matrix(50, 2, 0.3).cwiseMax(-1.0).cwiseMin(1.0);
    write_wav(dir.path / "f.wav", frames, 22050, WavFormat::float32);
    const WavData f = read_wav(dir.path / "f.wav");
    CHECK(f.sample_rate == 22050);
    CHECK((f.frames - frames).cwiseAbs().maxCoeff() < 1e-7);
    write_wav(dir.path / "p.wav", frames, 8000, WavFormat::pcm16);
    const WavData p = read_wav(dir.path / "p.wav");
    CHECK(p.frames.cols() == 2);
    CHECK((p.frames - frames).cwiseAbs().maxCoeff() < 1.0 / 32767.0);
}

TEST_CASE("WAV file truncated inside the data chunk") {
    test::TempDir dir("trunc");
    write_wav(dir.path / "full.wav", Eigen::MatrixXd::Constant(100, 1, 0.25), 8000, WavFormat::pcm16);
    const std::string bytes = slurp(dir.path / "full.wav");
    const std::string cut = bytes.substr(0, bytes.size() - 60);
    try {
        parse_wav(cut);
        FAIL("no parse error");
    } catch (const ParseError& e) {
        CHECK(e.offset() == cut.size());
        CHECK(std::string(e.what()).find("offset " + std::to_string(cut.size())) != std::string::npos);
    }
}

TEST_CASE("WAV encodings outside the supported set") {
    std::string b = "RIFF";
    le(b, 36 + 6, 4);
    b += "WAVEfmt ";
    le(b, 16, 4);
    le(b, 1, 2);      // PCM
    le(b, 1, 2);      // mono
    le(b, 8000, 4);
    le(b, 8000 * 3, 4);
    le(b, 3, 2);
    le(b, 24, 2);     // 24-bit
    b += "data";
    le(b, 6, 4);
    b += std::string(6, '\0');
    CHECK_THROWS_AS(parse_wav(b), UnsupportedError);
    CHECK_THROWS_AS(parse_wav("RIFX0000WAVE"), ParseError);
}

TEST_CASE("ingest 44.1 kHz stereo") {
    test::TempDir dir("ingest");
    const Index n = 44100 / 2;
    Eigen::MatrixXd frames(n, 2);
    for (Index t = 0; t < n; ++t) {
        const double v = 0.4 * std::sin(2.0 * std::numbers::pi * 300.0 * static_cast<double>(t) / 44100.0);
        frames(t, 0) = v;
        frames(t, 1) = 0.5 * v;
    }
    write_wav(dir.path / "s.wav", frames, 44100, WavFormat::pcm16);
    const AudioChunk c = ingest_wav(dir.path / "s.wav", 8000, 8);
    CHECK(c.sample_rate == 8000);
    CHECK(c.length() % 8 == 0);
    CHECK(std::abs(c.length() - 4000) < 8);
    CHECK(c.samples.cwiseAbs().maxCoeff() == doctest::Approx(1.0));
    CHECK(energy_fraction_in_band(c.samples.segment(1000, 2000), 8000, 280.0, 320.0) > 0.95);

    write_wav(dir.path / "silent.wav", Eigen::MatrixXd::Zero(4410, 2), 44100, WavFormat::pcm16);
    const AudioChunk s = ingest_wav(dir.path / "silent.wav", 8000, 8);
    CHECK(s.samples.allFinite());
    CHECK(s.samples.isZero(0.0));
}

TEST_CASE("synthetic families") {
    for (const SyntheticSourceSpec& base : {SyntheticSourceSpec::tonal(7), SyntheticSourceSpec::percussive(8)}) {
        SyntheticSourceSpec spec = base;
        spec.chunk_length = 4000;
        CAPTURE(to_string(spec.family));
        for (std::uint64_t i = 0; i < 3; ++i) {
            const AudioChunk c = generate_chunk(spec, i);
            CHECK(c.length() == 4000);
            CHECK(c.samples.cwiseAbs().maxCoeff() <= 1.0);
            CHECK(c.samples == generate_chunk(spec, i).samples);
            // Short percussive decays spread some energy past the band edges.
            const double floor = spec.family == SourceFamily::tonal ? 0.9 : 0.8;
            CHECK(energy_fraction_in_band(c.samples, spec.sample_rate, spec.band_low_hz, spec.band_high_hz) > floor);
        }
        CHECK(generate_chunk(spec, 0).samples != generate_chunk(spec, 1).samples);
    }
    CHECK(SyntheticSourceSpec::tonal().band_low_hz > SyntheticSourceSpec::percussive().band_high_hz);
}
