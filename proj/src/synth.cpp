#include "lqsep/synth.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace lqsep {

std::string to_string(SourceFamily f) { return f == SourceFamily::tonal ? "tonal" : "percussive"; }

SourceFamily parse_family(const std::string& name) {
    if (name == "tonal") return SourceFamily::tonal;
    if (name == "percussive") return SourceFamily::percussive;
    throw ValidationError("unknown source family '" + name + "'");
}

SyntheticSourceSpec SyntheticSourceSpec::tonal(std::uint64_t seed) {
    SyntheticSourceSpec s;
    s.family = SourceFamily::tonal;
    s.seed = seed;
    return s;
}

SyntheticSourceSpec SyntheticSourceSpec::percussive(std::uint64_t seed) {
    SyntheticSourceSpec s;
    s.family = SourceFamily::percussive;
    s.band_low_hz = 40.0;
    s.band_high_hz = 120.0;
    s.decay_min_s = 0.03;
    s.decay_max_s = 0.08;
    s.event_rate_min_hz = 4.0;
    s.event_rate_max_hz = 8.0;
    s.partials_min = 1;
    s.partials_max = 1;
    s.seed = seed;
    return s;
}

void SyntheticSourceSpec::validate() const {
    if (sample_rate <= 0) throw ValidationError("sample_rate must be positive");
    if (chunk_length <= 0) throw ValidationError("chunk_length must be positive");
    if (!(band_low_hz > 0.0 && band_low_hz < band_high_hz && band_high_hz < 0.5 * sample_rate)) {
        throw ValidationError("frequency band must satisfy 0 < low < high < Nyquist");
    }
    if (!(decay_min_s > 0.0 && decay_min_s <= decay_max_s)) throw ValidationError("invalid decay range");
    if (!(event_rate_min_hz > 0.0 && event_rate_min_hz <= event_rate_max_hz)) {
        throw ValidationError("invalid event-rate range");
    }
    if (partials_min < 1 || partials_min > partials_max) throw ValidationError("invalid partial-count range");
    if (!(target_rms > 0.0)) throw ValidationError("target_rms must be positive");
}

namespace {

// Adds one event: a few sinusoidal partials inside the band under an
// attack/exponential-decay envelope, starting at `onset` seconds (may be < 0).
void add_event(Eigen::VectorXd& out, const SyntheticSourceSpec& spec, double onset, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double margin = 0.05 * (spec.band_high_hz - spec.band_low_hz);
    const double f_lo = spec.band_low_hz + margin;
    const double f_hi = spec.band_high_hz - margin;
    const double decay = spec.decay_min_s + (spec.decay_max_s - spec.decay_min_s) * unit(rng);
    const double attack = spec.family == SourceFamily::tonal ? 0.01 : 0.002;
    const double gain = 0.5 + 0.5 * unit(rng);
    const int partials =
        spec.partials_min + static_cast<int>(unit(rng) * (spec.partials_max - spec.partials_min + 1) * 0.999999);

    const double sr = static_cast<double>(spec.sample_rate);
    const Index first = std::max<Index>(0, static_cast<Index>(std::ceil(onset * sr)));
    const Index last = std::min<Index>(out.size(), static_cast<Index>(std::ceil((onset + 12.0 * decay) * sr)));
    for (int p = 0; p < partials; ++p) {
        const double freq = f_lo + (f_hi - f_lo) * unit(rng);
        const double phase = 2.0 * std::numbers::pi * unit(rng);
        const double amp = gain * (0.4 + 0.6 * unit(rng)) / partials;
        for (Index t = first; t < last; ++t) {
            const double age = static_cast<double>(t) / sr - onset;
            const double env = std::min(1.0, age / attack) * std::exp(-age / decay);
            out[t] += amp * env * std::sin(2.0 * std::numbers::pi * freq * age + phase);
        }
    }
}

}  // namespace

AudioChunk generate_chunk(const SyntheticSourceSpec& spec, std::uint64_t index) {
    spec.validate();
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                      static_cast<std::uint32_t>(spec.family)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    AudioChunk chunk;
    chunk.sample_rate = spec.sample_rate;
    chunk.samples = Eigen::VectorXd::Zero(spec.chunk_length);
    const double duration = static_cast<double>(spec.chunk_length) / spec.sample_rate;
    const double rate = spec.event_rate_min_hz + (spec.event_rate_max_hz - spec.event_rate_min_hz) * unit(rng);
    std::exponential_distribution<double> gap(rate);

    // The first event always sounds inside the chunk: tones may have started
    // before it, hits land somewhere in the first inter-event interval.
    double t = spec.family == SourceFamily::tonal
                   ? -spec.decay_min_s * unit(rng)
                   : std::min(duration, 1.0 / rate) * 0.9 * unit(rng);
    while (t < duration) {
        add_event(chunk.samples, spec, t, rng);
        t += gap(rng);
    }

    const double rms = std::sqrt(chunk.samples.squaredNorm() / static_cast<double>(chunk.samples.size()));
    if (rms > 0.0) {
        double scale = spec.target_rms / rms;
        const double peak = chunk.samples.cwiseAbs().maxCoeff() * scale;
        if (peak > 1.0) scale /= peak;
        chunk.samples *= scale;
    }
    return chunk;
}

}  // namespace lqsep
