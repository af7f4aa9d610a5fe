#pragma once

// Seeded generators for the two synthetic source families used at desk
// scale: sustained mid-band tones and short, low kick-like hits.

#include <cstdint>
#include <string>

#include "lqsep/types.hpp"

namespace lqsep {

enum class SourceFamily { tonal, percussive };

std::string to_string(SourceFamily f);
SourceFamily parse_family(const std::string& name);

struct SyntheticSourceSpec {
    SourceFamily family = SourceFamily::tonal;
    double band_low_hz = 200.0;
    double band_high_hz = 600.0;
    double decay_min_s = 0.3;
    double decay_max_s = 1.0;
    double event_rate_min_hz = 1.5;
    double event_rate_max_hz = 3.0;
    int partials_min = 1;
    int partials_max = 2;
    double target_rms = 0.25;
    int sample_rate = 8000;
    Index chunk_length = 8000;
    std::uint64_t seed = 0;

    static SyntheticSourceSpec tonal(std::uint64_t seed = 0);
    static SyntheticSourceSpec percussive(std::uint64_t seed = 0);

    void validate() const;
};

/// Chunk number `index` of the stream described by `spec`. Depends only on
/// (spec, index). Scaled to the target RMS, then limited to peak 1.
AudioChunk generate_chunk(const SyntheticSourceSpec& spec, std::uint64_t index);

}  // namespace lqsep
