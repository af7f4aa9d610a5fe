#pragma once

// RIFF/WAVE in and out. Reading accepts 16-bit PCM and 32-bit float, any
// channel count; everything else is reported as unsupported.

#include <Eigen/Dense>

#include <filesystem>

#include "lqsep/types.hpp"

namespace lqsep {

struct WavData {
    int sample_rate = 0;
    Eigen::MatrixXd frames;  // frames x channels, samples scaled to [-1, 1]
};

enum class WavFormat { pcm16, float32 };

WavData read_wav(const std::filesystem::path& file);
WavData parse_wav(const std::string& bytes);
void write_wav(const std::filesystem::path& file, const Eigen::MatrixXd& frames, int sample_rate,
               WavFormat format = WavFormat::pcm16);
inline void write_wav(const std::filesystem::path& file, const AudioChunk& chunk,
                      WavFormat format = WavFormat::pcm16) {
    write_wav(file, Eigen::MatrixXd(chunk.samples), chunk.sample_rate, format);
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
Eigen::VectorXd resample(const Eigen::VectorXd& x, int from_rate, int to_rate, int zero_crossings = 16);

/// Mono downmix, resample to `sample_rate`, peak-normalize, and trim to a
/// multiple of `multiple`.
AudioChunk ingest_wav(const std::filesystem::path& file, int sample_rate, int multiple);

}  // namespace lqsep
