#pragma once

// Run configuration, synthetic datasets on disk and the subcommands of the
// command-line tool.
//
// Run directory layout:
//   config.json      effective configuration of the last subcommand
//   checkpoints/     codec/, prior1/, prior2/
//   corpora/         source1.lqz, source2.lqz
//   candidates/      per-chunk candidate archives
//   reports/         training logs, selection and SDR reports

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "lqsep/codec_training.hpp"
#include "lqsep/prior_training.hpp"
#include "lqsep/synth.hpp"

namespace lqsep {

inline constexpr const char* kRunRootEnv = "LQSEP_RUN_ROOT";

struct RunConfig {
    int sample_rate = 8000;
    double chunk_seconds = 1.0;

    CodecConfig codec;
    CodecTrainingConfig codec_training;
    PriorTrainingConfig prior;

    double sigma = 0.1;
    int batch = 32;  // B
    double alpha = 0.0;
    std::string sigma_rej_mode = "solved";  // solved | fixed
    double sigma_rej = 0.1;                 // used when fixed
    double min_sigma_rej = 1e-4;

    std::uint64_t data_seed = 7;
    std::uint64_t separation_seed = 3;

    std::string data_dir;
    std::string run_dir = "run";

    RunConfig();

    Index chunk_samples() const;
    void validate() const;
    nlohmann::json to_json() const;
    /// Missing keys keep their defaults; unknown keys are rejected.
    static RunConfig from_json(const nlohmann::json& j);
};

/// Relative run directories resolve under $LQSEP_RUN_ROOT when it is set.
std::filesystem::path resolve_run_dir(const std::string& run_dir);

/// Writes `count` chunks of the stream `spec` (indices first_index...) as
/// 32-bit float WAVs into out_dir with a manifest.json, and returns the
/// manifest.
nlohmann::json gen_data(const SyntheticSourceSpec& spec, std::uint64_t count, const std::filesystem::path& out_dir,
                        std::uint64_t first_index = 0);

/// Chunks listed in a gen_data manifest, in order.
std::vector<AudioChunk> load_chunk_set(const std::filesystem::path& dir);

/// Entry point of the command-line tool. Returns the process exit status.
int run_subcommand(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lqsep
