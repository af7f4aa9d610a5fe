#pragma once

// Checkpoint directories: manifest.json plus one raw little-endian float32
// file per tensor, named by parameter path. Matrices are stored row-major.

#include <Eigen/Dense>

#include <filesystem>
#include <string>

#include <json.hpp>

#include "lqsep/nn.hpp"

namespace lqsep {

inline constexpr int kCheckpointFormatVersion = 1;

void write_tensor(const std::filesystem::path& file, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_tensor(const std::filesystem::path& file, Eigen::Index rows, Eigen::Index cols);

/// Writes every visited tensor and a manifest holding `meta` plus a
/// "tensors" index.
class CheckpointWriter {
public:
    CheckpointWriter(std::filesystem::path dir, nlohmann::json meta);

    void add(const std::string& name, const Eigen::MatrixXd& value);
    void finish();

private:
    std::filesystem::path dir_;
    nlohmann::json manifest_;
};

class CheckpointReader {
public:
    explicit CheckpointReader(std::filesystem::path dir);

    const nlohmann::json& manifest() const { return manifest_; }
    bool has(const std::string& name) const;
    Eigen::MatrixXd get(const std::string& name) const;
    void load_into(const std::string& name, nn::Parameter& p) const;

private:
    std::filesystem::path dir_;
    nlohmann::json manifest_;
};

nlohmann::json read_json(const std::filesystem::path& file);
void write_json(const std::filesystem::path& file, const nlohmann::json& j);

}  // namespace lqsep
