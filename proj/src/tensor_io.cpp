#include "lqsep/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "lqsep/error.hpp"

namespace lqsep {

namespace fs = std::filesystem;

namespace {

std::uint32_t to_little(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
}

std::string tensor_file_name(const std::string& name) { return name + ".f32"; }

}  // namespace

void write_tensor(const fs::path& file, const Eigen::MatrixXd& m) {
    std::vector<std::uint32_t> raw(static_cast<std::size_t>(m.size()));
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const float f = static_cast<float>(m(r, c));
            raw[i++] = to_little(std::bit_cast<std::uint32_t>(f));
        }
    }
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + file.string() + " for writing");
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (!out) throw IoError("failed writing " + file.string());
}

Eigen::MatrixXd read_tensor(const fs::path& file, Eigen::Index rows, Eigen::Index cols) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open " + file.string());
    std::vector<std::uint32_t> raw(static_cast<std::size_t>(rows * cols));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (in.gcount() != static_cast<std::streamsize>(raw.size() * 4)) {
        throw ParseError("tensor file " + file.string() + " is shorter than its manifest shape",
                         static_cast<std::size_t>(in.gcount()));
    }
    Eigen::MatrixXd m(rows, cols);
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = std::bit_cast<float>(to_little(raw[i++]));
    }
    return m;
}

nlohmann::json read_json(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open " + file.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("invalid JSON in " + file.string() + ": " + e.what(), e.byte);
    }
}

void write_json(const fs::path& file, const nlohmann::json& j) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw IoError("cannot open " + file.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + file.string());
}

CheckpointWriter::CheckpointWriter(fs::path dir, nlohmann::json meta) : dir_(std::move(dir)), manifest_(std::move(meta)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir_.string() + ": " + ec.message());
    manifest_["format_version"] = kCheckpointFormatVersion;
    manifest_["tensors"] = nlohmann::json::array();
}

void CheckpointWriter::add(const std::string& name, const Eigen::MatrixXd& value) {
    const std::string file = tensor_file_name(name);
    write_tensor(dir_ / file, value);
    manifest_["tensors"].push_back({{"name", name}, {"shape", {value.rows(), value.cols()}}, {"file", file}});
}

void CheckpointWriter::finish() { write_json(dir_ / "manifest.json", manifest_); }

CheckpointReader::CheckpointReader(fs::path dir) : dir_(std::move(dir)) {
    if (!fs::exists(dir_ / "manifest.json")) throw IoError("no checkpoint manifest in " + dir_.string());
    manifest_ = read_json(dir_ / "manifest.json");
    if (manifest_.value("format_version", 0) != kCheckpointFormatVersion) {
        throw UnsupportedError("unsupported checkpoint format version in " + dir_.string());
    }
}

bool CheckpointReader::has(const std::string& name) const {
    for (const auto& t : manifest_["tensors"]) {
        if (t["name"] == name) return true;
    }
    return false;
}

Eigen::MatrixXd CheckpointReader::get(const std::string& name) const {
    for (const auto& t : manifest_["tensors"]) {
        if (t["name"] == name) {
            return read_tensor(dir_ / t["file"].get<std::string>(), t["shape"][0].get<Eigen::Index>(),
                               t["shape"][1].get<Eigen::Index>());
        }
    }
    throw IoError("checkpoint " + dir_.string() + " has no tensor '" + name + "'");
}

void CheckpointReader::load_into(const std::string& name, nn::Parameter& p) const {
    Eigen::MatrixXd m = get(name);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
        throw DimensionError("tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                             std::to_string(m.cols()) + ", expected " + std::to_string(p.value.rows()) + "x" +
                             std::to_string(p.value.cols()));
    }
    p.value = std::move(m);
    p.grad = Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols());
}

}  // namespace lqsep
