#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <filesystem>
#include <string>

namespace mela {

using json = nlohmann::json;

json to_json(const Eigen::VectorXd& v);
json to_json(const Eigen::MatrixXd& m);  // list of rows
Eigen::VectorXd vector_from_json(const json& j);
Eigen::MatrixXd matrix_from_json(const json& j);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

/// Hex SHA-256 of a file's bytes (run manifests).
std::string sha256_file(const std::filesystem::path& path);

}  // namespace mela
