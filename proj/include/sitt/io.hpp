#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sitt/hermite.hpp"
#include "sitt/model.hpp"
#include "sitt/taskgen.hpp"

namespace sitt {

/// Shortest decimal that round-trips; "nan", "inf", "-inf" otherwise.
std::string format_double(double value);

/// RFC 4180 quoting: fields containing , " CR or LF are wrapped in quotes.
std::string csv_escape(const std::string& field);

/// Row-at-a-time CSV writer with LF endings. Throws ConfigError if the file
/// cannot be opened.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);
    CsvWriter& field(const std::string& text);
    CsvWriter& field(double value);
    CsvWriter& field(long long value);
    CsvWriter& field(int value) { return field(static_cast<long long>(value)); }
    void end_row();
    void close();

private:
    std::ofstream out_;
    std::filesystem::path path_;
    bool row_started_ = false;
};

/// Parsed CSV without quoting support beyond plain fields; first row is the header.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

// Checkpoints: matrices as (i,j,value) rows, vectors as (index,value) rows.
void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path);
void write_vector_csv(const std::filesystem::path& path, const Eigen::VectorXd& v);
Eigen::VectorXd read_vector_csv(const std::filesystem::path& path);

/// {"coeffs": {"3": 2.449..., ...}} with raw c_i = E[sigma He_i].
std::string link_to_json(const LinkFunction& link);
LinkFunction link_from_json(const std::string& text);

/// Task file: {"beta": [...], "coeffs": {...}, "tau": 0.1}.
Task read_task_file(const std::filesystem::path& path);
void write_task_file(const std::filesystem::path& path, const Task& task);

/// Writes `text` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;
    std::uint64_t master_seed = 0;
    std::string version;
    std::string started;
    std::string finished;
    std::vector<std::string> outputs;
};

std::string manifest_to_json(const RunManifest& manifest);

/// Current UTC time as ISO 8601 with seconds.
std::string utc_timestamp();

inline constexpr const char* kArtifactVersion = "0.1.0";

}  // namespace sitt
