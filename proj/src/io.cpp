#include "sitt/io.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <sstream>

#include <json.hpp>

#include "sitt/error.hpp"

namespace sitt {

using nlohmann::json;

std::string format_double(double value) {
    if (std::isnan(value)) return "nan";
    if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
    : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw ConfigError("cannot open " + path.string() + " for writing");
    for (const auto& h : header) field(h);
    end_row();
}

CsvWriter& CsvWriter::field(const std::string& text) {
    if (row_started_) out_ << ',';
    out_ << csv_escape(text);
    row_started_ = true;
    return *this;
}

CsvWriter& CsvWriter::field(double value) { return field(format_double(value)); }

CsvWriter& CsvWriter::field(long long value) { return field(std::to_string(value)); }

void CsvWriter::end_row() {
    out_ << '\n';
    row_started_ = false;
}

void CsvWriter::close() {
    out_.close();
    if (!out_) throw NumericError("failed writing " + path_.string());
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::vector<std::vector<std::string>> rows;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> row;
        std::stringstream ss(line);
        for (std::string item; std::getline(ss, item, ',');) row.push_back(item);
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

double parse_number(const std::string& text, const std::filesystem::path& path) {
    std::size_t used = 0;
    double value = 0.0;
    try {
        value = std::stod(text, &used);
    } catch (const std::exception&) {
        throw ConfigError(path.string() + ": bad number '" + text + "'");
    }
    if (used != text.size()) throw ConfigError(path.string() + ": bad number '" + text + "'");
    return value;
}

long parse_index(const std::string& text, const std::filesystem::path& path) {
    const double v = parse_number(text, path);
    if (v < 0 || v != std::floor(v) || v > 1e7) throw ConfigError(path.string() + ": bad index '" + text + "'");
    return static_cast<long>(v);
}

}  // namespace

void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
    CsvWriter w(path, {"i", "j", "value"});
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            w.field(static_cast<long long>(i)).field(static_cast<long long>(j)).field(m(i, j));
            w.end_row();
        }
    }
    w.close();
}

Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path) {
    const auto rows = read_csv(path);
    if (rows.empty() || rows[0] != std::vector<std::string>{"i", "j", "value"}) {
        throw ConfigError(path.string() + ": expected header i,j,value");
    }
    long nr = 0;
    long nc = 0;
    for (std::size_t k = 1; k < rows.size(); ++k) {
        if (rows[k].size() != 3) throw ConfigError(path.string() + ": expected 3 fields per row");
        nr = std::max(nr, parse_index(rows[k][0], path) + 1);
        nc = std::max(nc, parse_index(rows[k][1], path) + 1);
    }
    if (static_cast<long>(rows.size() - 1) != nr * nc) throw ConfigError(path.string() + ": incomplete matrix");
    Eigen::MatrixXd m(nr, nc);
    for (std::size_t k = 1; k < rows.size(); ++k) {
        m(parse_index(rows[k][0], path), parse_index(rows[k][1], path)) = parse_number(rows[k][2], path);
    }
    return m;
}

void write_vector_csv(const std::filesystem::path& path, const Eigen::VectorXd& v) {
    CsvWriter w(path, {"index", "value"});
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        w.field(static_cast<long long>(i)).field(v[i]);
        w.end_row();
    }
    w.close();
}

Eigen::VectorXd read_vector_csv(const std::filesystem::path& path) {
    const auto rows = read_csv(path);
    if (rows.empty() || rows[0] != std::vector<std::string>{"index", "value"}) {
        throw ConfigError(path.string() + ": expected header index,value");
    }
    Eigen::VectorXd v(static_cast<Eigen::Index>(rows.size() - 1));
    for (std::size_t k = 1; k < rows.size(); ++k) {
        if (rows[k].size() != 2) throw ConfigError(path.string() + ": expected 2 fields per row");
        const long idx = parse_index(rows[k][0], path);
        if (idx != static_cast<long>(k - 1)) throw ConfigError(path.string() + ": indices out of order");
        v[idx] = parse_number(rows[k][1], path);
    }
    return v;
}

namespace {

json coeffs_json(const LinkFunction& link) {
    json c = json::object();
    for (const auto& [deg, value] : link.coeffs()) c[std::to_string(deg)] = value;
    return c;
}

LinkFunction coeffs_from_json(const json& c) {
    if (!c.is_object()) throw ConfigError("link JSON: 'coeffs' must be an object");
    std::map<int, double> coeffs;
    for (const auto& [key, value] : c.items()) {
        int deg = 0;
        const auto res = std::from_chars(key.data(), key.data() + key.size(), deg);
        if (res.ec != std::errc() || res.ptr != key.data() + key.size()) {
            throw ConfigError("link JSON: bad degree '" + key + "'");
        }
        if (!value.is_number()) throw ConfigError("link JSON: coefficient of degree " + key + " is not a number");
        coeffs[deg] = value.get<double>();
    }
    return LinkFunction(coeffs);
}

json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::string link_to_json(const LinkFunction& link) {
    json j;
    j["coeffs"] = coeffs_json(link);
    return j.dump(2);
}

LinkFunction link_from_json(const std::string& text) {
    const json j = parse_json(text, "link JSON");
    if (!j.contains("coeffs")) throw ConfigError("link JSON: missing 'coeffs'");
    return coeffs_from_json(j["coeffs"]);
}

Task read_task_file(const std::filesystem::path& path) {
    const json j = parse_json(slurp(path), path.string());
    if (!j.contains("beta") || !j["beta"].is_array()) throw ConfigError(path.string() + ": missing 'beta' array");
    if (!j.contains("coeffs")) throw ConfigError(path.string() + ": missing 'coeffs'");
    Task task{Eigen::VectorXd(static_cast<Eigen::Index>(j["beta"].size())), coeffs_from_json(j["coeffs"]),
              j.value("tau", 0.0)};
    for (std::size_t i = 0; i < j["beta"].size(); ++i) {
        if (!j["beta"][i].is_number()) throw ConfigError(path.string() + ": beta entries must be numbers");
        task.beta[static_cast<Eigen::Index>(i)] = j["beta"][i].get<double>();
    }
    if (!(task.tau >= 0.0)) throw ConfigError(path.string() + ": tau must be >= 0");
    return task;
}

void write_task_file(const std::filesystem::path& path, const Task& task) {
    json j;
    j["beta"] = std::vector<double>(task.beta.data(), task.beta.data() + task.beta.size());
    j["coeffs"] = coeffs_json(task.link);
    j["tau"] = task.tau;
    write_file_atomic(path, j.dump(2) + "\n");
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw ConfigError("cannot open " + tmp.string() + " for writing");
        out << text;
        out.close();
        if (!out) throw NumericError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string manifest_to_json(const RunManifest& manifest) {
    json j;
    j["command"] = manifest.command;
    j["config"] = manifest.config;
    j["master_seed"] = manifest.master_seed;
    j["version"] = manifest.version;
    j["started"] = manifest.started;
    j["finished"] = manifest.finished;
    j["outputs"] = manifest.outputs;
    return j.dump(2) + "\n";
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace sitt
