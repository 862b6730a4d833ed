#include "sitt/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "sitt/error.hpp"

namespace sitt {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

struct Line {
    std::string where;
    std::string key;
    std::string value;
};

[[noreturn]] void fail(const Line& line, const std::string& msg) {
    throw ConfigError(line.where + ": " + line.key + ": " + msg);
}

double as_double(const Line& line) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(line.value, &used);
    } catch (const std::exception&) {
        fail(line, "expected a number, got '" + line.value + "'");
    }
    if (used != line.value.size() || !std::isfinite(v)) fail(line, "expected a number, got '" + line.value + "'");
    return v;
}

double as_positive(const Line& line) {
    const double v = as_double(line);
    if (!(v > 0.0)) fail(line, "must be > 0");
    return v;
}

double as_nonnegative(const Line& line) {
    const double v = as_double(line);
    if (!(v >= 0.0)) fail(line, "must be >= 0");
    return v;
}

int as_int(const Line& line, int lo) {
    const double v = as_double(line);
    if (v != std::floor(v) || v < lo || v > 2e9) {
        fail(line, "expected an integer >= " + std::to_string(lo) + ", got '" + line.value + "'");
    }
    return static_cast<int>(v);
}

bool as_bool(const Line& line) {
    if (line.value == "true") return true;
    if (line.value == "false") return false;
    fail(line, "expected true or false");
}

template <typename E>
E as_enum(const Line& line, const std::vector<std::pair<std::string, E>>& choices) {
    std::string names;
    for (const auto& [name, value] : choices) {
        if (line.value == name) return value;
        names += (names.empty() ? "" : ", ") + name;
    }
    fail(line, "expected one of " + names + ", got '" + line.value + "'");
}

LinkSpec as_link(const Line& line) {
    try {
        LinkSpec spec = parse_link_spec(line.value);
        spec.validate();
        return spec;
    } catch (const ConfigError& e) {
        fail(line, e.what());
    }
}

using Setter = std::function<void(RunConfig&, const Line&)>;

const std::map<std::string, std::map<std::string, Setter>>& key_table() {
    static const std::map<std::string, std::map<std::string, Setter>> table = {
        {"task",
         {
             {"d", [](RunConfig& c, const Line& l) { c.pipeline.d = as_int(l, 1); }},
             {"r", [](RunConfig& c, const Line& l) { c.pipeline.r = as_int(l, 1); }},
             {"link", [](RunConfig& c, const Line& l) {
                  const double bound = c.pipeline.link_spec.coeff_bound;
                  c.pipeline.link_spec = as_link(l);
                  c.pipeline.link_spec.coeff_bound = bound;
              }},
             {"link_bound", [](RunConfig& c, const Line& l) { c.pipeline.link_spec.coeff_bound = as_positive(l); }},
             {"tau", [](RunConfig& c, const Line& l) { c.pipeline.tau = as_nonnegative(l); }},
         }},
        {"pretrain",
         {
             {"source", [](RunConfig& c, const Line& l) {
                  c.pipeline.gamma_source =
                      as_enum<GammaSource>(l, {{"oracle", GammaSource::Oracle}, {"pretrain", GammaSource::Pretrain}});
              }},
             {"kappa_scale", [](RunConfig& c, const Line& l) {
                  c.pipeline.kappa_scale = l.value == "auto" ? 0.0 : as_positive(l);
              }},
             {"rho", [](RunConfig& c, const Line& l) { c.pipeline.rho = as_positive(l); }},
             {"m", [](RunConfig& c, const Line& l) { c.pipeline.m = as_int(l, 1); }},
             {"prompts", [](RunConfig& c, const Line& l) { c.pipeline.pretrain.prompts = as_int(l, 1); }},
             {"context_length", [](RunConfig& c, const Line& l) { c.pipeline.pretrain.context_length = as_int(l, 1); }},
             {"eta", [](RunConfig& c, const Line& l) { c.pipeline.pretrain.eta = as_nonnegative(l); }},
             {"lambda", [](RunConfig& c, const Line& l) { c.pipeline.pretrain.lambda = as_nonnegative(l); }},
             {"alpha", [](RunConfig& c, const Line& l) { c.pipeline.pretrain.alpha = as_double(l); }},
             {"force", [](RunConfig& c, const Line& l) { c.pipeline.pretrain.force = as_bool(l); }},
         }},
        {"ttt",
         {
             {"n1", [](RunConfig& c, const Line& l) { c.pipeline.ttt.groups.n1 = as_int(l, 0); }},
             {"n2", [](RunConfig& c, const Line& l) { c.pipeline.ttt.groups.n2 = as_int(l, 0); }},
             {"n3", [](RunConfig& c, const Line& l) {
                  c.pipeline.ttt.groups.n3 = l.value == "auto" ? -1 : as_int(l, 0);
              }},
             {"n4", [](RunConfig& c, const Line& l) { c.pipeline.ttt.groups.n4 = as_int(l, 0); }},
             {"n_new", [](RunConfig& c, const Line& l) { c.pipeline.ttt.n_new = as_int(l, 0); }},
             {"eta1", [](RunConfig& c, const Line& l) { c.pipeline.ttt.eta1 = as_nonnegative(l); }},
             {"eta2", [](RunConfig& c, const Line& l) { c.pipeline.ttt.eta2 = as_nonnegative(l); }},
             {"lambda1", [](RunConfig& c, const Line& l) { c.pipeline.ttt.lambda1 = as_nonnegative(l); }},
             {"lambda2", [](RunConfig& c, const Line& l) { c.pipeline.ttt.lambda2 = as_positive(l); }},
             {"alpha1", [](RunConfig& c, const Line& l) { c.pipeline.ttt.alpha1 = as_double(l); }},
             {"alpha2", [](RunConfig& c, const Line& l) { c.pipeline.ttt.alpha2 = as_double(l); }},
             {"scaling", [](RunConfig& c, const Line& l) {
                  c.pipeline.ttt.scaling = as_enum<ScalingMode>(
                      l, {{"explicit", ScalingMode::Explicit}, {"theorem", ScalingMode::TheoremOrders}});
              }},
             {"scale_constant", [](RunConfig& c, const Line& l) { c.pipeline.ttt.scale_constant = as_positive(l); }},
             {"epsilon", [](RunConfig& c, const Line& l) {
                  if (l.value == "auto") {
                      c.pipeline.ttt.epsilon = 0.0;
                      return;
                  }
                  const double e = as_double(l);
                  if (!(e > 0.0 && e < 1.0)) fail(l, "must lie in (0, 1) or be auto");
                  c.pipeline.ttt.epsilon = e;
              }},
             {"group2_role", [](RunConfig& c, const Line& l) {
                  c.pipeline.ttt.group2_role = as_enum<Group2Role>(
                      l, {{"unused", Group2Role::Unused}, {"stream-prefix", Group2Role::StreamPrefix}});
              }},
             {"u_start", [](RunConfig& c, const Line& l) {
                  c.pipeline.ttt.u_start = as_enum<UStart>(l, {{"stage1", UStart::StageOne},
                                                               {"fixed-alignment", UStart::FixedAlignment},
                                                               {"beta", UStart::Beta}});
              }},
             {"init_alignment", [](RunConfig& c, const Line& l) {
                  const double a = as_double(l);
                  if (!(std::abs(a) <= 1.0)) fail(l, "must lie in [-1, 1]");
                  c.pipeline.ttt.init_alignment = a;
              }},
             {"record_every", [](RunConfig& c, const Line& l) { c.pipeline.ttt.record_every = as_int(l, 1); }},
         }},
        {"eval",
         {
             {"samples", [](RunConfig& c, const Line& l) { c.pipeline.eval_samples = as_int(l, 100); }},
             {"seeds", [](RunConfig& c, const Line& l) { c.eval.seeds = as_int(l, 1); }},
             {"test_link", [](RunConfig& c, const Line& l) { c.eval.test_link = as_link(l); }},
             {"icl_prompts", [](RunConfig& c, const Line& l) { c.eval.icl.prompts = as_int(l, 1); }},
             {"icl_queries", [](RunConfig& c, const Line& l) { c.eval.icl.queries = as_int(l, 1); }},
             {"metric", [](RunConfig& c, const Line& l) {
                  c.eval.metric = as_enum<SweepMetric>(
                      l, {{"risk", SweepMetric::Risk}, {"misalignment", SweepMetric::Misalignment}});
              }},
         }},
    };
    return table;
}

}  // namespace

RunConfig parse_config(std::string_view text, const std::string& source) {
    RunConfig cfg;
    cfg.pipeline.link_spec = parse_link_spec("1:1");
    const auto& table = key_table();

    std::string section;
    std::set<std::string> seen;
    bool r_given = false;
    std::istringstream in{std::string(text)};
    int lineno = 0;
    for (std::string raw; std::getline(in, raw);) {
        ++lineno;
        const std::string where = source + ":" + std::to_string(lineno);
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (table.count(section) == 0) throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
        Line entry{where, trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
        if (entry.key.empty()) throw ConfigError(where + ": empty key");
        if (section.empty()) throw ConfigError(where + ": key '" + entry.key + "' appears before any [section]");
        if (entry.value.empty()) fail(entry, "empty value");
        const auto& keys = table.at(section);
        const auto it = keys.find(entry.key);
        if (it == keys.end()) throw ConfigError(where + ": unknown key '" + entry.key + "' in [" + section + "]");
        const std::string full = section + "." + entry.key;
        if (!seen.insert(full).second) fail(entry, "duplicate key");
        it->second(cfg, entry);
        cfg.snapshot[full] = entry.value;
        if (full == "task.r") r_given = true;
    }
    if (seen.count("task.d") == 0) throw ConfigError(source + ": missing required key 'd' in [task]");
    if (!r_given) cfg.pipeline.r = cfg.pipeline.d;
    cfg.pipeline.pretrain.d = cfg.pipeline.d;
    cfg.pipeline.pretrain.m = cfg.pipeline.m;
    cfg.pipeline.pretrain.rho = cfg.pipeline.rho;
    try {
        cfg.pipeline.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

}  // namespace sitt
