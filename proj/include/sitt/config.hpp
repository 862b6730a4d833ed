#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "sitt/eval.hpp"
#include "sitt/training.hpp"

namespace sitt {

/// Settings read from the [eval] section.
struct EvalSettings {
    int seeds = 5;
    /// Test-time link spec for the comparison command; unset means no shift.
    std::optional<LinkSpec> test_link;
    IclHeadConfig icl;
    SweepMetric metric = SweepMetric::Risk;
};

struct RunConfig {
    PipelineConfig pipeline;
    EvalSettings eval;
    /// Normalized "section.key" -> value, for manifests.
    std::map<std::string, std::string> snapshot;
};

/// Parses the key = value grammar (see README). Unknown sections or keys,
/// duplicates, malformed values and a missing [task] d are ConfigErrors
/// naming the line.
RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);

}  // namespace sitt
