#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sitt/hermite.hpp"
#include "sitt/rng.hpp"

namespace sitt {

struct CheckResult {
    std::string suite;
    std::string name;
    double measured = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

/// Suite names accepted by run_verify_suite.
const std::vector<std::string>& verify_suite_names();

/// Runs one suite ("hermite", "exponents", "gradients", "stein", "ridge") or
/// "all". Deterministic for a fixed seed. Throws ConfigError on unknown names.
std::vector<CheckResult> run_verify_suite(const std::string& suite, std::uint64_t seed);

/// Random link with degrees in [1, max_degree]; even-only with probability 1/2.
LinkFunction random_link(Rng& rng, int max_degree);

}  // namespace sitt
