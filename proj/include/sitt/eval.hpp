#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sitt/rng.hpp"
#include "sitt/taskgen.hpp"
#include "sitt/training.hpp"

namespace sitt {

struct RiskEstimate {
    double mean_abs_error = 0.0;
    /// Sample standard deviation over sqrt(samples).
    double std_error = 0.0;
    int samples = 0;
    double tau = 0.0;
};

using Predictor = std::function<double(const Eigen::VectorXd&)>;

/// Mean of |f(x) - y| over M fresh draws from the task. M >= 100.
RiskEstimate estimate_risk(const Predictor& predictor, const Task& task, int samples, Rng& rng);

/// <beta, u> / ||u||; throws on zero u.
double alignment(const Eigen::VectorXd& u, const Eigen::VectorXd& beta);

struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    int points = 0;
};

/// OLS of ln(value) on ln(knob). Needs >= 4 points, all positive.
SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& rows);

/// Orthonormal basis (d x k) of the top-k eigenspace of (G + G^T) / 2.
Eigen::MatrixXd top_eigenspace(const Eigen::MatrixXd& gamma, int k);

/// Sine of the largest principal angle between span(a) and span(b); both
/// arguments must have orthonormal columns of equal count.
double subspace_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Streams derived from one master seed. The subspace and model streams do
/// not depend on the seed index; the others are per index.
struct SeedStreams {
    Rng subspace;
    Rng model;
    Rng task;
    Rng train;
    Rng eval;
    Rng icl;
};

SeedStreams seed_streams(std::uint64_t master_seed, int seed_index);

/// Runs fn(i) for i in [0, n) on `threads` workers. Exceptions are rethrown
/// (first by index) after all items finish.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

// ------------------------------------------------------------------ sweeps

enum class SweepKnob { N3, N4, Width };
enum class SweepMetric { Risk, Misalignment };

std::string knob_name(SweepKnob knob);
SweepKnob parse_knob(const std::string& text);

/// Geometric grid from "a:b:factor" or an explicit comma list. Values must be
/// distinct positive integers; at least 5.
std::vector<int> parse_grid(const std::string& text);

struct SweepRow {
    std::string knob;
    int value = 0;
    int seed = 0;
    RiskEstimate risk;
    double alignment = 0.0;
    double wall_ms = 0.0;
    /// Empty on success.
    std::string error;
};

struct SweepOptions {
    SweepKnob knob = SweepKnob::N4;
    std::vector<int> grid;
    int seeds = 5;
    std::uint64_t master_seed = 0;
    int threads = 1;
    SweepMetric metric = SweepMetric::Risk;
    /// For an N3 sweep in theorem-orders mode, derive epsilon from N3.
    bool epsilon_from_n3 = true;
    bool record_wall_time = true;
};

struct SweepResult {
    std::vector<SweepRow> rows;  // sorted by (value, seed)
    /// (knob value, median metric) per grid value.
    std::vector<std::pair<double, double>> medians;
    SlopeFit fit;
    bool fit_ok = false;
    int failures = 0;
};

/// Runs the pipeline per (grid value, seed) and fits the log-log slope of the
/// median metric. The subspace comes from the master seed; the task, prompt
/// and training streams depend on (master seed, seed index) only, so every
/// grid value sees the same draws.
SweepResult scaling_sweep(const PipelineConfig& base, const SweepOptions& opts);

/// Metric for one row: |risk - tau| or 1 - alignment.
double sweep_metric(const SweepRow& row, SweepMetric metric);

// ----------------------------------------------------------- shift compare

struct IclHeadConfig {
    /// Prompts drawn from the pretraining spec to fit the frozen ICL head.
    int prompts = 512;
    /// Queries per prompt.
    int queries = 8;
};

struct CompareRow {
    int seed = 0;
    RiskEstimate icl;
    RiskEstimate ttt;
    double alignment = 0.0;
};

struct CompareResult {
    std::vector<CompareRow> rows;
    double median_icl = 0.0;
    double median_ttt = 0.0;
    /// True when both link specs are equal.
    bool no_shift = false;
    /// Seeds with TTT risk <= ICL risk + 2 pooled stderr.
    int ttt_not_worse = 0;
};

/// The ICL predictor: f_ic with Gamma*, the full raw prompt as memory, and a
/// head fitted once by ridge on spec-A prompts (features relu(v_j g + b_j)).
MlpParams fit_icl_head(const PipelineConfig& cfg_a, const PretrainedModel& model, const IclHeadConfig& icl,
                       Rng& rng);

/// Paired ICL vs TTT risks on tasks drawn from spec B. `cfg_a` carries the
/// pretraining spec and all pipeline settings.
CompareResult icl_vs_ttt_experiment(const PipelineConfig& cfg_a, const LinkSpec& spec_b, int seeds,
                                    std::uint64_t master_seed, int threads,
                                    const IclHeadConfig& icl = {});

/// Median of a copy.
double median(std::vector<double> values);

}  // namespace sitt
