#include "sitt/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "sitt/error.hpp"

namespace sitt {

namespace {

constexpr std::uint64_t kSubspaceTag = 0x53554253ull;
constexpr std::uint64_t kModelTag = 0x4D4F44454Cull;
constexpr std::uint64_t kTaskTag = 0x5441534Bull;
constexpr std::uint64_t kTrainTag = 0x54524149ull;
constexpr std::uint64_t kEvalTag = 0x4556414Cull;
constexpr std::uint64_t kIclTag = 0x49434Cull;

int parse_positive_int(const std::string& text, const std::string& what) {
    std::size_t used = 0;
    double value = 0.0;
    try {
        value = std::stod(text, &used);
    } catch (const std::exception&) {
        throw ConfigError("grid: cannot parse " + what + " '" + text + "'");
    }
    if (used != text.size() || !(value >= 1.0) || value > 1e9 || value != std::floor(value)) {
        throw ConfigError("grid: " + what + " must be a positive integer, got '" + text + "'");
    }
    return static_cast<int>(value);
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t");
    return s.substr(first, last - first + 1);
}

}  // namespace

SeedStreams seed_streams(std::uint64_t master_seed, int seed_index) {
    const Rng master(master_seed);
    const auto idx = static_cast<std::uint64_t>(seed_index);
    return {master.split(kSubspaceTag), master.split(kModelTag),  master.split(kTaskTag).split(idx),
            master.split(kTrainTag).split(idx), master.split(kEvalTag).split(idx), master.split(kIclTag)};
}

RiskEstimate estimate_risk(const Predictor& predictor, const Task& task, int samples, Rng& rng) {
    if (samples < 100) throw ConfigError("risk estimation needs at least 100 samples");
    Eigen::MatrixXd xs;
    Eigen::VectorXd ys;
    sample_labeled(task, samples, rng, xs, ys);
    double mean = 0.0;
    double m2 = 0.0;
    for (int k = 0; k < samples; ++k) {
        const double pred = predictor(xs.row(k).transpose());
        if (!std::isfinite(pred)) throw NumericError("non-finite prediction at sample " + std::to_string(k));
        const double err = std::abs(pred - ys[k]);
        const double delta = err - mean;
        mean += delta / (k + 1);
        m2 += delta * (err - mean);
    }
    RiskEstimate out;
    out.mean_abs_error = mean;
    out.std_error = std::sqrt(m2 / (samples - 1.0) / samples);
    out.samples = samples;
    out.tau = task.tau;
    return out;
}

double alignment(const Eigen::VectorXd& u, const Eigen::VectorXd& beta) {
    if (u.size() != beta.size()) throw ConfigError("alignment: dimension mismatch");
    const double norm = u.norm();
    if (!(norm > 0.0)) throw NumericError("alignment: zero u");
    return beta.dot(u) / norm;
}

SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& rows) {
    if (rows.size() < 4) throw ConfigError("slope fit needs at least 4 points");
    const auto n = static_cast<double>(rows.size());
    double mx = 0.0;
    double my = 0.0;
    for (const auto& [knob, value] : rows) {
        if (!(knob > 0.0) || !(value > 0.0)) throw NumericError("slope fit needs positive knob and value");
        mx += std::log(knob);
        my += std::log(value);
    }
    mx /= n;
    my /= n;
    double sxx = 0.0;
    double sxy = 0.0;
    double syy = 0.0;
    for (const auto& [knob, value] : rows) {
        const double dx = std::log(knob) - mx;
        const double dy = std::log(value) - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (!(sxx > 0.0)) throw ConfigError("slope fit needs distinct knob values");
    SlopeFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    fit.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    fit.points = static_cast<int>(rows.size());
    return fit;
}

Eigen::MatrixXd top_eigenspace(const Eigen::MatrixXd& gamma, int k) {
    if (gamma.rows() != gamma.cols() || k < 1 || k > gamma.rows()) {
        throw ConfigError("top_eigenspace: need a square matrix and 1 <= k <= d");
    }
    const Eigen::MatrixXd sym = 0.5 * (gamma + gamma.transpose());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success) throw NumericError("top_eigenspace: eigensolver failed");
    // Eigenvalues come out ascending.
    return eig.eigenvectors().rightCols(k);
}

double subspace_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols() || a.cols() < 1) {
        throw ConfigError("subspace_distance: shapes differ");
    }
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a.transpose() * b);
    const double smallest = std::min(1.0, svd.singularValues().minCoeff());
    return std::sqrt(std::max(0.0, 1.0 - smallest * smallest));
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    const int workers = std::clamp(threads, 1, n);
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    std::atomic<int> next{0};
    auto work = [&] {
        for (int i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(i)] = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

double median(std::vector<double> values) {
    if (values.empty()) throw ConfigError("median of an empty set");
    std::sort(values.begin(), values.end());
    const std::size_t mid = values.size() / 2;
    return values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

std::string knob_name(SweepKnob knob) {
    switch (knob) {
        case SweepKnob::N3: return "N3";
        case SweepKnob::N4: return "N4";
        case SweepKnob::Width: return "m";
    }
    return "?";
}

SweepKnob parse_knob(const std::string& text) {
    if (text == "N3") return SweepKnob::N3;
    if (text == "N4") return SweepKnob::N4;
    if (text == "m") return SweepKnob::Width;
    throw ConfigError("unknown knob '" + text + "' (expected N3, N4 or m)");
}

std::vector<int> parse_grid(const std::string& text) {
    std::vector<int> grid;
    if (text.find(':') != std::string::npos) {
        std::vector<std::string> parts;
        std::stringstream ss(text);
        for (std::string item; std::getline(ss, item, ':');) parts.push_back(trim(item));
        if (parts.size() != 3) throw ConfigError("grid must be 'a:b:factor'");
        const int lo = parse_positive_int(parts[0], "start");
        const int hi = parse_positive_int(parts[1], "end");
        double factor = 0.0;
        try {
            factor = std::stod(parts[2]);
        } catch (const std::exception&) {
            throw ConfigError("grid: cannot parse factor '" + parts[2] + "'");
        }
        if (!(factor > 1.0)) throw ConfigError("grid factor must be > 1");
        if (hi < lo) throw ConfigError("grid end must be >= start");
        for (double v = lo; v <= hi * (1.0 + 1e-12); v *= factor) {
            grid.push_back(static_cast<int>(std::llround(v)));
        }
    } else {
        std::stringstream ss(text);
        for (std::string item; std::getline(ss, item, ',');) {
            grid.push_back(parse_positive_int(trim(item), "value"));
        }
    }
    std::set<int> seen;
    for (int v : grid) {
        if (!seen.insert(v).second) throw ConfigError("grid has duplicate value " + std::to_string(v));
    }
    if (grid.size() < 5) throw ConfigError("grid needs at least 5 points, got " + std::to_string(grid.size()));
    return grid;
}

double sweep_metric(const SweepRow& row, SweepMetric metric) {
    if (metric == SweepMetric::Misalignment) return 1.0 - row.alignment;
    return std::abs(row.risk.mean_abs_error - row.risk.tau);
}

SweepResult scaling_sweep(const PipelineConfig& base, const SweepOptions& opts) {
    if (opts.grid.size() < 5) throw ConfigError("sweep grid needs at least 5 points");
    if (opts.seeds < 1) throw ConfigError("sweep needs at least one seed");
    base.validate();

    const SeedStreams root = seed_streams(opts.master_seed, 0);
    Rng sub_rng = root.subspace;
    const Subspace sub = sample_subspace(base.d, base.r, sub_rng);

    auto cell_config = [&](int value) {
        PipelineConfig cfg = base;
        switch (opts.knob) {
            case SweepKnob::N3:
                cfg.ttt.groups.n3 = value;
                if (opts.epsilon_from_n3) cfg.ttt.epsilon = 0.0;
                break;
            case SweepKnob::N4: cfg.ttt.groups.n4 = value; break;
            case SweepKnob::Width: cfg.m = value; break;
        }
        cfg.validate();
        return cfg;
    };

    // One model per grid value; only the width knob changes it.
    std::map<int, PretrainedModel> models;
    for (int value : opts.grid) {
        const int key = opts.knob == SweepKnob::Width ? value : 0;
        if (models.count(key) != 0) continue;
        Rng model_rng = root.model;
        models.emplace(key, prepare_model(cell_config(value), sub, model_rng));
    }

    const TaskDistribution tasks{sub, base.link_spec, base.tau};
    const int cells = static_cast<int>(opts.grid.size()) * opts.seeds;
    SweepResult result;
    result.rows.resize(static_cast<std::size_t>(cells));
    parallel_for(cells, opts.threads, [&](int cell) {
        const int value = opts.grid[static_cast<std::size_t>(cell / opts.seeds)];
        const int seed = cell % opts.seeds;
        SweepRow& row = result.rows[static_cast<std::size_t>(cell)];
        row.knob = knob_name(opts.knob);
        row.value = value;
        row.seed = seed;
        const auto start = std::chrono::steady_clock::now();
        try {
            const PipelineConfig cfg = cell_config(value);
            const PretrainedModel& model = models.at(opts.knob == SweepKnob::Width ? value : 0);
            SeedStreams streams = seed_streams(opts.master_seed, seed);
            const Task task = tasks.sample(streams.task);
            const PipelineResult res = run_ttt(cfg, model, task, streams.train);
            const LoraState lora{res.u_final};
            Rng& eval_rng = streams.eval;
            row.risk = estimate_risk([&](const Eigen::VectorXd& x) { return f_tf(lora, res.mlp, x); }, task,
                                     cfg.eval_samples, eval_rng);
            row.alignment = alignment(res.u_final, task.beta);
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        if (opts.record_wall_time) {
            row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        }
    });

    for (std::size_t g = 0; g < opts.grid.size(); ++g) {
        std::vector<double> metrics;
        for (int s = 0; s < opts.seeds; ++s) {
            const SweepRow& row = result.rows[g * static_cast<std::size_t>(opts.seeds) + static_cast<std::size_t>(s)];
            if (row.error.empty()) {
                metrics.push_back(sweep_metric(row, opts.metric));
            } else {
                ++result.failures;
            }
        }
        if (!metrics.empty()) result.medians.emplace_back(opts.grid[g], median(metrics));
    }
    std::sort(result.rows.begin(), result.rows.end(), [](const SweepRow& a, const SweepRow& b) {
        return a.value != b.value ? a.value < b.value : a.seed < b.seed;
    });
    if (result.medians.size() >= 4) {
        try {
            result.fit = fit_loglog_slope(result.medians);
            result.fit_ok = true;
        } catch (const std::exception&) {
            result.fit_ok = false;
        }
    }
    return result;
}

MlpParams fit_icl_head(const PipelineConfig& cfg_a, const PretrainedModel& model, const IclHeadConfig& icl,
                       Rng& rng) {
    if (icl.prompts < 1 || icl.queries < 1) throw ConfigError("ICL head needs prompts >= 1 and queries >= 1");
    const TttConfig ttt = resolve_ttt(cfg_a.ttt, cfg_a.r);
    const TaskDistribution tasks{model.subspace, cfg_a.link_spec, cfg_a.tau};
    MlpParams head = model.init_head;
    Rng bias_rng = rng.split(0);
    head.b = sample_stage3_bias(head.width(), cfg_a.d, bias_rng);

    const int rows = icl.prompts * icl.queries;
    Eigen::VectorXd gs(rows);
    Eigen::VectorXd ys(rows);
    for (int t = 0; t < icl.prompts; ++t) {
        Rng prompt_rng = rng.split(static_cast<std::uint64_t>(t) + 1);
        const Task task = tasks.sample(prompt_rng);
        const Prompt prompt = sample_prompt(task, ttt.groups, prompt_rng);
        const AttentionContext ctx{prompt.xs, prompt.ys};
        Eigen::MatrixXd qx;
        Eigen::VectorXd qy;
        sample_labeled(task, icl.queries, prompt_rng, qx, qy);
        for (int q = 0; q < icl.queries; ++q) {
            gs[t * icl.queries + q] = attention_output(model.attention, ctx, qx.row(q).transpose());
            ys[t * icl.queries + q] = qy[q];
        }
    }
    Eigen::MatrixXd phi(rows, head.width());
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < head.width(); ++j) phi(i, j) = std::max(0.0, head.v[j] * gs[i] + head.b[j]);
    }
    head.a = solve_ridge(phi, ys, cfg_a.ttt.lambda2).a;
    return head;
}

CompareResult icl_vs_ttt_experiment(const PipelineConfig& cfg_a, const LinkSpec& spec_b, int seeds,
                                    std::uint64_t master_seed, int threads, const IclHeadConfig& icl) {
    if (seeds < 1) throw ConfigError("comparison needs at least one seed");
    cfg_a.validate();
    spec_b.validate();
    PipelineConfig cfg_b = cfg_a;
    cfg_b.link_spec = spec_b;

    SeedStreams root = seed_streams(master_seed, 0);
    const Subspace sub = sample_subspace(cfg_a.d, cfg_a.r, root.subspace);
    const PretrainedModel model = prepare_model(cfg_a, sub, root.model);
    Rng& icl_rng = root.icl;
    const MlpParams icl_head = fit_icl_head(cfg_a, model, icl, icl_rng);
    const TttConfig ttt = resolve_ttt(cfg_b.ttt, cfg_b.r);
    const TaskDistribution tasks{sub, spec_b, cfg_b.tau};

    CompareResult out;
    out.no_shift = cfg_a.link_spec == spec_b;
    out.rows.resize(static_cast<std::size_t>(seeds));
    parallel_for(seeds, threads, [&](int seed) {
        CompareRow& row = out.rows[static_cast<std::size_t>(seed)];
        row.seed = seed;
        SeedStreams streams = seed_streams(master_seed, seed);
        const Task task = tasks.sample(streams.task);
        const Prompt prompt = sample_ttt_prompt(ttt, task, streams.train);
        const AttentionContext ctx{prompt.xs, prompt.ys};
        const PipelineResult res = run_ttt(cfg_b, model, task, streams.train);
        const LoraState lora{res.u_final};
        const Rng eval_rng = streams.eval;
        Rng eval_icl = eval_rng;
        Rng eval_ttt = eval_rng;
        row.icl = estimate_risk(
            [&](const Eigen::VectorXd& x) { return icl_head(attention_output(model.attention, ctx, x)); }, task,
            cfg_b.eval_samples, eval_icl);
        row.ttt = estimate_risk([&](const Eigen::VectorXd& x) { return f_tf(lora, res.mlp, x); }, task,
                                cfg_b.eval_samples, eval_ttt);
        row.alignment = alignment(res.u_final, task.beta);
    });

    std::vector<double> icl_risks;
    std::vector<double> ttt_risks;
    for (const auto& row : out.rows) {
        icl_risks.push_back(row.icl.mean_abs_error);
        ttt_risks.push_back(row.ttt.mean_abs_error);
        const double pooled = std::sqrt(row.icl.std_error * row.icl.std_error + row.ttt.std_error * row.ttt.std_error);
        if (row.ttt.mean_abs_error <= row.icl.mean_abs_error + 2.0 * pooled) ++out.ttt_not_worse;
    }
    out.median_icl = median(icl_risks);
    out.median_ttt = median(ttt_risks);
    return out;
}

}  // namespace sitt
