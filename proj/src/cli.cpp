#include "sitt/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "sitt/config.hpp"
#include "sitt/error.hpp"
#include "sitt/eval.hpp"
#include "sitt/io.hpp"
#include "sitt/verify.hpp"

namespace sitt {

namespace fs = std::filesystem;

namespace {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

LogLevel log_level() {
    const char* env = std::getenv("SITT_LOG");
    if (env == nullptr) return LogLevel::Info;
    const std::string v = env;
    if (v == "error") return LogLevel::Error;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Info;
}

void log(LogLevel level, const std::string& msg) {
    static const LogLevel threshold = log_level();
    if (level > threshold) return;
    static const char* names[] = {"error", "info", "debug"};
    std::cerr << "[sitt " << names[static_cast<int>(level)] << "] " << msg << '\n';
}

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    int threads = 0;
    std::string out = "out";
    bool force = false;
};

int thread_count(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Tracks output files and writes the manifest last.
class OutputDir {
public:
    OutputDir(const std::string& dir, std::string command, std::uint64_t seed,
              std::map<std::string, std::string> config)
        : dir_(dir) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
        manifest_.command = std::move(command);
        manifest_.master_seed = seed;
        manifest_.config = std::move(config);
        manifest_.version = kArtifactVersion;
        manifest_.started = utc_timestamp();
    }

    fs::path file(const std::string& name) {
        manifest_.outputs.push_back(name);
        return dir_ / name;
    }

    void finish() {
        manifest_.outputs.push_back("manifest.json");
        manifest_.finished = utc_timestamp();
        write_file_atomic(dir_ / "manifest.json", manifest_to_json(manifest_));
    }

private:
    fs::path dir_;
    RunManifest manifest_;
};

std::map<std::string, std::string> snapshot_with(const RunConfig& cfg,
                                                 std::initializer_list<std::pair<const char*, std::string>> extra) {
    auto snap = cfg.snapshot;
    for (const auto& [k, v] : extra) {
        if (!v.empty()) snap[k] = v;
    }
    return snap;
}

// ------------------------------------------------------------------ pretrain

int cmd_pretrain(const Common& c) {
    RunConfig cfg = load_config(c.config);
    PipelineConfig& p = cfg.pipeline;
    p.gamma_source = GammaSource::Pretrain;
    p.pretrain.force = p.pretrain.force || c.force;
    p.pretrain.validate();
    SeedStreams streams = seed_streams(c.seed, 0);
    const Subspace sub = sample_subspace(p.d, p.r, streams.subspace);
    log(LogLevel::Info, "pretraining Gamma: d=" + std::to_string(p.d) + " T=" + std::to_string(p.pretrain.prompts) +
                            " N=" + std::to_string(p.pretrain.context_length));
    const PretrainedModel model = prepare_model(p, sub, streams.model);

    OutputDir out(c.out, "pretrain", c.seed, cfg.snapshot);
    write_matrix_csv(out.file("gamma.csv"), model.attention.gamma);
    write_matrix_csv(out.file("subspace.csv"), sub.basis);
    write_vector_csv(out.file("v0.csv"), model.init_head.v);
    const double dist = subspace_distance(top_eigenspace(model.attention.gamma, p.r), sub.basis);
    {
        CsvWriter w(out.file("pretrain_summary.csv"), {"d", "r", "subspace_distance"});
        w.field(p.d).field(p.r).field(dist);
        w.end_row();
        w.close();
    }
    out.finish();
    std::cout << "subspace_distance," << format_double(dist) << '\n';
    return kExitOk;
}

// ------------------------------------------------------------------ ttt

PretrainedModel load_checkpoint(const fs::path& dir, const PipelineConfig& p) {
    PretrainedModel model;
    model.attention.gamma = read_matrix_csv(dir / "gamma.csv");
    model.attention.rho = p.rho;
    model.subspace.basis = read_matrix_csv(dir / "subspace.csv");
    const Eigen::VectorXd v = read_vector_csv(dir / "v0.csv");
    if (model.attention.gamma.rows() != p.d || model.attention.gamma.cols() != p.d) {
        throw ConfigError("checkpoint Gamma is " + std::to_string(model.attention.gamma.rows()) + "x" +
                          std::to_string(model.attention.gamma.cols()) + " but config has d = " + std::to_string(p.d));
    }
    if (model.subspace.d() != p.d || model.subspace.r() != p.r) {
        throw ConfigError("checkpoint subspace dimensions differ from config (d, r)");
    }
    if (v.size() != p.m) {
        throw ConfigError("checkpoint head width " + std::to_string(v.size()) + " differs from config m = " +
                          std::to_string(p.m));
    }
    model.subspace.validate();
    model.attention.validate();
    model.init_head.v = v;
    model.init_head.a = Eigen::VectorXd::Constant(p.m, p.pretrain.alpha);
    model.init_head.b = Eigen::VectorXd::Zero(p.m);
    model.init_head.validate();
    return model;
}

int cmd_ttt(const Common& c, bool oracle, const std::string& gamma_dir, const std::string& task_file) {
    if (oracle && !gamma_dir.empty()) throw ConfigError("--oracle and --gamma are mutually exclusive");
    RunConfig cfg = load_config(c.config);
    PipelineConfig& p = cfg.pipeline;
    p.pretrain.force = p.pretrain.force || c.force;
    if (oracle) p.gamma_source = GammaSource::Oracle;

    SeedStreams streams = seed_streams(c.seed, 0);
    PretrainedModel model;
    if (!gamma_dir.empty()) {
        model = load_checkpoint(gamma_dir, p);
    } else {
        const Subspace sub = sample_subspace(p.d, p.r, streams.subspace);
        model = prepare_model(p, sub, streams.model);
    }

    Task task = task_file.empty() ? TaskDistribution{model.subspace, p.link_spec, p.tau}.sample(streams.task)
                                  : read_task_file(task_file);
    if (task.beta.size() != p.d) {
        throw ConfigError("task beta has dimension " + std::to_string(task.beta.size()) + " but d = " +
                          std::to_string(p.d));
    }
    if (std::abs(task.beta.norm() - 1.0) > 1e-8) throw ConfigError("task beta must have unit norm");

    log(LogLevel::Info, "running stages I-III (d=" + std::to_string(p.d) + ", r=" + std::to_string(p.r) + ")");
    const PipelineResult res = run_ttt(p, model, task, streams.train);
    const LoraState lora{res.u_final};
    const RiskEstimate risk = estimate_risk([&](const Eigen::VectorXd& x) { return f_tf(lora, res.mlp, x); }, task,
                                            p.eval_samples, streams.eval);
    const double align = alignment(res.u_final, task.beta);

    OutputDir out(c.out, "ttt", c.seed,
                  snapshot_with(cfg, {{"cli.oracle", oracle ? "true" : ""},
                                      {"cli.gamma", gamma_dir},
                                      {"cli.task", task_file}}));
    {
        CsvWriter w(out.file("trajectory.csv"), {"step", "alignment", "loss", "grad_norm"});
        for (const auto& pt : res.alignment_trajectory) {
            w.field(pt.step).field(pt.alignment).field(pt.loss).field(pt.grad_norm);
            w.end_row();
        }
        w.close();
    }
    {
        CsvWriter w(out.file("diagnostics.csv"), {"stage", "step", "metric", "value"});
        for (const auto& dgn : res.stage_diagnostics) {
            w.field(dgn.stage).field(dgn.step).field(dgn.metric).field(dgn.value);
            w.end_row();
        }
        w.close();
    }
    {
        CsvWriter w(out.file("risk.csv"), {"risk", "stderr", "samples", "tau", "alignment"});
        w.field(risk.mean_abs_error).field(risk.std_error).field(risk.samples).field(risk.tau).field(align);
        w.end_row();
        w.close();
    }
    write_matrix_csv(out.file("gamma.csv"), res.gamma_star);
    write_vector_csv(out.file("u.csv"), res.u_final);
    write_vector_csv(out.file("a.csv"), res.mlp.a);
    write_vector_csv(out.file("v.csv"), res.mlp.v);
    write_vector_csv(out.file("b.csv"), res.mlp.b);
    write_task_file(out.file("task.json"), task);
    out.finish();
    std::cout << "risk," << format_double(risk.mean_abs_error) << "\nalignment," << format_double(align) << '\n';
    return kExitOk;
}

// ------------------------------------------------------------------ sweep

int sweep_selftest(const Common& c, const std::string& grid_text, const std::string& knob_text) {
    const std::vector<int> grid = parse_grid(grid_text.empty() ? "64:4096:2" : grid_text);
    const std::string knob = knob_text.empty() ? "N4" : knob_name(parse_knob(knob_text));
    std::vector<std::pair<double, double>> rows;
    for (int v : grid) rows.emplace_back(v, 3.0 / std::sqrt(static_cast<double>(v)));
    const SlopeFit fit = fit_loglog_slope(rows);
    OutputDir out(c.out, "sweep --selftest", c.seed, {{"cli.grid", grid_text}, {"cli.knob", knob}});
    CsvWriter w(out.file("slope.csv"), {"knob", "slope", "intercept", "r2", "points"});
    w.field(knob).field(fit.slope).field(fit.intercept).field(fit.r_squared).field(fit.points);
    w.end_row();
    w.close();
    out.finish();
    const bool ok = std::abs(fit.slope + 0.5) <= 1e-6;
    std::cout << "selftest_slope," << format_double(fit.slope) << (ok ? ",PASS" : ",FAIL") << '\n';
    return ok ? kExitOk : kExitVerifyFailed;
}

int cmd_sweep(const Common& c, const std::string& knob_text, const std::string& grid_text, bool selftest,
              bool no_wall_time) {
    if (selftest) return sweep_selftest(c, grid_text, knob_text);
    if (knob_text.empty()) throw ConfigError("sweep needs --knob (N3, N4 or m)");
    if (grid_text.empty()) throw ConfigError("sweep needs --grid");
    RunConfig cfg = load_config(c.config);
    cfg.pipeline.pretrain.force = cfg.pipeline.pretrain.force || c.force;
    SweepOptions opts;
    opts.knob = parse_knob(knob_text);
    opts.grid = parse_grid(grid_text);
    opts.seeds = cfg.eval.seeds;
    opts.master_seed = c.seed;
    opts.threads = thread_count(c.threads);
    opts.metric = cfg.eval.metric;
    opts.record_wall_time = !no_wall_time;
    log(LogLevel::Info, "sweep over " + knob_name(opts.knob) + ": " + std::to_string(opts.grid.size()) +
                            " values x " + std::to_string(opts.seeds) + " seeds on " +
                            std::to_string(opts.threads) + " threads");
    const SweepResult res = scaling_sweep(cfg.pipeline, opts);

    OutputDir out(c.out, "sweep", c.seed,
                  snapshot_with(cfg, {{"cli.knob", knob_text}, {"cli.grid", grid_text}}));
    {
        CsvWriter w(out.file("sweep.csv"), {"knob", "value", "seed", "risk", "stderr", "alignment", "tau", "wall_ms"});
        for (const auto& row : res.rows) {
            if (!row.error.empty()) continue;
            w.field(row.knob).field(row.value).field(row.seed).field(row.risk.mean_abs_error);
            w.field(row.risk.std_error).field(row.alignment).field(row.risk.tau).field(row.wall_ms);
            w.end_row();
        }
        w.close();
    }
    {
        CsvWriter w(out.file("slope.csv"), {"knob", "slope", "intercept", "r2", "points"});
        if (res.fit_ok) {
            w.field(knob_name(opts.knob)).field(res.fit.slope).field(res.fit.intercept);
            w.field(res.fit.r_squared).field(res.fit.points);
            w.end_row();
        }
        w.close();
    }
    if (res.failures > 0) {
        CsvWriter w(out.file("failures.csv"), {"knob", "value", "seed", "error"});
        for (const auto& row : res.rows) {
            if (row.error.empty()) continue;
            w.field(row.knob).field(row.value).field(row.seed).field(row.error);
            w.end_row();
            log(LogLevel::Error, "cell " + row.knob + "=" + std::to_string(row.value) + " seed " +
                                     std::to_string(row.seed) + " failed: " + row.error);
        }
        w.close();
    }
    out.finish();
    if (res.fit_ok) std::cout << "slope," << format_double(res.fit.slope) << '\n';
    if (res.failures > 0) return kExitNumeric;
    if (!res.fit_ok) {
        log(LogLevel::Error, "slope fit failed (non-positive medians or too few points)");
        return kExitNumeric;
    }
    return kExitOk;
}

// ------------------------------------------------------------------ compare

int cmd_compare(const Common& c, const std::string& test_config) {
    RunConfig cfg = load_config(c.config);
    cfg.pipeline.pretrain.force = cfg.pipeline.pretrain.force || c.force;
    LinkSpec spec_b = cfg.pipeline.link_spec;
    if (!test_config.empty()) {
        spec_b = load_config(test_config).pipeline.link_spec;
    } else if (cfg.eval.test_link) {
        spec_b = *cfg.eval.test_link;
    }
    const CompareResult res = icl_vs_ttt_experiment(cfg.pipeline, spec_b, cfg.eval.seeds, c.seed,
                                                    thread_count(c.threads), cfg.eval.icl);
    OutputDir out(c.out, "compare", c.seed,
                  snapshot_with(cfg, {{"cli.test_config", test_config}, {"compare.test_link", spec_b.to_string()}}));
    {
        CsvWriter w(out.file("compare.csv"),
                    {"seed", "icl_risk", "icl_stderr", "ttt_risk", "ttt_stderr", "alignment", "tau"});
        for (const auto& row : res.rows) {
            w.field(row.seed).field(row.icl.mean_abs_error).field(row.icl.std_error);
            w.field(row.ttt.mean_abs_error).field(row.ttt.std_error).field(row.alignment).field(row.ttt.tau);
            w.end_row();
        }
        w.close();
    }
    {
        CsvWriter w(out.file("compare_summary.csv"),
                    {"mode", "seeds", "median_icl", "median_ttt", "ttt_not_worse", "ttt_better_median"});
        w.field(res.no_shift ? "no-shift" : "shift").field(static_cast<int>(res.rows.size()));
        w.field(res.median_icl).field(res.median_ttt).field(res.ttt_not_worse);
        w.field(res.median_ttt < res.median_icl ? "true" : "false");
        w.end_row();
        w.close();
    }
    out.finish();
    std::cout << (res.no_shift ? "no-shift" : "shift") << ",median_icl," << format_double(res.median_icl)
              << ",median_ttt," << format_double(res.median_ttt) << '\n';
    return kExitOk;
}

// ------------------------------------------------------------------ verify

int cmd_verify(const Common& c, const std::string& suite) {
    const auto checks = run_verify_suite(suite, c.seed);
    OutputDir out(c.out, "verify", c.seed, {{"cli.suite", suite}});
    bool all_pass = true;
    CsvWriter w(out.file("verify.csv"), {"suite", "check", "measured", "tolerance", "pass"});
    for (const auto& chk : checks) {
        w.field(chk.suite).field(chk.name).field(chk.measured).field(chk.tolerance);
        w.field(chk.pass ? "true" : "false");
        w.end_row();
        all_pass = all_pass && chk.pass;
        log(chk.pass ? LogLevel::Debug : LogLevel::Error,
            chk.suite + "/" + chk.name + ": " + format_double(chk.measured) + " vs " + format_double(chk.tolerance));
    }
    w.close();
    out.finish();
    std::cout << (all_pass ? "PASS" : "FAIL") << ' ' << suite << '\n';
    return all_pass ? kExitOk : kExitVerifyFailed;
}

void add_common(CLI::App* app, Common& c, bool needs_config) {
    auto* opt = app->add_option("--config", c.config, "Config file (key = value with sections)");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "Master seed");
    app->add_option("--threads", c.threads, "Worker threads (default: logical cores)");
    app->add_option("--out", c.out, "Output directory")->capture_default_str();
    app->add_flag("--force", c.force, "Skip the pretraining compute guard");
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Test-time training lab for single-index models"};
    app.require_subcommand(1);

    Common c;
    bool oracle = false;
    bool selftest = false;
    bool no_wall_time = false;
    std::string gamma_dir;
    std::string task_file;
    std::string knob;
    std::string grid;
    std::string test_config;
    std::string suite = "all";

    auto* pretrain = app.add_subcommand("pretrain", "One-step pretraining of Gamma; writes a checkpoint");
    add_common(pretrain, c, true);

    auto* ttt = app.add_subcommand("ttt", "Stages I-III on one task; writes trajectory and risk");
    add_common(ttt, c, true);
    ttt->add_flag("--oracle", oracle, "Use the oracle Gamma* = P/(kappa_scale sqrt(r))");
    ttt->add_option("--gamma", gamma_dir, "Checkpoint directory written by `pretrain`");
    ttt->add_option("--task", task_file, "Task JSON (beta, coeffs, tau) instead of a sampled task");

    auto* sweep = app.add_subcommand("sweep", "Scaling sweep over N3, N4 or m");
    add_common(sweep, c, false);
    sweep->add_option("--knob", knob, "N3, N4 or m");
    sweep->add_option("--grid", grid, "a:b:factor or a comma list (>= 5 distinct values)");
    sweep->add_flag("--selftest", selftest, "Fit a synthetic power law instead of running pipelines");
    sweep->add_flag("--no-wall-time", no_wall_time, "Write 0 in the wall_ms column");

    auto* compare = app.add_subcommand("compare", "Paired ICL vs TTT risks under a link shift");
    add_common(compare, c, true);
    compare->add_option("--test-config", test_config, "Config whose [task] link is the test-time spec")
        ->check(CLI::ExistingFile);

    auto* verify = app.add_subcommand("verify", "Run oracle suites");
    add_common(verify, c, false);
    verify->add_option("--suite", suite, "hermite, exponents, gradients, stein, ridge or all")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*pretrain) return cmd_pretrain(c);
        if (*ttt) return cmd_ttt(c, oracle, gamma_dir, task_file);
        if (*sweep) {
            if (!selftest && c.config.empty()) throw ConfigError("sweep needs --config unless --selftest is given");
            return cmd_sweep(c, knob, grid, selftest, no_wall_time);
        }
        if (*compare) return cmd_compare(c, test_config);
        if (*verify) return cmd_verify(c, suite);
    } catch (const ConfigError& e) {
        log(LogLevel::Error, e.what());
        return kExitConfig;
    } catch (const BudgetError& e) {
        log(LogLevel::Error, e.what());
        return kExitBudget;
    } catch (const NumericError& e) {
        log(LogLevel::Error, e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        log(LogLevel::Error, e.what());
        return kExitNumeric;
    }
    return kExitConfig;
}

}  // namespace sitt
