#include <doctest.h>

#include <cmath>

#include "sitt/error.hpp"
#include "sitt/eval.hpp"
#include "sitt/oracles.hpp"
#include "sitt/training.hpp"

using namespace sitt;
using doctest::Approx;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Fixture {
    int d;
    int r;
    Subspace sub;
    Task task;
    AttentionParams att;
    AttentionContext memory;
};

Fixture make_fixture(int d, int r, int n1, double kappa, double rho, std::uint64_t seed) {
    Rng rng(seed);
    Subspace sub = sample_subspace(d, r, rng);
    Task task{sample_feature(sub, rng), LinkFunction({{1, 1.0}, {2, std::sqrt(2.0)}}), 0.0};
    Fixture f{d, r, std::move(sub), std::move(task), {}, {}};
    f.att = AttentionParams{oracle_gamma(f.sub, kappa), rho};
    const Prompt p = sample_prompt(f.task, {n1, 0, 0, 0}, rng);
    f.memory.xs = preprocess_context(f.att.gamma, r, p.group_xs(1));
    f.memory.ys = p.group_ys(1);
    return f;
}

PipelineConfig small_pipeline() {
    PipelineConfig cfg;
    cfg.d = 8;
    cfg.r = 4;
    cfg.m = 32;
    cfg.rho = 4.0;
    cfg.tau = 0.1;
    cfg.kappa_scale = 1.0;
    cfg.link_spec = parse_link_spec("1:1,2:1");
    cfg.ttt.groups = {64, 0, 200, 128};
    cfg.ttt.n_new = 64;
    cfg.ttt.scaling = ScalingMode::TheoremOrders;
    cfg.ttt.scale_constant = 4.0;
    cfg.ttt.epsilon = 0.1;
    cfg.eval_samples = 200;
    return cfg;
}

}  // namespace

TEST_CASE("initial and oracle Gamma") {
    CHECK((initial_gamma(9) - MatrixXd::Identity(9, 9) / 3.0).norm() <= 1e-15);
    Rng rng(1);
    const Subspace full = sample_subspace(4, 4, rng);
    CHECK((oracle_gamma(full, 1.0) - MatrixXd::Identity(4, 4) / 2.0).norm() <= 1e-10);
    const Subspace s = sample_subspace(10, 4, rng);
    const double kappa = 1.7;
    const MatrixXd g = oracle_gamma(s, kappa);
    const VectorXd beta = sample_feature(s, rng);
    CHECK((g * beta - beta / (kappa * 2.0)).norm() <= 1e-12);
    const MatrixXd proj = 2.0 * kappa * g;
    CHECK((proj * proj - proj).norm() <= 1e-10);
    CHECK(default_kappa_scale(32) == Approx(std::pow(std::log(32.0), 2)));
    CHECK_THROWS_AS(oracle_gamma(s, 0.0), ConfigError);
}

TEST_CASE("preprocess_context") {
    Rng rng(2);
    const Subspace s = sample_subspace(12, 3, rng);
    const MatrixXd p = subspace_projector(s);
    MatrixXd xs(5, 12);
    for (int i = 0; i < 5; ++i) xs.row(i) = rng.normal_vector(12).transpose();
    const MatrixXd out1 = preprocess_context(oracle_gamma(s, 1.0), 3, xs);
    CHECK((out1 - xs * p).norm() <= 1e-12);

    const double kappa = 2.5;
    const VectorXd inside = sample_feature(s, rng) * 1.3;
    const MatrixXd one = preprocess_context(oracle_gamma(s, kappa), 3, inside.transpose());
    CHECK((one.row(0).transpose() - inside / kappa).norm() <= 1e-12);

    // E ||sqrt(r) Gamma* x||^2 = r / kappa^2 for x ~ N(0, I).
    const int n = 20000;
    MatrixXd many(n, 12);
    for (int i = 0; i < n; ++i) many.row(i) = rng.normal_vector(12).transpose();
    const MatrixXd pre = preprocess_context(oracle_gamma(s, kappa), 3, many);
    const VectorXd sq = pre.rowwise().squaredNorm();
    const double mean = sq.mean();
    const double sd = std::sqrt((sq.array() - mean).square().sum() / (n - 1));
    CHECK(std::abs(mean - 3.0 / (kappa * kappa)) <= 5 * sd / std::sqrt(n));
}

TEST_CASE("init_u") {
    Rng rng(3);
    const Subspace s = sample_subspace(16, 4, rng);
    const MatrixXd g = oracle_gamma(s, 3.0);
    const MatrixXd p = subspace_projector(s);
    const VectorXd beta = sample_feature(s, rng);
    double sum = 0.0, sum2 = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const VectorXd u = init_u(g, 4, rng);
        if (i < 50) {
            CHECK(std::abs(u.norm() - 0.5) <= 1e-12);
            CHECK((u - p * u).norm() <= 1e-10);
        }
        const double c = beta.dot(u) * 2.0;
        sum += c;
        sum2 += c * c;
    }
    // A coordinate of a uniform unit vector in R^r: mean 0, variance 1/r.
    const double mean = sum / n, var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) <= 5 * std::sqrt(0.25 / n));
    CHECK(var == Approx(0.25).epsilon(0.05));
}

TEST_CASE("ttt_stage1") {
    Fixture f = make_fixture(16, 4, 256, 1.0, 4.0, 4);
    Rng rng(5);
    const VectorXd u0 = init_u(f.att.gamma, f.r, rng);
    Rng head_rng(6);
    MlpParams head = MlpParams::init(64, 1.0 / 64, head_rng);

    SUBCASE("eta1 = 0 only normalizes") {
        Rng s(7);
        const StageOneResult res = ttt_stage1(f.att, f.r, f.memory, u0, head, 128, 0.0, 3.0, s);
        CHECK((res.u - u0.normalized()).norm() <= 1e-15);
    }
    SUBCASE("ridge-only step is radial") {
        MlpParams silent = head;
        silent.a.setZero();
        Rng s(7);
        const double eta1 = 5.0;
        const StageOneResult res = ttt_stage1(f.att, f.r, f.memory, u0, silent, 128, eta1, 0.5 / eta1, s);
        CHECK(res.data_gradient.norm() == 0.0);
        CHECK((res.u - u0.normalized()).norm() <= 1e-14);
        Rng s2(7);
        CHECK_THROWS_AS(ttt_stage1(f.att, f.r, f.memory, u0, silent, 128, eta1, 1.0 / eta1, s2), NumericError);
    }
    SUBCASE("update is unit norm and preconditioned into the subspace") {
        Rng s(7);
        const StageOneResult res = ttt_stage1(f.att, f.r, f.memory, u0, head, 256, 50.0, 0.0, s);
        CHECK(std::abs(res.u.norm() - 1.0) <= 1e-10);
        const MatrixXd p = subspace_projector(f.sub);
        CHECK((res.data_gradient - p * res.data_gradient).norm() <= 1e-10 * (1 + res.data_gradient.norm()));
        CHECK(std::isfinite(res.teacher_offset));
    }
    SUBCASE("data gradient matches a finite-difference oracle of the distillation loss") {
        Rng ws_rng(8);
        const int n_new = 32;
        MatrixXd ws(n_new, f.d);
        for (int i = 0; i < n_new; ++i) ws.row(i) = ws_rng.normal_vector(f.d).transpose();
        VectorXd teacher(n_new);
        for (int i = 0; i < n_new; ++i) teacher[i] = attention_output(f.att, f.memory, ws.row(i).transpose());
        const double b = teacher.mean();
        auto loss = [&](const VectorXd& u) {
            double total = 0.0;
            for (int i = 0; i < n_new; ++i) {
                const double res = f_ic(f.att, LoraState{u}, head, f.memory, ws.row(i).transpose()) - (teacher[i] - b);
                total += res * res;
            }
            return total / (2.0 * n_new);
        };
        const VectorXd numeric = 2.0 * f.att.gamma * finite_diff_grad(loss, u0, 1e-6);
        Rng s(8);
        const StageOneResult res = ttt_stage1(f.att, f.r, f.memory, u0, head, n_new, 1.0, 0.0, s);
        CHECK(compare_gradients(res.data_gradient, numeric, 1e-6).max_rel_error <= 1e-5);
        CHECK(res.teacher_offset == Approx(b).epsilon(1e-14));
    }
}

TEST_CASE("ttt_stage2") {
    Fixture f = make_fixture(16, 4, 128, 1.0, 4.0, 9);
    Rng rng(10);
    MatrixXd stream_xs;
    VectorXd stream_ys;
    sample_labeled(f.task, 300, rng, stream_xs, stream_ys);
    Rng head_rng(11);
    MlpParams head = MlpParams::init(32, 0.05, head_rng);
    const VectorXd u_init = sample_feature(f.sub, rng);

    SUBCASE("eta2 = 0 keeps u") {
        const StageTwoResult res = ttt_stage2(f.att, f.r, f.memory, stream_xs, stream_ys, u_init, head, 0.0, f.task.beta);
        CHECK((res.u - u_init).norm() <= 1e-15);
        for (const auto& p : res.trajectory) CHECK(p.alignment == Approx(f.task.beta.dot(u_init)).epsilon(1e-14));
    }
    SUBCASE("empty stream keeps u") {
        const StageTwoResult res =
            ttt_stage2(f.att, f.r, f.memory, MatrixXd(0, f.d), VectorXd(0), u_init, head, 1.0, f.task.beta);
        CHECK(res.u == u_init);
    }
    SUBCASE("unit norm, bounded alignment, stays in the subspace") {
        const StageTwoResult res =
            ttt_stage2(f.att, f.r, f.memory, stream_xs, stream_ys, u_init, head, 2.0, f.task.beta, 1);
        CHECK(res.trajectory.size() == 301);
        CHECK(std::abs(res.u.norm() - 1.0) <= 1e-10);
        for (const auto& p : res.trajectory) CHECK(std::abs(p.alignment) <= 1.0 + 1e-10);
        const MatrixXd proj = subspace_projector(f.sub);
        CHECK((res.u - proj * res.u).norm() <= 1e-8);
    }
    SUBCASE("record_every thins the trajectory but keeps the last step") {
        const StageTwoResult res =
            ttt_stage2(f.att, f.r, f.memory, stream_xs, stream_ys, u_init, head, 2.0, f.task.beta, 100);
        REQUIRE(!res.trajectory.empty());
        CHECK(res.trajectory.front().step == 0);
        CHECK(res.trajectory.back().step == 300);
    }
}

TEST_CASE("solve_ridge and ttt_stage3") {
    Rng rng(12);
    MatrixXd phi(64, 8);
    for (int i = 0; i < 64; ++i) phi.row(i) = rng.normal_vector(8).cwiseMax(0.0).transpose();
    const VectorXd y = rng.normal_vector(64);

    CHECK(solve_ridge(phi, VectorXd::Zero(64), 1e-3).a.norm() == 0.0);

    double prev = std::numeric_limits<double>::infinity();
    for (double lambda : {1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e3}) {
        const RidgeSolution s = solve_ridge(phi, y, lambda);
        CHECK(s.a.norm() < prev);
        prev = s.a.norm();
        CHECK(s.kkt_residual <= 1e-8);
        CHECK(s.objective <= ridge_objective(phi, y, VectorXd::Zero(8), lambda) + 1e-15);
        CHECK(s.objective <= ridge_objective(phi, y, VectorXd::Constant(8, 0.01), lambda) + 1e-15);
    }
    CHECK(solve_ridge(phi, y, 1e9).a.norm() < 1e-8);

    // Dual path (N < m) agrees with the primal normal equations.
    MatrixXd wide(6, 20);
    for (int i = 0; i < 6; ++i) wide.row(i) = rng.normal_vector(20).transpose();
    const VectorXd yw = rng.normal_vector(6);
    const RidgeSolution dual = solve_ridge(wide, yw, 0.05);
    const MatrixXd normal = wide.transpose() * wide / 6.0 + 0.05 * MatrixXd::Identity(20, 20);
    const VectorXd primal = normal.ldlt().solve(wide.transpose() * yw / 6.0);
    CHECK((dual.a - primal).norm() <= 1e-10);

    CHECK_THROWS_AS(solve_ridge(phi, y, 0.0), ConfigError);

    MlpParams head = MlpParams::init(8, 0.0, rng);
    head.b = sample_stage3_bias(8, 16, rng);
    const double bound = std::pow(std::log(16.0), 2);
    CHECK(head.b.cwiseAbs().maxCoeff() <= bound);
    const VectorXd u = VectorXd::Unit(4, 0);
    MatrixXd xs(10, 4);
    for (int i = 0; i < 10; ++i) xs.row(i) = rng.normal_vector(4).transpose();
    const StageThreeResult s3 = ttt_stage3(u, head, xs, rng.normal_vector(10), 1e-3);
    CHECK(s3.head.v == head.v);
    CHECK(s3.head.b == head.b);
    CHECK(s3.fit.kkt_residual <= 1e-8);
    CHECK_THROWS_AS(ttt_stage3(u, head, MatrixXd(0, 4), VectorXd(0), 1e-3), ConfigError);
}

TEST_CASE("pretrain_gamma") {
    Rng rng(13);
    const Subspace s = sample_subspace(6, 2, rng);
    const TaskDistribution tasks{s, parse_link_spec("1:1,2:1"), 0.0};
    PretrainConfig pc;
    pc.d = 6;
    pc.m = 8;
    pc.prompts = 16;
    pc.context_length = 32;
    pc.rho = 1.0;
    Rng head_rng(14);

    SUBCASE("eta = 0 returns Gamma(0)") {
        pc.alpha = 0.1;
        const MlpParams head = MlpParams::init(8, pc.alpha, head_rng);
        Rng r(1);
        CHECK((pretrain_gamma(pc, head, tasks, r) - initial_gamma(6)).norm() == 0.0);
    }
    SUBCASE("a = 0 leaves only ridge shrinkage") {
        pc.eta = 0.01;
        pc.lambda = 3.0;
        const MlpParams head = MlpParams::init(8, 0.0, head_rng);
        Rng r(1);
        CHECK((pretrain_gamma(pc, head, tasks, r) - initial_gamma(6) * (1 - 0.03)).norm() <= 1e-14);
    }
    SUBCASE("deterministic") {
        pc.eta = 1.0;
        pc.alpha = 0.05;
        const MlpParams head = MlpParams::init(8, pc.alpha, head_rng);
        Rng r1(2), r2(2);
        CHECK(pretrain_gamma(pc, head, tasks, r1) == pretrain_gamma(pc, head, tasks, r2));
    }
    SUBCASE("compute guard") {
        pc.prompts = 100000;
        pc.context_length = 100000;
        const MlpParams head = MlpParams::init(8, 0.0, head_rng);
        Rng r(1);
        CHECK_THROWS_AS(pretrain_gamma(pc, head, tasks, r), BudgetError);
    }
}

TEST_CASE("theorem-orders hyperparameters") {
    TttConfig cfg;
    cfg.scaling = ScalingMode::TheoremOrders;
    cfg.scale_constant = 2.0;
    cfg.epsilon = 0.05;
    const StageHyper h = resolve_hyper(cfg, 4, 1, 100);
    CHECK(h.alpha1 * 100 == Approx(2.0 * std::pow(4.0, -1.5)));
    CHECK(h.eta1 == Approx(2.0 * std::pow(4.0, 3.0)));
    CHECK(h.lambda1 == Approx(1.0 / h.eta1));
    CHECK(h.alpha2 * 100 == Approx(2.0 * 0.05 / 4.0));
    CHECK(h.eta2 == Approx(1.0));
    const StageHyper even = resolve_hyper(cfg, 4, 2, 100);
    CHECK(even.eta1 == Approx(2.0 * std::pow(4.0, 4.5)));

    cfg.scaling = ScalingMode::Explicit;
    cfg.eta2 = 0.3;
    CHECK(resolve_hyper(cfg, 4, 1, 100).eta2 == 0.3);
}

TEST_CASE("stream length and epsilon") {
    CHECK(default_stream_length(8, 0.05) == static_cast<int>(std::ceil(8 * std::sqrt(8.0) / 0.05 * std::log(20.0))));
    for (double eps : {0.01, 0.05, 0.2}) {
        const int n3 = default_stream_length(8, eps);
        CHECK(epsilon_for_stream_length(8, n3) == Approx(eps).epsilon(1e-3));
    }
    CHECK_THROWS_AS(epsilon_for_stream_length(8, 10), ConfigError);

    TttConfig ttt;
    ttt.scaling = ScalingMode::TheoremOrders;
    ttt.groups.n3 = -1;
    ttt.epsilon = 0.1;
    CHECK(resolve_ttt(ttt, 4).groups.n3 == default_stream_length(4, 0.1));
    ttt.groups.n3 = 5000;
    ttt.epsilon = 0.0;
    CHECK(resolve_ttt(ttt, 4).epsilon == Approx(epsilon_for_stream_length(4, 5000)));
    ttt.groups.n3 = -1;
    CHECK_THROWS_AS(resolve_ttt(ttt, 4), ConfigError);
}

TEST_CASE("run_ttt pipeline contracts") {
    PipelineConfig cfg = small_pipeline();
    Rng rng(15);
    const Subspace sub = sample_subspace(cfg.d, cfg.r, rng);
    Rng model_rng(16);
    const PretrainedModel model = prepare_model(cfg, sub, model_rng);
    const Task task = TaskDistribution{sub, cfg.link_spec, cfg.tau}.sample(rng);

    SUBCASE("deterministic, unit-norm output, diagnostics present") {
        Rng r1(17), r2(17);
        const PipelineResult a = run_ttt(cfg, model, task, r1);
        const PipelineResult b = run_ttt(cfg, model, task, r2);
        CHECK(a.u_final == b.u_final);
        CHECK(a.mlp.a == b.mlp.a);
        CHECK(std::abs(a.u_final.norm() - 1.0) <= 1e-10);
        CHECK(a.alignment_trajectory.size() == 201);
        CHECK(!a.stage_diagnostics.empty());
        CHECK(a.stage_diagnostics.front().stage == "stage1");
        CHECK(a.stage_diagnostics.back().stage == "stage3");
    }
    SUBCASE("degenerate pipeline with N4 = 1") {
        cfg.ttt.groups = {0, 0, 0, 1};
        cfg.ttt.n_new = 0;
        cfg.ttt.scaling = ScalingMode::Explicit;
        Rng r(18);
        const PipelineResult res = run_ttt(cfg, model, task, r);
        CHECK(res.mlp.a.allFinite());
        const RiskEstimate risk = estimate_risk(
            [&](const VectorXd& x) { return f_tf(LoraState{res.u_final}, res.mlp, x); }, task, 200, r);
        CHECK(std::isfinite(risk.mean_abs_error));
    }
    SUBCASE("N4 = 0 is rejected") {
        cfg.ttt.groups.n4 = 0;
        Rng r(19);
        CHECK_THROWS_WITH_AS(run_ttt(cfg, model, task, r), "Stage III requires N4 >= 1", ConfigError);
    }
    SUBCASE("fixed-alignment and beta starts") {
        cfg.ttt.u_start = UStart::FixedAlignment;
        cfg.ttt.init_alignment = 0.3;
        cfg.ttt.groups.n3 = 0;
        Rng r(20);
        const PipelineResult fixed = run_ttt(cfg, model, task, r);
        CHECK(fixed.stage1_alignment == Approx(0.3).epsilon(1e-12));
        cfg.ttt.u_start = UStart::Beta;
        Rng r2(20);
        CHECK(run_ttt(cfg, model, task, r2).u_final == task.beta);
    }
    SUBCASE("stream-prefix consumes group 2 in Stage II") {
        cfg.ttt.groups = {64, 50, 100, 128};
        cfg.ttt.group2_role = Group2Role::StreamPrefix;
        Rng r(21);
        CHECK(run_ttt(cfg, model, task, r).alignment_trajectory.back().step == 150);
        cfg.ttt.group2_role = Group2Role::Unused;
        Rng r2(21);
        CHECK(run_ttt(cfg, model, task, r2).alignment_trajectory.back().step == 100);
    }
}

TEST_CASE("d = r = 16 analog with the cubic-quartic link gives a finite risk") {
    PipelineConfig cfg = small_pipeline();
    cfg.d = 16;
    cfg.r = 16;
    cfg.link_spec = parse_link_spec("3:const(1),4:unif(-0.5,0.5)");
    cfg.ttt.groups = {128, 0, 500, 256};
    Rng rng(22);
    const Subspace sub = sample_subspace(16, 16, rng);
    const Task task = TaskDistribution{sub, cfg.link_spec, cfg.tau}.sample(rng);
    const PipelineResult res = run_pipeline(cfg, sub, task, rng);
    const RiskEstimate risk =
        estimate_risk([&](const VectorXd& x) { return f_tf(LoraState{res.u_final}, res.mlp, x); }, task, 1000, rng);
    CHECK(std::isfinite(risk.mean_abs_error));
    CHECK(risk.mean_abs_error >= 0.0);
}
