#include "sitt/training.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "sitt/error.hpp"

namespace sitt {

namespace {

std::string fmt_sci(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

Eigen::VectorXd normalized(const Eigen::VectorXd& u, const std::string& where) {
    const double norm = u.norm();
    if (!std::isfinite(norm)) throw NumericError(where + ": non-finite update");
    if (!(norm > 0.0)) throw NumericError(where + ": update collapsed to the zero vector");
    return u / norm;
}

void add_diag(std::vector<StageDiagnostic>& out, const char* stage, int step, const char* metric,
              double value) {
    out.push_back({stage, step, metric, value});
}

}  // namespace

// ---------------------------------------------------------------- pretraining

void PretrainConfig::validate() const {
    if (d < 1 || d > kMaxDimension) throw ConfigError("pretrain: d must lie in [1, 256]");
    if (m < 1) throw ConfigError("pretrain: width m must be >= 1");
    if (prompts < 1) throw ConfigError("pretrain: prompts (T_pt) must be >= 1");
    if (context_length < 1) throw ConfigError("pretrain: context length (N_pt) must be >= 1");
    if (!(eta >= 0.0) || !(lambda >= 0.0)) throw ConfigError("pretrain: eta and lambda must be >= 0");
    if (!(rho > 0.0)) throw ConfigError("pretrain: rho must be > 0");
    if (!std::isfinite(alpha)) throw ConfigError("pretrain: alpha must be finite");
    const double work = static_cast<double>(prompts) * context_length * static_cast<double>(d) * d;
    if (!force && work > kPretrainBudget) {
        throw BudgetError("pretraining needs ~" + fmt_sci(work) +
                          " operations (T_pt * N_pt * d^2), above the 1e11 guard; pass --force to run anyway");
    }
}

Eigen::MatrixXd initial_gamma(int d) {
    return Eigen::MatrixXd::Identity(d, d) / std::sqrt(static_cast<double>(d));
}

Eigen::MatrixXd pretrain_gamma(const PretrainConfig& cfg, const MlpParams& head,
                               const TaskDistribution& tasks, Rng& rng) {
    cfg.validate();
    head.validate();
    if (head.width() != cfg.m) throw ConfigError("pretrain: head width differs from m");
    if (tasks.subspace.d() != cfg.d) throw ConfigError("pretrain: task dimension differs from d");
    const AttentionParams start{initial_gamma(cfg.d), cfg.rho};
    Eigen::MatrixXd grad_sum = Eigen::MatrixXd::Zero(cfg.d, cfg.d);
    AttentionContext ctx;
    Eigen::MatrixXd qx;
    Eigen::VectorXd qy;
    for (int t = 0; t < cfg.prompts; ++t) {
        Rng stream = rng.split(static_cast<std::uint64_t>(t));
        const Task task = tasks.sample(stream);
        sample_labeled(task, cfg.context_length, stream, ctx.xs, ctx.ys);
        sample_labeled(task, 1, stream, qx, qy);
        const Eigen::MatrixXd grad =
            grad_gamma_pretrain_loss(start, head, ctx, qx.row(0).transpose(), qy[0], cfg.lambda);
        if (!grad.allFinite()) {
            throw NumericError("pretrain: non-finite gradient at prompt " + std::to_string(t));
        }
        grad_sum += grad;
    }
    return start.gamma - (cfg.eta / (2.0 * cfg.prompts)) * grad_sum;
}

Eigen::MatrixXd oracle_gamma(const Subspace& sub, double kappa_scale) {
    if (!(kappa_scale > 0.0)) throw ConfigError("oracle Gamma needs kappa_scale > 0");
    return subspace_projector(sub) / (kappa_scale * std::sqrt(static_cast<double>(sub.r())));
}

double default_kappa_scale(int d) {
    const double l = std::log(static_cast<double>(d));
    return l * l;
}

Eigen::MatrixXd preprocess_context(const Eigen::MatrixXd& gamma_star, int r, const Eigen::MatrixXd& xs) {
    if (xs.cols() != gamma_star.rows()) throw ConfigError("preprocess: dimension mismatch");
    return std::sqrt(static_cast<double>(r)) * (xs * gamma_star.transpose());
}

Eigen::VectorXd init_u(const Eigen::MatrixXd& gamma_star, int r, Rng& rng) {
    const double sqrt_r = std::sqrt(static_cast<double>(r));
    for (int attempt = 0; attempt < 100; ++attempt) {
        const Eigen::VectorXd u = sqrt_r * (gamma_star * rng.normal_vector(gamma_star.rows()));
        const double norm = u.norm();
        if (norm > 0.0 && std::isfinite(norm)) return u / (sqrt_r * norm);
    }
    throw NumericError("init_u: projected draw is zero; Gamma* is degenerate");
}

// ---------------------------------------------------------- test-time stages

StageOneResult ttt_stage1(const AttentionParams& pretrained, int r, const AttentionContext& ctx1,
                          const Eigen::VectorXd& u0, const MlpParams& head, int n_new, double eta1,
                          double lambda1, Rng& rng) {
    const auto d = u0.size();
    StageOneResult out;
    out.data_gradient = Eigen::VectorXd::Zero(d);
    if (eta1 != 0.0 && n_new > 0) {
        ctx1.validate();
        Eigen::MatrixXd ws(n_new, d);
        for (int i = 0; i < n_new; ++i) ws.row(i) = rng.normal_vector(d).transpose();
        Eigen::VectorXd teacher(n_new);
        for (int i = 0; i < n_new; ++i) teacher[i] = attention_output(pretrained, ctx1, ws.row(i).transpose());
        out.teacher_offset = teacher.mean();
        const LoraState lora{u0};
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(d);
        double loss = 0.0;
        for (int i = 0; i < n_new; ++i) {
            const FicWithGrad fg = f_ic_with_grad(pretrained, lora, head, ctx1, ws.row(i).transpose());
            const double residual = fg.value - (teacher[i] - out.teacher_offset);
            loss += residual * residual;
            grad.noalias() += residual * fg.grad_u;
        }
        out.loss = loss / (2.0 * n_new);
        out.data_gradient = std::sqrt(static_cast<double>(r)) * (pretrained.gamma * (grad / n_new));
    }
    const Eigen::VectorXd u1 = u0 - eta1 * (out.data_gradient + lambda1 * u0);
    // With lambda1 = 1/eta1 the u(0) term cancels, leaving only the data gradient.
    if (u1.norm() <= 1e-12 * u0.norm()) {
        throw NumericError("stage I: update collapsed to zero (eta1 * lambda1 = 1 with no data gradient)");
    }
    out.u = normalized(u1, "stage I");
    return out;
}

StageTwoResult ttt_stage2(const AttentionParams& pretrained, int r, const AttentionContext& memory,
                          const Eigen::MatrixXd& stream_xs, const Eigen::VectorXd& stream_ys,
                          const Eigen::VectorXd& u_init, const MlpParams& head, double eta2,
                          const std::optional<Eigen::VectorXd>& beta, int record_every) {
    if (stream_xs.rows() != stream_ys.size()) throw ConfigError("stage II: stream rows and labels disagree");
    if (record_every < 1) throw ConfigError("stage II: record_every must be >= 1");
    const int steps = static_cast<int>(stream_ys.size());
    const Eigen::MatrixXd precond = std::sqrt(static_cast<double>(r)) * pretrained.gamma;
    StageTwoResult out;
    out.u = u_init;
    auto record = [&](int step, double loss, double grad_norm) {
        TrajectoryPoint p;
        p.step = step;
        p.alignment = beta ? beta->dot(out.u) / out.u.norm() : std::nan("");
        p.loss = loss;
        p.grad_norm = grad_norm;
        out.trajectory.push_back(p);
    };
    record(0, std::nan(""), std::nan(""));
    if (steps == 0 || eta2 == 0.0) {
        // Nothing moves; the trajectory is flat at the starting alignment.
        if (steps > 0) record(steps, std::nan(""), 0.0);
        return out;
    }
    memory.validate();
    LoraState lora{u_init};
    for (int t = 0; t < steps; ++t) {
        const FicWithGrad fg = f_ic_with_grad(pretrained, lora, head, memory, stream_xs.row(t).transpose());
        const double residual = fg.value - stream_ys[t];
        const Eigen::VectorXd step = precond * (residual * fg.grad_u);
        lora.u -= eta2 * step;
        const double norm = lora.u.norm();
        if (!std::isfinite(norm) || !(norm > 0.0)) {
            throw NumericError("stage II: non-finite or zero update at step " + std::to_string(t + 1));
        }
        lora.u /= norm;
        out.u = lora.u;
        if ((t + 1) % record_every == 0 || t + 1 == steps) {
            record(t + 1, 0.5 * residual * residual, step.norm());
        }
    }
    return out;
}

Eigen::VectorXd sample_stage3_bias(int m, int d, Rng& rng) {
    const double l = std::log(static_cast<double>(d));
    const double bound = l * l;
    Eigen::VectorXd b(m);
    for (int j = 0; j < m; ++j) b[j] = rng.uniform(-bound, bound);
    return b;
}

Eigen::MatrixXd relu_features(const Eigen::VectorXd& u, const MlpParams& head, const Eigen::MatrixXd& xs) {
    const Eigen::VectorXd z = xs * u;
    Eigen::MatrixXd phi(xs.rows(), head.width());
    for (int j = 0; j < head.width(); ++j) {
        phi.col(j) = (head.v[j] * z.array() + head.b[j]).max(0.0).matrix();
    }
    return phi;
}

double ridge_objective(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y, const Eigen::VectorXd& a,
                       double lambda) {
    const double n = static_cast<double>(y.size());
    return (phi * a - y).squaredNorm() / (2.0 * n) + 0.5 * lambda * a.squaredNorm();
}

RidgeSolution solve_ridge(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y, double lambda) {
    if (!(lambda > 0.0)) {
        throw ConfigError("ridge: lambda2 must be > 0 (the unregularized system can be singular)");
    }
    if (phi.rows() != y.size() || y.size() == 0) throw ConfigError("ridge: need N >= 1 labeled rows");
    const double n = static_cast<double>(y.size());
    const Eigen::Index m = phi.cols();
    const Eigen::VectorXd rhs = phi.transpose() * y / n;
    auto apply_normal = [&](const Eigen::VectorXd& a) -> Eigen::VectorXd {
        return phi.transpose() * (phi * a) / n + lambda * a;
    };
    RidgeSolution out;
    if (phi.rows() >= m) {
        Eigen::MatrixXd gram = Eigen::MatrixXd::Identity(m, m) * lambda;
        gram.selfadjointView<Eigen::Lower>().rankUpdate(phi.transpose(), 1.0 / n);
        const Eigen::LLT<Eigen::MatrixXd> llt(gram.selfadjointView<Eigen::Lower>());
        if (llt.info() != Eigen::Success) throw NumericError("ridge: normal equations not positive definite");
        out.a = llt.solve(rhs);
        out.a += llt.solve(rhs - apply_normal(out.a));
    } else {
        // a = Phi^T alpha with (Phi Phi^T / N + lambda I) alpha = y / N.
        Eigen::MatrixXd kernel = Eigen::MatrixXd::Identity(phi.rows(), phi.rows()) * lambda;
        kernel.selfadjointView<Eigen::Lower>().rankUpdate(phi, 1.0 / n);
        const Eigen::LLT<Eigen::MatrixXd> llt(kernel.selfadjointView<Eigen::Lower>());
        if (llt.info() != Eigen::Success) throw NumericError("ridge: kernel system not positive definite");
        const Eigen::VectorXd target = y / n;
        Eigen::VectorXd alpha = llt.solve(target);
        alpha += llt.solve(target - (phi * (phi.transpose() * alpha)) / n - lambda * alpha);
        out.a = phi.transpose() * alpha;
    }
    if (!out.a.allFinite()) throw NumericError("ridge: non-finite solution");
    const double rhs_norm = rhs.norm();
    const double res = (apply_normal(out.a) - rhs).norm();
    out.kkt_residual = rhs_norm > 0.0 ? res / rhs_norm : res;
    out.objective = ridge_objective(phi, y, out.a, lambda);
    return out;
}

StageThreeResult ttt_stage3(const Eigen::VectorXd& u, const MlpParams& head, const Eigen::MatrixXd& xs4,
                            const Eigen::VectorXd& ys4, double lambda2) {
    if (ys4.size() < 1) throw ConfigError("Stage III requires N4 >= 1");
    const Eigen::MatrixXd phi = relu_features(u, head, xs4);
    StageThreeResult out{head, solve_ridge(phi, ys4, lambda2)};
    out.head.a = out.fit.a;
    return out;
}

// ---------------------------------------------------------------- pipeline

StageHyper resolve_hyper(const TttConfig& cfg, int r, int ge, int m) {
    if (cfg.scaling == ScalingMode::Explicit) {
        return {cfg.eta1, cfg.lambda1, cfg.alpha1, cfg.eta2, cfg.alpha2};
    }
    if (!(cfg.scale_constant > 0.0)) throw ConfigError("theorem-orders mode needs scale_constant > 0");
    if (!(cfg.epsilon > 0.0 && cfg.epsilon < 1.0)) throw ConfigError("epsilon must lie in (0, 1)");
    const double c = cfg.scale_constant;
    const double rr = static_cast<double>(r);
    const double g = static_cast<double>(ge);
    StageHyper h{};
    h.alpha1 = c * std::pow(rr, -g / 2.0 - 1.0) / m;
    h.eta1 = c * std::pow(rr, 1.5 * g + 1.5);
    h.lambda1 = 1.0 / h.eta1;
    h.alpha2 = c * cfg.epsilon / rr / m;
    h.eta2 = c / std::sqrt(rr);
    return h;
}

int default_stream_length(int r, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("epsilon must lie in (0, 1)");
    const double rr = static_cast<double>(r);
    return static_cast<int>(std::ceil(rr * std::sqrt(rr) / epsilon * std::log(1.0 / epsilon)));
}

double epsilon_for_stream_length(int r, int n3) {
    const double rr = static_cast<double>(r);
    const double target = static_cast<double>(n3) / (rr * std::sqrt(rr));
    // (1/eps) ln(1/eps) is decreasing on (0, 1/e); bisect in log space.
    double lo = 1e-300;
    double hi = std::exp(-1.0);
    if (target <= std::exp(1.0)) throw ConfigError("N3 too small to imply an epsilon below 1/e");
    for (int iter = 0; iter < 200; ++iter) {
        const double mid = std::sqrt(lo * hi);
        const double value = std::log(1.0 / mid) / mid;
        if (value > target) lo = mid; else hi = mid;
    }
    return std::sqrt(lo * hi);
}

void PipelineConfig::validate() const {
    if (d < 1 || d > kMaxDimension) throw ConfigError("d must lie in [1, 256]");
    if (r < 1 || r > d) throw ConfigError("r must lie in [1, d]");
    if (m < 1) throw ConfigError("m must be >= 1");
    if (!(rho > 0.0)) throw ConfigError("rho must be > 0");
    if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
    link_spec.validate();
    const auto& g = ttt.groups;
    if (g.n1 < 0 || g.n2 < 0 || g.n4 < 0) throw ConfigError("context group sizes must be >= 0");
    if (g.n4 < 1) throw ConfigError("Stage III requires N4 >= 1");
    if (ttt.n_new < 0) throw ConfigError("N_new must be >= 0");
    if (g.n3 < 0 && !(ttt.epsilon > 0.0)) throw ConfigError("n3 and epsilon cannot both be automatic");
    if (!(ttt.lambda2 > 0.0)) throw ConfigError("lambda2 must be > 0");
    if (ttt.u_start == UStart::FixedAlignment && !(std::abs(ttt.init_alignment) <= 1.0)) {
        throw ConfigError("init_alignment must lie in [-1, 1]");
    }
    if (eval_samples < 100) throw ConfigError("risk estimation needs at least 100 samples");
}

double PipelineConfig::kappa() const { return kappa_scale > 0.0 ? kappa_scale : default_kappa_scale(d); }

TttConfig resolve_ttt(const TttConfig& ttt, int r) {
    TttConfig out = ttt;
    const bool auto_eps = !(ttt.epsilon > 0.0);
    if (ttt.groups.n3 < 0) {
        if (auto_eps) throw ConfigError("n3 and epsilon cannot both be automatic");
        out.groups.n3 = default_stream_length(r, ttt.epsilon);
    } else if (auto_eps && ttt.scaling == ScalingMode::TheoremOrders) {
        out.epsilon = epsilon_for_stream_length(r, ttt.groups.n3);
    }
    return out;
}

Prompt sample_ttt_prompt(const TttConfig& resolved, const Task& task, const Rng& ttt_rng) {
    Rng prompt_rng = ttt_rng.split(1);
    return sample_prompt(task, resolved.groups, prompt_rng);
}

PretrainedModel prepare_model(const PipelineConfig& cfg, const Subspace& sub, Rng& rng) {
    cfg.validate();
    if (sub.d() != cfg.d || sub.r() != cfg.r) throw ConfigError("subspace dimensions differ from config");
    Rng head_rng = rng.split(0x4845414Dull);
    Rng pretrain_rng = rng.split(0x50524554ull);
    PretrainedModel out;
    out.subspace = sub;
    const double alpha = cfg.gamma_source == GammaSource::Pretrain ? cfg.pretrain.alpha : 0.0;
    out.init_head = MlpParams::init(cfg.m, alpha, head_rng);
    out.attention.rho = cfg.rho;
    if (cfg.gamma_source == GammaSource::Oracle) {
        out.attention.gamma = oracle_gamma(sub, cfg.kappa());
    } else {
        PretrainConfig pc = cfg.pretrain;
        pc.d = cfg.d;
        pc.m = cfg.m;
        pc.rho = cfg.rho;
        const TaskDistribution tasks{sub, cfg.link_spec, cfg.tau};
        out.attention.gamma = pretrain_gamma(pc, out.init_head, tasks, pretrain_rng);
    }
    out.attention.validate();
    return out;
}

PipelineResult run_ttt(const PipelineConfig& cfg, const PretrainedModel& model, const Task& task, Rng& rng) {
    cfg.validate();
    const int d = cfg.d;
    const int r = cfg.r;
    const int m = cfg.m;
    if (task.beta.size() != d) throw ConfigError("task dimension differs from config");
    if (model.attention.gamma.rows() != d || model.init_head.width() != m) {
        throw ConfigError("model dimensions differ from config (d or m)");
    }
    const TttConfig ttt = resolve_ttt(cfg.ttt, r);

    Rng init_rng = rng.split(2);
    Rng stage1_rng = rng.split(3);
    Rng bias_rng = rng.split(4);

    const Prompt prompt = sample_ttt_prompt(ttt, task, rng);
    const StageHyper hyper = resolve_hyper(ttt, r, general_exponent(task.link), m);
    const Eigen::MatrixXd& gamma_star = model.attention.gamma;

    PipelineResult out;
    out.gamma_star = gamma_star;
    out.hyper = hyper;
    auto& diag = out.stage_diagnostics;

    AttentionContext memory;
    memory.xs = preprocess_context(gamma_star, r, prompt.group_xs(1));
    memory.ys = prompt.group_ys(1);

    // Stage I
    Eigen::VectorXd u;
    const Eigen::VectorXd u0 = init_u(gamma_star, r, init_rng);
    if (ttt.u_start == UStart::Beta) {
        u = task.beta;
    } else if (ttt.u_start == UStart::FixedAlignment) {
        // Unit vector in span(S_r) with <beta, u> = init_alignment.
        Eigen::VectorXd w = u0 - task.beta * task.beta.dot(u0);
        if (!(w.norm() > 0.0)) throw NumericError("fixed-alignment start: degenerate orthogonal draw");
        w.normalize();
        const double a0 = ttt.init_alignment;
        u = a0 * task.beta + std::sqrt(std::max(0.0, 1.0 - a0 * a0)) * w;
    } else {
        if (memory.size() == 0 && hyper.eta1 != 0.0 && ttt.n_new > 0) {
            throw ConfigError("Stage I needs N1 >= 1 attention memory when eta1 != 0");
        }
        MlpParams head1 = model.init_head;
        head1.a.setConstant(hyper.alpha1);
        add_diag(diag, "stage1", 0, "alignment", task.beta.dot(u0) / u0.norm());
        add_diag(diag, "stage1", 0, "u_norm", u0.norm());
        const StageOneResult s1 =
            ttt_stage1(model.attention, r, memory, u0, head1, ttt.n_new, hyper.eta1, hyper.lambda1, stage1_rng);
        u = s1.u;
        add_diag(diag, "stage1", 1, "alignment", task.beta.dot(u));
        add_diag(diag, "stage1", 1, "u_norm", u.norm());
        add_diag(diag, "stage1", 1, "loss", s1.loss);
        add_diag(diag, "stage1", 1, "grad_norm", s1.data_gradient.norm());
    }
    out.stage1_alignment = task.beta.dot(u) / u.norm();

    // Stage II
    if (ttt.u_start != UStart::Beta) {
        Eigen::MatrixXd stream_xs = prompt.group_xs(3);
        Eigen::VectorXd stream_ys = prompt.group_ys(3);
        if (ttt.group2_role == Group2Role::StreamPrefix && ttt.groups.n2 > 0) {
            Eigen::MatrixXd xs(ttt.groups.n2 + ttt.groups.n3, d);
            Eigen::VectorXd ys(xs.rows());
            xs << prompt.group_xs(2), stream_xs;
            ys << prompt.group_ys(2), stream_ys;
            stream_xs = std::move(xs);
            stream_ys = std::move(ys);
        }
        if (memory.size() == 0 && stream_ys.size() > 0 && hyper.eta2 != 0.0) {
            throw ConfigError("Stage II needs N1 >= 1 attention memory when eta2 != 0");
        }
        MlpParams head2 = model.init_head;
        head2.a.setConstant(hyper.alpha2);
        const StageTwoResult s2 = ttt_stage2(model.attention, r, memory, stream_xs, stream_ys, u, head2,
                                             hyper.eta2, task.beta, std::max(1, ttt.record_every));
        u = s2.u;
        out.alignment_trajectory = s2.trajectory;
        for (const auto& p : s2.trajectory) {
            add_diag(diag, "stage2", p.step, "alignment", p.alignment);
            if (p.step > 0) {
                add_diag(diag, "stage2", p.step, "loss", p.loss);
                add_diag(diag, "stage2", p.step, "grad_norm", p.grad_norm);
            }
        }
    }
    out.u_final = normalized(u, "final u");

    // Stage III
    MlpParams head3 = model.init_head;
    head3.b = sample_stage3_bias(m, d, bias_rng);
    const StageThreeResult s3 = ttt_stage3(out.u_final, head3, prompt.group_xs(4), prompt.group_ys(4), ttt.lambda2);
    out.mlp = s3.head;
    add_diag(diag, "stage3", 0, "loss", s3.fit.objective);
    add_diag(diag, "stage3", 0, "kkt_residual", s3.fit.kkt_residual);
    add_diag(diag, "stage3", 0, "u_norm", out.u_final.norm());
    return out;
}

PipelineResult run_pipeline(const PipelineConfig& cfg, const Subspace& sub, const Task& task, Rng& rng) {
    Rng model_rng = rng.split(0x4D4F44454Cull);
    Rng ttt_rng = rng.split(0x545454ull);
    const PretrainedModel model = prepare_model(cfg, sub, model_rng);
    return run_ttt(cfg, model, task, ttt_rng);
}

}  // namespace sitt
