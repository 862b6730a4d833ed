#include "sitt/verify.hpp"

#include <algorithm>
#include <cmath>

#include "sitt/error.hpp"
#include "sitt/model.hpp"
#include "sitt/oracles.hpp"
#include "sitt/training.hpp"

namespace sitt {

namespace {

CheckResult check_le(const std::string& suite, const std::string& name, double measured, double tolerance) {
    return {suite, name, measured, tolerance, measured <= tolerance};
}

void hermite_suite(std::vector<CheckResult>& out, Rng rng) {
    const std::string s = "hermite";
    // Monte Carlo orthogonality, i, j <= 6.
    constexpr int kMax = 6;
    constexpr int kSamples = 200000;
    MeanAccumulator acc((kMax + 1) * (kMax + 1));
    Eigen::VectorXd products((kMax + 1) * (kMax + 1));
    for (int k = 0; k < kSamples; ++k) {
        const auto he = hermite_eval_all(kMax, rng.normal());
        for (int i = 0; i <= kMax; ++i) {
            for (int j = 0; j <= kMax; ++j) products[i * (kMax + 1) + j] = he[i] * he[j];
        }
        acc.add(products);
    }
    const MeanEstimate est = acc.result();
    double worst = 0.0;
    for (int i = 0; i <= kMax; ++i) {
        for (int j = 0; j <= kMax; ++j) {
            const int idx = i * (kMax + 1) + j;
            const double expected = i == j ? factorial(i) : 0.0;
            const double se = est.std_error[idx];
            const double gap = std::abs(est.mean[idx] - expected);
            worst = std::max(worst, se > 0.0 ? gap / se : gap);
        }
    }
    out.push_back(check_le(s, "mc_orthogonality_max_z_degree_le_6", worst, 5.0));

    // Three-term recurrence on random z in [-5, 5], i <= 20.
    double rec = 0.0;
    for (int k = 0; k < 200; ++k) {
        const double z = rng.uniform(-5.0, 5.0);
        for (int i = 1; i < 20; ++i) {
            const double lhs = hermite_eval(i + 1, z);
            const double rhs = z * hermite_eval(i, z) - i * hermite_eval(i - 1, z);
            const double scale = std::max({std::abs(lhs), std::abs(z * hermite_eval(i, z)),
                                           std::abs(i * hermite_eval(i - 1, z)), 1e-300});
            rec = std::max(rec, std::abs(lhs - rhs) / scale);
        }
    }
    out.push_back(check_le(s, "recurrence_max_rel_error", rec, 1e-9));

    // Quadrature orthogonality E[He_i He_j] = i! delta_ij for i, j <= 16.
    const GaussRule& rule = gauss_hermite_rule(64);
    double quad = 0.0;
    for (int i = 0; i <= 16; ++i) {
        for (int j = 0; j <= 16; ++j) {
            double sum = 0.0;
            for (std::size_t n = 0; n < rule.nodes.size(); ++n) {
                sum += rule.weights[n] * hermite_eval(i, rule.nodes[n]) * hermite_eval(j, rule.nodes[n]);
            }
            const double expected = i == j ? factorial(i) : 0.0;
            quad = std::max(quad, std::abs(sum - expected) / std::sqrt(factorial(i) * factorial(j)));
        }
    }
    out.push_back(check_le(s, "quadrature_orthogonality_rel_error", quad, 1e-10));

    // Basis round trip on random links.
    double trip = 0.0;
    double expand = 0.0;
    for (int k = 0; k < 50; ++k) {
        const LinkFunction link = random_link(rng, 8);
        const auto he = link.he_basis();
        std::map<int, double> he_map;
        for (std::size_t i = 0; i < he.size(); ++i) {
            if (he[i] != 0.0) he_map[static_cast<int>(i)] = he[i];
        }
        const auto back = monomial_to_hermite(hermite_to_monomial(he_map));
        double scale = 0.0;
        for (const auto& [deg, c] : he_map) scale = std::max(scale, std::abs(c));
        for (std::size_t i = 0; i < he.size(); ++i) {
            const auto it = back.find(static_cast<int>(i));
            const double got = it == back.end() ? 0.0 : it->second;
            trip = std::max(trip, std::abs(got - he[i]) / scale);
        }
        const auto coeffs = quadrature_expand([&](double z) { return link(z); }, link.degree() + 2);
        double cscale = 0.0;
        for (const auto& [deg, c] : link.coeffs()) cscale = std::max(cscale, std::abs(c));
        for (const auto& [deg, c] : coeffs) {
            const auto it = link.coeffs().find(deg);
            const double want = it == link.coeffs().end() ? 0.0 : it->second;
            expand = std::max(expand, std::abs(c - want) / cscale);
        }
    }
    out.push_back(check_le(s, "basis_round_trip_rel_error", trip, 1e-10));
    out.push_back(check_le(s, "quadrature_expand_rel_error", expand, 1e-9));
}

void exponents_suite(std::vector<CheckResult>& out, Rng rng) {
    const std::string s = "exponents";
    int disagree = 0;
    int order = 0;
    for (int k = 0; k < 100; ++k) {
        const LinkFunction link = random_link(rng, 5);
        const ExponentReport rep = exponents(link);
        if (rep.ge != general_exponent_bruteforce(link, 4)) ++disagree;
        if (!(rep.ge <= rep.ie && rep.ie <= rep.degree)) ++order;
    }
    out.push_back(check_le(s, "ge_vs_bruteforce_disagreements_of_100", disagree, 0.0));
    out.push_back(check_le(s, "ge_le_ie_le_degree_violations_of_100", order, 0.0));
}

MlpParams random_head(int m, Rng& rng) {
    MlpParams head = MlpParams::init(m, 0.0, rng);
    for (int j = 0; j < m; ++j) {
        head.a[j] = rng.normal();
        head.b[j] = rng.uniform(-1.0, 1.0);
    }
    return head;
}

void gradients_suite(std::vector<CheckResult>& out, Rng rng) {
    const std::string s = "gradients";
    double worst_u = 0.0;
    for (int k = 0; k < 20; ++k) {
        const int d = 8;
        const int n = 16;
        const AttentionParams att{rng.normal_vector(d * d).reshaped(d, d) / std::sqrt(d), 1.0};
        AttentionContext ctx{Eigen::MatrixXd(n, d), rng.normal_vector(n)};
        for (int i = 0; i < n; ++i) ctx.xs.row(i) = rng.normal_vector(d).transpose();
        const Eigen::VectorXd x = rng.normal_vector(d);
        const MlpParams head = random_head(8, rng);
        const Eigen::VectorXd u = rng.normal_vector(d) / std::sqrt(d);
        const Eigen::VectorXd analytic = grad_u_fic(att, LoraState{u}, head, ctx, x);
        const Eigen::VectorXd numeric = finite_diff_grad(
            [&](const Eigen::VectorXd& p) { return f_ic(att, LoraState{p}, head, ctx, x); }, u);
        worst_u = std::max(worst_u, compare_gradients(analytic, numeric, 1e-5).max_rel_error);
    }
    out.push_back(check_le(s, "grad_u_fic_max_rel_error_20_instances", worst_u, 1e-5));

    double worst_g = 0.0;
    for (int k = 0; k < 20; ++k) {
        const int d = 6;
        const int n = 8;
        AttentionParams att{rng.normal_vector(d * d).reshaped(d, d) / std::sqrt(d), 1.0};
        AttentionContext ctx{Eigen::MatrixXd(n, d), rng.normal_vector(n)};
        for (int i = 0; i < n; ++i) ctx.xs.row(i) = rng.normal_vector(d).transpose();
        const Eigen::VectorXd x = rng.normal_vector(d);
        const double y = rng.normal();
        const double lambda = 0.1;
        const MlpParams head = random_head(4, rng);
        const Eigen::MatrixXd analytic = grad_gamma_pretrain_loss(att, head, ctx, x, y, lambda);
        const Eigen::VectorXd flat = att.gamma.reshaped();
        const Eigen::VectorXd numeric = finite_diff_grad(
            [&](const Eigen::VectorXd& p) {
                const AttentionParams probe{p.reshaped(d, d), att.rho};
                const double r = f_ic(probe, head, ctx, x) - y;
                return r * r + lambda * p.squaredNorm();
            },
            flat);
        worst_g = std::max(worst_g, compare_gradients(analytic.reshaped(), numeric, 1e-5).max_rel_error);
    }
    out.push_back(check_le(s, "grad_gamma_pretrain_max_rel_error_20_instances", worst_g, 1e-5));
}

void stein_suite(std::vector<CheckResult>& out, Rng rng) {
    const std::string s = "stein";
    struct Case {
        std::string name;
        LinkFunction link;
        int d;
    };
    const std::vector<Case> cases = {
        {"he1_d8", LinkFunction({{1, 1.0}}), 8},
        {"he2_d8", LinkFunction({{2, 2.0}}), 8},
        {"he3_plus_he4_d16", LinkFunction({{3, std::sqrt(6.0)}, {4, 0.3 * std::sqrt(24.0)}}), 16},
    };
    for (const auto& c : cases) {
        Eigen::VectorXd beta = rng.normal_vector(c.d);
        beta.normalize();
        const SteinReport rep = stein_check(c.link, beta, 100000, rng);
        out.push_back(check_le(s, "max_z_" + c.name, rep.max_z, 5.0));
    }
}

void ridge_suite(std::vector<CheckResult>& out, Rng rng) {
    const std::string s = "ridge";
    double worst = 0.0;
    double kkt = 0.0;
    int unconverged = 0;
    for (int k = 0; k < 20; ++k) {
        const int d = 4;
        const int m = 8;
        const int n = 64;
        Eigen::VectorXd u = rng.normal_vector(d);
        u.normalize();
        MlpParams head = MlpParams::init(m, 0.0, rng);
        head.b = sample_stage3_bias(m, d, rng);
        Eigen::MatrixXd xs(n, d);
        for (int i = 0; i < n; ++i) xs.row(i) = rng.normal_vector(d).transpose();
        Eigen::VectorXd y(n);
        for (int i = 0; i < n; ++i) y[i] = std::pow(u.dot(xs.row(i).transpose()), 2) - 1.0 + 0.1 * rng.sign();
        const Eigen::MatrixXd phi = relu_features(u, head, xs);
        const RidgeSolution closed = solve_ridge(phi, y, 1e-3);
        const GradientDescentResult gd = ridge_gd_oracle(phi, y, 1e-3, 1.0, 2000000);
        if (!gd.converged) ++unconverged;
        worst = std::max(worst, (closed.a - gd.a).cwiseAbs().maxCoeff());
        kkt = std::max(kkt, closed.kkt_residual);
    }
    out.push_back(check_le(s, "closed_form_vs_gd_inf_norm_20_instances", worst, 1e-6));
    out.push_back(check_le(s, "kkt_relative_residual_max", kkt, 1e-8));
    out.push_back(check_le(s, "gd_unconverged_instances", unconverged, 0.0));
}

}  // namespace

const std::vector<std::string>& verify_suite_names() {
    static const std::vector<std::string> names = {"hermite", "exponents", "gradients", "stein", "ridge"};
    return names;
}

LinkFunction random_link(Rng& rng, int max_degree) {
    const bool even_only = rng.uniform() < 0.5;
    for (;;) {
        std::map<int, double> coeffs;
        for (int deg = 1; deg <= max_degree; ++deg) {
            if (even_only && deg % 2 == 1) continue;
            if (rng.uniform() < 0.5) coeffs[deg] = rng.uniform(-2.0, 2.0) * std::sqrt(factorial(deg));
        }
        if (!coeffs.empty()) return LinkFunction(coeffs, 1e6);
    }
}

std::vector<CheckResult> run_verify_suite(const std::string& suite, std::uint64_t seed) {
    const auto& names = verify_suite_names();
    if (suite == "all") {
        std::vector<CheckResult> all;
        for (const auto& name : names) {
            auto part = run_verify_suite(name, seed);
            all.insert(all.end(), part.begin(), part.end());
        }
        return all;
    }
    const Rng root(seed);
    std::vector<CheckResult> out;
    if (suite == "hermite") {
        hermite_suite(out, root.split(1));
    } else if (suite == "exponents") {
        exponents_suite(out, root.split(2));
    } else if (suite == "gradients") {
        gradients_suite(out, root.split(3));
    } else if (suite == "stein") {
        stein_suite(out, root.split(4));
    } else if (suite == "ridge") {
        ridge_suite(out, root.split(5));
    } else {
        throw ConfigError("unknown suite '" + suite + "' (expected hermite, exponents, gradients, stein, ridge or all)");
    }
    return out;
}

}  // namespace sitt
