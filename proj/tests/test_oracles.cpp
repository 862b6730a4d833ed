#include <doctest.h>

#include <cmath>

#include "sitt/error.hpp"
#include "sitt/oracles.hpp"
#include "sitt/training.hpp"

using namespace sitt;
using doctest::Approx;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("finite_diff_grad") {
    const VectorXd p = (VectorXd(2) << 1.0, 2.0).finished();
    const VectorXd g = finite_diff_grad([](const VectorXd& x) { return x.squaredNorm(); }, p, 1e-5);
    CHECK(std::abs(g[0] - 2.0) <= 1e-8);
    CHECK(std::abs(g[1] - 4.0) <= 1e-8);
    CHECK(finite_diff_grad([](const VectorXd&) { return 3.0; }, p).norm() == 0.0);
    CHECK_THROWS_AS(finite_diff_grad([](const VectorXd&) { return 1.0; }, p, 0.0), ConfigError);
    CHECK_THROWS_WITH_AS(
        finite_diff_grad([](const VectorXd& x) { return x[1] > 2.0 ? std::nan("") : 0.0; }, p),
        "finite differences: non-finite value at coordinate 1", NumericError);
}

TEST_CASE("finite differences are exact on quadratics and second order otherwise") {
    Rng rng(1);
    MatrixXd a(4, 4);
    for (int i = 0; i < 4; ++i) a.row(i) = rng.normal_vector(4).transpose();
    const VectorXd x = rng.normal_vector(4);
    const VectorXd exact_q = (a + a.transpose()) * x;
    const auto quad = [&](const VectorXd& v) { return v.dot(a * v); };
    CHECK((finite_diff_grad(quad, x, 1e-3) - exact_q).norm() <= 1e-9);

    const auto cubic = [&](const VectorXd& v) { return v.dot(a * v) + v.array().cube().sum(); };
    const VectorXd exact_c = exact_q + 3.0 * x.array().square().matrix();
    const double e1 = (finite_diff_grad(cubic, x, 1e-2) - exact_c).norm();
    const double e2 = (finite_diff_grad(cubic, x, 5e-3) - exact_c).norm();
    CHECK(e1 / e2 == Approx(4.0).epsilon(0.05));
}

TEST_CASE("compare_gradients") {
    const VectorXd a = (VectorXd(3) << 1.0, -2.0, 0.5).finished();
    VectorXd b = a;
    b[2] += 0.02;
    const FiniteDiffReport rep = compare_gradients(a, b, 1e-5);
    CHECK(rep.argmax_index == 2);
    CHECK(rep.max_rel_error == Approx(0.01));
    CHECK(rep.step_h == 1e-5);
}

TEST_CASE("mc_expectation") {
    Rng rng(2);
    const auto normal1 = [](Rng& r) { return VectorXd::Constant(1, r.normal()); };
    const MeanEstimate c = mc_expectation([](const VectorXd&) { return VectorXd::Constant(2, 1.5); }, normal1, 100, rng);
    CHECK(c.mean == VectorXd::Constant(2, 1.5));
    CHECK(c.std_error.norm() == 0.0);

    const MeanEstimate id = mc_expectation([](const VectorXd& x) { return x; }, normal1, 100000, rng);
    CHECK(std::abs(id.mean[0]) <= 5 * id.std_error[0]);

    const MeanEstimate he3 = mc_expectation(
        [](const VectorXd& x) { return VectorXd::Constant(1, std::pow(hermite_eval(3, x[0]), 2)); }, normal1, 200000,
        rng);
    CHECK(std::abs(he3.mean[0] - 6.0) <= 5 * he3.std_error[0]);

    CHECK_THROWS_AS(mc_expectation([](const VectorXd& x) { return x; }, normal1, 1, rng), ConfigError);
    CHECK_THROWS_WITH_AS(
        mc_expectation([](const VectorXd& x) { return x[0] > 0 ? VectorXd::Constant(1, std::nan("")) : x; },
                       [](Rng&) { return VectorXd::Constant(1, 1.0); }, 10, rng),
        "non-finite Monte Carlo sample at index 0", NumericError);
}

TEST_CASE("stein_check") {
    Rng rng(3);
    const Subspace s = sample_subspace(8, 8, rng);
    const VectorXd beta = sample_feature(s, rng);

    SUBCASE("He_1: both sides are beta") {
        const SteinReport rep = stein_check(LinkFunction({{1, 1.0}}), beta, 100000, rng);
        CHECK((rep.rhs - beta).norm() <= 1e-12);
        CHECK(rep.max_z <= 5.0);
    }
    SUBCASE("He_2: both sides vanish") {
        const SteinReport rep = stein_check(LinkFunction({{2, 2.0}}), beta, 100000, rng);
        CHECK(rep.max_z <= 5.0);
        CHECK(rep.lhs.norm() <= 0.05);
    }
    SUBCASE("cubic-quartic link at d = 16") {
        const Subspace s16 = sample_subspace(16, 16, rng);
        const VectorXd b16 = sample_feature(s16, rng);
        const SteinReport rep =
            stein_check(LinkFunction({{3, std::sqrt(6.0)}, {4, 0.3 * std::sqrt(24.0)}}), b16, 100000, rng);
        CHECK(rep.max_z <= 5.0);
    }
    SUBCASE("deviation shrinks as 1/sqrt(M)") {
        const LinkFunction link({{1, 0.5}, {3, 2.0}});
        double small = 0.0, large = 0.0;
        for (int rep = 0; rep < 20; ++rep) {
            small += stein_check(link, beta, 10000, rng).deviation;
            large += stein_check(link, beta, 40000, rng).deviation;
        }
        CHECK(small / large == Approx(2.0).epsilon(0.3));
    }
    CHECK_THROWS_AS(stein_check(LinkFunction({{1, 1.0}}), beta, 9999, rng), ConfigError);
}

TEST_CASE("ridge_gd_oracle") {
    const GradientDescentResult zero =
        ridge_gd_oracle(MatrixXd::Ones(3, 2), VectorXd::Zero(3), 0.1, 1.0, 1000);
    CHECK(zero.a.norm() == 0.0);
    CHECK(zero.converged);

    const GradientDescentResult one = ridge_gd_oracle(MatrixXd::Ones(1, 1), VectorXd::Ones(1), 1.0, 0.1, 100000);
    CHECK(one.converged);
    CHECK(one.a[0] == Approx(0.5).epsilon(1e-10));

    Rng rng(4);
    for (int rep = 0; rep < 5; ++rep) {
        MatrixXd phi(64, 8);
        for (int i = 0; i < 64; ++i) phi.row(i) = rng.normal_vector(8).cwiseMax(0.0).transpose();
        const VectorXd y = rng.normal_vector(64);
        const GradientDescentResult gd = ridge_gd_oracle(phi, y, 1e-3, 1.0, 2000000);
        CHECK(gd.converged);
        CHECK(gd.rate > 0.0);
        CHECK((gd.a - solve_ridge(phi, y, 1e-3).a).lpNorm<Eigen::Infinity>() <= 1e-6);
    }

    const GradientDescentResult capped = ridge_gd_oracle(MatrixXd::Ones(4, 2), VectorXd::Ones(4), 1e-3, 1.0, 3);
    CHECK_FALSE(capped.converged);
    CHECK(capped.iterations == 3);
    CHECK_THROWS_AS(ridge_gd_oracle(MatrixXd::Ones(1, 1), VectorXd::Ones(1), 1.0, 0.0, 10), ConfigError);
}
