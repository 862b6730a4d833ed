#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "sitt/error.hpp"
#include "sitt/taskgen.hpp"

using namespace sitt;
using doctest::Approx;

TEST_CASE("philox block matches the Random123 known-answer vectors") {
    using Block = std::array<std::uint32_t, 4>;
    CHECK(philox4x32_10({0, 0, 0, 0}, 0, 0) == Block{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
    CHECK(philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, 0xffffffffu, 0xffffffffu) ==
          Block{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
    CHECK(philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, 0xa4093822u, 0x299f31d0u) ==
          Block{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("rng streams are reproducible and split streams differ") {
    Rng a(99), b(99);
    for (int i = 0; i < 10; ++i) CHECK(a() == b());
    Rng c(99);
    CHECK(c() == 4976341095975804060ull);
    CHECK(c() == 3272193947342539156ull);
    const Rng root(1);
    Rng s1 = root.split(1), s2 = root.split(2), s1b = root.split(1);
    const auto x1 = s1(), x2 = s2(), x1b = s1b();
    CHECK(x1 == x1b);
    CHECK(x1 != x2);
}

TEST_CASE("rng uniform and normal moments") {
    Rng rng(4);
    const int n = 200000;
    double su = 0, sn = 0, sn2 = 0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        CHECK_FALSE((u < 0.0 || u >= 1.0));
        su += u;
        const double z = rng.normal();
        sn += z;
        sn2 += z * z;
    }
    CHECK(std::abs(su / n - 0.5) <= 5 * std::sqrt(1.0 / 12 / n));
    CHECK(std::abs(sn / n) <= 5 / std::sqrt(n));
    CHECK(std::abs(sn2 / n - 1.0) <= 5 * std::sqrt(2.0 / n));
}

TEST_CASE("sample_subspace") {
    Rng rng(1);
    const Subspace full = sample_subspace(3, 3, rng);
    CHECK((full.basis.transpose() * full.basis - Eigen::MatrixXd::Identity(3, 3)).norm() <= 1e-10);
    const Subspace s = sample_subspace(8, 2, rng);
    CHECK((s.basis.transpose() * s.basis - Eigen::MatrixXd::Identity(2, 2)).norm() <= 1e-10);
    CHECK_THROWS_AS(sample_subspace(3, 4, rng), ConfigError);
    CHECK_THROWS_AS(sample_subspace(3, 0, rng), ConfigError);
}

TEST_CASE("sample_subspace golden values") {
    // Frozen from the first run of this implementation.
    Rng rng(20240501);
    const Subspace s = sample_subspace(16, 4, rng);
    CHECK(s.basis(0, 0) == 0.16579147915180217);
    CHECK(s.basis(15, 3) == -0.15373984604639032);
    CHECK(s.basis(7, 1) == 0.54663097971689656);
    CHECK(s.basis.sum() == Approx(1.1615310972494974).epsilon(1e-14));
    Rng again(20240501);
    CHECK(sample_subspace(16, 4, again).basis == s.basis);
}

TEST_CASE("subspace_projector") {
    Rng rng(2);
    const Subspace full = sample_subspace(5, 5, rng);
    CHECK((subspace_projector(full) - Eigen::MatrixXd::Identity(5, 5)).norm() <= 1e-10);
    const Subspace s = sample_subspace(10, 3, rng);
    const Eigen::MatrixXd p = subspace_projector(s);
    CHECK((p * p - p).norm() <= 1e-10);
    CHECK((p - p.transpose()).norm() <= 1e-14);
    CHECK(p.trace() == Approx(3.0).epsilon(1e-12));
}

TEST_CASE("sample_feature") {
    Rng rng(3);
    const Subspace line = sample_subspace(6, 1, rng);
    const Eigen::VectorXd b1 = sample_feature(line, rng);
    CHECK(std::abs(std::abs(b1.dot(line.basis.col(0))) - 1.0) <= 1e-12);

    const Subspace s = sample_subspace(12, 4, rng);
    const Eigen::MatrixXd p = subspace_projector(s);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(12, 12);
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd b = sample_feature(s, rng);
        if (i < 100) {
            CHECK(std::abs(b.norm() - 1.0) <= 1e-10);
            CHECK((b - p * b).norm() <= 1e-10);
        }
        acc += b * b.transpose();
    }
    // E[beta beta^T] = P / r.
    CHECK((acc / n - p / 4.0).norm() <= 0.02);
}

TEST_CASE("parse_link_spec") {
    const LinkSpec spec = parse_link_spec("3:const(1), 4:unif(-0.5,0.5)");
    REQUIRE(spec.terms.size() == 2);
    CHECK(spec.terms.at(3) == CoefficientDist::constant(1.0));
    CHECK(spec.terms.at(4) == CoefficientDist::uniform(-0.5, 0.5));
    CHECK(parse_link_spec("1:1").terms.at(1) == CoefficientDist::constant(1.0));
    CHECK(parse_link_spec(spec.to_string()) == spec);
    CHECK_THROWS_AS(parse_link_spec(""), ConfigError);
    CHECK_THROWS_AS(parse_link_spec("3"), ConfigError);
    CHECK_THROWS_AS(parse_link_spec("3:unif(1)"), ConfigError);
    CHECK_THROWS_AS(parse_link_spec("3:1,3:2"), ConfigError);
    CHECK_THROWS_AS(parse_link_spec("3:unif(1,0)"), ConfigError);
    CHECK_THROWS_AS(parse_link_spec("3:abc"), ConfigError);
    CHECK_THROWS_AS(parse_link_spec("17:1").validate(), ConfigError);
    // Lowest degree must have a nonzero mean.
    CHECK_THROWS_AS(parse_link_spec("3:unif(-1,1),4:1").validate(), ConfigError);
}

TEST_CASE("sample_link uses orthonormal units") {
    Rng rng(4);
    const LinkFunction base = sample_link(parse_link_spec("3:const(1),4:unif(-0.5,0.5)"), rng);
    CHECK(base.coeffs().at(3) == Approx(std::sqrt(6.0)));
    const double c4 = base.coeffs().at(4) / std::sqrt(24.0);
    CHECK((c4 >= -0.5 && c4 <= 0.5));

    const LinkSpec shifted = parse_link_spec("3:unif(0.5,1.5),4:unif(-0.5,0.5)");
    for (int i = 0; i < 200; ++i) {
        const LinkFunction l = sample_link(shifted, rng);
        const double c3 = l.coeffs().at(3) / std::sqrt(6.0);
        CHECK((c3 >= 0.5 && c3 <= 1.5));
    }
    const LinkFunction he1 = sample_link(parse_link_spec("1:1"), rng);
    CHECK(he1(1.25) == Approx(1.25));
}

TEST_CASE("sample_prompt labels and groups") {
    Rng rng(5);
    const Subspace s = sample_subspace(8, 3, rng);
    const Task clean{sample_feature(s, rng), LinkFunction({{1, 1.0}, {2, 1.0}}), 0.0};
    CHECK_NOTHROW(clean.validate(s));
    const Prompt p = sample_prompt(clean, {4, 3, 2, 1}, rng);
    CHECK(p.xs.rows() == 10);
    CHECK(p.groups.total() == 10);
    for (int i = 0; i < 10; ++i) CHECK(p.ys[i] == clean.target(p.xs.row(i).transpose()));
    CHECK(p.query_y == clean.target(p.query_x));
    CHECK(p.group_xs(2).rows() == 3);
    CHECK(p.group_xs(2).row(0) == p.xs.row(4));
    CHECK(p.group_ys(4)[0] == p.ys[9]);
    CHECK_THROWS_AS(sample_prompt(clean, {-1, 0, 0, 0}, rng), ConfigError);

    const Task noisy{clean.beta, clean.link, 0.1};
    const Prompt q = sample_prompt(noisy, {0, 0, 100000, 0}, rng);
    double sum = 0.0;
    for (int i = 0; i < q.ys.size(); ++i) {
        const double zeta = q.ys[i] - noisy.target(q.xs.row(i).transpose());
        if (i < 1000) CHECK(std::abs(std::abs(zeta) - 0.1) <= 1e-12);
        sum += zeta;
    }
    const double n = static_cast<double>(q.ys.size());
    CHECK(std::abs(sum / n) <= 5 * 0.1 / std::sqrt(n));
}

TEST_CASE("prompts are deterministic given the seed") {
    Rng r1(77), r2(77);
    const Subspace s1 = sample_subspace(6, 2, r1), s2 = sample_subspace(6, 2, r2);
    const TaskDistribution dist1{s1, parse_link_spec("1:1,2:unif(-1,1)"), 0.1};
    const TaskDistribution dist2{s2, parse_link_spec("1:1,2:unif(-1,1)"), 0.1};
    const Task t1 = dist1.sample(r1), t2 = dist2.sample(r2);
    CHECK(t1.beta == t2.beta);
    CHECK(t1.link == t2.link);
    const Prompt p1 = sample_prompt(t1, {5, 5, 5, 5}, r1), p2 = sample_prompt(t2, {5, 5, 5, 5}, r2);
    CHECK(p1.xs == p2.xs);
    CHECK(p1.ys == p2.ys);
}

TEST_CASE("projection onto beta is standard normal (KS)") {
    Rng rng(6);
    const Subspace s = sample_subspace(10, 4, rng);
    const Eigen::VectorXd beta = sample_feature(s, rng);
    const int n = 10000;
    std::vector<double> z(n);
    for (int i = 0; i < n; ++i) z[i] = beta.dot(rng.normal_vector(10));
    std::sort(z.begin(), z.end());
    double ks = 0.0;
    for (int i = 0; i < n; ++i) {
        const double cdf = 0.5 * std::erfc(-z[i] / std::sqrt(2.0));
        ks = std::max({ks, std::abs(cdf - static_cast<double>(i) / n), std::abs(cdf - static_cast<double>(i + 1) / n)});
    }
    CHECK(ks < 1.628 / std::sqrt(static_cast<double>(n)));
}
