#pragma once

#include <map>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "sitt/hermite.hpp"
#include "sitt/rng.hpp"

namespace sitt {

/// d x r matrix with orthonormal columns spanning the feature subspace.
struct Subspace {
    Eigen::MatrixXd basis;

    [[nodiscard]] int d() const { return static_cast<int>(basis.rows()); }
    [[nodiscard]] int r() const { return static_cast<int>(basis.cols()); }
    /// Throws ConfigError when U^T U deviates from I_r by more than 1e-10.
    void validate() const;
};

Subspace sample_subspace(int d, int r, Rng& rng);

/// P = U U^T.
Eigen::MatrixXd subspace_projector(const Subspace& sub);

/// Uniform unit vector in span(sub).
Eigen::VectorXd sample_feature(const Subspace& sub, Rng& rng);

/// Distribution of one link coefficient.
struct CoefficientDist {
    enum class Kind { Constant, Uniform };
    Kind kind = Kind::Constant;
    double lo = 0.0;  // the constant, or the lower bound
    double hi = 0.0;

    static CoefficientDist constant(double value) { return {Kind::Constant, value, value}; }
    static CoefficientDist uniform(double lo, double hi) { return {Kind::Uniform, lo, hi}; }
    [[nodiscard]] double mean() const { return 0.5 * (lo + hi); }
    double draw(Rng& rng) const;

    friend bool operator==(const CoefficientDist&, const CoefficientDist&) = default;
};

/// Per-degree coefficient distributions for random links.
///
/// Values are in orthonormal units: a draw k at degree i contributes
/// k * He_i / sqrt(i!), i.e. c_i = k * sqrt(i!). So {3: 1} is He_3/sqrt(6).
struct LinkSpec {
    std::map<int, CoefficientDist> terms;
    double coeff_bound = LinkFunction::kDefaultCoeffBound;

    /// Throws ConfigError if the lowest degree has a zero-mean distribution.
    void validate() const;
    [[nodiscard]] std::string to_string() const;

    /// Constant spec reproducing a fixed link.
    static LinkSpec fixed(const LinkFunction& link);

    friend bool operator==(const LinkSpec& a, const LinkSpec& b) { return a.terms == b.terms; }
};

/// Parses "3:const(1), 4:unif(-0.5,0.5)". Throws ConfigError on bad input.
LinkSpec parse_link_spec(std::string_view text);

/// Independent draws per degree; all-zero draws are resampled.
LinkFunction sample_link(const LinkSpec& spec, Rng& rng);

struct Task {
    Eigen::VectorXd beta;
    LinkFunction link;
    double tau = 0.0;

    [[nodiscard]] double target(const Eigen::Ref<const Eigen::VectorXd>& x) const {
        return link(beta.dot(x));
    }
    /// Unit norm and membership in span(sub), both to 1e-10.
    void validate(const Subspace& sub) const;
};

/// Per-prompt draw of (beta, link) from the task family.
struct TaskDistribution {
    Subspace subspace;
    LinkSpec link_spec;
    double tau = 0.0;

    Task sample(Rng& rng) const;
};

struct GroupSizes {
    int n1 = 0;
    int n2 = 0;
    int n3 = 0;
    int n4 = 0;

    [[nodiscard]] int total() const { return n1 + n2 + n3 + n4; }
    [[nodiscard]] int offset(int group) const;
    [[nodiscard]] int size(int group) const;
};

/// Contexts stored row-wise: xs is N x d.
struct Prompt {
    Eigen::MatrixXd xs;
    Eigen::VectorXd ys;
    Eigen::VectorXd query_x;
    double query_y = 0.0;
    GroupSizes groups;

    /// Rows of group g in {1, 2, 3, 4}.
    [[nodiscard]] Eigen::MatrixXd group_xs(int g) const;
    [[nodiscard]] Eigen::VectorXd group_ys(int g) const;
};

/// y = sigma(<beta, x>) + zeta with zeta a fair +-tau coin.
Prompt sample_prompt(const Task& task, const GroupSizes& sizes, Rng& rng);

/// n fresh labeled draws from the task: fills xs (n x d) and ys.
void sample_labeled(const Task& task, int n, Rng& rng, Eigen::MatrixXd& xs, Eigen::VectorXd& ys);

}  // namespace sitt
