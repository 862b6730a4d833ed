#pragma once

#include <functional>

#include <Eigen/Dense>

#include "sitt/hermite.hpp"
#include "sitt/rng.hpp"

namespace sitt {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
Eigen::VectorXd finite_diff_grad(const std::function<double(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& point, double h = 1e-5);

struct FiniteDiffReport {
    /// max_i |analytic_i - numeric_i| / max(||analytic||_inf, ||numeric||_inf)
    double max_rel_error = 0.0;
    Eigen::Index argmax_index = 0;
    double step_h = 0.0;
};

FiniteDiffReport compare_gradients(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric,
                                   double h);

/// Streaming mean and standard error per coordinate.
struct MeanEstimate {
    Eigen::VectorXd mean;
    Eigen::VectorXd std_error;
    int samples = 0;
};

/// Welford accumulator over vector-valued samples.
class MeanAccumulator {
public:
    explicit MeanAccumulator(Eigen::Index dim);
    void add(const Eigen::VectorXd& sample);
    [[nodiscard]] MeanEstimate result() const;

private:
    Eigen::VectorXd mean_;
    Eigen::VectorXd m2_;
    int count_ = 0;
};

/// Monte Carlo estimate of E[f(X)] with X = sampler(rng). Throws NumericError
/// naming the first non-finite sample.
MeanEstimate mc_expectation(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                            const std::function<Eigen::VectorXd(Rng&)>& sampler, int samples, Rng& rng);

struct SteinReport {
    Eigen::VectorXd lhs;        // E[sigma(<beta,x>) x]
    Eigen::VectorXd rhs;        // E[sigma'(<beta,x>)] beta
    double deviation = 0.0;     // ||lhs - rhs||
    Eigen::VectorXd std_error;  // per coordinate, of the paired difference
    /// max_i |lhs_i - rhs_i| / std_error_i
    double max_z = 0.0;
};

/// Monte Carlo check of E[f(<beta,x>) x] = E[f'(<beta,x>)] beta for x ~ N(0, I_d).
SteinReport stein_check(const LinkFunction& link, const Eigen::VectorXd& beta, int samples, Rng& rng);

struct GradientDescentResult {
    Eigen::VectorXd a;
    int iterations = 0;
    bool converged = false;
    double grad_norm = 0.0;
    double rate = 0.0;
};

/// Plain gradient descent on (1/2N)||Phi a - y||^2 + (lambda/2)||a||^2 from a = 0.
/// The rate is clamped to 1/L with L estimated by power iteration. Stops at
/// gradient norm <= 1e-10 or after `iters`.
GradientDescentResult ridge_gd_oracle(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y, double lambda,
                                      double rate, int iters);

}  // namespace sitt
