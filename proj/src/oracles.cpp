#include "sitt/oracles.hpp"

#include <cmath>
#include <string>

#include "sitt/error.hpp"

namespace sitt {

Eigen::VectorXd finite_diff_grad(const std::function<double(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& point, double h) {
    if (!(h > 0.0)) throw ConfigError("finite differences need h > 0");
    Eigen::VectorXd grad(point.size());
    Eigen::VectorXd probe = point;
    for (Eigen::Index i = 0; i < point.size(); ++i) {
        probe[i] = point[i] + h;
        const double up = f(probe);
        probe[i] = point[i] - h;
        const double down = f(probe);
        probe[i] = point[i];
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("finite differences: non-finite value at coordinate " + std::to_string(i));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

FiniteDiffReport compare_gradients(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric,
                                   double h) {
    if (analytic.size() != numeric.size()) throw ConfigError("gradient sizes differ");
    FiniteDiffReport report;
    report.step_h = h;
    if (analytic.size() == 0) return report;
    const double scale = std::max(analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff());
    const double diff = (analytic - numeric).cwiseAbs().maxCoeff(&report.argmax_index);
    report.max_rel_error = scale > 0.0 ? diff / scale : diff;
    return report;
}

MeanAccumulator::MeanAccumulator(Eigen::Index dim)
    : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)) {}

void MeanAccumulator::add(const Eigen::VectorXd& sample) {
    ++count_;
    const Eigen::VectorXd delta = sample - mean_;
    mean_ += delta / count_;
    m2_ += delta.cwiseProduct(sample - mean_);
}

MeanEstimate MeanAccumulator::result() const {
    MeanEstimate out;
    out.mean = mean_;
    out.samples = count_;
    if (count_ >= 2) {
        out.std_error = (m2_ / (count_ - 1.0) / count_).cwiseSqrt();
    } else {
        out.std_error = Eigen::VectorXd::Constant(mean_.size(), std::nan(""));
    }
    return out;
}

MeanEstimate mc_expectation(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                            const std::function<Eigen::VectorXd(Rng&)>& sampler, int samples, Rng& rng) {
    if (samples < 2) throw ConfigError("Monte Carlo expectation needs at least 2 samples");
    Eigen::VectorXd first = f(sampler(rng));
    MeanAccumulator acc(first.size());
    for (int k = 0; k < samples; ++k) {
        Eigen::VectorXd value = k == 0 ? std::move(first) : f(sampler(rng));
        if (!value.allFinite()) throw NumericError("non-finite Monte Carlo sample at index " + std::to_string(k));
        acc.add(value);
    }
    return acc.result();
}

SteinReport stein_check(const LinkFunction& link, const Eigen::VectorXd& beta, int samples, Rng& rng) {
    if (samples < 10000) throw ConfigError("stein_check needs at least 1e4 samples");
    const auto d = beta.size();
    MeanAccumulator lhs(d);
    MeanAccumulator diff(d);
    double deriv_sum = 0.0;
    for (int k = 0; k < samples; ++k) {
        const Eigen::VectorXd x = rng.normal_vector(d);
        const double z = beta.dot(x);
        const double fz = link(z);
        const double dz = link.derivative(z);
        lhs.add(fz * x);
        diff.add(fz * x - dz * beta);
        deriv_sum += dz;
    }
    SteinReport out;
    out.lhs = lhs.result().mean;
    out.rhs = (deriv_sum / samples) * beta;
    const MeanEstimate paired = diff.result();
    out.std_error = paired.std_error;
    out.deviation = (out.lhs - out.rhs).norm();
    for (Eigen::Index i = 0; i < d; ++i) {
        const double gap = std::abs(paired.mean[i]);
        const double z = paired.std_error[i] > 0.0 ? gap / paired.std_error[i] : (gap > 0.0 ? INFINITY : 0.0);
        out.max_z = std::max(out.max_z, z);
    }
    return out;
}

GradientDescentResult ridge_gd_oracle(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y, double lambda,
                                      double rate, int iters) {
    if (phi.rows() != y.size() || y.size() == 0) throw ConfigError("ridge oracle: need N >= 1 rows");
    if (!(rate > 0.0)) throw ConfigError("ridge oracle: rate must be > 0");
    const double n = static_cast<double>(y.size());
    const Eigen::Index m = phi.cols();
    const Eigen::MatrixXd gram = phi.transpose() * phi / n;
    const Eigen::VectorXd rhs = phi.transpose() * y / n;

    // Power iteration for the top eigenvalue of the objective's Hessian.
    Eigen::VectorXd probe = Eigen::VectorXd::Ones(m) / std::sqrt(static_cast<double>(m));
    double top = 0.0;
    for (int k = 0; k < 200; ++k) {
        const Eigen::VectorXd next = gram * probe;
        const double norm = next.norm();
        if (!(norm > 0.0)) break;
        top = norm;
        probe = next / norm;
    }
    // 5% headroom over the estimate covers power-iteration underestimation.
    const double smoothness = 1.05 * top + lambda;

    GradientDescentResult out;
    out.rate = std::min(rate, 1.0 / smoothness);
    out.a = Eigen::VectorXd::Zero(m);
    auto objective = [&](const Eigen::VectorXd& a) {
        return 0.5 * a.dot(gram * a) - rhs.dot(a) + 0.5 * lambda * a.squaredNorm();
    };
    double previous = objective(out.a);
    int increases = 0;
    for (out.iterations = 0; out.iterations < iters; ++out.iterations) {
        const Eigen::VectorXd grad = gram * out.a + lambda * out.a - rhs;
        out.grad_norm = grad.norm();
        if (out.grad_norm <= 1e-10) {
            out.converged = true;
            return out;
        }
        out.a -= out.rate * grad;
        const double current = objective(out.a);
        increases = current > previous ? increases + 1 : 0;
        if (increases >= 10) throw NumericError("ridge oracle: objective increased for 10 consecutive steps");
        previous = current;
    }
    out.grad_norm = (gram * out.a + lambda * out.a - rhs).norm();
    out.converged = out.grad_norm <= 1e-10;
    return out;
}

}  // namespace sitt
