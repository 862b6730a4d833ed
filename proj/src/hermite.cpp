#include "sitt/hermite.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <string>

#include <Eigen/Dense>

#include "sitt/error.hpp"

namespace sitt {

namespace {

void check_degree(int i) {
    if (i < 0 || i > kMaxHermiteDegree) {
        throw ConfigError("Hermite degree " + std::to_string(i) + " outside [0, " +
                          std::to_string(kMaxHermiteDegree) + "]");
    }
}

// n! / (m! (n-2m)! 2^m): coefficient of He_{n-2m} in z^n.
double power_to_he_coeff(int n, int m) {
    if (n <= 20) {
        std::uint64_t num = 1;
        for (int k = n - 2 * m + 1; k <= n; ++k) num *= static_cast<std::uint64_t>(k);
        std::uint64_t den = 1;
        for (int k = 2; k <= m; ++k) den *= static_cast<std::uint64_t>(k);
        return static_cast<double>(num / den) / std::ldexp(1.0, m);
    }
    return std::exp(std::lgamma(n + 1.0) - std::lgamma(m + 1.0) - std::lgamma(n - 2.0 * m + 1.0) -
                    m * std::log(2.0));
}

std::vector<double> multiply(const std::vector<double>& p, const std::vector<double>& q) {
    std::vector<double> out(p.size() + q.size() - 1, 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        for (std::size_t j = 0; j < q.size(); ++j) out[i + j] += p[i] * q[j];
    }
    return out;
}

GaussRule build_rule(int n) {
    // Golub-Welsch for the monic recurrence z He_k = He_{k+1} + k He_{k-1};
    // nodes then polished by Newton on the normalized polynomials and weights
    // taken from 1 / (n psi_{n-1}(x)^2), psi_k = He_k / sqrt(k!).
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
        jacobi(k, k - 1) = jacobi(k - 1, k);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi, Eigen::EigenvaluesOnly);
    GaussRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    auto normalized = [n](double z, double& psi_n, double& psi_nm1) {
        double prev = 0.0;
        double cur = 1.0;
        for (int k = 0; k < n; ++k) {
            const double next = (z * cur - std::sqrt(static_cast<double>(k)) * prev) /
                                std::sqrt(static_cast<double>(k + 1));
            prev = cur;
            cur = next;
        }
        psi_n = cur;
        psi_nm1 = prev;
    };
    for (int i = 0; i < n; ++i) {
        double z = solver.eigenvalues()[i];
        double psi_n = 0.0;
        double psi_nm1 = 0.0;
        for (int iter = 0; iter < 3; ++iter) {
            normalized(z, psi_n, psi_nm1);
            z -= psi_n / (std::sqrt(static_cast<double>(n)) * psi_nm1);
        }
        normalized(z, psi_n, psi_nm1);
        rule.nodes[i] = z;
        rule.weights[i] = 1.0 / (n * psi_nm1 * psi_nm1);
    }
    return rule;
}

}  // namespace

double hermite_eval(int i, double z) {
    check_degree(i);
    if (i == 0) return 1.0;
    double prev = 1.0;
    double cur = z;
    for (int k = 1; k < i; ++k) {
        const double next = z * cur - k * prev;
        prev = cur;
        cur = next;
    }
    return cur;
}

std::vector<double> hermite_eval_all(int n, double z) {
    check_degree(n);
    std::vector<double> out(n + 1);
    out[0] = 1.0;
    if (n >= 1) out[1] = z;
    for (int k = 1; k < n; ++k) out[k + 1] = z * out[k] - k * out[k - 1];
    return out;
}

double factorial(int i) {
    if (i < 0) throw ConfigError("factorial of negative integer");
    if (i > 20) return std::exp(std::lgamma(i + 1.0));
    double out = 1.0;
    for (int k = 2; k <= i; ++k) out *= k;
    return out;
}

LinkFunction::LinkFunction(std::map<int, double> coeffs, double coeff_bound)
    : coeffs_(std::move(coeffs)), coeff_bound_(coeff_bound) {
    if (coeffs_.empty()) throw ConfigError("link function needs at least one coefficient");
    double sum_sq = 0.0;
    bool any_nonzero = false;
    for (const auto& [deg, c] : coeffs_) {
        if (deg < 1 || deg > kMaxLinkDegree) {
            throw ConfigError("link degree " + std::to_string(deg) + " outside [1, " +
                              std::to_string(kMaxLinkDegree) + "]");
        }
        if (!std::isfinite(c)) throw ConfigError("non-finite link coefficient");
        sum_sq += c * c;
        any_nonzero = any_nonzero || std::abs(c) > kCoeffTolerance;
    }
    if (!any_nonzero) throw ConfigError("all link coefficients are zero");
    if (sum_sq > coeff_bound_) {
        throw ConfigError("sum of squared link coefficients " + std::to_string(sum_sq) +
                          " exceeds bound " + std::to_string(coeff_bound_));
    }
}

double LinkFunction::operator()(double z) const {
    const auto he = hermite_eval_all(coeffs_.rbegin()->first, z);
    double out = 0.0;
    for (const auto& [deg, c] : coeffs_) out += c / factorial(deg) * he[deg];
    return out;
}

double LinkFunction::derivative(double z) const {
    // He_i' = i He_{i-1}
    const auto he = hermite_eval_all(coeffs_.rbegin()->first, z);
    double out = 0.0;
    for (const auto& [deg, c] : coeffs_) out += c / factorial(deg - 1) * he[deg - 1];
    return out;
}

int LinkFunction::degree() const {
    for (auto it = coeffs_.rbegin(); it != coeffs_.rend(); ++it) {
        if (std::abs(it->second) > kCoeffTolerance) return it->first;
    }
    return 0;
}

std::vector<double> LinkFunction::he_basis() const {
    std::vector<double> out(degree() + 1, 0.0);
    for (const auto& [deg, c] : coeffs_) {
        if (deg < static_cast<int>(out.size())) out[deg] = c / factorial(deg);
    }
    return out;
}

std::vector<double> LinkFunction::monomials() const {
    std::map<int, double> he;
    const auto basis = he_basis();
    for (std::size_t k = 0; k < basis.size(); ++k) {
        if (basis[k] != 0.0) he[static_cast<int>(k)] = basis[k];
    }
    return hermite_to_monomial(he);
}

double link_eval(const LinkFunction& link, double z) { return link(z); }

std::map<int, double> monomial_to_hermite(std::span<const double> poly) {
    if (poly.size() > static_cast<std::size_t>(kMaxHermiteDegree) + 1) {
        throw ConfigError("polynomial degree exceeds " + std::to_string(kMaxHermiteDegree));
    }
    std::vector<double> acc(poly.size(), 0.0);
    for (std::size_t n = 0; n < poly.size(); ++n) {
        if (poly[n] == 0.0) continue;
        const int deg = static_cast<int>(n);
        for (int m = 0; 2 * m <= deg; ++m) acc[deg - 2 * m] += poly[n] * power_to_he_coeff(deg, m);
    }
    std::map<int, double> out;
    for (std::size_t k = 0; k < acc.size(); ++k) {
        if (acc[k] != 0.0) out[static_cast<int>(k)] = acc[k];
    }
    return out;
}

std::vector<double> hermite_to_monomial(const std::map<int, double>& he_coeffs) {
    if (he_coeffs.empty()) return {0.0};
    const int top = he_coeffs.rbegin()->first;
    check_degree(top);
    std::vector<double> out(top + 1, 0.0);
    // Power-basis coefficients of He_k built by the recurrence.
    std::vector<double> prev(top + 1, 0.0);
    std::vector<double> cur(top + 1, 0.0);
    cur[0] = 1.0;
    for (int k = 0; k <= top; ++k) {
        if (auto it = he_coeffs.find(k); it != he_coeffs.end()) {
            for (int p = 0; p <= k; ++p) out[p] += it->second * cur[p];
        }
        std::vector<double> next(top + 1, 0.0);
        for (int p = 0; p < top; ++p) next[p + 1] = cur[p];
        for (int p = 0; p <= top; ++p) next[p] -= k * prev[p];
        prev = std::move(cur);
        cur = std::move(next);
    }
    return out;
}

int information_exponent(const std::map<int, double>& he_coeffs) {
    for (const auto& [deg, c] : he_coeffs) {
        if (deg >= 1 && std::abs(c) > kCoeffTolerance) return deg;
    }
    throw ConfigError("information exponent undefined: no nonzero coefficient of degree >= 1");
}

int information_exponent(const LinkFunction& link) { return information_exponent(link.coeffs()); }

int general_exponent(const LinkFunction& link) {
    for (const auto& [deg, c] : link.coeffs()) {
        if (deg % 2 == 1 && std::abs(c) > kCoeffTolerance) return 1;
    }
    return 2;
}

int general_exponent_bruteforce(const LinkFunction& link, int max_power) {
    const auto base = link.monomials();
    std::vector<double> power = base;
    int best = kMaxHermiteDegree + 1;
    for (int j = 1; j <= max_power; ++j) {
        if (j > 1) power = multiply(power, base);
        const auto he = monomial_to_hermite(power);
        bool has_nonconstant = false;
        for (const auto& [deg, c] : he) has_nonconstant = has_nonconstant || (deg >= 1 && std::abs(c) > kCoeffTolerance);
        if (has_nonconstant) best = std::min(best, information_exponent(he));
    }
    return best;
}

ExponentReport exponents(const LinkFunction& link) {
    return {link.degree(), information_exponent(link), general_exponent(link)};
}

const GaussRule& gauss_hermite_rule(int nodes) {
    if (nodes < 1 || nodes > 1024) throw ConfigError("Gauss-Hermite node count must lie in [1, 1024]");
    static std::mutex mutex;
    static std::map<int, std::unique_ptr<GaussRule>> cache;
    std::lock_guard lock(mutex);
    auto& slot = cache[nodes];
    if (!slot) slot = std::make_unique<GaussRule>(build_rule(nodes));
    return *slot;
}

std::map<int, double> quadrature_expand(const std::function<double(double)>& f, int max_degree,
                                        int nodes) {
    check_degree(max_degree);
    if (nodes < 4 * max_degree) {
        throw ConfigError("quadrature needs at least 4*max_degree nodes (" +
                          std::to_string(4 * max_degree) + "), got " + std::to_string(nodes));
    }
    const GaussRule& rule = gauss_hermite_rule(nodes);
    std::vector<double> acc(max_degree + 1, 0.0);
    for (int k = 0; k < nodes; ++k) {
        const double fz = f(rule.nodes[k]) * rule.weights[k];
        const auto he = hermite_eval_all(max_degree, rule.nodes[k]);
        for (int i = 0; i <= max_degree; ++i) acc[i] += fz * he[i];
    }
    std::map<int, double> out;
    for (int i = 0; i <= max_degree; ++i) out[i] = acc[i];
    return out;
}

ClippedLink::ClippedLink(LinkFunction base, double rho, double clip)
    : base_(std::move(base)), rho_(rho), clip_(clip) {
    if (!(rho > 0.0)) throw ConfigError("clipped link needs rho > 0");
    if (!(clip > 0.0)) throw ConfigError("clipped link needs clip > 0");
}

ClippedLink ClippedLink::for_dimension(LinkFunction base, double rho, int d) {
    if (d < 3) throw ConfigError("clip threshold 1/ln(d) needs d >= 3");
    return ClippedLink(std::move(base), rho, 1.0 / std::log(static_cast<double>(d)));
}

double ClippedLink::operator()(double z) const {
    const double scaled = base_(z) / rho_;
    return std::abs(scaled) <= clip_ ? scaled : 0.0;
}

}  // namespace sitt
