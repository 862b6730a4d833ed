#pragma once

#include <functional>
#include <map>
#include <span>
#include <vector>

namespace sitt {

inline constexpr int kMaxHermiteDegree = 64;
inline constexpr int kMaxLinkDegree = 16;
/// Coefficients with magnitude at or below this are treated as zero when
/// computing exponents.
inline constexpr double kCoeffTolerance = 1e-12;

/// Probabilist's Hermite polynomial He_i(z) by the three-term recurrence.
/// Throws ConfigError for i outside [0, 64].
double hermite_eval(int i, double z);

/// He_0(z), ..., He_n(z).
std::vector<double> hermite_eval_all(int n, double z);

/// i!, via log-gamma above 20.
double factorial(int i);

/// Polynomial link sigma(z) = sum_i (c_i / i!) He_i(z), with c_i = E[sigma(z) He_i(z)].
///
/// Degrees lie in [1, 16]. At least one coefficient is nonzero and
/// sum_i c_i^2 must not exceed the configured bound.
class LinkFunction {
public:
    static constexpr double kDefaultCoeffBound = 100.0;

    explicit LinkFunction(std::map<int, double> coeffs, double coeff_bound = kDefaultCoeffBound);

    [[nodiscard]] const std::map<int, double>& coeffs() const { return coeffs_; }
    [[nodiscard]] double coeff_bound() const { return coeff_bound_; }

    double operator()(double z) const;
    double derivative(double z) const;

    /// Highest degree carrying a nonzero coefficient.
    [[nodiscard]] int degree() const;
    /// Coefficients of He_i (that is c_i / i!), indexed 0..degree().
    [[nodiscard]] std::vector<double> he_basis() const;
    /// Power-basis coefficients, indexed by power.
    [[nodiscard]] std::vector<double> monomials() const;

    friend bool operator==(const LinkFunction&, const LinkFunction&) = default;

private:
    std::map<int, double> coeffs_;
    double coeff_bound_;
};

double link_eval(const LinkFunction& link, double z);

/// Power basis -> He basis. Input is indexed by power; output maps degree k
/// to the coefficient h_k with f = sum_k h_k He_k. Exact zeros are dropped.
std::map<int, double> monomial_to_hermite(std::span<const double> poly);

/// He basis -> power basis (inverse of monomial_to_hermite).
std::vector<double> hermite_to_monomial(const std::map<int, double>& he_coeffs);

/// Smallest degree >= 1 whose coefficient is nonzero. Works with any scaling
/// of the He-basis coefficients. Throws ConfigError if none is.
int information_exponent(const std::map<int, double>& he_coeffs);
int information_exponent(const LinkFunction& link);

/// 1 if the link has any odd-degree component, 2 if it is even.
int general_exponent(const LinkFunction& link);

/// min over j in [1, max_power] of ie(sigma^j), each power re-expanded in the
/// He basis. Used to cross-check general_exponent.
int general_exponent_bruteforce(const LinkFunction& link, int max_power = 4);

struct ExponentReport {
    int degree;
    int ie;
    int ge;
};

ExponentReport exponents(const LinkFunction& link);

struct GaussRule {
    std::vector<double> nodes;
    std::vector<double> weights;  // sum to 1 against the standard normal
};

/// Gauss-Hermite rule for the standard-normal weight. Cached per size.
const GaussRule& gauss_hermite_rule(int nodes);

/// c_i = E_{z~N(0,1)}[f(z) He_i(z)] for i = 0..max_degree by Gauss-Hermite
/// quadrature. Same convention as LinkFunction::coeffs(). Requires
/// nodes >= 4 * max_degree.
std::map<int, double> quadrature_expand(const std::function<double(double)>& f, int max_degree,
                                        int nodes = 128);

/// z -> sigma(z)/rho when |sigma(z)/rho| <= clip, else 0.
class ClippedLink {
public:
    ClippedLink(LinkFunction base, double rho, double clip);
    /// Clip threshold 1/ln(d).
    static ClippedLink for_dimension(LinkFunction base, double rho, int d);

    double operator()(double z) const;
    [[nodiscard]] const LinkFunction& base() const { return base_; }
    [[nodiscard]] double rho() const { return rho_; }
    [[nodiscard]] double clip() const { return clip_; }

private:
    LinkFunction base_;
    double rho_;
    double clip_;
};

}  // namespace sitt
