#include "sitt/taskgen.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <sstream>

#include "sitt/error.hpp"

namespace sitt {

namespace {

constexpr double kSubspaceTol = 1e-10;

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

double parse_double(std::string_view s, std::string_view context) {
    s = trim(s);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(out)) {
        throw ConfigError("cannot parse number '" + std::string(s) + "' in link spec term '" +
                          std::string(context) + "'");
    }
    return out;
}

CoefficientDist parse_dist(std::string_view s, std::string_view context) {
    s = trim(s);
    auto call_args = [&](std::string_view name) -> std::string_view {
        if (s.substr(0, name.size()) != name || s.size() < name.size() + 2 || s[name.size()] != '(' ||
            s.back() != ')') {
            throw ConfigError("malformed distribution in link spec term '" + std::string(context) + "'");
        }
        return s.substr(name.size() + 1, s.size() - name.size() - 2);
    };
    if (s.starts_with("const")) return CoefficientDist::constant(parse_double(call_args("const"), context));
    if (s.starts_with("unif")) {
        const auto args = call_args("unif");
        const auto comma = args.find(',');
        if (comma == std::string_view::npos) {
            throw ConfigError("unif() needs two bounds in link spec term '" + std::string(context) + "'");
        }
        const double lo = parse_double(args.substr(0, comma), context);
        const double hi = parse_double(args.substr(comma + 1), context);
        if (!(lo <= hi)) throw ConfigError("unif() bounds out of order in '" + std::string(context) + "'");
        return CoefficientDist::uniform(lo, hi);
    }
    return CoefficientDist::constant(parse_double(s, context));
}

}  // namespace

void Subspace::validate() const {
    if (r() < 1 || r() > d()) throw ConfigError("subspace needs 1 <= r <= d");
    const Eigen::MatrixXd gram = basis.transpose() * basis;
    const double err = (gram - Eigen::MatrixXd::Identity(r(), r())).cwiseAbs().maxCoeff();
    if (err > kSubspaceTol) throw ConfigError("subspace basis is not orthonormal");
}

Subspace sample_subspace(int d, int r, Rng& rng) {
    if (r < 1 || r > d) {
        throw ConfigError("sample_subspace needs 1 <= r <= d, got d=" + std::to_string(d) +
                          " r=" + std::to_string(r));
    }
    Eigen::MatrixXd q(d, r);
    for (int j = 0; j < r; ++j) q.col(j) = rng.normal_vector(d);
    // Modified Gram-Schmidt with one re-orthogonalization pass.
    for (int j = 0; j < r; ++j) {
        for (int pass = 0; pass < 2; ++pass) {
            for (int k = 0; k < j; ++k) q.col(j) -= q.col(k).dot(q.col(j)) * q.col(k);
        }
        const double norm = q.col(j).norm();
        if (!(norm > 1e-12)) throw NumericError("degenerate Gaussian draw while orthonormalizing");
        q.col(j) /= norm;
    }
    return Subspace{std::move(q)};
}

Eigen::MatrixXd subspace_projector(const Subspace& sub) { return sub.basis * sub.basis.transpose(); }

Eigen::VectorXd sample_feature(const Subspace& sub, Rng& rng) {
    Eigen::VectorXd g = rng.normal_vector(sub.r());
    double norm = g.norm();
    while (!(norm > 0.0)) {
        g = rng.normal_vector(sub.r());
        norm = g.norm();
    }
    return sub.basis * (g / norm);
}

double CoefficientDist::draw(Rng& rng) const {
    return kind == Kind::Constant ? lo : rng.uniform(lo, hi);
}

void LinkSpec::validate() const {
    if (terms.empty()) throw ConfigError("link spec has no terms");
    for (const auto& [deg, dist] : terms) {
        if (deg < 1 || deg > kMaxLinkDegree) {
            throw ConfigError("link spec degree " + std::to_string(deg) + " outside [1, " +
                              std::to_string(kMaxLinkDegree) + "]");
        }
    }
    const auto& lowest = terms.begin()->second;
    if (std::abs(lowest.mean()) <= kCoeffTolerance) {
        throw ConfigError("link spec: the lowest-degree coefficient (degree " +
                          std::to_string(terms.begin()->first) + ") must have nonzero mean");
    }
}

std::string LinkSpec::to_string() const {
    std::ostringstream out;
    out.precision(17);
    bool first = true;
    for (const auto& [deg, dist] : terms) {
        if (!first) out << ",";
        first = false;
        if (dist.kind == CoefficientDist::Kind::Constant) {
            out << deg << ":const(" << dist.lo << ")";
        } else {
            out << deg << ":unif(" << dist.lo << "," << dist.hi << ")";
        }
    }
    return out.str();
}

LinkSpec LinkSpec::fixed(const LinkFunction& link) {
    LinkSpec spec;
    spec.coeff_bound = link.coeff_bound();
    for (const auto& [deg, c] : link.coeffs()) {
        spec.terms[deg] = CoefficientDist::constant(c / std::sqrt(factorial(deg)));
    }
    return spec;
}

LinkSpec parse_link_spec(std::string_view text) {
    LinkSpec spec;
    int depth = 0;
    std::size_t start = 0;
    auto flush = [&](std::size_t end) {
        const auto term = trim(text.substr(start, end - start));
        if (term.empty()) throw ConfigError("empty term in link spec '" + std::string(text) + "'");
        const auto colon = term.find(':');
        if (colon == std::string_view::npos) {
            throw ConfigError("link spec term '" + std::string(term) + "' lacks 'degree:'");
        }
        const auto deg_text = trim(term.substr(0, colon));
        int deg = 0;
        const auto [ptr, ec] = std::from_chars(deg_text.data(), deg_text.data() + deg_text.size(), deg);
        if (ec != std::errc() || ptr != deg_text.data() + deg_text.size()) {
            throw ConfigError("bad degree in link spec term '" + std::string(term) + "'");
        }
        if (spec.terms.contains(deg)) {
            throw ConfigError("duplicate degree " + std::to_string(deg) + " in link spec");
        }
        spec.terms[deg] = parse_dist(term.substr(colon + 1), term);
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '(') ++depth;
        if (text[i] == ')') --depth;
        if (depth < 0) throw ConfigError("unbalanced parentheses in link spec");
        if (text[i] == ',' && depth == 0) {
            flush(i);
            start = i + 1;
        }
    }
    if (depth != 0) throw ConfigError("unbalanced parentheses in link spec");
    flush(text.size());
    spec.validate();
    return spec;
}

LinkFunction sample_link(const LinkSpec& spec, Rng& rng) {
    spec.validate();
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::map<int, double> coeffs;
        bool any_nonzero = false;
        for (const auto& [deg, dist] : spec.terms) {
            const double c = dist.draw(rng) * std::sqrt(factorial(deg));
            coeffs[deg] = c;
            any_nonzero = any_nonzero || std::abs(c) > kCoeffTolerance;
        }
        if (any_nonzero) return LinkFunction(std::move(coeffs), spec.coeff_bound);
    }
    throw ConfigError("link spec keeps producing all-zero coefficient draws");
}

void Task::validate(const Subspace& sub) const {
    if (std::abs(beta.norm() - 1.0) > kSubspaceTol) throw ConfigError("task feature is not unit norm");
    const Eigen::VectorXd residual = beta - sub.basis * (sub.basis.transpose() * beta);
    if (residual.norm() > kSubspaceTol) throw ConfigError("task feature lies outside the subspace");
    if (!(tau >= 0.0)) throw ConfigError("noise level tau must be >= 0");
}

Task TaskDistribution::sample(Rng& rng) const {
    Eigen::VectorXd beta = sample_feature(subspace, rng);
    return Task{std::move(beta), sample_link(link_spec, rng), tau};
}

int GroupSizes::offset(int group) const {
    switch (group) {
        case 1: return 0;
        case 2: return n1;
        case 3: return n1 + n2;
        case 4: return n1 + n2 + n3;
        default: throw ConfigError("context group must be 1..4");
    }
}

int GroupSizes::size(int group) const {
    switch (group) {
        case 1: return n1;
        case 2: return n2;
        case 3: return n3;
        case 4: return n4;
        default: throw ConfigError("context group must be 1..4");
    }
}

Eigen::MatrixXd Prompt::group_xs(int g) const { return xs.middleRows(groups.offset(g), groups.size(g)); }

Eigen::VectorXd Prompt::group_ys(int g) const { return ys.segment(groups.offset(g), groups.size(g)); }

void sample_labeled(const Task& task, int n, Rng& rng, Eigen::MatrixXd& xs, Eigen::VectorXd& ys) {
    const auto d = task.beta.size();
    xs.resize(n, d);
    ys.resize(n);
    for (int i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < d; ++k) xs(i, k) = rng.normal();
        ys[i] = task.target(xs.row(i).transpose()) + task.tau * rng.sign();
    }
}

Prompt sample_prompt(const Task& task, const GroupSizes& sizes, Rng& rng) {
    if (sizes.n1 < 0 || sizes.n2 < 0 || sizes.n3 < 0 || sizes.n4 < 0) {
        throw ConfigError("context group sizes must be >= 0");
    }
    Prompt prompt;
    prompt.groups = sizes;
    sample_labeled(task, sizes.total(), rng, prompt.xs, prompt.ys);
    Eigen::MatrixXd qx;
    Eigen::VectorXd qy;
    sample_labeled(task, 1, rng, qx, qy);
    prompt.query_x = qx.row(0).transpose();
    prompt.query_y = qy[0];
    return prompt;
}

}  // namespace sitt
