#include "sitt/model.hpp"

#include <cmath>
#include <string>

#include "sitt/error.hpp"

namespace sitt {

namespace {

struct Softmax {
    Eigen::VectorXd probs;
    double output = 0.0;
};

void check_query(const AttentionParams& att, const AttentionContext& ctx, const Eigen::VectorXd& x) {
    if (ctx.size() == 0) throw ConfigError("attention context is empty");
    if (ctx.xs.rows() != ctx.size()) throw ConfigError("attention context rows and labels disagree");
    if (x.size() != att.gamma.rows() || ctx.xs.cols() != att.gamma.rows()) {
        throw ConfigError("attention dimension mismatch");
    }
    if (!x.allFinite()) throw NumericError("non-finite attention query");
}

// logits_i = (y_i + x_i^T (Gamma + u u^T) x) / rho, stabilized by a single max shift.
Softmax softmax_attention(const AttentionParams& att, const Eigen::VectorXd* u,
                          const AttentionContext& ctx, const Eigen::VectorXd& x) {
    check_query(att, ctx, x);
    Eigen::VectorXd logits = ctx.xs * (att.gamma * x) + ctx.ys;
    if (u != nullptr) logits.noalias() += (ctx.xs * *u) * u->dot(x);
    logits /= att.rho;
    if (!logits.allFinite()) throw NumericError("non-finite attention logits");
    const double shift = logits.maxCoeff();
    Softmax out;
    out.probs = (logits.array() - shift).exp().matrix();
    out.probs /= out.probs.sum();
    out.output = out.probs.dot(ctx.ys);
    return out;
}

}  // namespace

void AttentionParams::validate() const {
    if (gamma.rows() != gamma.cols() || gamma.rows() < 1) throw ConfigError("Gamma must be square");
    if (gamma.rows() > kMaxDimension) throw ConfigError("dimension exceeds the cap of 256");
    if (!gamma.allFinite()) throw NumericError("Gamma has non-finite entries");
    if (!(rho > 0.0)) throw ConfigError("temperature rho must be > 0");
}

void MlpParams::validate() const {
    if (v.size() != a.size() || b.size() != a.size()) throw ConfigError("MLP vectors differ in length");
    for (Eigen::Index j = 0; j < v.size(); ++j) {
        if (std::abs(v[j]) != 1.0) throw ConfigError("MLP v entries must be +-1");
    }
    if (!a.allFinite() || !b.allFinite()) throw NumericError("MLP parameters are not finite");
}

MlpParams MlpParams::init(int m, double alpha, Rng& rng) {
    if (m < 1) throw ConfigError("MLP width must be >= 1");
    MlpParams out;
    out.a = Eigen::VectorXd::Constant(m, alpha);
    out.v.resize(m);
    for (int j = 0; j < m; ++j) out.v[j] = rng.sign();
    out.b = Eigen::VectorXd::Zero(m);
    return out;
}

double MlpParams::operator()(double pre) const {
    double out = 0.0;
    for (Eigen::Index j = 0; j < a.size(); ++j) out += a[j] * std::max(0.0, v[j] * pre + b[j]);
    return out;
}

double MlpParams::slope(double pre) const {
    double out = 0.0;
    for (Eigen::Index j = 0; j < a.size(); ++j) {
        if (v[j] * pre + b[j] > 0.0) out += a[j] * v[j];
    }
    return out;
}

void AttentionContext::validate() const {
    if (ys.size() == 0) throw ConfigError("attention context is empty");
    if (xs.rows() != ys.size()) throw ConfigError("attention context rows and labels disagree");
    if (!xs.allFinite() || !ys.allFinite()) throw NumericError("attention context has non-finite values");
}

double attention_output(const AttentionParams& att, const AttentionContext& ctx,
                        const Eigen::VectorXd& x) {
    return softmax_attention(att, nullptr, ctx, x).output;
}

double attention_output(const AttentionParams& att, const LoraState& lora,
                        const AttentionContext& ctx, const Eigen::VectorXd& x) {
    return softmax_attention(att, &lora.u, ctx, x).output;
}

double f_ic(const AttentionParams& att, const MlpParams& mlp, const AttentionContext& ctx,
            const Eigen::VectorXd& x) {
    return mlp(attention_output(att, ctx, x));
}

double f_ic(const AttentionParams& att, const LoraState& lora, const MlpParams& mlp,
            const AttentionContext& ctx, const Eigen::VectorXd& x) {
    return mlp(attention_output(att, lora, ctx, x));
}

double f_tf(const LoraState& lora, const MlpParams& mlp, const Eigen::VectorXd& x) {
    return mlp(lora.u.dot(x));
}

FicWithGrad f_ic_with_grad(const AttentionParams& att, const LoraState& lora, const MlpParams& mlp,
                           const AttentionContext& ctx, const Eigen::VectorXd& x) {
    const Softmax sm = softmax_attention(att, &lora.u, ctx, x);
    const double g = sm.output;
    // dg/du = (1/rho) sum_i p_i (y_i - g) (<x_i, u> x + <u, x> x_i)
    const Eigen::VectorXd centered = sm.probs.cwiseProduct((ctx.ys.array() - g).matrix());
    const Eigen::VectorXd proj = ctx.xs * lora.u;
    Eigen::VectorXd dg = x * centered.dot(proj);
    dg.noalias() += lora.u.dot(x) * (ctx.xs.transpose() * centered);
    dg /= att.rho;
    return {mlp(g), g, mlp.slope(g) * dg};
}

Eigen::VectorXd grad_u_fic(const AttentionParams& att, const LoraState& lora, const MlpParams& mlp,
                           const AttentionContext& ctx, const Eigen::VectorXd& x) {
    return f_ic_with_grad(att, lora, mlp, ctx, x).grad_u;
}

Eigen::MatrixXd grad_gamma_pretrain_loss(const AttentionParams& att, const MlpParams& mlp,
                                         const AttentionContext& ctx, const Eigen::VectorXd& x,
                                         double y, double lambda) {
    const Softmax sm = softmax_attention(att, nullptr, ctx, x);
    const double g = sm.output;
    const double residual = mlp(g) - y;
    // dg/dGamma = (1/rho) (sum_i p_i (y_i - g) x_i) x^T
    const Eigen::VectorXd centered = sm.probs.cwiseProduct((ctx.ys.array() - g).matrix());
    const Eigen::VectorXd left = ctx.xs.transpose() * centered;
    Eigen::MatrixXd grad = (2.0 * residual * mlp.slope(g) / att.rho) * left * x.transpose();
    grad += 2.0 * lambda * att.gamma;
    return grad;
}

}  // namespace sitt
