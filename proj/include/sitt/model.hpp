#pragma once

#include <Eigen/Dense>

#include "sitt/rng.hpp"

namespace sitt {

inline constexpr int kMaxDimension = 256;

/// Attention matrix Gamma and temperature rho.
struct AttentionParams {
    Eigen::MatrixXd gamma;
    double rho = 1.0;

    void validate() const;
};

/// ReLU head: x -> sum_j a_j relu(v_j x + b_j), v_j in {-1, +1}.
struct MlpParams {
    Eigen::VectorXd a;
    Eigen::VectorXd v;
    Eigen::VectorXd b;

    [[nodiscard]] int width() const { return static_cast<int>(a.size()); }
    void validate() const;

    /// a = alpha * 1, v uniform on {-1, +1}^m, b = 0.
    static MlpParams init(int m, double alpha, Rng& rng);

    double operator()(double pre) const;
    /// d/dg of operator()(g); the ReLU derivative at 0 is taken as 0.
    [[nodiscard]] double slope(double pre) const;
};

/// Rank-one LoRA direction: the effective attention matrix is Gamma + u u^T.
struct LoraState {
    Eigen::VectorXd u;
};

/// Attention memory: xs is N x d (one context per row).
struct AttentionContext {
    Eigen::MatrixXd xs;
    Eigen::VectorXd ys;

    [[nodiscard]] int size() const { return static_cast<int>(ys.size()); }
    void validate() const;
};

/// Softmax-weighted label average with logits (y_i + x_i^T Gamma x) / rho.
double attention_output(const AttentionParams& att, const AttentionContext& ctx,
                        const Eigen::VectorXd& x);
double attention_output(const AttentionParams& att, const LoraState& lora,
                        const AttentionContext& ctx, const Eigen::VectorXd& x);

/// MLP head applied to the attention output.
double f_ic(const AttentionParams& att, const MlpParams& mlp, const AttentionContext& ctx,
            const Eigen::VectorXd& x);
double f_ic(const AttentionParams& att, const LoraState& lora, const MlpParams& mlp,
            const AttentionContext& ctx, const Eigen::VectorXd& x);

/// Final predictor sum_j a_j relu(v_j <u, x> + b_j).
double f_tf(const LoraState& lora, const MlpParams& mlp, const Eigen::VectorXd& x);

/// Exact gradient of f_ic with respect to the LoRA vector u.
Eigen::VectorXd grad_u_fic(const AttentionParams& att, const LoraState& lora, const MlpParams& mlp,
                           const AttentionContext& ctx, const Eigen::VectorXd& x);

/// Value and u-gradient of f_ic in one pass.
struct FicWithGrad {
    double value;
    double attention;
    Eigen::VectorXd grad_u;
};

FicWithGrad f_ic_with_grad(const AttentionParams& att, const LoraState& lora, const MlpParams& mlp,
                           const AttentionContext& ctx, const Eigen::VectorXd& x);

/// Gradient in Gamma of (f_ic(x) - y)^2 + lambda ||Gamma||_F^2 (no LoRA).
Eigen::MatrixXd grad_gamma_pretrain_loss(const AttentionParams& att, const MlpParams& mlp,
                                         const AttentionContext& ctx, const Eigen::VectorXd& x,
                                         double y, double lambda);

}  // namespace sitt
