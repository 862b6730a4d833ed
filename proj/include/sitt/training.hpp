#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sitt/model.hpp"
#include "sitt/rng.hpp"
#include "sitt/taskgen.hpp"

namespace sitt {

// ---------------------------------------------------------------- pretraining

struct PretrainConfig {
    int d = 0;
    int m = 0;
    int prompts = 0;         // T_pt
    int context_length = 0;  // N_pt
    double eta = 0.0;
    double lambda = 0.0;
    double alpha = 0.0;
    double rho = 1.0;
    /// Skip the compute guard.
    bool force = false;

    void validate() const;
};

/// Elementary-operation budget for one-step pretraining (T_pt * N_pt * d^2).
inline constexpr double kPretrainBudget = 1e11;

/// Gamma(0) = I_d / sqrt(d).
Eigen::MatrixXd initial_gamma(int d);

/// One averaged gradient step from Gamma(0):
///   Gamma* = Gamma(0) - eta (1/2T) sum_t grad_Gamma[(f_ic(x^t) - y^t)^2 + lambda ||Gamma||_F^2]
/// with the head fixed at `head` (a = alpha 1, v(0), b = 0). Prompt t uses the
/// stream rng.split(t). Throws BudgetError past the compute guard.
Eigen::MatrixXd pretrain_gamma(const PretrainConfig& cfg, const MlpParams& head,
                               const TaskDistribution& tasks, Rng& rng);

/// P_S / (kappa_scale sqrt(r)): the structure pretraining converges to.
Eigen::MatrixXd oracle_gamma(const Subspace& sub, double kappa_scale);

/// Default kappa_scale = ln(d)^2.
double default_kappa_scale(int d);

/// Each row x_i -> sqrt(r) Gamma* x_i.
Eigen::MatrixXd preprocess_context(const Eigen::MatrixXd& gamma_star, int r, const Eigen::MatrixXd& xs);

/// u ~ N(0, I), u <- sqrt(r) Gamma* u, u <- u / (sqrt(r) ||u||).
Eigen::VectorXd init_u(const Eigen::MatrixXd& gamma_star, int r, Rng& rng);

// ---------------------------------------------------------- test-time stages

struct StageOneResult {
    Eigen::VectorXd u;
    /// sqrt(r) Gamma* grad_u of the distillation loss at u(0).
    Eigen::VectorXd data_gradient;
    /// Centering constant b: mean teacher output.
    double teacher_offset = 0.0;
    double loss = 0.0;
};

/// Self-distillation step. The teacher is the attention output with the
/// unmodified Gamma* on ctx1; the student uses Gamma* + u u^T and head
/// `head` (a reset to alpha_1). Draws n_new fresh inputs from rng.
StageOneResult ttt_stage1(const AttentionParams& pretrained, int r, const AttentionContext& ctx1,
                          const Eigen::VectorXd& u0, const MlpParams& head, int n_new, double eta1,
                          double lambda1, Rng& rng);

struct TrajectoryPoint {
    int step = 0;
    double alignment = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct StageTwoResult {
    Eigen::VectorXd u;
    std::vector<TrajectoryPoint> trajectory;
};

/// One-pass online SGD on u with normalize-after-step; memory is fixed.
/// The trajectory records <beta, u> when beta is given, every
/// `record_every` steps plus the final step.
StageTwoResult ttt_stage2(const AttentionParams& pretrained, int r, const AttentionContext& memory,
                          const Eigen::MatrixXd& stream_xs, const Eigen::VectorXd& stream_ys,
                          const Eigen::VectorXd& u_init, const MlpParams& head, double eta2,
                          const std::optional<Eigen::VectorXd>& beta = std::nullopt,
                          int record_every = 1);

/// b_j ~ Unif[-ln(d)^2, ln(d)^2].
Eigen::VectorXd sample_stage3_bias(int m, int d, Rng& rng);

/// Phi_{t,j} = relu(v_j <u, x_t> + b_j).
Eigen::MatrixXd relu_features(const Eigen::VectorXd& u, const MlpParams& head, const Eigen::MatrixXd& xs);

/// (1/2N) ||Phi a - y||^2 + (lambda/2) ||a||^2
double ridge_objective(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y, const Eigen::VectorXd& a,
                       double lambda);

struct RidgeSolution {
    Eigen::VectorXd a;
    /// ||(Phi^T Phi / N + lambda I) a - Phi^T y / N|| / ||Phi^T y / N||
    double kkt_residual = 0.0;
    double objective = 0.0;
};

/// Closed-form ridge on a feature matrix; uses the dual system when N < m.
RidgeSolution solve_ridge(const Eigen::MatrixXd& phi, const Eigen::VectorXd& y, double lambda);

struct StageThreeResult {
    MlpParams head;
    RidgeSolution fit;
};

/// Fits a* on group 4 with v*, b* taken from `head`; requires N4 >= 1 and lambda2 > 0.
StageThreeResult ttt_stage3(const Eigen::VectorXd& u, const MlpParams& head, const Eigen::MatrixXd& xs4,
                            const Eigen::VectorXd& ys4, double lambda2);

// ---------------------------------------------------------------- pipeline

enum class ScalingMode { Explicit, TheoremOrders };
enum class Group2Role { Unused, StreamPrefix };
enum class GammaSource { Oracle, Pretrain };
/// How u enters Stage II: Stage I output, a synthetic start with a given
/// alignment, or pinned to the true feature (skips Stages I and II).
enum class UStart { StageOne, FixedAlignment, Beta };

struct TttConfig {
    /// A negative n3 selects default_stream_length(r, epsilon).
    GroupSizes groups{256, 0, 0, 256};
    int n_new = 256;
    double eta1 = 0.0;
    double eta2 = 0.0;
    double lambda1 = 0.0;
    double lambda2 = 1e-3;
    /// Per-neuron a resets; theorem-orders mode derives these from alpha*m.
    double alpha1 = 0.0;
    double alpha2 = 0.0;
    ScalingMode scaling = ScalingMode::Explicit;
    double scale_constant = 1.0;
    /// A value <= 0 derives epsilon from N3 via epsilon_for_stream_length.
    double epsilon = 0.05;
    Group2Role group2_role = Group2Role::Unused;
    UStart u_start = UStart::StageOne;
    double init_alignment = 0.3;
    int record_every = 1;
};

struct StageHyper {
    double eta1;
    double lambda1;
    double alpha1;
    double eta2;
    double alpha2;
};

/// Explicit values, or the theorem orders with one constant c:
/// alpha1 m = c r^(-ge/2-1), eta1 = c r^(3ge/2+3/2), lambda1 = 1/eta1,
/// alpha2 m = c eps / r, eta2 = c / sqrt(r).
StageHyper resolve_hyper(const TttConfig& cfg, int r, int ge, int m);

/// ceil((r sqrt(r) / eps) ln(1/eps)).
int default_stream_length(int r, double epsilon);
/// Inverse of default_stream_length over eps in (0, 1/e).
double epsilon_for_stream_length(int r, int n3);

struct PipelineConfig {
    int d = 0;
    int r = 0;
    int m = 256;
    double rho = 1.0;
    double tau = 0.0;
    LinkSpec link_spec;
    GammaSource gamma_source = GammaSource::Oracle;
    /// <= 0 selects ln(d)^2.
    double kappa_scale = 0.0;
    PretrainConfig pretrain;
    TttConfig ttt;
    int eval_samples = 4096;

    void validate() const;
    [[nodiscard]] double kappa() const;
};

/// Group sizes and epsilon with the automatic values filled in.
TttConfig resolve_ttt(const TttConfig& ttt, int r);

/// The prompt run_ttt draws for `task` from the same rng.
Prompt sample_ttt_prompt(const TttConfig& resolved, const Task& task, const Rng& ttt_rng);

/// Output of pretraining (or the oracle): Gamma*, rho and v(0).
struct PretrainedModel {
    AttentionParams attention;
    MlpParams init_head;
    Subspace subspace;
};

PretrainedModel prepare_model(const PipelineConfig& cfg, const Subspace& sub, Rng& rng);

struct StageDiagnostic {
    std::string stage;
    int step = 0;
    std::string metric;
    double value = 0.0;
};

struct PipelineResult {
    Eigen::MatrixXd gamma_star;
    Eigen::VectorXd u_final;
    MlpParams mlp;
    std::vector<TrajectoryPoint> alignment_trajectory;
    std::vector<StageDiagnostic> stage_diagnostics;
    StageHyper hyper{};
    double stage1_alignment = 0.0;
};

/// Stages I-III on one task. Deterministic given rng.
PipelineResult run_ttt(const PipelineConfig& cfg, const PretrainedModel& model, const Task& task, Rng& rng);

/// prepare_model followed by run_ttt.
PipelineResult run_pipeline(const PipelineConfig& cfg, const Subspace& sub, const Task& task, Rng& rng);

}  // namespace sitt
