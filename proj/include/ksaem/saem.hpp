#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ksaem/likelihood.hpp"
#include "ksaem/random.hpp"

namespace ksaem {

struct SaemConfig {
    int k_iters = 100;       // SAEM iterations
    int m_mcmc = 15;         // MCMC sweeps per S-step
    int burn_in = 50;        // iterations with gamma_k = 1
    double sa_exponent = 1.0;
    /// Random-walk scale per coordinate; empty means sqrt(diag(Omega_init)).
    Eigen::VectorXd proposal_scale;
    /// Adapt the scales during burn-in towards `target_acceptance`; frozen afterwards.
    bool adapt_proposal = true;
    double target_acceptance = 0.4;
    /// Start every sweep with one independence move drawn from N(mu, Omega). It lets a
    /// chain leave an isolated mode that the random walk cannot cross.
    bool prior_kernel = true;
    std::uint64_t seed = 1;
    bool compute_fisher = true;
    int fisher_iters = 200;  // post-convergence S-steps used by the Louis estimate

    void validate(Eigen::Index d) const;
};

/// gamma_k = 1 for k <= burn_in, (k - burn_in)^(-exponent) afterwards (k >= 1).
double step_size(int k, int burn_in, double exponent);

struct SufficientStats {
    Eigen::VectorXd s1;  // sum psi_i
    Eigen::MatrixXd s2;  // sum psi_i psi_i^T
    double s3 = 0.0;     // residual sum of squares (variant specific)
};

struct ResidualPosterior {
    Eigen::VectorXd mean;      // posterior mean of the emulator residual process
    Eigen::VectorXd cov_diag;  // per-observation posterior variance
    double cov_trace = 0.0;
    Eigen::MatrixXd cov;       // complete variant only: full n_tot x n_tot covariance
};

struct MhOutcome {
    Eigen::VectorXd psi;
    double log_target = 0.0;
    bool accepted = false;
    bool nonfinite = false;  // candidate rejected because its density was not finite
};

/// log p(y_i | psi_i; theta) + log p(psi_i; theta) for Exact / Simple / Intermediate.
/// Returns -inf if the model cannot be evaluated at psi_i.
double individual_log_target(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi_i,
                             const PopulationParams& theta, const GaussianPrior& prior);

/// One random-walk Metropolis-Hastings transition targeting p(psi_i | y_i; theta).
/// The candidate is psi_current + proposal_scale .* N(0, I).
MhOutcome mh_step_individual(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi_current,
                             double current_log_target, const PopulationParams& theta, const GaussianPrior& prior,
                             const Eigen::VectorXd& proposal_scale, Rng& rng);

/// Convenience form that evaluates the current target itself.
MhOutcome mh_step_individual(const ModelVariant& variant, Eigen::Index i, const Eigen::VectorXd& psi_current,
                             const Dataset& data, const PopulationParams& theta,
                             const Eigen::VectorXd& proposal_scale, Rng& rng);

/// Independence MH transition with candidate drawn from the prior N(mu, Omega); the
/// acceptance ratio reduces to the conditional likelihood ratio.
MhOutcome mh_prior_step_individual(const ModelVariant& variant, const Individual& ind,
                                   const Eigen::VectorXd& psi_current, double current_log_target,
                                   const PopulationParams& theta, const GaussianPrior& prior, Rng& rng);

/// One MH transition for individual i under the complete meta-model, targeting
/// p_D(psi_i | y, psi_{-i}; theta). `model` holds the current psi of everyone and is
/// updated in place on acceptance.
MhOutcome mh_step_complete(Eigen::Index i, CompleteModel& model, const PopulationParams& theta,
                           const GaussianPrior& prior, const Eigen::VectorXd& proposal_scale, Rng& rng);

/// Independence transition from the prior for the complete meta-model.
MhOutcome mh_prior_step_complete(Eigen::Index i, CompleteModel& model, const PopulationParams& theta,
                                 const GaussianPrior& prior, Rng& rng);

/// Posterior moments of the diagonal residual process given y_i, psi_i (per coordinate:
/// gamma = s2 L / (s2 + L), mean = gamma (y - m_D) / s2; zero where L = 0).
ResidualPosterior residual_posterior_intermediate(const Eigen::VectorXd& yi, const std::vector<double>& ti,
                                                  const Eigen::VectorXd& psi_i, const PopulationParams& theta,
                                                  const EmulatorBank& bank);

/// Joint posterior moments (I/s2 + C_D^{-1})^{-1} and its mean, in dataset order,
/// evaluated as s2 C (C + s2 I)^{-1} so that singular C_D is handled.
ResidualPosterior residual_posterior_complete(const Dataset& data, const Eigen::MatrixXd& psi,
                                              const PopulationParams& theta, const EmulatorBank& bank);
ResidualPosterior residual_posterior_complete(const CompleteModel& model, const Dataset& data,
                                              const PopulationParams& theta);

/// Statistics of one draw psi (N x d) under `variant`, using theta_prev for the
/// residual-posterior correction of the Intermediate / Complete variants.
SufficientStats compute_statistics(const Eigen::MatrixXd& psi, const Dataset& data,
                                   const PopulationParams& theta_prev, const ModelVariant& variant);

/// s <- s + gamma (S - s).
SufficientStats sa_update(const SufficientStats& stats, const SufficientStats& fresh, double gamma);
SufficientStats sa_update(const SufficientStats& stats, const Eigen::MatrixXd& psi_new, const Dataset& data,
                          const PopulationParams& theta_prev, const ModelVariant& variant, double gamma);

struct MStepResult {
    PopulationParams theta;
    bool omega_floored = false;
    bool omega_degenerate = false;  // empirical covariance had an eigenvalue <= 0
};

/// Closed-form maximiser of the complete-data likelihood given the statistics.
MStepResult m_step(const SufficientStats& stats, Eigen::Index N, Eigen::Index n_tot);

/// Complete-data log-likelihood sum_i log N(psi_i; mu, Omega) - n_tot/2 log(2 pi s2) - s3/(2 s2)
/// expressed through sufficient statistics.
double complete_data_loglik(const SufficientStats& stats, Eigen::Index N, Eigen::Index n_tot,
                            const PopulationParams& theta);

/// Parameter vector layout: mu_1..mu_d, Omega upper triangle (row-major), sigma2.
Eigen::Index parameter_count(Eigen::Index d);
std::vector<std::string> parameter_names(Eigen::Index d);
Eigen::VectorXd flatten(const PopulationParams& theta);
PopulationParams unflatten(const Eigen::VectorXd& v, Eigen::Index d);

struct FisherResult {
    Eigen::MatrixXd information;  // p x p; sigma2 row/col NaN when unsupported
    Eigen::VectorXd std_errors;   // NaN where the inverse diagonal is not positive
    bool pseudo_inverse = false;
    bool negative_variance = false;
    bool sigma2_supported = true;
};

struct Diagnostics {
    VariantKind variant = VariantKind::Exact;
    double acceptance_rate = 0.0;
    long transitions = 0;
    long nonfinite_rejections = 0;
    long extrapolations = 0;  // candidates outside the emulator design box
    bool omega_floored = false;
    double wall_seconds = 0.0;
    double saem_seconds = 0.0;
    Eigen::VectorXd final_proposal_scale;
};

struct FitReport {
    PopulationParams theta_hat;
    Eigen::MatrixXd fisher;
    Eigen::VectorXd std_errors;
    FisherResult fisher_detail;
    bool has_fisher = false;
    std::vector<PopulationParams> trajectory;  // theta^(0) ... theta^(K)
    std::vector<double> gammas;                // gamma_1 ... gamma_K
    Eigen::MatrixXd psi_final;
    std::vector<SufficientStats> stats_trajectory;  // s_1 ... s_K
    Diagnostics diagnostics;
};

/// SAEM-MCMC: k_iters iterations of S-step (m_mcmc MH sweeps), SA-step and M-step.
/// Throws DivergenceError if theta becomes non-finite.
FitReport run_saem(const ModelVariant& variant, const Dataset& data, const SaemConfig& config,
                   const PopulationParams& theta_init);

/// Per-individual complete-data gradient and Hessian with respect to the flattened
/// parameters, at psi_i. `include_sigma2` selects whether the data term is used.
void complete_data_derivatives(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi_i,
                               const PopulationParams& theta, Eigen::VectorXd& grad, Eigen::MatrixXd& hess);

/// Louis-formula observed information by averaging over post-convergence MCMC draws
/// at theta_hat.
FisherResult fisher_information(const ModelVariant& variant, const Dataset& data, const FitReport& fit,
                                const SaemConfig& config);

/// Standard errors from an information matrix (inverse diagonal).
FisherResult standard_errors_from_information(const Eigen::MatrixXd& information);

namespace detail {
/// One S-step of the driver (m_mcmc component-wise sweeps per individual at iteration k).
/// `complete` must be non-null exactly for the Complete variant.
void s_step_plain(const ModelVariant& variant, const Dataset& data, const PopulationParams& theta,
                  Eigen::MatrixXd& psi, CompleteModel* complete, const Eigen::VectorXd& scale, int m_mcmc,
                  bool prior_kernel, std::uint64_t seed, int k);
}  // namespace detail

}  // namespace ksaem
