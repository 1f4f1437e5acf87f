#pragma once

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ksaem/emulator.hpp"

namespace ksaem {

/// theta = (mu, Omega, sigma_eps^2).
struct PopulationParams {
    Eigen::VectorXd mu;
    Eigen::MatrixXd omega;
    double sigma_eps2 = 1.0;

    Eigen::Index dim() const { return mu.size(); }
    /// Throws DomainError unless Omega is symmetric positive definite and sigma_eps2 > 0.
    void validate() const;
    bool all_finite() const;
};

struct Individual {
    std::vector<double> times;
    Eigen::VectorXd y;
};

struct Dataset {
    std::vector<Individual> individuals;

    Eigen::Index N() const { return static_cast<Eigen::Index>(individuals.size()); }
    Eigen::Index n_tot() const;
    void validate() const;
};

enum class VariantKind { Exact, Simple, Intermediate, Complete };

std::string to_string(VariantKind k);
VariantKind variant_kind_from_string(const std::string& s);

/// Which regression function (and which error structure) the estimator uses.
struct ModelVariant {
    VariantKind kind = VariantKind::Exact;
    StructuralModel model;                      // Exact
    std::shared_ptr<const EmulatorBank> bank;   // Simple / Intermediate / Complete

    static ModelVariant exact(StructuralModel f);
    static ModelVariant simple(std::shared_ptr<const EmulatorBank> bank);
    static ModelVariant intermediate(std::shared_ptr<const EmulatorBank> bank);
    static ModelVariant complete(std::shared_ptr<const EmulatorBank> bank);

    bool is_meta() const { return kind != VariantKind::Exact; }
    /// Throws DomainError if the bank does not cover every observation time.
    void check_compatible(const Dataset& data) const;
};

/// log N(psi; mu, Omega) with Omega factored once.
class GaussianPrior {
public:
    explicit GaussianPrior(const PopulationParams& theta);
    double logpdf(const Eigen::VectorXd& psi) const;
    const Eigen::VectorXd& mean() const { return mu_; }
    /// Lower Cholesky factor of Omega.
    const Eigen::MatrixXd& chol() const { return chol_; }

private:
    Eigen::VectorXd mu_;
    Eigen::MatrixXd chol_;
    double log_norm_ = 0.0;
};

/// log N(y; mean, diag(var)), variances floored at 1e-300.
double diagonal_gaussian_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean, const Eigen::VectorXd& var);

double cond_loglik_exact(const Eigen::VectorXd& yi, const std::vector<double>& ti, const Eigen::VectorXd& psi_i,
                         const PopulationParams& theta, const StructuralModel& f);
double cond_loglik_simple(const Eigen::VectorXd& yi, const std::vector<double>& ti, const Eigen::VectorXd& psi_i,
                          const PopulationParams& theta, const EmulatorBank& bank);
double cond_loglik_intermediate(const Eigen::VectorXd& yi, const std::vector<double>& ti,
                                const Eigen::VectorXd& psi_i, const PopulationParams& theta,
                                const EmulatorBank& bank);
/// Per-individual conditional log-density for Exact / Simple / Intermediate.
double cond_loglik_individual(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi_i,
                              const PopulationParams& theta);

/// Full n_tot x n_tot emulator covariance C_D(t, psi) in dataset order (individual-major).
/// Entries for different observation times are zero: each time has its own emulator.
Eigen::MatrixXd assemble_complete_covariance(const Dataset& data, const Eigen::MatrixXd& psi,
                                             const EmulatorBank& bank);

/// Joint log N(y; m_D(t, psi), sigma^2 I + C_D(t, psi)) over all individuals.
/// `psi` is N x d (one row per individual).
double cond_loglik_complete(const Dataset& data, const Eigen::MatrixXd& psi, const PopulationParams& theta,
                            const EmulatorBank& bank);

/// Joint Gaussian structure of the complete meta-model, organised in per-time blocks.
/// Caches emulator projections so that moving one individual only refreshes the rows
/// of the blocks that individual is observed in.
class CompleteModel {
public:
    CompleteModel(const Dataset& data, std::shared_ptr<const EmulatorBank> bank);

    /// Recomputes every projection and block for the given psi (N x d).
    void reset(const Eigen::MatrixXd& psi);

    /// Sum of block log-densities at the cached state.
    double loglik(double sigma2) const;
    /// Change in the joint log-density if individual i moved to `candidate`.
    /// Returns -inf when a candidate block cannot be factorised.
    double delta_loglik(Eigen::Index i, const Eigen::VectorXd& candidate, double sigma2) const;
    /// Moves individual i to `candidate` and updates the cached blocks.
    void accept(Eigen::Index i, const Eigen::VectorXd& candidate);

    struct Block {
        std::size_t time_index = 0;
        std::vector<Eigen::Index> individual;  // individual owning each row
        std::vector<Eigen::Index> obs;         // observation index within that individual
        std::vector<Eigen::Index> flat;        // position in dataset order
        Eigen::VectorXd y;
        Eigen::VectorXd mean;
        Eigen::MatrixXd cov;                   // emulator covariance C_D restricted to the block
    };
    const std::vector<Block>& blocks() const { return blocks_; }
    const Eigen::MatrixXd& psi() const { return psi_; }

    /// Stacked emulator means in dataset order.
    Eigen::VectorXd stacked_mean() const;

private:
    std::vector<Emulator::Projection> project_individual(Eigen::Index i, const Eigen::VectorXd& psi_i) const;
    double block_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                        double sigma2) const;

    std::vector<std::vector<double>> times_;
    std::shared_ptr<const EmulatorBank> bank_;
    Eigen::MatrixXd psi_;
    std::vector<Block> blocks_;
    // For individual i and observation j: (block index, row within block).
    std::vector<std::vector<std::pair<std::size_t, Eigen::Index>>> where_;
    std::vector<std::vector<Emulator::Projection>> proj_;  // proj_[i][j]
    Eigen::Index n_tot_ = 0;
};

/// Gauss-Hermite marginal log-likelihood sum_i log int p(y_i | psi) p(psi) dpsi
/// with nodes mapped through N(mu, Omega). d <= 2; Exact, Simple or Intermediate.
double marginal_loglik_quadrature(const Dataset& data, const PopulationParams& theta,
                                  const ModelVariant& variant, int nodes);

/// Gauss-Hermite nodes/weights for weight exp(-x^2) (Golub-Welsch).
void gauss_hermite(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights);

}  // namespace ksaem
