#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ksaem/design.hpp"

namespace ksaem {

enum class KernelFamily { Gaussian };
enum class RegressorBasis { Constant, Linear };

std::string to_string(KernelFamily k);
std::string to_string(RegressorBasis b);
KernelFamily kernel_family_from_string(const std::string& s);
RegressorBasis regressor_basis_from_string(const std::string& s);

struct KernelSpec {
    KernelFamily family = KernelFamily::Gaussian;
    double phi = 1.0;
};

/// Plug-in Kriging hyperparameters (beta, sigma2, phi) and the diagonal nugget.
struct EmulatorParams {
    Eigen::VectorXd beta;
    double sigma2 = 0.0;
    double phi = 1.0;
    double nugget = 1e-10;
};

struct EmulatorOptions {
    RegressorBasis regressors = RegressorBasis::Linear;
    KernelFamily kernel = KernelFamily::Gaussian;
    double phi_lower = 1e-3;
    double phi_upper = 1e3;
    double nugget = 1e-10;
    /// Evaluate the kernel on box-normalised coordinates (x - lower) / width.
    bool normalize_inputs = false;
    int scan_points = 25;    // log-spaced bracketing scan before golden section
    int golden_iters = 64;
};

/// exp(-phi * ||x - x2||^2)
double gaussian_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& x2, double phi);

/// Number of regression functions L for a basis in dimension d.
Eigen::Index regressor_count(RegressorBasis basis, Eigen::Index d);
Eigen::VectorXd regressors_at(RegressorBasis basis, const Eigen::VectorXd& x);

struct ProfileResult {
    double loglik = 0.0;  // +inf when degenerate, -inf when the factorisation fails
    Eigen::VectorXd beta;
    double sigma2 = 0.0;
    bool degenerate = false;  // residual of the GLS fit is (numerically) zero
    bool factorized = true;
};

/// Gaussian-process log-likelihood with beta and sigma2 concentrated out by
/// generalised least squares, evaluated at a fixed correlation range phi.
/// Throws FitError when H_D is rank deficient or n_D <= L.
ProfileResult gp_profile_loglik(const Design& design, const Eigen::VectorXd& z, RegressorBasis basis,
                                double phi, double nugget);

/// Fitted Kriging emulator. Immutable after construction; prediction is thread-safe.
class Emulator {
public:
    /// Per-point quantities shared by mean and covariance evaluations.
    struct Projection {
        Eigen::VectorXd u;       // (possibly normalised) input
        Eigen::VectorXd k;       // correlations with the design
        Eigen::VectorXd v;       // L^{-1} k
        double mean = 0.0;
    };

    /// Maximises the profiled likelihood over phi in [phi_lower, phi_upper].
    static Emulator fit(const Design& design, const Eigen::VectorXd& z, const EmulatorOptions& opts = {});

    /// Rebuilds the factored state for given hyperparameters (no optimisation).
    static Emulator from_params(const Design& design, const Eigen::VectorXd& z, RegressorBasis basis,
                                const EmulatorParams& params, bool normalize_inputs);

    double predict_mean(const Eigen::VectorXd& x) const;
    /// sigma2 * (K(x,x2) - k_x^T (Sigma + nugget I)^{-1} k_x2); variances clamped at 0.
    double predict_cov(const Eigen::VectorXd& x, const Eigen::VectorXd& x2) const;
    double predict_var(const Eigen::VectorXd& x) const;
    /// predict_var / sigma2. Throws DomainError when sigma2 == 0.
    double pointwise_bound(const Eigen::VectorXd& x) const;

    Projection project(const Eigen::VectorXd& x, bool with_solve = true) const;
    double variance(const Projection& p) const;
    double covariance(const Projection& a, const Projection& b) const;

    /// Closed-form leave-one-out residuals at fixed hyperparameters.
    Eigen::VectorXd loo_residuals() const;

    bool in_domain(const Eigen::VectorXd& x) const { return design_.box.contains(x); }

    const Design& design() const { return design_; }
    const Eigen::VectorXd& z() const { return z_; }
    const EmulatorParams& params() const { return params_; }
    RegressorBasis regressors() const { return basis_; }
    KernelFamily kernel() const { return KernelFamily::Gaussian; }
    bool normalize_inputs() const { return normalize_; }
    const Eigen::MatrixXd& chol() const { return chol_; }
    const Eigen::VectorXd& weights() const { return weights_; }
    /// Profiled log-likelihood at the fitted phi.
    double loglik() const { return loglik_; }
    bool degenerate() const { return params_.sigma2 <= 0.0; }

    nlohmann::json to_json() const;
    static Emulator from_json(const nlohmann::json& j);

private:
    Emulator() = default;
    Eigen::VectorXd normalize(const Eigen::VectorXd& x) const;
    double clamp_variance(double v) const;

    Design design_;              // original coordinates
    Eigen::MatrixXd unit_points_;  // coordinates used by the kernel
    Eigen::VectorXd z_;
    RegressorBasis basis_ = RegressorBasis::Linear;
    EmulatorParams params_;
    bool normalize_ = false;
    Eigen::VectorXd shift_, inv_scale_;
    Eigen::MatrixXd chol_;       // lower factor of Sigma_DD + nugget I
    Eigen::VectorXd weights_;    // Sigma_DD^{-1} (z - H beta), refined from the jittered factor
    double loglik_ = 0.0;
};

/// Prediction audit CSV with header x1..xd,mean,var,bound; one row per evaluation point
/// (rows of `points`). `bound` is NA for a degenerate fit.
std::string prediction_audit_csv(const Emulator& em, const Eigen::MatrixXd& points);

/// Computer model evaluated on a time grid: (times, psi) -> f(t_j, psi) for each j.
using StructuralModel =
    std::function<Eigen::VectorXd(const std::vector<double>& times, const Eigen::VectorXd& psi)>;

/// One emulator per observation time, all sharing a single design over psi-space.
class EmulatorBank {
public:
    struct Projection {
        std::vector<Emulator::Projection> per_time;
    };

    EmulatorBank() = default;
    EmulatorBank(std::vector<double> times, std::vector<Emulator> emulators);

    /// Evaluates `model` once per design point (n_D calls) and fits one emulator per time.
    static EmulatorBank fit(const StructuralModel& model, const std::vector<double>& times,
                            const Design& design, const EmulatorOptions& opts = {},
                            long* solver_calls = nullptr);

    const std::vector<double>& times() const { return times_; }
    const std::vector<Emulator>& emulators() const { return emulators_; }
    const Emulator& at_time(double t) const;
    /// Index of `t` in the bank grid; throws DomainError if absent.
    std::size_t time_index(double t) const;
    const Design& design() const { return emulators_.front().design(); }
    Eigen::Index dim() const { return design().dim(); }

    Eigen::VectorXd mean(const std::vector<double>& times, const Eigen::VectorXd& psi) const;
    Eigen::VectorXd variance(const std::vector<double>& times, const Eigen::VectorXd& psi) const;
    /// Mean and (clamped) variance in one pass.
    void mean_and_variance(const std::vector<double>& times, const Eigen::VectorXd& psi,
                           Eigen::VectorXd& mean, Eigen::VectorXd& var) const;

    nlohmann::json to_json() const;
    static EmulatorBank from_json(const nlohmann::json& j);

private:
    std::vector<double> times_;
    std::vector<Emulator> emulators_;
};

}  // namespace ksaem
