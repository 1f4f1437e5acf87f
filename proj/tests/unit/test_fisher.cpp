#include <cmath>
#include <limits>
#include <memory>

#include <gtest/gtest.h>

#include "ksaem/design.hpp"
#include "ksaem/errors.hpp"
#include "ksaem/saem.hpp"
#include "toys.hpp"

using namespace ksaem;

namespace {

// f(t, psi) = psi_0 + psi_1 t.
Eigen::VectorXd line(const std::vector<double>& t, const Eigen::VectorXd& psi) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(t.size()));
    for (std::size_t j = 0; j < t.size(); ++j) out[static_cast<Eigen::Index>(j)] = psi[0] + psi[1] * t[j];
    return out;
}

Eigen::VectorXd wave(const std::vector<double>& t, const Eigen::VectorXd& psi) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(t.size()));
    for (std::size_t j = 0; j < t.size(); ++j) out[static_cast<Eigen::Index>(j)] = std::sin(2.0 * psi[0] + t[j]);
    return out;
}

PopulationParams theta2() {
    PopulationParams th;
    th.mu = Eigen::Vector2d(0.3, -0.7);
    th.omega.resize(2, 2);
    th.omega << 0.5, 0.12, 0.12, 0.3;
    th.sigma_eps2 = 0.2;
    return th;
}

// log N(psi; mu, Omega) written with an explicit inverse and determinant.
double log_prior(const Eigen::VectorXd& psi, const PopulationParams& th) {
    const auto d = static_cast<double>(psi.size());
    const Eigen::VectorXd r = psi - th.mu;
    const Eigen::MatrixXd inv = th.omega.fullPivLu().inverse();
    return -0.5 * (d * std::log(2.0 * M_PI) + std::log(th.omega.fullPivLu().determinant()) + r.dot(inv * r));
}

double log_obs(const Eigen::VectorXd& y, const Eigen::VectorXd& m, const Eigen::VectorXd& extra, double s2) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < y.size(); ++j) {
        const double v = s2 + extra[j];
        s += -0.5 * std::log(2.0 * M_PI * v) - 0.5 * (y[j] - m[j]) * (y[j] - m[j]) / v;
    }
    return s;
}

// Central differences of the analytic gradient and of a scalar log-density.
template <class LogDensity>
void check_derivatives(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi,
                       const PopulationParams& theta, LogDensity logdens) {
    Eigen::VectorXd g;
    Eigen::MatrixXd H;
    complete_data_derivatives(variant, ind, psi, theta, g, H);
    const Eigen::VectorXd x = flatten(theta);
    const Eigen::Index p = x.size(), d = theta.dim();
    ASSERT_EQ(g.size(), p);
    const double h = 1e-5;
    for (Eigen::Index k = 0; k < p; ++k) {
        Eigen::VectorXd xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        const double fd = (logdens(unflatten(xp, d)) - logdens(unflatten(xm, d))) / (2 * h);
        EXPECT_NEAR(g[k], fd, 1e-6 * (1.0 + std::abs(fd))) << "grad " << k;
        Eigen::VectorXd gp, gm;
        Eigen::MatrixXd Hp, Hm;
        complete_data_derivatives(variant, ind, psi, unflatten(xp, d), gp, Hp);
        complete_data_derivatives(variant, ind, psi, unflatten(xm, d), gm, Hm);
        const Eigen::VectorXd col = (gp - gm) / (2 * h);
        for (Eigen::Index l = 0; l < p; ++l)
            EXPECT_NEAR(H(l, k), col[l], 1e-5 * (1.0 + std::abs(col[l]))) << "hess " << l << "," << k;
    }
    EXPECT_LT((H - H.transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

}  // namespace

TEST(CompleteDataDerivatives, ExactModelMatchesFiniteDifferences) {
    const Individual ind{{0.5, 1.0, 2.0, 4.0}, Eigen::Vector4d(0.1, -0.4, -1.2, -2.9)};
    const ModelVariant v = ModelVariant::exact(line);
    for (const Eigen::Vector2d psi : {Eigen::Vector2d(0.2, -0.8), Eigen::Vector2d(1.1, 0.4)}) {
        check_derivatives(v, ind, psi, theta2(), [&](const PopulationParams& th) {
            return log_prior(psi, th) + log_obs(ind.y, line(ind.times, psi), Eigen::VectorXd::Zero(4), th.sigma_eps2);
        });
    }
}

TEST(CompleteDataDerivatives, IntermediateModelMatchesFiniteDifferences) {
    const std::vector<double> times{0.5, 1.5, 3.0};
    Design design;
    design.box = Box(toy::v1(-2.0), toy::v1(3.0));
    design.points.resize(4, 1);
    design.points << -2.0, -0.5, 1.0, 3.0;
    const auto bank = std::make_shared<const EmulatorBank>(EmulatorBank::fit(wave, times, design, EmulatorOptions{}));
    const ModelVariant v = ModelVariant::intermediate(bank);
    const Individual ind{times, Eigen::Vector3d(0.2, 0.05, 0.01)};
    const Eigen::VectorXd psi = toy::v1(0.37);
    Eigen::VectorXd m, lambda;
    bank->mean_and_variance(times, psi, m, lambda);
    ASSERT_GT(lambda.maxCoeff(), 0.0);
    check_derivatives(v, ind, psi, toy::theta1(0.1, 0.8, 0.03), [&](const PopulationParams& th) {
        return log_prior(psi, th) + log_obs(ind.y, m, lambda, th.sigma_eps2);
    });
}

TEST(StandardErrors, DiagonalInformation) {
    const FisherResult r = standard_errors_from_information(Eigen::Vector3d(4.0, 1.0, 0.25).asDiagonal());
    EXPECT_NEAR(r.std_errors[0], 0.5, 1e-14);
    EXPECT_NEAR(r.std_errors[1], 1.0, 1e-14);
    EXPECT_NEAR(r.std_errors[2], 2.0, 1e-14);
    EXPECT_FALSE(r.pseudo_inverse);
    EXPECT_FALSE(r.negative_variance);
}

TEST(StandardErrors, SingularInformationUsesThePseudoInverse) {
    Eigen::Matrix2d I;
    I << 1.0, 1.0, 1.0, 1.0;
    const FisherResult r = standard_errors_from_information(I);
    EXPECT_TRUE(r.pseudo_inverse);
    // The pseudo-inverse of [[1,1],[1,1]] is [[1,1],[1,1]] / 4.
    EXPECT_NEAR(r.std_errors[0], 0.5, 1e-12);
    EXPECT_NEAR(r.std_errors[1], 0.5, 1e-12);
}

TEST(StandardErrors, IndefiniteInformationGivesNaN) {
    const FisherResult r = standard_errors_from_information(Eigen::Vector2d(2.0, -1.0).asDiagonal());
    EXPECT_TRUE(r.negative_variance);
    EXPECT_NEAR(r.std_errors[0], std::sqrt(0.5), 1e-14);
    EXPECT_TRUE(std::isnan(r.std_errors[1]));
}

TEST(StandardErrors, NonFiniteInformationGivesNaN) {
    Eigen::Matrix2d I = Eigen::Matrix2d::Identity();
    I(0, 1) = std::numeric_limits<double>::quiet_NaN();
    const FisherResult r = standard_errors_from_information(I);
    EXPECT_TRUE(std::isnan(r.std_errors[0]));
    EXPECT_TRUE(std::isnan(r.std_errors[1]));
}

TEST(FisherInformation, LinearToyMatchesAnalyticStandardErrors) {
    const int N = 200, n = 4;
    const Dataset data = toy::linear_toy(N, n, 1.0, 0.3, 0.1, 77);
    SaemConfig cfg;
    cfg.k_iters = 150;
    cfg.burn_in = 50;
    cfg.fisher_iters = 400;
    cfg.seed = 8;
    const FitReport fit = run_saem(ModelVariant::exact(toy::identity), data, cfg, toy::theta1(0.0, 1.0, 1.0));
    ASSERT_TRUE(fit.has_fisher);
    const auto& th = fit.theta_hat;
    // The likelihood factorises into a between part (lambda = omega2 + s2 / n, N dof) and a
    // within part (s2, N (n - 1) dof).
    const double s2 = th.sigma_eps2, lambda = th.omega(0, 0) + s2 / n;
    const double se_mu = toy::linear_toy_mu_se(th, N, n);
    const double se_s2 = std::sqrt(2.0 * s2 * s2 / (N * (n - 1.0)));
    const double se_om = std::sqrt(2.0 * lambda * lambda / N + se_s2 * se_s2 / (n * n));
    EXPECT_NEAR(fit.std_errors[0], se_mu, 0.1 * se_mu);
    EXPECT_NEAR(fit.std_errors[1], se_om, 0.1 * se_om);
    EXPECT_NEAR(fit.std_errors[2], se_s2, 0.1 * se_s2);
    EXPECT_LT((fit.fisher - fit.fisher.transpose()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(FisherInformation, CompleteVariantLeavesSigma2Unsupported) {
    const std::vector<double> times{1.0, 2.0, 3.0};
    Design design;
    design.box = Box(toy::v1(-1.0), toy::v1(3.0));
    design.points.resize(4, 1);
    design.points << -1.0, 0.0, 1.5, 3.0;
    const auto bank = std::make_shared<const EmulatorBank>(EmulatorBank::fit(toy::identity, times, design, EmulatorOptions{}));
    const Dataset data = toy::linear_toy(12, 3, 1.0, 0.3, 0.1, 5);
    FitReport fit;
    fit.theta_hat = toy::theta1(1.0, 0.3, 0.1);
    SaemConfig cfg;
    cfg.fisher_iters = 30;
    const FisherResult r = fisher_information(ModelVariant::complete(bank), data, fit, cfg);
    EXPECT_FALSE(r.sigma2_supported);
    EXPECT_TRUE(std::isnan(r.std_errors[2]));
    EXPECT_TRUE(std::isnan(r.information(2, 2)));
    EXPECT_TRUE(std::isfinite(r.std_errors[0]));
    EXPECT_GT(r.std_errors[0], 0.0);
}

TEST(FisherInformation, RejectsNonPositiveDrawCount) {
    const Dataset data = toy::linear_toy(5, 2, 0.0, 1.0, 1.0, 1);
    FitReport fit;
    fit.theta_hat = toy::theta1(0.0, 1.0, 1.0);
    SaemConfig cfg;
    cfg.fisher_iters = 0;
    EXPECT_THROW(fisher_information(ModelVariant::exact(toy::identity), data, fit, cfg), DomainError);
}
