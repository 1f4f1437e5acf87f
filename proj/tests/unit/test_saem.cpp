#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "ksaem/design.hpp"
#include "ksaem/errors.hpp"
#include "ksaem/random.hpp"
#include "ksaem/saem.hpp"
#include "oracles.hpp"
#include "toys.hpp"

using namespace ksaem;
using toy::identity;
using toy::linear_toy;
using toy::linear_toy_mle;
using toy::theta1;
using toy::v1;

namespace {

Eigen::VectorXd decay(const std::vector<double>& t, const Eigen::VectorXd& psi) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(t.size()));
    for (std::size_t j = 0; j < t.size(); ++j) out[static_cast<Eigen::Index>(j)] = psi[0] * std::exp(-t[j]);
    return out;
}

Eigen::VectorXd wave(const std::vector<double>& t, const Eigen::VectorXd& psi) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(t.size()));
    for (std::size_t j = 0; j < t.size(); ++j) out[static_cast<Eigen::Index>(j)] = std::sin(psi[0] + t[j]);
    return out;
}

std::shared_ptr<const EmulatorBank> bank_on(const StructuralModel& f, const std::vector<double>& times,
                                            const Design& design, RegressorBasis basis = RegressorBasis::Linear) {
    EmulatorOptions opts;
    opts.regressors = basis;
    return std::make_shared<const EmulatorBank>(EmulatorBank::fit(f, times, design, opts));
}

Design design_1d(std::initializer_list<double> pts, double lo = -2.0, double hi = 3.0) {
    Design d;
    d.box = Box(v1(lo), v1(hi));
    d.points.resize(static_cast<Eigen::Index>(pts.size()), 1);
    Eigen::Index k = 0;
    for (double p : pts) d.points(k++, 0) = p;
    return d;
}

// One-point emulator whose far-field prediction is (beta, sigma2).
std::shared_ptr<const EmulatorBank> far_field_bank(double beta, double sigma2) {
    EmulatorParams p;
    p.beta = v1(beta);
    p.sigma2 = sigma2;
    p.phi = 1.0;
    Emulator em = Emulator::from_params(design_1d({0.0}, -1.0, 1.0), v1(beta), RegressorBasis::Constant, p, false);
    return std::make_shared<const EmulatorBank>(std::vector<double>{1.0}, std::vector<Emulator>{em});
}

SufficientStats stats_of(const Eigen::MatrixXd& psi, double s3) {
    SufficientStats s;
    s.s1 = psi.colwise().sum().transpose();
    s.s2 = psi.transpose() * psi;
    s.s3 = s3;
    return s;
}

}  // namespace

TEST(StepSize, TwoPhaseSchedule) {
    EXPECT_DOUBLE_EQ(step_size(1, 50, 1.0), 1.0);
    EXPECT_DOUBLE_EQ(step_size(50, 50, 1.0), 1.0);
    EXPECT_DOUBLE_EQ(step_size(51, 50, 1.0), 1.0);
    EXPECT_DOUBLE_EQ(step_size(54, 50, 1.0), 0.25);
    EXPECT_DOUBLE_EQ(step_size(54, 50, 0.5), 0.5);
}

TEST(SaemConfig, Validation) {
    SaemConfig c;
    c.burn_in = c.k_iters;
    EXPECT_THROW(c.validate(1), DomainError);
    c = SaemConfig{};
    c.m_mcmc = 0;
    EXPECT_THROW(c.validate(1), DomainError);
    c = SaemConfig{};
    c.sa_exponent = 0.5;
    EXPECT_THROW(c.validate(1), DomainError);
}

TEST(MhStep, ImprovingCandidateIsAlwaysAccepted) {
    // Current state far in the tail; every candidate at the mode side is better.
    const ModelVariant exact = ModelVariant::exact(identity);
    Dataset data;
    data.individuals = {{{1.0, 2.0}, (Eigen::VectorXd(2) << 0.0, 0.0).finished()}};
    const PopulationParams th = theta1(0.0, 1.0, 1.0);
    Rng rng(3);
    for (int r = 0; r < 200; ++r) {
        const MhOutcome out = mh_step_individual(exact, 0, v1(50.0), data, th, v1(1e-3), rng);
        if (out.psi[0] < 50.0) EXPECT_TRUE(out.accepted);
    }
}

TEST(MhStep, VanishingScaleLeavesStateUnchanged) {
    const ModelVariant exact = ModelVariant::exact(identity);
    Dataset data;
    data.individuals = {{{1.0}, v1(0.3)}};
    const PopulationParams th = theta1(0.0, 1.0, 1.0);
    Rng rng(5);
    int acc = 0;
    for (int r = 0; r < 1000; ++r) {
        const MhOutcome out = mh_step_individual(exact, 0, v1(0.7), data, th, v1(1e-14), rng);
        EXPECT_NEAR(out.psi[0], 0.7, 1e-12);
        acc += out.accepted;
    }
    EXPECT_GE(acc, 995);
}

TEST(MhStep, NonFiniteCandidateIsRejected) {
    const auto f = [](const std::vector<double>& t, const Eigen::VectorXd& psi) {
        return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(t.size()), psi[0] > 0.0 ? NAN : psi[0]);
    };
    const ModelVariant exact = ModelVariant::exact(f);
    Dataset data;
    data.individuals = {{{1.0}, v1(-1.0)}};
    Rng rng(7);
    int nonfinite = 0;
    for (int r = 0; r < 100; ++r) {
        const MhOutcome out = mh_step_individual(exact, 0, v1(-0.01), data, theta1(0, 1, 1), v1(1.0), rng);
        if (out.nonfinite) {
            ++nonfinite;
            EXPECT_FALSE(out.accepted);
            EXPECT_DOUBLE_EQ(out.psi[0], -0.01);
        }
    }
    EXPECT_GT(nonfinite, 10);
}

TEST(MhStep, ConjugatePosteriorMoments) {
    // psi ~ N(mu, w2), y_j | psi ~ N(psi, s2): posterior is Gaussian in closed form.
    const double mu = 1.0, w2 = 0.5, s2 = 0.2;
    const Eigen::VectorXd y = (Eigen::VectorXd(3) << 2.1, 1.7, 2.4).finished();
    const double prec = 1.0 / w2 + 3.0 / s2;
    const double post_var = 1.0 / prec;
    const double post_mean = (mu / w2 + y.sum() / s2) * post_var;

    const ModelVariant exact = ModelVariant::exact(identity);
    const Individual ind{{1.0, 2.0, 3.0}, y};
    const PopulationParams th = theta1(mu, w2, s2);
    const GaussianPrior prior(th);
    Rng rng(11);
    Eigen::VectorXd cur = v1(post_mean);
    double lt = individual_log_target(exact, ind, cur, th, prior);
    const Eigen::VectorXd scale = v1(2.4 * std::sqrt(post_var));
    double s = 0.0, ss = 0.0;
    const int n = 100000;
    for (int r = 0; r < n; ++r) {
        const MhOutcome out = mh_step_individual(exact, ind, cur, lt, th, prior, scale, rng);
        cur = out.psi;
        lt = out.log_target;
        s += cur[0];
        ss += cur[0] * cur[0];
    }
    const double m = s / n, v = ss / n - m * m;
    EXPECT_NEAR(m, post_mean, 0.02 * std::abs(post_mean));
    EXPECT_NEAR(v, post_var, 0.02 * post_var);
}

TEST(MhStep, PriorKernelTargetsTheSamePosterior) {
    const double mu = 0.0, w2 = 1.0, s2 = 0.5;
    const Eigen::VectorXd y = (Eigen::VectorXd(2) << 0.8, 1.2).finished();
    const double post_var = 1.0 / (1.0 / w2 + 2.0 / s2);
    const double post_mean = (mu / w2 + y.sum() / s2) * post_var;
    const ModelVariant exact = ModelVariant::exact(identity);
    const Individual ind{{1.0, 2.0}, y};
    const PopulationParams th = theta1(mu, w2, s2);
    const GaussianPrior prior(th);
    Rng rng(13);
    Eigen::VectorXd cur = v1(0.0);
    double lt = individual_log_target(exact, ind, cur, th, prior);
    double s = 0.0, ss = 0.0;
    const int n = 100000;
    for (int r = 0; r < n; ++r) {
        const MhOutcome out = mh_prior_step_individual(exact, ind, cur, lt, th, prior, rng);
        cur = out.psi;
        lt = out.log_target;
        s += cur[0];
        ss += cur[0] * cur[0];
    }
    const double m = s / n, v = ss / n - m * m;
    EXPECT_NEAR(m, post_mean, 0.02 * std::abs(post_mean));
    EXPECT_NEAR(v, post_var, 0.03 * post_var);
}

TEST(MhStep, TwoStateDetailedBalance) {
    // Count crossings between {psi < c} and {psi >= c} in a long stationary run.
    const ModelVariant exact = ModelVariant::exact(identity);
    const Individual ind{{1.0}, v1(0.4)};
    const PopulationParams th = theta1(0.0, 1.0, 0.3);
    const GaussianPrior prior(th);
    Rng rng(17);
    Eigen::VectorXd cur = v1(0.0);
    double lt = individual_log_target(exact, ind, cur, th, prior);
    const double c = 0.2;
    long ab = 0, ba = 0, in_a = 0;
    const long n = 200000;
    for (long r = 0; r < n; ++r) {
        const bool was_a = cur[0] < c;
        const MhOutcome out = mh_step_individual(exact, ind, cur, lt, th, prior, v1(0.8), rng);
        cur = out.psi;
        lt = out.log_target;
        const bool now_a = cur[0] < c;
        in_a += was_a;
        if (was_a && !now_a) ++ab;
        if (!was_a && now_a) ++ba;
    }
    const double pa = double(in_a) / n, pb = 1.0 - pa;
    const double flow_ab = pa * (double(ab) / double(in_a));
    const double flow_ba = pb * (double(ba) / double(n - in_a));
    const double se = std::sqrt(double(ab + ba)) / n;
    EXPECT_LE(std::abs(flow_ab - flow_ba), 3.0 * se);
}

TEST(ResidualPosterior, OneDimensionalBayesUpdate) {
    // Far from the single design point the emulator predicts (0, 1).
    const auto bank = far_field_bank(0.0, 1.0);
    const PopulationParams th = theta1(0.0, 1.0, 1.0);
    const ResidualPosterior rp = residual_posterior_intermediate(v1(2.0), {1.0}, v1(100.0), th, *bank);
    // r ~ N(0, L), y - m = r + eps: precision 1/L + 1/s2.
    const double prec = 1.0 / 1.0 + 1.0 / 1.0;
    EXPECT_NEAR(rp.cov_diag[0], 1.0 / prec, 1e-12);
    EXPECT_NEAR(rp.mean[0], (2.0 / 1.0) / prec, 1e-12);
    EXPECT_NEAR(rp.cov_diag[0], 0.5, 1e-12);
    EXPECT_NEAR(rp.mean[0], 1.0, 1e-12);
}

TEST(ResidualPosterior, LimitsOfTheEmulatorVariance) {
    const PopulationParams th = theta1(0.0, 1.0, 0.3);
    const auto wide = far_field_bank(0.5, 1e12);
    const ResidualPosterior a = residual_posterior_intermediate(v1(2.0), {1.0}, v1(100.0), th, *wide);
    EXPECT_NEAR(a.cov_diag[0], 0.3, 1e-9);
    EXPECT_NEAR(a.mean[0], 1.5, 1e-9);
    // At the design point the emulator variance vanishes up to the nugget.
    const auto unit = far_field_bank(0.5, 1.0);
    const ResidualPosterior b = residual_posterior_intermediate(v1(2.0), {1.0}, v1(0.0), th, *unit);
    EXPECT_NEAR(b.cov_diag[0], 0.0, 1e-3);
    EXPECT_NEAR(b.mean[0], 0.0, 1e-3);
}

TEST(ResidualPosterior, CompleteMatchesJointGaussianConditioning) {
    const std::vector<double> t{1.0};
    const auto bank = bank_on(wave, t, design_1d({-1.5, -0.4, 0.3, 1.2, 2.5}));
    Dataset data;
    data.individuals = {{t, v1(0.9)}, {t, v1(0.2)}};
    Eigen::MatrixXd psi(2, 1);
    psi << 0.7, 0.9;
    const PopulationParams th = theta1(0.0, 1.0, 0.01);
    const Emulator& em = bank->emulators()[0];
    const auto c = oracle::condition(em.design().points, em.z(), psi, true, em.params().beta, em.params().sigma2,
                                     em.params().phi, em.params().nugget);
    const Eigen::VectorXd resid = (Eigen::VectorXd(2) << 0.9, 0.2).finished() - c.mean;
    const Eigen::MatrixXd Ainv = (c.cov + th.sigma_eps2 * Eigen::MatrixXd::Identity(2, 2)).fullPivLu().inverse();
    const Eigen::VectorXd want_mean = c.cov * Ainv * resid;
    const Eigen::MatrixXd want_cov = c.cov - c.cov * Ainv * c.cov;
    ASSERT_GT(std::abs(c.cov(0, 1)), 1e-8);

    const ResidualPosterior rp = residual_posterior_complete(data, psi, th, *bank);
    EXPECT_NEAR((rp.mean - want_mean).cwiseAbs().maxCoeff(), 0.0, 1e-10);
    EXPECT_NEAR((rp.cov - want_cov).cwiseAbs().maxCoeff(), 0.0, 1e-10);
    EXPECT_NEAR(rp.cov_trace, want_cov.trace(), 1e-10);

    CompleteModel cm(data, bank);
    cm.reset(psi);
    const ResidualPosterior rb = residual_posterior_complete(cm, data, th);
    EXPECT_NEAR((rb.mean - want_mean).cwiseAbs().maxCoeff(), 0.0, 1e-10);
    EXPECT_NEAR(rb.cov_trace, want_cov.trace(), 1e-10);
}

TEST(ResidualPosterior, CompleteWithDiagonalCovarianceStacksIntermediate) {
    // Two observation times per individual and one individual: C_D is diagonal.
    const std::vector<double> t{0.5, 2.0};
    const auto bank = bank_on(wave, t, design_1d({-1.5, -0.4, 0.3, 1.2, 2.5}));
    Dataset data;
    data.individuals = {{t, (Eigen::VectorXd(2) << 0.9, -0.6).finished()}};
    const Eigen::MatrixXd psi = Eigen::MatrixXd::Constant(1, 1, 0.8);
    const PopulationParams th = theta1(0.0, 1.0, 0.02);
    const ResidualPosterior full = residual_posterior_complete(data, psi, th, *bank);
    const ResidualPosterior diag = residual_posterior_intermediate(data.individuals[0].y, t, v1(0.8), th, *bank);
    EXPECT_NEAR((full.mean - diag.mean).cwiseAbs().maxCoeff(), 0.0, 1e-12);
    EXPECT_NEAR((full.cov.diagonal() - diag.cov_diag).cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(SaUpdate, FullAndZeroSteps) {
    Eigen::MatrixXd a(3, 2), b(3, 2);
    a << 1, 2, 3, 4, 5, 6;
    b << -1, 0, 2, 2, 0.5, 1;
    const SufficientStats s = stats_of(a, 3.0), f = stats_of(b, 7.0);
    const SufficientStats one = sa_update(s, f, 1.0);
    EXPECT_TRUE(one.s1 == f.s1);
    EXPECT_TRUE(one.s2 == f.s2);
    EXPECT_EQ(one.s3, f.s3);
    const SufficientStats zero = sa_update(s, f, 0.0);
    EXPECT_TRUE(zero.s1 == s.s1);
    EXPECT_EQ(zero.s3, s.s3);
    const SufficientStats half = sa_update(s, f, 0.5);
    EXPECT_NEAR(half.s3, 5.0, 1e-15);
}

TEST(SaUpdate, IntermediateWithoutEmulatorVarianceEqualsSimple) {
    const std::vector<double> t{1.0, 2.0, 3.0};
    // Linear in psi with a linear trend: the emulator reproduces f with zero variance.
    const auto bank = bank_on(decay, t, design_1d({-1.0, 0.5, 2.0}));
    ASSERT_TRUE(bank->emulators()[0].degenerate());
    const Dataset data = linear_toy(4, 3, 0.5, 0.2, 0.05, 9);
    ASSERT_EQ(data.individuals[0].times, t);
    Eigen::MatrixXd psi(4, 1);
    psi << 0.1, 0.4, 0.9, 1.3;
    const PopulationParams th = theta1(0.5, 0.2, 0.05);
    const SufficientStats a = compute_statistics(psi, data, th, ModelVariant::simple(bank));
    const SufficientStats b = compute_statistics(psi, data, th, ModelVariant::intermediate(bank));
    const SufficientStats c = compute_statistics(psi, data, th, ModelVariant::complete(bank));
    EXPECT_DOUBLE_EQ(a.s3, b.s3);
    EXPECT_NEAR(a.s3, c.s3, 1e-12);
}

TEST(MStep, MomentMatchingIsExact) {
    Rng rng(21);
    Eigen::MatrixXd psi(7, 3);
    for (Eigen::Index i = 0; i < psi.rows(); ++i) psi.row(i) = rng.normal_vector(3).transpose();
    const MStepResult r = m_step(stats_of(psi, 4.2), 7, 21);
    const Eigen::VectorXd mean = psi.colwise().mean().transpose();
    const Eigen::MatrixXd centred = psi.rowwise() - mean.transpose();
    const Eigen::MatrixXd cov = centred.transpose() * centred / 7.0;
    EXPECT_NEAR((r.theta.mu - mean).cwiseAbs().maxCoeff(), 0.0, 1e-14);
    EXPECT_NEAR((r.theta.omega - cov).cwiseAbs().maxCoeff(), 0.0, 1e-14);
    EXPECT_DOUBLE_EQ(r.theta.sigma_eps2, 0.2);
    EXPECT_FALSE(r.omega_floored);
}

TEST(MStep, IdenticalDrawsGiveZeroOmegaFlagged) {
    const Eigen::MatrixXd psi = Eigen::MatrixXd::Constant(5, 2, 0.3);
    const MStepResult r = m_step(stats_of(psi, 1.0), 5, 10);
    EXPECT_TRUE(r.omega_degenerate);
    EXPECT_TRUE(r.omega_floored);
    EXPECT_LE(r.theta.omega.cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NO_THROW(r.theta.validate());
}

TEST(MStep, Errors) {
    const Eigen::MatrixXd psi = Eigen::MatrixXd::Random(4, 2);
    EXPECT_THROW(m_step(stats_of(psi, -1.0), 4, 8), DomainError);
    EXPECT_THROW(m_step(stats_of(psi.topRows(1), 1.0), 1, 2), DomainError);
}

TEST(MStep, NoPerturbationImprovesTheCompleteDataLikelihood) {
    Rng rng(23);
    for (int fixture = 0; fixture < 20; ++fixture) {
        Eigen::MatrixXd psi(10, 2);
        for (Eigen::Index i = 0; i < psi.rows(); ++i) psi.row(i) = rng.normal_vector(2).transpose();
        const SufficientStats s = stats_of(psi, 3.0 + rng.uniform());
        const PopulationParams best = m_step(s, 10, 40).theta;
        const double top = complete_data_loglik(s, 10, 40, best);
        for (int r = 0; r < 200; ++r) {
            PopulationParams p = best;
            p.mu += 0.1 * rng.normal_vector(2);
            Eigen::MatrixXd e = 0.05 * Eigen::MatrixXd(rng.normal_vector(4).reshaped(2, 2));
            p.omega += 0.5 * (e + e.transpose());
            p.sigma_eps2 *= std::exp(0.1 * rng.normal());
            if (Eigen::LLT<Eigen::MatrixXd>(p.omega).info() != Eigen::Success) continue;
            EXPECT_LE(complete_data_loglik(s, 10, 40, p), top + 1e-12);
        }
    }
}

TEST(ParameterLayout, FlattenRoundTrip) {
    PopulationParams th;
    th.mu = (Eigen::VectorXd(3) << 1, 2, 3).finished();
    th.omega = (Eigen::MatrixXd(3, 3) << 4, 0.1, 0.2, 0.1, 5, 0.3, 0.2, 0.3, 6).finished();
    th.sigma_eps2 = 0.7;
    EXPECT_EQ(parameter_count(3), 10);
    const auto names = parameter_names(3);
    ASSERT_EQ(names.size(), 10u);
    const Eigen::VectorXd v = flatten(th);
    EXPECT_DOUBLE_EQ(v[3], 4.0);
    EXPECT_DOUBLE_EQ(v[4], 0.1);
    EXPECT_DOUBLE_EQ(v[9], 0.7);
    const PopulationParams back = unflatten(v, 3);
    EXPECT_TRUE(back.omega == th.omega);
    EXPECT_TRUE(back.mu == th.mu);
}

TEST(RunSaem, LinearToyConvergesToTheClosedFormMle) {
    const Dataset data = linear_toy(500, 4, 1.0, 0.3, 0.1, 31);
    const PopulationParams mle = linear_toy_mle(data);
    SaemConfig cfg;
    cfg.k_iters = 150;
    cfg.burn_in = 50;
    cfg.compute_fisher = false;
    cfg.seed = 4;
    const FitReport fit = run_saem(ModelVariant::exact(identity), data, cfg, theta1(0.0, 1.0, 1.0));
    const auto& th = fit.theta_hat;
    EXPECT_NEAR(th.mu[0], mle.mu[0], 0.02 * std::abs(mle.mu[0]));
    EXPECT_NEAR(th.omega(0, 0), mle.omega(0, 0), 0.02 * mle.omega(0, 0));
    EXPECT_NEAR(th.sigma_eps2, mle.sigma_eps2, 0.02 * mle.sigma_eps2);
    double lo = 1e300, hi = -1e300;
    for (std::size_t k = fit.trajectory.size() - 10; k < fit.trajectory.size(); ++k) {
        lo = std::min(lo, fit.trajectory[k].mu[0]);
        hi = std::max(hi, fit.trajectory[k].mu[0]);
    }
    EXPECT_LT(hi - lo, 1e-2);
    EXPECT_EQ(fit.trajectory.size(), 151u);
    EXPECT_EQ(fit.gammas.size(), 150u);
}

TEST(RunSaem, DeterministicPerSeed) {
    const Dataset data = linear_toy(20, 3, 1.0, 0.3, 0.1, 2);
    SaemConfig cfg;
    cfg.k_iters = 30;
    cfg.burn_in = 10;
    cfg.compute_fisher = false;
    const ModelVariant v = ModelVariant::exact(identity);
    const FitReport a = run_saem(v, data, cfg, theta1(0.0, 1.0, 1.0));
    const FitReport b = run_saem(v, data, cfg, theta1(0.0, 1.0, 1.0));
    EXPECT_TRUE(flatten(a.theta_hat) == flatten(b.theta_hat));
    cfg.seed = 2;
    const FitReport c = run_saem(v, data, cfg, theta1(0.0, 1.0, 1.0));
    EXPECT_FALSE(flatten(a.theta_hat) == flatten(c.theta_hat));
}

TEST(RunSaem, ScheduleEndsWithAFullStepAfterOneIteration) {
    const Dataset data = linear_toy(10, 2, 0.0, 0.5, 0.2, 3);
    SaemConfig cfg;
    cfg.k_iters = 6;
    cfg.burn_in = 5;
    cfg.compute_fisher = false;
    const FitReport fit = run_saem(ModelVariant::exact(identity), data, cfg, theta1(0.0, 1.0, 1.0));
    EXPECT_DOUBLE_EQ(fit.gammas.back(), 1.0);
    // gamma = 1 means the last statistics are exactly the fresh draw's.
    const SufficientStats fresh = compute_statistics(fit.psi_final, data, fit.trajectory[5], ModelVariant::exact(identity));
    EXPECT_NEAR((fit.stats_trajectory.back().s1 - fresh.s1).norm(), 0.0, 1e-12);
}

TEST(RunSaem, ZeroVarianceEmulatorGivesIdenticalChainsAcrossVariants) {
    const std::vector<double> t{0.5, 1.0, 2.0};
    const auto bank = bank_on(decay, t, design_1d({-1.0, 0.5, 2.0}, -1.0, 3.0));
    Rng rng(8);
    Dataset data;
    for (int i = 0; i < 6; ++i) {
        const double psi = 1.0 + 0.4 * rng.normal();
        data.individuals.push_back({t, decay(t, v1(psi)) + 0.1 * rng.normal_vector(3)});
    }
    SaemConfig cfg;
    cfg.k_iters = 20;
    cfg.burn_in = 10;
    cfg.compute_fisher = false;
    const PopulationParams init = theta1(0.5, 0.5, 0.1);
    const FitReport s = run_saem(ModelVariant::simple(bank), data, cfg, init);
    const FitReport m = run_saem(ModelVariant::intermediate(bank), data, cfg, init);
    const FitReport c = run_saem(ModelVariant::complete(bank), data, cfg, init);
    const FitReport e = run_saem(ModelVariant::exact(decay), data, cfg, init);
    for (std::size_t k = 0; k < s.trajectory.size(); ++k) {
        EXPECT_NEAR((flatten(s.trajectory[k]) - flatten(m.trajectory[k])).cwiseAbs().maxCoeff(), 0.0, 1e-9);
        EXPECT_NEAR((flatten(s.trajectory[k]) - flatten(c.trajectory[k])).cwiseAbs().maxCoeff(), 0.0, 1e-9);
        EXPECT_NEAR((flatten(s.trajectory[k]) - flatten(e.trajectory[k])).cwiseAbs().maxCoeff(), 0.0, 1e-3);
    }
}

TEST(RunSaem, NonFiniteThetaIsADivergence) {
    const auto f = [](const std::vector<double>& t, const Eigen::VectorXd& psi) {
        return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(t.size()), std::exp(std::exp(psi[0])));
    };
    Dataset data;
    for (int i = 0; i < 3; ++i) data.individuals.push_back({{1.0}, v1(1e308)});
    SaemConfig cfg;
    cfg.k_iters = 5;
    cfg.burn_in = 2;
    cfg.compute_fisher = false;
    // Residuals of order 1e308 overflow the residual sum of squares.
    EXPECT_THROW(run_saem(ModelVariant::exact(f), data, cfg, theta1(0.0, 1.0, 1.0)), DivergenceError);
}

TEST(RunSaem, RejectsTooFewIndividuals) {
    const Dataset data = linear_toy(1, 3, 0.0, 1.0, 1.0, 1);
    SaemConfig cfg;
    cfg.compute_fisher = false;
    EXPECT_THROW(run_saem(ModelVariant::exact(identity), data, cfg, theta1(0.0, 1.0, 1.0)), DomainError);
}
