#include "ksaem/saem.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

#include <fmt/format.h>

#include "ksaem/errors.hpp"

namespace ksaem {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kOmegaFloor = 1e-10;

}  // namespace

void SaemConfig::validate(Eigen::Index d) const {
    if (m_mcmc < 1) throw DomainError("saem: m_mcmc must be >= 1");
    if (burn_in < 0) throw DomainError("saem: burn_in must be >= 0");
    if (!(k_iters > burn_in)) throw DomainError("saem: k_iters must exceed burn_in");
    if (!(sa_exponent > 0.5 && sa_exponent <= 1.0)) throw DomainError("saem: sa_exponent must lie in (0.5, 1]");
    if (proposal_scale.size() != 0) {
        if (proposal_scale.size() != d) throw DomainError("saem: proposal_scale must have length d");
        if ((proposal_scale.array() < 0.0).any()) throw DomainError("saem: proposal_scale must be >= 0");
    }
    if (fisher_iters < 0) throw DomainError("saem: fisher_iters must be >= 0");
}

double step_size(int k, int burn_in, double exponent) {
    if (k <= burn_in) return 1.0;
    return std::pow(static_cast<double>(k - burn_in), -exponent);
}

// ---------------------------------------------------------------------------
// S-step

double individual_log_target(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi_i,
                             const PopulationParams& theta, const GaussianPrior& prior) {
    try {
        const double ll = cond_loglik_individual(variant, ind, psi_i, theta) + prior.logpdf(psi_i);
        return std::isfinite(ll) ? ll : kNegInf;
    } catch (const SolverError&) {
        return kNegInf;
    } catch (const NumericalHealthError&) {
        return kNegInf;
    }
}

namespace {

}  // namespace

MhOutcome mh_step_individual(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi_current,
                             double current_log_target, const PopulationParams& theta, const GaussianPrior& prior,
                             const Eigen::VectorXd& proposal_scale, Rng& rng) {
    MhOutcome out;
    const Eigen::VectorXd cand = psi_current + proposal_scale.cwiseProduct(rng.normal_vector(psi_current.size()));
    const double lt = individual_log_target(variant, ind, cand, theta, prior);
    const double u = rng.uniform();
    if (!std::isfinite(lt)) {
        out.psi = psi_current;
        out.log_target = current_log_target;
        out.nonfinite = true;
        return out;
    }
    // Symmetric proposal: the q terms cancel.
    const double log_ratio = current_log_target == kNegInf ? 0.0 : lt - current_log_target;
    if (log_ratio >= 0.0 || std::log(u) < log_ratio) {
        out.psi = cand;
        out.log_target = lt;
        out.accepted = true;
    } else {
        out.psi = psi_current;
        out.log_target = current_log_target;
    }
    return out;
}

MhOutcome mh_step_individual(const ModelVariant& variant, Eigen::Index i, const Eigen::VectorXd& psi_current,
                             const Dataset& data, const PopulationParams& theta,
                             const Eigen::VectorXd& proposal_scale, Rng& rng) {
    const GaussianPrior prior(theta);
    const auto& ind = data.individuals.at(static_cast<std::size_t>(i));
    const double lt = individual_log_target(variant, ind, psi_current, theta, prior);
    return mh_step_individual(variant, ind, psi_current, lt, theta, prior, proposal_scale, rng);
}

MhOutcome mh_prior_step_individual(const ModelVariant& variant, const Individual& ind,
                                   const Eigen::VectorXd& psi_current, double current_log_target,
                                   const PopulationParams& theta, const GaussianPrior& prior, Rng& rng) {
    MhOutcome out;
    const Eigen::VectorXd cand = prior.mean() + prior.chol() * rng.normal_vector(psi_current.size());
    const double lt = individual_log_target(variant, ind, cand, theta, prior);
    const double u = rng.uniform();
    out.psi = psi_current;
    out.log_target = current_log_target;
    if (!std::isfinite(lt)) {
        out.nonfinite = true;
        return out;
    }
    // q is the prior, so only the likelihood ratio remains.
    const double log_ratio = current_log_target == kNegInf
                                 ? 0.0
                                 : (lt - prior.logpdf(cand)) - (current_log_target - prior.logpdf(psi_current));
    if (log_ratio >= 0.0 || std::log(u) < log_ratio) {
        out.psi = cand;
        out.log_target = lt;
        out.accepted = true;
    }
    return out;
}

MhOutcome mh_prior_step_complete(Eigen::Index i, CompleteModel& model, const PopulationParams& theta,
                                 const GaussianPrior& prior, Rng& rng) {
    MhOutcome out;
    const Eigen::VectorXd current = model.psi().row(i).transpose();
    const Eigen::VectorXd cand = prior.mean() + prior.chol() * rng.normal_vector(current.size());
    const double u = rng.uniform();
    double delta = kNegInf;
    try {
        delta = model.delta_loglik(i, cand, theta.sigma_eps2);
    } catch (const NumericalHealthError&) {
        delta = kNegInf;
    }
    out.psi = current;
    if (!std::isfinite(delta)) {
        out.nonfinite = true;
        return out;
    }
    if (delta >= 0.0 || std::log(u) < delta) {
        model.accept(i, cand);
        out.psi = cand;
        out.accepted = true;
    }
    return out;
}

MhOutcome mh_step_complete(Eigen::Index i, CompleteModel& model, const PopulationParams& theta,
                           const GaussianPrior& prior, const Eigen::VectorXd& proposal_scale, Rng& rng) {
    MhOutcome out;
    const Eigen::VectorXd current = model.psi().row(i).transpose();
    const Eigen::VectorXd cand = current + proposal_scale.cwiseProduct(rng.normal_vector(current.size()));
    const double u = rng.uniform();
    double delta = kNegInf;
    try {
        delta = model.delta_loglik(i, cand, theta.sigma_eps2);
    } catch (const NumericalHealthError&) {
        delta = kNegInf;
    }
    if (!std::isfinite(delta)) {
        out.psi = current;
        out.nonfinite = true;
        return out;
    }
    const double log_ratio = delta + prior.logpdf(cand) - prior.logpdf(current);
    if (log_ratio >= 0.0 || std::log(u) < log_ratio) {
        model.accept(i, cand);
        out.psi = cand;
        out.accepted = true;
    } else {
        out.psi = current;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Residual posteriors

ResidualPosterior residual_posterior_intermediate(const Eigen::VectorXd& yi, const std::vector<double>& ti,
                                                  const Eigen::VectorXd& psi_i, const PopulationParams& theta,
                                                  const EmulatorBank& bank) {
    Eigen::VectorXd m, lambda;
    bank.mean_and_variance(ti, psi_i, m, lambda);
    const double s2 = theta.sigma_eps2;
    ResidualPosterior rp;
    rp.mean.resize(yi.size());
    rp.cov_diag.resize(yi.size());
    for (Eigen::Index j = 0; j < yi.size(); ++j) {
        const double L = lambda[j];
        if (L <= 0.0) {
            rp.mean[j] = 0.0;
            rp.cov_diag[j] = 0.0;
            continue;
        }
        if (std::isinf(L)) {
            rp.cov_diag[j] = s2;
            rp.mean[j] = yi[j] - m[j];
            continue;
        }
        const double g = s2 * L / (s2 + L);
        rp.cov_diag[j] = g;
        rp.mean[j] = g * (yi[j] - m[j]) / s2;
    }
    rp.cov_trace = rp.cov_diag.sum();
    return rp;
}

namespace {

struct BlockPosterior {
    Eigen::VectorXd mean;  // posterior mean of r on the block
    Eigen::MatrixXd cov;   // s2 (I - s2 A^{-1}), A = C + s2 I
};

BlockPosterior block_posterior(const CompleteModel::Block& b, double s2) {
    Eigen::MatrixXd A = b.cov;
    A.diagonal().array() += s2;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success)
        throw NumericalHealthError("complete residual posterior: C_D + s2 I is not positive definite");
    const Eigen::VectorXd r = b.y - b.mean;
    BlockPosterior bp;
    bp.mean = r - s2 * llt.solve(r);
    const auto m = A.rows();
    bp.cov = s2 * (Eigen::MatrixXd::Identity(m, m) - s2 * llt.solve(Eigen::MatrixXd::Identity(m, m)));
    bp.cov = 0.5 * (bp.cov + bp.cov.transpose());
    return bp;
}

}  // namespace

ResidualPosterior residual_posterior_complete(const CompleteModel& model, const Dataset& data,
                                              const PopulationParams& theta) {
    const Eigen::Index n = data.n_tot();
    ResidualPosterior rp;
    rp.mean = Eigen::VectorXd::Zero(n);
    rp.cov = Eigen::MatrixXd::Zero(n, n);
    for (const auto& b : model.blocks()) {
        const BlockPosterior bp = block_posterior(b, theta.sigma_eps2);
        for (std::size_t r = 0; r < b.flat.size(); ++r) {
            rp.mean[b.flat[r]] = bp.mean[static_cast<Eigen::Index>(r)];
            for (std::size_t c = 0; c < b.flat.size(); ++c)
                rp.cov(b.flat[r], b.flat[c]) = bp.cov(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        }
    }
    rp.cov_diag = rp.cov.diagonal();
    rp.cov_trace = rp.cov_diag.sum();
    return rp;
}

ResidualPosterior residual_posterior_complete(const Dataset& data, const Eigen::MatrixXd& psi,
                                              const PopulationParams& theta, const EmulatorBank& bank) {
    CompleteModel model(data, std::shared_ptr<const EmulatorBank>(&bank, [](const EmulatorBank*) {}));
    model.reset(psi);
    return residual_posterior_complete(model, data, theta);
}

// ---------------------------------------------------------------------------
// SA / M steps

namespace {

double complete_s3(const CompleteModel& model, double s2) {
    double s3 = 0.0;
    for (const auto& b : model.blocks()) {
        const BlockPosterior bp = block_posterior(b, s2);
        s3 += (b.y - b.mean - bp.mean).squaredNorm() + bp.cov.trace();
    }
    return s3;
}

SufficientStats psi_statistics(const Eigen::MatrixXd& psi) {
    SufficientStats s;
    s.s1 = psi.colwise().sum().transpose();
    s.s2 = psi.transpose() * psi;
    return s;
}

}  // namespace

SufficientStats compute_statistics(const Eigen::MatrixXd& psi, const Dataset& data,
                                   const PopulationParams& theta_prev, const ModelVariant& variant) {
    SufficientStats s = psi_statistics(psi);
    if (variant.kind == VariantKind::Complete) {
        CompleteModel model(data, variant.bank);
        model.reset(psi);
        s.s3 = complete_s3(model, theta_prev.sigma_eps2);
        return s;
    }
    double s3 = 0.0;
    for (Eigen::Index i = 0; i < data.N(); ++i) {
        const auto& ind = data.individuals[static_cast<std::size_t>(i)];
        const Eigen::VectorXd p = psi.row(i).transpose();
        switch (variant.kind) {
            case VariantKind::Exact: s3 += (ind.y - variant.model(ind.times, p)).squaredNorm(); break;
            case VariantKind::Simple: s3 += (ind.y - variant.bank->mean(ind.times, p)).squaredNorm(); break;
            case VariantKind::Intermediate: {
                const Eigen::VectorXd m = variant.bank->mean(ind.times, p);
                const auto rp = residual_posterior_intermediate(ind.y, ind.times, p, theta_prev, *variant.bank);
                s3 += (ind.y - m - rp.mean).squaredNorm() + rp.cov_trace;
                break;
            }
            case VariantKind::Complete: break;
        }
    }
    s.s3 = s3;
    return s;
}

SufficientStats sa_update(const SufficientStats& stats, const SufficientStats& fresh, double gamma) {
    SufficientStats out;
    out.s1 = stats.s1 + gamma * (fresh.s1 - stats.s1);
    out.s2 = stats.s2 + gamma * (fresh.s2 - stats.s2);
    out.s3 = stats.s3 + gamma * (fresh.s3 - stats.s3);
    if (gamma == 1.0) return fresh;
    return out;
}

SufficientStats sa_update(const SufficientStats& stats, const Eigen::MatrixXd& psi_new, const Dataset& data,
                          const PopulationParams& theta_prev, const ModelVariant& variant, double gamma) {
    return sa_update(stats, compute_statistics(psi_new, data, theta_prev, variant), gamma);
}

MStepResult m_step(const SufficientStats& stats, Eigen::Index N, Eigen::Index n_tot) {
    if (N < 2) throw DomainError("m_step: need N >= 2");
    if (n_tot < 1) throw DomainError("m_step: need n_tot >= 1");
    if (stats.s3 < 0.0) throw DomainError("m_step: invariant violated (s3 < 0)");
    const auto Nd = static_cast<double>(N);
    MStepResult res;
    res.theta.mu = stats.s1 / Nd;
    Eigen::MatrixXd omega = stats.s2 / Nd - stats.s1 * stats.s1.transpose() / (Nd * Nd);
    omega = 0.5 * (omega + omega.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(omega);
    const double min_eig = es.eigenvalues().minCoeff();
    if (!(min_eig > 0.0)) res.omega_degenerate = true;
    if (!(min_eig >= kOmegaFloor) && es.info() == Eigen::Success) {
        const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(kOmegaFloor);
        omega = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
        omega = 0.5 * (omega + omega.transpose());
        res.omega_floored = true;
    }
    res.theta.omega = omega;
    res.theta.sigma_eps2 = stats.s3 / static_cast<double>(n_tot);
    return res;
}

double complete_data_loglik(const SufficientStats& stats, Eigen::Index N, Eigen::Index n_tot,
                            const PopulationParams& theta) {
    const auto Nd = static_cast<double>(N);
    const auto d = static_cast<double>(theta.dim());
    Eigen::LLT<Eigen::MatrixXd> llt(theta.omega);
    if (llt.info() != Eigen::Success) return kNegInf;
    double logdet = 0.0;
    for (Eigen::Index k = 0; k < theta.dim(); ++k) logdet += 2.0 * std::log(llt.matrixLLT()(k, k));
    const Eigen::MatrixXd scatter = stats.s2 - stats.s1 * theta.mu.transpose() - theta.mu * stats.s1.transpose() +
                                    Nd * theta.mu * theta.mu.transpose();
    const double quad = llt.solve(scatter).trace();
    const double log2pi = std::log(2.0 * std::numbers::pi);
    return -0.5 * Nd * (d * log2pi + logdet) - 0.5 * quad -
           0.5 * static_cast<double>(n_tot) * (log2pi + std::log(theta.sigma_eps2)) - 0.5 * stats.s3 / theta.sigma_eps2;
}

// ---------------------------------------------------------------------------
// Parameter layout

Eigen::Index parameter_count(Eigen::Index d) { return d + d * (d + 1) / 2 + 1; }

std::vector<std::string> parameter_names(Eigen::Index d) {
    std::vector<std::string> names;
    for (Eigen::Index a = 0; a < d; ++a) names.push_back(fmt::format("mu_{}", a + 1));
    for (Eigen::Index a = 0; a < d; ++a)
        for (Eigen::Index b = a; b < d; ++b) names.push_back(fmt::format("omega_{}{}", a + 1, b + 1));
    names.emplace_back("sigma2");
    return names;
}

Eigen::VectorXd flatten(const PopulationParams& theta) {
    const Eigen::Index d = theta.dim();
    Eigen::VectorXd v(parameter_count(d));
    Eigen::Index p = 0;
    for (Eigen::Index a = 0; a < d; ++a) v[p++] = theta.mu[a];
    for (Eigen::Index a = 0; a < d; ++a)
        for (Eigen::Index b = a; b < d; ++b) v[p++] = theta.omega(a, b);
    v[p] = theta.sigma_eps2;
    return v;
}

PopulationParams unflatten(const Eigen::VectorXd& v, Eigen::Index d) {
    if (v.size() != parameter_count(d)) throw DomainError("unflatten: wrong parameter vector length");
    PopulationParams t;
    t.mu = v.head(d);
    t.omega.resize(d, d);
    Eigen::Index p = d;
    for (Eigen::Index a = 0; a < d; ++a)
        for (Eigen::Index b = a; b < d; ++b) {
            t.omega(a, b) = v[p];
            t.omega(b, a) = v[p];
            ++p;
        }
    t.sigma_eps2 = v[p];
    return t;
}

// ---------------------------------------------------------------------------
// Driver

namespace {

struct SweepCounters {
    Eigen::VectorXd accepted;
    Eigen::VectorXd proposed;
    long nonfinite = 0;
    long extrapolated = 0;

    explicit SweepCounters(Eigen::Index d) : accepted(Eigen::VectorXd::Zero(d)), proposed(Eigen::VectorXd::Zero(d)) {}
};

// m_mcmc systematic-scan sweeps of single-coordinate random-walk moves for every
// individual, each optionally preceded by one independence move from the prior. Streams are derived from (seed, k, i) so the result does not depend on
// evaluation order across individuals.
void s_step(const ModelVariant& variant, const Dataset& data, const PopulationParams& theta, Eigen::MatrixXd& psi,
            CompleteModel* complete, const Eigen::VectorXd& scale, int m_mcmc, bool prior_kernel,
            std::uint64_t seed, int k, SweepCounters& counters) {
    const Eigen::Index d = psi.cols();
    const GaussianPrior prior(theta);
    const Box* box = variant.is_meta() ? &variant.bank->design().box : nullptr;
    Eigen::VectorXd step = Eigen::VectorXd::Zero(d);
    for (Eigen::Index i = 0; i < data.N(); ++i) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i)}));
        const auto& ind = data.individuals[static_cast<std::size_t>(i)];
        Eigen::VectorXd cur = psi.row(i).transpose();
        double lt = complete ? 0.0 : individual_log_target(variant, ind, cur, theta, prior);
        for (int l = 0; l < m_mcmc; ++l) {
            if (prior_kernel) {
                const MhOutcome out = complete ? mh_prior_step_complete(i, *complete, theta, prior, rng)
                                               : mh_prior_step_individual(variant, ind, cur, lt, theta, prior, rng);
                if (out.accepted && box && !box->contains(out.psi)) ++counters.extrapolated;
                if (out.nonfinite) ++counters.nonfinite;
                cur = out.psi;
                lt = out.log_target;
            }
            for (Eigen::Index c = 0; c < d; ++c) {
                if (scale[c] == 0.0) continue;
                step.setZero();
                step[c] = scale[c];
                MhOutcome out = complete ? mh_step_complete(i, *complete, theta, prior, step, rng)
                                         : mh_step_individual(variant, ind, cur, lt, theta, prior, step, rng);
                counters.proposed[c] += 1.0;
                if (out.accepted) {
                    counters.accepted[c] += 1.0;
                    if (box && !box->contains(out.psi)) ++counters.extrapolated;
                }
                if (out.nonfinite) ++counters.nonfinite;
                cur = out.psi;
                lt = out.log_target;
            }
        }
        psi.row(i) = cur.transpose();
    }
}

}  // namespace

FitReport run_saem(const ModelVariant& variant, const Dataset& data, const SaemConfig& config,
                   const PopulationParams& theta_init) {
    const auto t0 = std::chrono::steady_clock::now();
    data.validate();
    theta_init.validate();
    variant.check_compatible(data);
    const Eigen::Index d = theta_init.dim();
    config.validate(d);
    const Eigen::Index N = data.N();
    const Eigen::Index n_tot = data.n_tot();
    if (N < 2) throw DomainError("run_saem: need at least two individuals");
    if (variant.is_meta() && variant.bank->dim() != d)
        throw DomainError("run_saem: emulator design dimension differs from theta dimension");

    FitReport report;
    report.diagnostics.variant = variant.kind;
    PopulationParams theta = theta_init;
    Eigen::MatrixXd psi = theta.mu.transpose().replicate(N, 1);
    Eigen::VectorXd scale = config.proposal_scale.size() == d
                                ? config.proposal_scale
                                : Eigen::VectorXd(theta.omega.diagonal().cwiseSqrt());
    std::optional<CompleteModel> complete;
    if (variant.kind == VariantKind::Complete) {
        complete.emplace(data, variant.bank);
        complete->reset(psi);
    }

    report.trajectory.push_back(theta);
    SufficientStats stats;
    long transitions = 0, accepted = 0;
    for (int k = 1; k <= config.k_iters; ++k) {
        SweepCounters counters(d);
        s_step(variant, data, theta, psi, complete ? &*complete : nullptr, scale, config.m_mcmc, config.prior_kernel,
               config.seed, k, counters);
        transitions += static_cast<long>(counters.proposed.sum());
        accepted += static_cast<long>(counters.accepted.sum());
        report.diagnostics.nonfinite_rejections += counters.nonfinite;
        report.diagnostics.extrapolations += counters.extrapolated;

        const double gamma = step_size(k, config.burn_in, config.sa_exponent);
        SufficientStats fresh = psi_statistics(psi);
        fresh.s3 = complete ? complete_s3(*complete, theta.sigma_eps2)
                            : compute_statistics(psi, data, theta, variant).s3;
        stats = k == 1 ? fresh : sa_update(stats, fresh, gamma);

        MStepResult ms = m_step(stats, N, n_tot);
        if (!ms.theta.all_finite() || !(ms.theta.sigma_eps2 > 0.0))
            throw DivergenceError(fmt::format("saem diverged at iteration {}", k), k);
        report.diagnostics.omega_floored = report.diagnostics.omega_floored || ms.omega_floored;
        theta = ms.theta;

        if (config.adapt_proposal && k <= config.burn_in) {
            for (Eigen::Index c = 0; c < d; ++c) {
                if (counters.proposed[c] == 0.0) continue;
                const double rate = counters.accepted[c] / counters.proposed[c];
                scale[c] *= std::exp(1.5 * (rate - config.target_acceptance));
            }
        }
        report.trajectory.push_back(theta);
        report.gammas.push_back(gamma);
        report.stats_trajectory.push_back(stats);
    }

    report.theta_hat = theta;
    report.psi_final = psi;
    report.diagnostics.transitions = transitions;
    report.diagnostics.acceptance_rate = transitions ? static_cast<double>(accepted) / transitions : 0.0;
    report.diagnostics.final_proposal_scale = scale;
    report.diagnostics.saem_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (config.compute_fisher && config.fisher_iters > 0) {
        report.fisher_detail = fisher_information(variant, data, report, config);
        report.fisher = report.fisher_detail.information;
        report.std_errors = report.fisher_detail.std_errors;
        report.has_fisher = true;
    }
    report.diagnostics.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

namespace detail {

void s_step_plain(const ModelVariant& variant, const Dataset& data, const PopulationParams& theta,
                  Eigen::MatrixXd& psi, CompleteModel* complete, const Eigen::VectorXd& scale, int m_mcmc,
                  bool prior_kernel, std::uint64_t seed, int k) {
    SweepCounters counters(psi.cols());
    s_step(variant, data, theta, psi, complete, scale, m_mcmc, prior_kernel, seed, k, counters);
}

}  // namespace detail

}  // namespace ksaem
