#include <cmath>
#include <limits>
#include <optional>

#include "ksaem/errors.hpp"
#include "ksaem/saem.hpp"

namespace ksaem {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct OmegaIndex {
    Eigen::Index a, b;
};

std::vector<OmegaIndex> omega_indices(Eigen::Index d) {
    std::vector<OmegaIndex> idx;
    for (Eigen::Index a = 0; a < d; ++a)
        for (Eigen::Index b = a; b < d; ++b) idx.push_back({a, b});
    return idx;
}

// Derivatives of log N(psi; mu, Omega) with respect to (mu, upper triangle of Omega).
// The sigma2 slot (last) is left at zero.
void prior_derivatives(const Eigen::VectorXd& psi, const PopulationParams& theta, const Eigen::MatrixXd& P,
                       Eigen::VectorXd& grad, Eigen::MatrixXd& hess) {
    const Eigen::Index d = theta.dim();
    const Eigen::Index p = parameter_count(d);
    const auto idx = omega_indices(d);
    grad = Eigen::VectorXd::Zero(p);
    hess = Eigen::MatrixXd::Zero(p, p);
    const Eigen::VectorXd q = P * (psi - theta.mu);

    grad.head(d) = q;
    hess.topLeftCorner(d, d) = -P;

    // E_p q and P E_p q for every Omega entry.
    const auto n_om = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd Eq(d, n_om), PEq(d, n_om);
    for (Eigen::Index k = 0; k < n_om; ++k) {
        const auto [a, b] = idx[static_cast<std::size_t>(k)];
        Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
        if (a == b) {
            v[a] = q[a];
            grad[d + k] = 0.5 * (q[a] * q[a] - P(a, a));
        } else {
            v[a] = q[b];
            v[b] = q[a];
            grad[d + k] = q[a] * q[b] - P(a, b);
        }
        Eq.col(k) = v;
        PEq.col(k) = P * v;
    }
    hess.block(0, d, d, n_om) = -PEq;
    hess.block(d, 0, n_om, d) = -PEq.transpose();

    // H_pq = 1/2 tr(P E_q P E_p) - (E_p q)^T P (E_q q).
    for (Eigen::Index k = 0; k < n_om; ++k) {
        const auto [a, b] = idx[static_cast<std::size_t>(k)];
        for (Eigen::Index l = k; l < n_om; ++l) {
            const auto [c, e] = idx[static_cast<std::size_t>(l)];
            // tr(P E_l P E_k) with E = e_i e_j^T (+ transpose off the diagonal).
            auto tr_term = [&](Eigen::Index i1, Eigen::Index j1, Eigen::Index i2, Eigen::Index j2) {
                // tr(P e_i2 e_j2^T P e_i1 e_j1^T) = P(j1, i2) P(j2, i1)
                return P(j1, i2) * P(j2, i1);
            };
            double tr = 0.0;
            const std::vector<std::pair<Eigen::Index, Eigen::Index>> ek =
                a == b ? std::vector<std::pair<Eigen::Index, Eigen::Index>>{{a, a}}
                       : std::vector<std::pair<Eigen::Index, Eigen::Index>>{{a, b}, {b, a}};
            const std::vector<std::pair<Eigen::Index, Eigen::Index>> el =
                c == e ? std::vector<std::pair<Eigen::Index, Eigen::Index>>{{c, c}}
                       : std::vector<std::pair<Eigen::Index, Eigen::Index>>{{c, e}, {e, c}};
            for (const auto& [i1, j1] : ek)
                for (const auto& [i2, j2] : el) tr += tr_term(i1, j1, i2, j2);
            const double h = 0.5 * tr - Eq.col(k).dot(PEq.col(l));
            hess(d + k, d + l) = h;
            hess(d + l, d + k) = h;
        }
    }
}

// Derivatives of the observation log-density with respect to sigma2.
void sigma2_derivatives(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi,
                        double v, double& g, double& h) {
    const auto n = static_cast<double>(ind.y.size());
    switch (variant.kind) {
        case VariantKind::Exact:
        case VariantKind::Simple: {
            const Eigen::VectorXd m = variant.kind == VariantKind::Exact ? variant.model(ind.times, psi)
                                                                         : variant.bank->mean(ind.times, psi);
            const double rss = (ind.y - m).squaredNorm();
            g = -n / (2.0 * v) + rss / (2.0 * v * v);
            h = n / (2.0 * v * v) - rss / (v * v * v);
            return;
        }
        case VariantKind::Intermediate: {
            Eigen::VectorXd m, lambda;
            variant.bank->mean_and_variance(ind.times, psi, m, lambda);
            g = 0.0;
            h = 0.0;
            for (Eigen::Index j = 0; j < ind.y.size(); ++j) {
                const double vj = v + std::max(lambda[j], 0.0);
                const double r2 = (ind.y[j] - m[j]) * (ind.y[j] - m[j]);
                g += -1.0 / (2.0 * vj) + r2 / (2.0 * vj * vj);
                h += 1.0 / (2.0 * vj * vj) - r2 / (vj * vj * vj);
            }
            return;
        }
        case VariantKind::Complete: g = 0.0; h = 0.0; return;
    }
}

Eigen::MatrixXd precision(const PopulationParams& theta) {
    Eigen::LLT<Eigen::MatrixXd> llt(theta.omega);
    if (llt.info() != Eigen::Success) throw NumericalHealthError("fisher: Omega is not positive definite");
    const auto d = theta.dim();
    Eigen::MatrixXd P = llt.solve(Eigen::MatrixXd::Identity(d, d));
    return 0.5 * (P + P.transpose());
}

}  // namespace

void complete_data_derivatives(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi_i,
                               const PopulationParams& theta, Eigen::VectorXd& grad, Eigen::MatrixXd& hess) {
    prior_derivatives(psi_i, theta, precision(theta), grad, hess);
    const Eigen::Index last = grad.size() - 1;
    sigma2_derivatives(variant, ind, psi_i, theta.sigma_eps2, grad[last], hess(last, last));
}

FisherResult standard_errors_from_information(const Eigen::MatrixXd& information) {
    FisherResult res;
    const Eigen::Index p = information.rows();
    res.information = 0.5 * (information + information.transpose());
    res.std_errors = Eigen::VectorXd::Constant(p, kNaN);
    if (p == 0) return res;
    if (!res.information.allFinite()) {
        res.pseudo_inverse = true;
        return res;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(res.information);
    const Eigen::VectorXd ev = es.eigenvalues();
    const double tol = 1e-12 * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
    Eigen::VectorXd inv_ev(p);
    for (Eigen::Index k = 0; k < p; ++k) {
        if (std::abs(ev[k]) > tol) {
            inv_ev[k] = 1.0 / ev[k];
        } else {
            inv_ev[k] = 0.0;
            res.pseudo_inverse = true;
        }
    }
    const Eigen::MatrixXd inv = es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
    for (Eigen::Index k = 0; k < p; ++k) {
        if (inv(k, k) > 0.0) {
            res.std_errors[k] = std::sqrt(inv(k, k));
        } else {
            res.negative_variance = true;
        }
    }
    return res;
}

FisherResult fisher_information(const ModelVariant& variant, const Dataset& data, const FitReport& fit,
                                const SaemConfig& config) {
    const PopulationParams& theta = fit.theta_hat;
    const Eigen::Index d = theta.dim();
    const Eigen::Index p = parameter_count(d);
    const Eigen::Index N = data.N();
    const bool joint = variant.kind == VariantKind::Complete;
    const int draws = config.fisher_iters;
    if (draws < 1) throw DomainError("fisher: fisher_iters must be >= 1");
    // A few sweeps between retained draws keep the chain moving without the full S-step cost.
    const int sweeps = std::max(1, config.m_mcmc / 5);

    Eigen::MatrixXd psi = fit.psi_final.rows() == N ? fit.psi_final : Eigen::MatrixXd(theta.mu.transpose().replicate(N, 1));
    Eigen::VectorXd scale = fit.diagnostics.final_proposal_scale.size() == d
                                ? fit.diagnostics.final_proposal_scale
                                : Eigen::VectorXd(theta.omega.diagonal().cwiseSqrt());
    std::optional<CompleteModel> complete;
    if (joint) {
        complete.emplace(data, variant.bank);
        complete->reset(psi);
    }
    const Eigen::MatrixXd P = precision(theta);

    std::vector<Eigen::VectorXd> sg(static_cast<std::size_t>(N), Eigen::VectorXd::Zero(p));
    std::vector<Eigen::MatrixXd> sgg(static_cast<std::size_t>(N), Eigen::MatrixXd::Zero(p, p));
    Eigen::MatrixXd sH = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd sG = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd sGG = Eigen::MatrixXd::Zero(p, p);

    Eigen::VectorXd g, G(p);
    Eigen::MatrixXd H;
    for (int f = 1; f <= draws; ++f) {
        detail::s_step_plain(variant, data, theta, psi, complete ? &*complete : nullptr, scale, sweeps,
                             config.prior_kernel, config.seed, config.k_iters + f);
        G.setZero();
        for (Eigen::Index i = 0; i < N; ++i) {
            const Eigen::VectorXd psi_i = psi.row(i).transpose();
            prior_derivatives(psi_i, theta, P, g, H);
            if (!joint) {
                const auto& ind = data.individuals[static_cast<std::size_t>(i)];
                sigma2_derivatives(variant, ind, psi_i, theta.sigma_eps2, g[p - 1], H(p - 1, p - 1));
                sg[static_cast<std::size_t>(i)] += g;
                sgg[static_cast<std::size_t>(i)] += g * g.transpose();
            }
            G += g;
            sH += H;
        }
        if (joint) {
            sG += G;
            sGG += G * G.transpose();
        }
    }

    const double inv = 1.0 / static_cast<double>(draws);
    Eigen::MatrixXd info = -sH * inv;
    if (joint) {
        const Eigen::VectorXd gbar = sG * inv;
        info -= sGG * inv - gbar * gbar.transpose();
    } else {
        for (Eigen::Index i = 0; i < N; ++i) {
            const Eigen::VectorXd gbar = sg[static_cast<std::size_t>(i)] * inv;
            info -= sgg[static_cast<std::size_t>(i)] * inv - gbar * gbar.transpose();
        }
    }
    info = 0.5 * (info + info.transpose());

    if (!joint) return standard_errors_from_information(info);

    // The complete variant has no per-observation sigma2 term: report (mu, Omega) only.
    FisherResult sub = standard_errors_from_information(info.topLeftCorner(p - 1, p - 1));
    FisherResult res;
    res.information = Eigen::MatrixXd::Constant(p, p, kNaN);
    res.information.topLeftCorner(p - 1, p - 1) = sub.information;
    res.std_errors = Eigen::VectorXd::Constant(p, kNaN);
    res.std_errors.head(p - 1) = sub.std_errors;
    res.pseudo_inverse = sub.pseudo_inverse;
    res.negative_variance = sub.negative_variance;
    res.sigma2_supported = false;
    return res;
}

}  // namespace ksaem
