#include "ksaem/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "ksaem/errors.hpp"

namespace ksaem {

namespace {

constexpr double kVarFloor = 1e-300;
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

double log_sum_exp(const std::vector<double>& v) {
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace

// ---------------------------------------------------------------------------

void PopulationParams::validate() const {
    const Eigen::Index d = mu.size();
    if (d == 0) throw DomainError("theta: empty mu");
    if (omega.rows() != d || omega.cols() != d) throw DomainError("theta: Omega must be d x d");
    if (!(sigma_eps2 > 0.0) || !std::isfinite(sigma_eps2)) throw DomainError("theta: sigma_eps2 must be > 0");
    if (!mu.allFinite() || !omega.allFinite()) throw DomainError("theta: non-finite entries");
    if ((omega - omega.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + omega.cwiseAbs().maxCoeff()))
        throw DomainError("theta: Omega must be symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(omega);
    if (llt.info() != Eigen::Success) throw DomainError("theta: Omega must be positive definite");
}

bool PopulationParams::all_finite() const {
    return mu.allFinite() && omega.allFinite() && std::isfinite(sigma_eps2);
}

Eigen::Index Dataset::n_tot() const {
    Eigen::Index n = 0;
    for (const auto& ind : individuals) n += ind.y.size();
    return n;
}

void Dataset::validate() const {
    for (std::size_t i = 0; i < individuals.size(); ++i) {
        const auto& ind = individuals[i];
        if (ind.y.size() < 1) throw DomainError(fmt::format("dataset: individual {} has no observations", i));
        if (static_cast<std::size_t>(ind.y.size()) != ind.times.size())
            throw DomainError(fmt::format("dataset: individual {} has mismatched times/y", i));
        for (std::size_t j = 1; j < ind.times.size(); ++j)
            if (!(ind.times[j] > ind.times[j - 1]))
                throw DomainError(fmt::format("dataset: individual {} times not strictly increasing", i));
        if (!ind.y.allFinite()) throw DomainError(fmt::format("dataset: individual {} has non-finite y", i));
    }
}

std::string to_string(VariantKind k) {
    switch (k) {
        case VariantKind::Exact: return "exact";
        case VariantKind::Simple: return "simple";
        case VariantKind::Intermediate: return "intermediate";
        case VariantKind::Complete: return "complete";
    }
    return "unknown";
}

VariantKind variant_kind_from_string(const std::string& s) {
    if (s == "exact") return VariantKind::Exact;
    if (s == "simple") return VariantKind::Simple;
    if (s == "intermediate") return VariantKind::Intermediate;
    if (s == "complete") return VariantKind::Complete;
    throw DomainError("unknown model variant '" + s + "'");
}

ModelVariant ModelVariant::exact(StructuralModel f) {
    ModelVariant v;
    v.kind = VariantKind::Exact;
    v.model = std::move(f);
    return v;
}

namespace {
ModelVariant meta(VariantKind k, std::shared_ptr<const EmulatorBank> bank) {
    if (!bank) throw DomainError("meta-model variant requires an emulator bank");
    ModelVariant v;
    v.kind = k;
    v.bank = std::move(bank);
    return v;
}
}  // namespace

ModelVariant ModelVariant::simple(std::shared_ptr<const EmulatorBank> bank) {
    return meta(VariantKind::Simple, std::move(bank));
}
ModelVariant ModelVariant::intermediate(std::shared_ptr<const EmulatorBank> bank) {
    return meta(VariantKind::Intermediate, std::move(bank));
}
ModelVariant ModelVariant::complete(std::shared_ptr<const EmulatorBank> bank) {
    return meta(VariantKind::Complete, std::move(bank));
}

void ModelVariant::check_compatible(const Dataset& data) const {
    if (kind == VariantKind::Exact) {
        if (!model) throw DomainError("exact variant requires a structural model");
        return;
    }
    if (!bank) throw DomainError("meta-model variant requires an emulator bank");
    for (const auto& ind : data.individuals)
        for (double t : ind.times) bank->time_index(t);
}

// ---------------------------------------------------------------------------

GaussianPrior::GaussianPrior(const PopulationParams& theta) : mu_(theta.mu) {
    Eigen::LLT<Eigen::MatrixXd> llt(theta.omega);
    if (llt.info() != Eigen::Success) throw DomainError("prior: Omega is not positive definite");
    chol_ = llt.matrixL();
    double logdet = 0.0;
    for (Eigen::Index k = 0; k < chol_.rows(); ++k) logdet += 2.0 * std::log(chol_(k, k));
    log_norm_ = -0.5 * (static_cast<double>(mu_.size()) * kLog2Pi + logdet);
}

double GaussianPrior::logpdf(const Eigen::VectorXd& psi) const {
    const Eigen::VectorXd z = chol_.triangularView<Eigen::Lower>().solve(psi - mu_);
    return log_norm_ - 0.5 * z.squaredNorm();
}

double diagonal_gaussian_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean, const Eigen::VectorXd& var) {
    double ll = 0.0;
    for (Eigen::Index j = 0; j < y.size(); ++j) {
        const double v = std::max(var[j], kVarFloor);
        const double r = y[j] - mean[j];
        ll += -0.5 * (kLog2Pi + std::log(v) + r * r / v);
    }
    return ll;
}

double cond_loglik_exact(const Eigen::VectorXd& yi, const std::vector<double>& ti, const Eigen::VectorXd& psi_i,
                         const PopulationParams& theta, const StructuralModel& f) {
    const Eigen::VectorXd m = f(ti, psi_i);
    return diagonal_gaussian_logpdf(yi, m, Eigen::VectorXd::Constant(yi.size(), theta.sigma_eps2));
}

double cond_loglik_simple(const Eigen::VectorXd& yi, const std::vector<double>& ti, const Eigen::VectorXd& psi_i,
                          const PopulationParams& theta, const EmulatorBank& bank) {
    return diagonal_gaussian_logpdf(yi, bank.mean(ti, psi_i), Eigen::VectorXd::Constant(yi.size(), theta.sigma_eps2));
}

double cond_loglik_intermediate(const Eigen::VectorXd& yi, const std::vector<double>& ti,
                                const Eigen::VectorXd& psi_i, const PopulationParams& theta,
                                const EmulatorBank& bank) {
    Eigen::VectorXd m, lambda;
    bank.mean_and_variance(ti, psi_i, m, lambda);
    return diagonal_gaussian_logpdf(yi, m, lambda.array() + theta.sigma_eps2);
}

double cond_loglik_individual(const ModelVariant& variant, const Individual& ind, const Eigen::VectorXd& psi_i,
                              const PopulationParams& theta) {
    switch (variant.kind) {
        case VariantKind::Exact: return cond_loglik_exact(ind.y, ind.times, psi_i, theta, variant.model);
        case VariantKind::Simple: return cond_loglik_simple(ind.y, ind.times, psi_i, theta, *variant.bank);
        case VariantKind::Intermediate:
            return cond_loglik_intermediate(ind.y, ind.times, psi_i, theta, *variant.bank);
        case VariantKind::Complete: break;
    }
    throw UnsupportedError("complete variant has no per-individual conditional density");
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd assemble_complete_covariance(const Dataset& data, const Eigen::MatrixXd& psi,
                                             const EmulatorBank& bank) {
    const Eigen::Index n = data.n_tot();
    struct Obs {
        std::size_t time;
        Emulator::Projection p;
    };
    std::vector<Obs> obs;
    obs.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < data.N(); ++i) {
        const auto& ind = data.individuals[static_cast<std::size_t>(i)];
        for (double t : ind.times) {
            const std::size_t k = bank.time_index(t);
            obs.push_back({k, bank.emulators()[k].project(psi.row(i).transpose())});
        }
    }
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index a = 0; a < n; ++a) {
        for (Eigen::Index b = a; b < n; ++b) {
            const auto& oa = obs[static_cast<std::size_t>(a)];
            const auto& ob = obs[static_cast<std::size_t>(b)];
            if (oa.time != ob.time) continue;
            const double c = bank.emulators()[oa.time].covariance(oa.p, ob.p);
            C(a, b) = c;
            C(b, a) = c;
        }
    }
    return C;
}

double cond_loglik_complete(const Dataset& data, const Eigen::MatrixXd& psi, const PopulationParams& theta,
                            const EmulatorBank& bank) {
    CompleteModel model(data, std::shared_ptr<const EmulatorBank>(&bank, [](const EmulatorBank*) {}));
    model.reset(psi);
    const double ll = model.loglik(theta.sigma_eps2);
    if (!std::isfinite(ll))
        throw NumericalHealthError("complete meta-model: joint covariance could not be factorised");
    return ll;
}

CompleteModel::CompleteModel(const Dataset& data, std::shared_ptr<const EmulatorBank> bank)
    : bank_(std::move(bank)) {
    if (!bank_) throw DomainError("complete model requires an emulator bank");
    const std::size_t n_times = bank_->times().size();
    std::vector<std::size_t> block_of_time(n_times, std::numeric_limits<std::size_t>::max());
    where_.resize(data.individuals.size());
    Eigen::Index flat = 0;
    for (std::size_t i = 0; i < data.individuals.size(); ++i) {
        const auto& ind = data.individuals[i];
        times_.push_back(ind.times);
        for (std::size_t j = 0; j < ind.times.size(); ++j, ++flat) {
            const std::size_t k = bank_->time_index(ind.times[j]);
            if (block_of_time[k] == std::numeric_limits<std::size_t>::max()) {
                block_of_time[k] = blocks_.size();
                blocks_.push_back({});
                blocks_.back().time_index = k;
            }
            Block& b = blocks_[block_of_time[k]];
            where_[i].emplace_back(block_of_time[k], static_cast<Eigen::Index>(b.individual.size()));
            b.individual.push_back(static_cast<Eigen::Index>(i));
            b.obs.push_back(static_cast<Eigen::Index>(j));
            b.flat.push_back(flat);
        }
    }
    n_tot_ = flat;
    for (auto& b : blocks_) {
        const auto m = static_cast<Eigen::Index>(b.individual.size());
        b.y.resize(m);
        b.mean = Eigen::VectorXd::Zero(m);
        b.cov = Eigen::MatrixXd::Zero(m, m);
        for (Eigen::Index r = 0; r < m; ++r)
            b.y[r] = data.individuals[static_cast<std::size_t>(b.individual[static_cast<std::size_t>(r)])]
                         .y[b.obs[static_cast<std::size_t>(r)]];
    }
}

std::vector<Emulator::Projection> CompleteModel::project_individual(Eigen::Index i,
                                                                    const Eigen::VectorXd& psi_i) const {
    const auto& w = where_[static_cast<std::size_t>(i)];
    std::vector<Emulator::Projection> out;
    out.reserve(w.size());
    for (const auto& [blk, row] : w)
        out.push_back(bank_->emulators()[blocks_[blk].time_index].project(psi_i));
    return out;
}

void CompleteModel::reset(const Eigen::MatrixXd& psi) {
    if (psi.rows() != static_cast<Eigen::Index>(where_.size()))
        throw DomainError("complete model: psi must have one row per individual");
    psi_ = psi;
    proj_.assign(where_.size(), {});
    for (std::size_t i = 0; i < where_.size(); ++i)
        proj_[i] = project_individual(static_cast<Eigen::Index>(i), psi.row(static_cast<Eigen::Index>(i)).transpose());
    for (auto& b : blocks_) {
        const Emulator& em = bank_->emulators()[b.time_index];
        const auto m = static_cast<Eigen::Index>(b.individual.size());
        for (Eigen::Index r = 0; r < m; ++r) {
            const auto& pr = proj_[static_cast<std::size_t>(b.individual[static_cast<std::size_t>(r)])]
                                  [static_cast<std::size_t>(b.obs[static_cast<std::size_t>(r)])];
            b.mean[r] = pr.mean;
            for (Eigen::Index c = r; c < m; ++c) {
                const auto& pc = proj_[static_cast<std::size_t>(b.individual[static_cast<std::size_t>(c)])]
                                      [static_cast<std::size_t>(b.obs[static_cast<std::size_t>(c)])];
                const double v = em.covariance(pr, pc);
                b.cov(r, c) = v;
                b.cov(c, r) = v;
            }
        }
    }
}

double CompleteModel::block_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                   double sigma2) const {
    Eigen::MatrixXd A = cov;
    A.diagonal().array() += sigma2;
    Eigen::LLT<Eigen::MatrixXd> llt;
    // Jitter escalation: at most three tries, each adding 10x more to the diagonal.
    double jitter = 0.0;
    for (int attempt = 0; attempt < 4; ++attempt) {
        llt.compute(A);
        if (llt.info() == Eigen::Success) break;
        jitter = jitter == 0.0 ? 1e-10 * sigma2 : 10.0 * jitter;
        A.diagonal().array() += jitter;
    }
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const Eigen::VectorXd z = llt.matrixL().solve(y - mean);
    double logdet = 0.0;
    for (Eigen::Index k = 0; k < A.rows(); ++k) logdet += 2.0 * std::log(llt.matrixLLT()(k, k));
    return -0.5 * (static_cast<double>(y.size()) * kLog2Pi + logdet + z.squaredNorm());
}

double CompleteModel::loglik(double sigma2) const {
    double ll = 0.0;
    for (const auto& b : blocks_) ll += block_logpdf(b.y, b.mean, b.cov, sigma2);
    return ll;
}

double CompleteModel::delta_loglik(Eigen::Index i, const Eigen::VectorXd& candidate, double sigma2) const {
    const auto cand = project_individual(i, candidate);
    const auto& w = where_[static_cast<std::size_t>(i)];
    double delta = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
        const auto [blk, row] = w[j];
        const Block& b = blocks_[blk];
        const Emulator& em = bank_->emulators()[b.time_index];
        Eigen::VectorXd mean = b.mean;
        Eigen::MatrixXd cov = b.cov;
        mean[row] = cand[j].mean;
        for (Eigen::Index c = 0; c < cov.rows(); ++c) {
            const auto owner = b.individual[static_cast<std::size_t>(c)];
            const auto& pc = owner == i ? cand[static_cast<std::size_t>(b.obs[static_cast<std::size_t>(c)])]
                                        : proj_[static_cast<std::size_t>(owner)]
                                               [static_cast<std::size_t>(b.obs[static_cast<std::size_t>(c)])];
            const double v = em.covariance(cand[j], pc);
            cov(row, c) = v;
            cov(c, row) = v;
        }
        const double after = block_logpdf(b.y, mean, cov, sigma2);
        if (!std::isfinite(after)) return -std::numeric_limits<double>::infinity();
        delta += after - block_logpdf(b.y, b.mean, b.cov, sigma2);
    }
    return delta;
}

void CompleteModel::accept(Eigen::Index i, const Eigen::VectorXd& candidate) {
    const auto ui = static_cast<std::size_t>(i);
    proj_[ui] = project_individual(i, candidate);
    psi_.row(i) = candidate.transpose();
    const auto& w = where_[ui];
    for (std::size_t j = 0; j < w.size(); ++j) {
        const auto [blk, row] = w[j];
        Block& b = blocks_[blk];
        const Emulator& em = bank_->emulators()[b.time_index];
        b.mean[row] = proj_[ui][j].mean;
        for (Eigen::Index c = 0; c < b.cov.rows(); ++c) {
            const auto owner = static_cast<std::size_t>(b.individual[static_cast<std::size_t>(c)]);
            const double v = em.covariance(proj_[ui][j], proj_[owner][static_cast<std::size_t>(b.obs[static_cast<std::size_t>(c)])]);
            b.cov(row, c) = v;
            b.cov(c, row) = v;
        }
    }
}

Eigen::VectorXd CompleteModel::stacked_mean() const {
    Eigen::VectorXd m(n_tot_);
    for (const auto& b : blocks_)
        for (std::size_t r = 0; r < b.flat.size(); ++r) m[b.flat[r]] = b.mean[static_cast<Eigen::Index>(r)];
    return m;
}

// ---------------------------------------------------------------------------

void gauss_hermite(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
    if (n < 1) throw DomainError("gauss_hermite: need n >= 1");
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        J(k, k - 1) = std::sqrt(k / 2.0);
        J(k - 1, k) = J(k, k - 1);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    nodes = es.eigenvalues();
    weights = std::sqrt(std::numbers::pi) * es.eigenvectors().row(0).transpose().array().square();
}

double marginal_loglik_quadrature(const Dataset& data, const PopulationParams& theta,
                                  const ModelVariant& variant, int nodes) {
    const Eigen::Index d = theta.dim();
    if (d > 2) throw UnsupportedError("marginal_loglik_quadrature: only d <= 2 is supported");
    if (variant.kind == VariantKind::Complete)
        throw UnsupportedError("marginal_loglik_quadrature: complete variant is not separable");
    if (nodes < 5) throw DomainError("marginal_loglik_quadrature: need at least 5 nodes");
    theta.validate();
    variant.check_compatible(data);

    Eigen::VectorXd x, w;
    gauss_hermite(nodes, x, w);
    const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(theta.omega).matrixL();
    // Tensor grid: psi = mu + sqrt(2) L x, weight prod(w) / pi^{d/2}.
    std::vector<Eigen::VectorXd> psi_nodes;
    std::vector<double> log_w;
    const double norm = std::pow(std::numbers::pi, 0.5 * static_cast<double>(d));
    if (d == 1) {
        for (int a = 0; a < nodes; ++a) {
            Eigen::VectorXd u(1);
            u << x[a];
            psi_nodes.push_back(theta.mu + std::sqrt(2.0) * L * u);
            log_w.push_back(std::log(w[a] / norm));
        }
    } else {
        for (int a = 0; a < nodes; ++a)
            for (int b = 0; b < nodes; ++b) {
                Eigen::VectorXd u(2);
                u << x[a], x[b];
                psi_nodes.push_back(theta.mu + std::sqrt(2.0) * L * u);
                log_w.push_back(std::log(w[a] * w[b] / norm));
            }
    }
    double total = 0.0;
    std::vector<double> terms(psi_nodes.size());
    for (const auto& ind : data.individuals) {
        for (std::size_t q = 0; q < psi_nodes.size(); ++q)
            terms[q] = log_w[q] + cond_loglik_individual(variant, ind, psi_nodes[q], theta);
        total += log_sum_exp(terms);
    }
    return total;
}

}  // namespace ksaem
