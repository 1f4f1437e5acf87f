#include "ksaem/emulator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "ksaem/errors.hpp"

namespace ksaem {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Variances within -kClampTol * sigma2 of zero are rounding noise.
constexpr double kClampTol = 1e-8;
constexpr int kRefineIters = 5;
// Required reproduction of the design values by the mean, relative to 1 + |z|.
constexpr double kInterpolationTol = 5e-9;

Eigen::MatrixXd regressor_matrix(RegressorBasis basis, const Eigen::MatrixXd& X) {
    const Eigen::Index n = X.rows();
    const Eigen::Index L = regressor_count(basis, X.cols());
    Eigen::MatrixXd H(n, L);
    H.col(0).setOnes();
    if (basis == RegressorBasis::Linear) H.rightCols(X.cols()) = X;
    return H;
}

Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& X, double phi, double nugget) {
    const Eigen::Index n = X.rows();
    Eigen::MatrixXd K(n, n);
    for (Eigen::Index a = 0; a < n; ++a) {
        K(a, a) = 1.0 + nugget;
        for (Eigen::Index b = a + 1; b < n; ++b) {
            const double v = std::exp(-phi * (X.row(a) - X.row(b)).squaredNorm());
            K(a, b) = v;
            K(b, a) = v;
        }
    }
    return K;
}

void check_rank(const Eigen::MatrixXd& H) {
    if (H.rows() <= H.cols())
        throw FitError(fmt::format("emulator: need n_D > L (n_D = {}, L = {})", H.rows(), H.cols()));
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(H);
    if (qr.rank() < H.cols())
        throw FitError(fmt::format("emulator: regressor matrix H_D is rank deficient (rank {} < {})",
                                   qr.rank(), H.cols()));
}

// Weights w with K w = r, where K excludes the nugget. The nugget-regularised solve is
// refined by residual correction, keeping the iterate with the smallest residual.
// `Kn` is K + nugget I and `llt` its factorisation.
Eigen::VectorXd interpolation_weights(const Eigen::LLT<Eigen::MatrixXd>& llt, const Eigen::MatrixXd& Kn,
                                      double nugget, const Eigen::VectorXd& r, Eigen::VectorXd& residual) {
    auto apply_k = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return Kn * v - nugget * v; };
    Eigen::VectorXd w = llt.solve(r);
    Eigen::VectorXd res = r - apply_k(w);
    Eigen::VectorXd best_w = w;
    residual = res;
    double best = res.norm();
    for (int it = 0; it < kRefineIters && best > 0.0; ++it) {
        w += llt.solve(res);
        res = r - apply_k(w);
        if (!(res.norm() < best)) break;
        best = res.norm();
        best_w = w;
        residual = res;
    }
    return best_w;
}

// max_k |m(x_k) - z_k| / (1 + |z_k|) implied by an interpolation residual.
double interpolation_error(const Eigen::VectorXd& residual, const Eigen::VectorXd& z) {
    return (residual.array().abs() / (1.0 + z.array().abs())).maxCoeff();
}

// `interp_err`, when given, receives the design-point reproduction error of the mean at
// this phi (infinity if the likelihood is not finite).
ProfileResult profile_points(const Eigen::MatrixXd& X, const Eigen::MatrixXd& H, const Eigen::VectorXd& z,
                             double phi, double nugget, double* interp_err = nullptr) {
    ProfileResult res;
    const auto n = static_cast<double>(X.rows());
    if (interp_err) *interp_err = kInf;
    const Eigen::MatrixXd Kn = correlation_matrix(X, phi, nugget);
    Eigen::LLT<Eigen::MatrixXd> llt(Kn);
    if (llt.info() != Eigen::Success) {
        res.factorized = false;
        res.loglik = -kInf;
        res.beta = Eigen::VectorXd::Zero(H.cols());
        return res;
    }
    const auto L = llt.matrixL();
    const Eigen::MatrixXd Hs = L.solve(H);
    const Eigen::VectorXd zs = L.solve(z);
    res.beta = Hs.colPivHouseholderQr().solve(zs);
    const Eigen::VectorXd r = zs - Hs * res.beta;
    res.sigma2 = r.squaredNorm() / n;
    const double scale = z.squaredNorm() / n;
    if (!(res.sigma2 > 1e-26 * (1.0 + scale))) {
        res.sigma2 = 0.0;
        res.degenerate = true;
        res.loglik = kInf;
        if (interp_err) *interp_err = 0.0;
        return res;
    }
    double logdet = 0.0;
    for (Eigen::Index k = 0; k < X.rows(); ++k) logdet += 2.0 * std::log(llt.matrixLLT()(k, k));
    res.loglik = -0.5 * (n * std::log(2.0 * std::numbers::pi * res.sigma2) + logdet + n);
    if (!std::isfinite(res.loglik)) res.loglik = -kInf;
    if (interp_err && res.loglik > -kInf) {
        Eigen::VectorXd residual;
        interpolation_weights(llt, Kn, nugget, z - H * res.beta, residual);
        *interp_err = interpolation_error(residual, z);
    }
    return res;
}

void validate_inputs(const Design& design, const Eigen::VectorXd& z) {
    if (design.size() < 1) throw FitError("emulator: empty design");
    if (z.size() != design.size())
        throw FitError(fmt::format("emulator: {} evaluations for {} design points", z.size(), design.size()));
    if (!z.allFinite()) throw FitError("emulator: non-finite evaluations z_D");
    if (design.has_duplicates())
        throw FitError("emulator: design contains duplicate points (singular correlation matrix)");
}

}  // namespace

std::string to_string(KernelFamily) { return "gaussian"; }

std::string to_string(RegressorBasis b) { return b == RegressorBasis::Constant ? "constant" : "linear"; }

KernelFamily kernel_family_from_string(const std::string& s) {
    if (s == "gaussian") return KernelFamily::Gaussian;
    throw DomainError("unknown kernel family '" + s + "'");
}

RegressorBasis regressor_basis_from_string(const std::string& s) {
    if (s == "constant") return RegressorBasis::Constant;
    if (s == "linear") return RegressorBasis::Linear;
    throw DomainError("unknown regressor basis '" + s + "'");
}

double gaussian_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& x2, double phi) {
    return std::exp(-phi * (x - x2).squaredNorm());
}

Eigen::Index regressor_count(RegressorBasis basis, Eigen::Index d) {
    return basis == RegressorBasis::Constant ? 1 : d + 1;
}

Eigen::VectorXd regressors_at(RegressorBasis basis, const Eigen::VectorXd& x) {
    Eigen::VectorXd h(regressor_count(basis, x.size()));
    h[0] = 1.0;
    if (basis == RegressorBasis::Linear) h.tail(x.size()) = x;
    return h;
}

ProfileResult gp_profile_loglik(const Design& design, const Eigen::VectorXd& z, RegressorBasis basis,
                                double phi, double nugget) {
    validate_inputs(design, z);
    if (!(phi > 0.0)) throw DomainError("gp_profile_loglik: phi must be positive");
    const Eigen::MatrixXd H = regressor_matrix(basis, design.points);
    check_rank(H);
    return profile_points(design.points, H, z, phi, nugget);
}

Eigen::VectorXd Emulator::normalize(const Eigen::VectorXd& x) const {
    if (!normalize_) return x;
    return (x - shift_).cwiseProduct(inv_scale_);
}

Emulator Emulator::fit(const Design& design, const Eigen::VectorXd& z, const EmulatorOptions& opts) {
    validate_inputs(design, z);
    if (!(opts.phi_lower > 0.0) || !(opts.phi_upper >= opts.phi_lower))
        throw DomainError("emulator: phi bounds must satisfy 0 < lower <= upper");
    if (opts.nugget < 0.0) throw DomainError("emulator: nugget must be >= 0");

    Emulator shell;
    shell.design_ = design;
    shell.normalize_ = opts.normalize_inputs;
    if (shell.normalize_) {
        shell.shift_ = design.box.lower;
        shell.inv_scale_ = design.box.width().cwiseInverse();
    }
    Eigen::MatrixXd X(design.size(), design.dim());
    for (Eigen::Index i = 0; i < design.size(); ++i) X.row(i) = shell.normalize(design.point(i)).transpose();
    const Eigen::MatrixXd H = regressor_matrix(opts.regressors, X);
    check_rank(H);

    // phi values at which the nugget-regularised system cannot reproduce the design are
    // excluded: there the likelihood is governed by the nugget rather than by the data.
    // If no scanned phi qualifies, the unrestricted maximiser is used.
    bool restrict = true;
    auto eval = [&](double log_phi) {
        double err = 0.0;
        ProfileResult r = profile_points(X, H, z, std::exp(log_phi), opts.nugget, restrict ? &err : nullptr);
        if (restrict && !(err <= kInterpolationTol)) r.loglik = -kInf;
        return r;
    };

    double best_log_phi = std::log(opts.phi_lower);
    restrict = opts.phi_upper > opts.phi_lower;
    ProfileResult best = eval(best_log_phi);
    if (opts.phi_upper > opts.phi_lower) {
        const double lo = std::log(opts.phi_lower);
        const double hi = std::log(opts.phi_upper);
        const int m = std::max(3, opts.scan_points);
        std::vector<double> grid(static_cast<std::size_t>(m));
        std::vector<double> vals(static_cast<std::size_t>(m));
        int arg = -1;
        for (int pass = 0; pass < 2 && (arg < 0 || vals[arg] == -kInf); ++pass) {
            restrict = pass == 0;
            arg = -1;
            for (int s = 0; s < m; ++s) {
                grid[s] = lo + (hi - lo) * s / (m - 1);
                vals[s] = eval(grid[s]).loglik;
                if (!std::isnan(vals[s]) && (arg < 0 || vals[s] > vals[arg])) arg = s;
            }
        }
        if (arg < 0 || vals[arg] == -kInf)
            throw FitError(fmt::format("emulator: profiled likelihood non-finite over phi in [{}, {}]",
                                       opts.phi_lower, opts.phi_upper));
        best_log_phi = grid[arg];
        if (vals[arg] < kInf) {
            // Golden-section refinement inside the bracketing cell pair.
            double a = grid[std::max(0, arg - 1)];
            double b = grid[std::min(m - 1, arg + 1)];
            const double g = (std::sqrt(5.0) - 1.0) / 2.0;
            double c = b - g * (b - a), d = a + g * (b - a);
            double fc = eval(c).loglik, fd = eval(d).loglik;
            for (int it = 0; it < opts.golden_iters; ++it) {
                if (fc >= fd) {
                    b = d; d = c; fd = fc;
                    c = b - g * (b - a); fc = eval(c).loglik;
                } else {
                    a = c; c = d; fc = fd;
                    d = a + g * (b - a); fd = eval(d).loglik;
                }
            }
            const double cand = fc >= fd ? c : d;
            if (std::max(fc, fd) > vals[arg]) best_log_phi = cand;
        }
        best = eval(best_log_phi);
    }
    if (best.loglik == -kInf)
        throw FitError("emulator: correlation matrix not positive definite at selected phi");

    EmulatorParams params;
    params.beta = best.beta;
    params.sigma2 = best.sigma2;
    params.phi = std::exp(best_log_phi);
    if (opts.phi_upper == opts.phi_lower) params.phi = opts.phi_lower;
    params.nugget = opts.nugget;
    Emulator em = from_params(design, z, opts.regressors, params, opts.normalize_inputs);
    em.loglik_ = best.loglik;
    return em;
}

Emulator Emulator::from_params(const Design& design, const Eigen::VectorXd& z, RegressorBasis basis,
                               const EmulatorParams& params, bool normalize_inputs) {
    validate_inputs(design, z);
    if (!(params.phi > 0.0)) throw DomainError("emulator: phi must be positive");
    if (params.sigma2 < 0.0) throw DomainError("emulator: sigma2 must be >= 0");
    if (params.beta.size() != regressor_count(basis, design.dim()))
        throw DomainError("emulator: beta has wrong length for the regressor basis");

    Emulator em;
    em.design_ = design;
    em.z_ = z;
    em.basis_ = basis;
    em.params_ = params;
    em.normalize_ = normalize_inputs;
    if (normalize_inputs) {
        em.shift_ = design.box.lower;
        em.inv_scale_ = design.box.width().cwiseInverse();
    }
    em.unit_points_.resize(design.size(), design.dim());
    for (Eigen::Index i = 0; i < design.size(); ++i)
        em.unit_points_.row(i) = em.normalize(design.point(i)).transpose();

    const Eigen::MatrixXd Kn = correlation_matrix(em.unit_points_, params.phi, params.nugget);
    Eigen::LLT<Eigen::MatrixXd> llt(Kn);
    if (llt.info() != Eigen::Success)
        throw FitError("emulator: Sigma_DD + nugget I is not positive definite; increase the nugget");
    em.chol_ = llt.matrixL();
    const Eigen::MatrixXd H = regressor_matrix(basis, em.unit_points_);
    // The nugget only regularises the factorisation: the weights are refined towards
    // Sigma_DD^{-1} r so that the mean keeps interpolating the design.
    Eigen::VectorXd residual;
    em.weights_ = interpolation_weights(llt, Kn, params.nugget, z - H * params.beta, residual);
    em.loglik_ = profile_points(em.unit_points_, H, z, params.phi, params.nugget).loglik;
    return em;
}

Emulator::Projection Emulator::project(const Eigen::VectorXd& x, bool with_solve) const {
    Projection p;
    p.u = normalize(x);
    const Eigen::Index n = unit_points_.rows();
    p.k.resize(n);
    for (Eigen::Index j = 0; j < n; ++j)
        p.k[j] = std::exp(-params_.phi * (unit_points_.row(j).transpose() - p.u).squaredNorm());
    p.mean = regressors_at(basis_, p.u).dot(params_.beta) + p.k.dot(weights_);
    if (with_solve) p.v = chol_.triangularView<Eigen::Lower>().solve(p.k);
    return p;
}

double Emulator::clamp_variance(double v) const {
    if (v >= 0.0) return v;
    if (v >= -kClampTol * params_.sigma2) return 0.0;
    throw NumericalHealthError(fmt::format("emulator: conditional variance {} is negative beyond tolerance", v));
}

double Emulator::variance(const Projection& p) const {
    return clamp_variance(params_.sigma2 * (1.0 - p.v.squaredNorm()));
}

double Emulator::covariance(const Projection& a, const Projection& b) const {
    const double c = params_.sigma2 * (std::exp(-params_.phi * (a.u - b.u).squaredNorm()) - a.v.dot(b.v));
    if (a.u == b.u) return clamp_variance(c);
    return c;
}

double Emulator::predict_mean(const Eigen::VectorXd& x) const { return project(x, false).mean; }

double Emulator::predict_cov(const Eigen::VectorXd& x, const Eigen::VectorXd& x2) const {
    return covariance(project(x), project(x2));
}

double Emulator::predict_var(const Eigen::VectorXd& x) const { return variance(project(x)); }

double Emulator::pointwise_bound(const Eigen::VectorXd& x) const {
    if (!(params_.sigma2 > 0.0)) throw DomainError("pointwise_bound: degenerate fit (sigma2 = 0)");
    return std::max(0.0, predict_var(x) / params_.sigma2);
}

Eigen::VectorXd Emulator::loo_residuals() const {
    const Eigen::Index n = chol_.rows();
    const Eigen::MatrixXd Linv = chol_.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::VectorXd inv_diag = Linv.colwise().squaredNorm().transpose();
    const Eigen::VectorXd r = z_ - regressor_matrix(basis_, unit_points_) * params_.beta;
    const Eigen::VectorXd w = Linv.transpose() * (Linv * r);
    return w.cwiseQuotient(inv_diag);
}

nlohmann::json Emulator::to_json() const {
    return {{"kind", "kriging_emulator"},
            {"kernel", to_string(kernel())},
            {"regressors", to_string(basis_)},
            {"normalize_inputs", normalize_},
            {"design", design_to_json(design_)},
            {"z", std::vector<double>(z_.data(), z_.data() + z_.size())},
            {"params",
             {{"beta", std::vector<double>(params_.beta.data(), params_.beta.data() + params_.beta.size())},
              {"sigma2", params_.sigma2},
              {"phi", params_.phi},
              {"nugget", params_.nugget}}}};
}

Emulator Emulator::from_json(const nlohmann::json& j) {
    kernel_family_from_string(j.at("kernel").get<std::string>());
    const auto basis = regressor_basis_from_string(j.at("regressors").get<std::string>());
    const Design design = design_from_json(j.at("design"));
    auto zv = j.at("z").get<std::vector<double>>();
    const auto& p = j.at("params");
    auto beta = p.at("beta").get<std::vector<double>>();
    EmulatorParams params;
    params.beta = Eigen::Map<Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
    params.sigma2 = p.at("sigma2").get<double>();
    params.phi = p.at("phi").get<double>();
    params.nugget = p.at("nugget").get<double>();
    return from_params(design, Eigen::Map<Eigen::VectorXd>(zv.data(), static_cast<Eigen::Index>(zv.size())),
                       basis, params, j.value("normalize_inputs", false));
}

// ---------------------------------------------------------------------------

EmulatorBank::EmulatorBank(std::vector<double> times, std::vector<Emulator> emulators)
    : times_(std::move(times)), emulators_(std::move(emulators)) {
    if (times_.empty() || times_.size() != emulators_.size())
        throw DomainError("emulator bank: need one emulator per time");
    for (std::size_t j = 1; j < times_.size(); ++j)
        if (!(times_[j] > times_[j - 1])) throw DomainError("emulator bank: times must be strictly increasing");
}

EmulatorBank EmulatorBank::fit(const StructuralModel& model, const std::vector<double>& times,
                               const Design& design, const EmulatorOptions& opts, long* solver_calls) {
    const Eigen::Index n = design.size();
    Eigen::MatrixXd Z(n, static_cast<Eigen::Index>(times.size()));
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::VectorXd f = model(times, design.point(i));
        if (f.size() != Z.cols()) throw DomainError("emulator bank: model returned wrong number of outputs");
        Z.row(i) = f.transpose();
    }
    if (solver_calls) *solver_calls += n;
    std::vector<Emulator> ems;
    ems.reserve(times.size());
    for (std::size_t j = 0; j < times.size(); ++j) {
        try {
            ems.push_back(Emulator::fit(design, Z.col(static_cast<Eigen::Index>(j)), opts));
        } catch (const FitError& e) {
            throw FitError(fmt::format("time {}: {}", times[j], e.what()));
        }
    }
    return EmulatorBank(times, std::move(ems));
}

std::size_t EmulatorBank::time_index(double t) const {
    auto it = std::lower_bound(times_.begin(), times_.end(), t - 1e-9 * (1.0 + std::abs(t)));
    if (it == times_.end() || std::abs(*it - t) > 1e-9 * (1.0 + std::abs(t)))
        throw DomainError(fmt::format("emulator bank has no emulator for time {}", t));
    return static_cast<std::size_t>(std::distance(times_.begin(), it));
}

const Emulator& EmulatorBank::at_time(double t) const { return emulators_[time_index(t)]; }

Eigen::VectorXd EmulatorBank::mean(const std::vector<double>& times, const Eigen::VectorXd& psi) const {
    Eigen::VectorXd m(static_cast<Eigen::Index>(times.size()));
    for (std::size_t j = 0; j < times.size(); ++j) m[static_cast<Eigen::Index>(j)] = at_time(times[j]).predict_mean(psi);
    return m;
}

Eigen::VectorXd EmulatorBank::variance(const std::vector<double>& times, const Eigen::VectorXd& psi) const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(times.size()));
    for (std::size_t j = 0; j < times.size(); ++j) v[static_cast<Eigen::Index>(j)] = at_time(times[j]).predict_var(psi);
    return v;
}

void EmulatorBank::mean_and_variance(const std::vector<double>& times, const Eigen::VectorXd& psi,
                                     Eigen::VectorXd& mean, Eigen::VectorXd& var) const {
    const auto n = static_cast<Eigen::Index>(times.size());
    mean.resize(n);
    var.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const Emulator& em = at_time(times[static_cast<std::size_t>(j)]);
        const auto p = em.project(psi);
        mean[j] = p.mean;
        var[j] = em.variance(p);
    }
}

nlohmann::json EmulatorBank::to_json() const {
    nlohmann::json ems = nlohmann::json::array();
    for (const auto& e : emulators_) ems.push_back(e.to_json());
    return {{"kind", "emulator_bank"}, {"times", times_}, {"emulators", ems}};
}

EmulatorBank EmulatorBank::from_json(const nlohmann::json& j) {
    std::vector<Emulator> ems;
    for (const auto& e : j.at("emulators")) ems.push_back(Emulator::from_json(e));
    return EmulatorBank(j.at("times").get<std::vector<double>>(), std::move(ems));
}

std::string prediction_audit_csv(const Emulator& em, const Eigen::MatrixXd& points) {
    std::string out;
    for (Eigen::Index k = 0; k < points.cols(); ++k) out += fmt::format("x{},", k + 1);
    out += "mean,var,bound\n";
    for (Eigen::Index r = 0; r < points.rows(); ++r) {
        const Eigen::VectorXd x = points.row(r).transpose();
        for (Eigen::Index k = 0; k < x.size(); ++k) out += fmt::format("{:.17g},", x[k]);
        const double var = em.predict_var(x);
        out += fmt::format("{:.17g},{:.17g},", em.predict_mean(x), var);
        out += em.degenerate() ? std::string("NA") : fmt::format("{:.17g}", var / em.params().sigma2);
        out += "\n";
    }
    return out;
}

}  // namespace ksaem
