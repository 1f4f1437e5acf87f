#include "ksaem/models.hpp"

#include <cmath>

#include <fmt/format.h>

#include "ksaem/errors.hpp"

namespace ksaem {

std::string to_string(PkKind k) { return k == PkKind::MichaelisMenten ? "michaelis_menten" : "first_order"; }

PkKind pk_kind_from_string(const std::string& s) {
    if (s == "michaelis_menten") return PkKind::MichaelisMenten;
    if (s == "first_order") return PkKind::FirstOrder;
    throw DomainError("unknown scenario kind '" + s + "'");
}

std::vector<double> default_pk_times() { return {0.25, 0.5, 1.0, 2.0, 3.5, 5.0, 7.0, 9.0, 12.0}; }

void PkScenario::validate() const {
    if (!(dose >= 0.0) || !std::isfinite(dose)) throw DomainError("scenario: dose must be finite and >= 0");
    if (!(step > 0.0)) throw DomainError("scenario: step must be positive");
    for (std::size_t j = 0; j < times.size(); ++j) {
        if (!(times[j] > 0.0) || !std::isfinite(times[j])) throw DomainError("scenario: times must be positive");
        if (j > 0 && !(times[j] > times[j - 1])) throw DomainError("scenario: times must be strictly increasing");
    }
}

namespace {

// Fixed-step RK4 from t = 0, f = 0, sampled at `times`. Each gap between output
// times is split into ceil(gap / step) equal sub-steps.
template <class Rhs>
Eigen::VectorXd integrate(const std::vector<double>& times, double step, Rhs rhs) {
    if (!(step > 0.0)) throw DomainError("solver: step must be positive");
    Eigen::VectorXd out(static_cast<Eigen::Index>(times.size()));
    double t = 0.0, f = 0.0;
    for (std::size_t j = 0; j < times.size(); ++j) {
        const double gap = times[j] - t;
        if (gap < 0.0) throw DomainError("solver: times must be increasing and positive");
        const long n = gap > 0.0 ? std::max(1L, static_cast<long>(std::ceil(gap / step - 1e-9))) : 0L;
        const double h = n > 0 ? gap / static_cast<double>(n) : 0.0;
        for (long s = 0; s < n; ++s) {
            const double k1 = rhs(t, f);
            const double k2 = rhs(t + 0.5 * h, f + 0.5 * h * k1);
            const double k3 = rhs(t + 0.5 * h, f + 0.5 * h * k2);
            const double k4 = rhs(t + h, f + h * k3);
            f += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
            if (!std::isfinite(f)) throw SolverError(fmt::format("solver: non-finite state at t = {}", t), t);
        }
        t = times[j];
        if (f < 0.0) {
            if (f < -1e-12) throw SolverError(fmt::format("solver: negative concentration {} at t = {}", f, t), t);
            out[static_cast<Eigen::Index>(j)] = 0.0;
        } else {
            out[static_cast<Eigen::Index>(j)] = f;
        }
    }
    return out;
}

void check_psi(const Eigen::VectorXd& psi) {
    if (psi.size() != 3) throw DomainError(fmt::format("PK models need d = 3 parameters (got {})", psi.size()));
    if (!psi.allFinite()) throw DomainError("PK models: non-finite parameters");
}

}  // namespace

Eigen::VectorXd solve_mm_pk(const PkScenario& scenario, const Eigen::VectorXd& psi, double step) {
    check_psi(psi);
    const double V = std::exp(psi[0]), ka = std::exp(psi[1]), Vm = std::exp(psi[2]);
    auto it = scenario.fixed.find("log_km");
    const double km = std::exp(it == scenario.fixed.end() ? -2.5 : it->second);
    const double D = scenario.dose;
    return integrate(scenario.times, step, [=](double t, double f) {
        return -Vm * f / (km + f) + ka * (D / V) * std::exp(-ka * t);
    });
}

Eigen::VectorXd solve_first_order_pk(const PkScenario& scenario, const Eigen::VectorXd& psi, double step) {
    check_psi(psi);
    const double ke = std::exp(psi[0]), ka = std::exp(psi[1]), Cl = std::exp(psi[2]);
    const double amp = scenario.dose * ka * ke / Cl;
    return integrate(scenario.times, step, [=](double t, double f) { return amp * std::exp(-ka * t) - ke * f; });
}

Eigen::VectorXd first_order_analytic(const PkScenario& scenario, const Eigen::VectorXd& psi) {
    check_psi(psi);
    const double ke = std::exp(psi[0]), ka = std::exp(psi[1]), Cl = std::exp(psi[2]);
    const double D = scenario.dose;
    Eigen::VectorXd out(static_cast<Eigen::Index>(scenario.times.size()));
    for (std::size_t j = 0; j < scenario.times.size(); ++j) {
        const double t = scenario.times[j];
        double v;
        if (ka == ke) {
            v = D * ke * ke / Cl * t * std::exp(-ke * t);
        } else {
            // (e^{-ke t} - e^{-ka t}) / (ka - ke), written with expm1 for nearby rates.
            const double diff = -std::exp(-ke * t) * std::expm1(-(ka - ke) * t) / (ka - ke);
            v = D * ka * ke / Cl * diff;
        }
        out[static_cast<Eigen::Index>(j)] = v;
    }
    return out;
}

Eigen::VectorXd eval_f(const PkScenario& scenario, const Eigen::VectorXd& psi, double step) {
    switch (scenario.kind) {
        case PkKind::MichaelisMenten: return solve_mm_pk(scenario, psi, step);
        case PkKind::FirstOrder: return solve_first_order_pk(scenario, psi, step);
    }
    throw DomainError("eval_f: unknown scenario kind");
}

StructuralModel make_structural_model(const PkScenario& scenario) {
    return [scenario](const std::vector<double>& times, const Eigen::VectorXd& psi) {
        PkScenario s = scenario;
        s.times = times;
        return eval_f(s, psi, s.step);
    };
}

}  // namespace ksaem
