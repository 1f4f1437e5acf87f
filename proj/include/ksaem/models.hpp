#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ksaem/emulator.hpp"

namespace ksaem {

enum class PkKind { MichaelisMenten, FirstOrder };

std::string to_string(PkKind k);
PkKind pk_kind_from_string(const std::string& s);

/// One-compartment oral-dose pharmacokinetic setting.
///
/// MichaelisMenten: psi = (log V, log k_a, log V_m), with log k_m held fixed:
///   df/dt = -V_m f / (k_m + f) + k_a (D / V) exp(-k_a t)
/// FirstOrder: psi = (log k_e, log k_a, log C_l):
///   df/dt = D (k_a k_e / C_l) exp(-k_a t) - k_e f
/// Both start from f(0) = 0.
struct PkScenario {
    PkKind kind = PkKind::FirstOrder;
    double dose = 6.0;
    std::map<std::string, double> fixed;  // e.g. {"log_km", -2.5}
    std::vector<double> times;
    double step = 0.01;  // RK4 step (hours)

    void validate() const;
};

/// Observation grid 0.25 ... 12 h used by both PK studies.
std::vector<double> default_pk_times();

/// RK4 solution of the Michaelis-Menten absorption/elimination model at scenario.times.
Eigen::VectorXd solve_mm_pk(const PkScenario& scenario, const Eigen::VectorXd& psi, double step);

/// RK4 solution of the first-order absorption/elimination model at scenario.times.
Eigen::VectorXd solve_first_order_pk(const PkScenario& scenario, const Eigen::VectorXd& psi, double step);

/// Closed form of the first-order model (confluent form when k_a == k_e). Test oracle
/// and optional fast path; not used by the exact-model estimator.
Eigen::VectorXd first_order_analytic(const PkScenario& scenario, const Eigen::VectorXd& psi);

/// Dispatch on scenario.kind.
Eigen::VectorXd eval_f(const PkScenario& scenario, const Eigen::VectorXd& psi, double step);

/// Wraps a scenario as a StructuralModel evaluated on arbitrary time grids.
StructuralModel make_structural_model(const PkScenario& scenario);

}  // namespace ksaem
