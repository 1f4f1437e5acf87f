#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ksaem/design.hpp"
#include "ksaem/emulator.hpp"
#include "ksaem/likelihood.hpp"
#include "ksaem/models.hpp"
#include "ksaem/saem.hpp"

namespace ksaem {

/// One estimator column of a study: the variant and, for meta variants, the design size.
struct VariantSpec {
    VariantKind kind = VariantKind::Exact;
    int n_design = 0;  // ignored for Exact

    std::string label() const;  // "exact", "simple(n_D=100)", ...
    bool operator==(const VariantSpec&) const = default;
};

struct StudyConfig {
    PkScenario scenario;
    PopulationParams truth;
    PopulationParams init;     // SAEM starting value theta^(0)
    Box domain;                // emulator design box
    EmulatorOptions emulator;
    int design_candidates = 1000;  // maximin LHS re-draws for the prefitted designs
    int N = 36;
    int replications = 1;
    std::vector<VariantSpec> variants;
    SaemConfig saem;
    std::uint64_t seed = 1;
    int threads = 1;

    void validate() const;
};

/// Paper-scale defaults for the two PK scenarios (truth, domain, starting values,
/// observation grid). Variants and replication count are left to the caller.
StudyConfig first_order_study();
StudyConfig michaelis_menten_study();

struct ReplicationRecord {
    int replication = 0;
    std::size_t variant = 0;  // index into StudyConfig::variants
    bool ok = false;
    std::string error;
    Eigen::VectorXd estimate;    // flattened theta_hat
    Eigen::VectorXd std_errors;  // flattened, NaN where unavailable
    double seconds = 0.0;
};

struct ParameterSummary {
    std::string parameter;
    std::string variant;  // VariantKind name
    int n_design = 0;     // 0 for exact
    double bias = 0.0;    // %
    double rmse = 0.0;    // %
    double coverage = 0.0;  // %, NaN when no replication produced a standard error
};

struct VariantTiming {
    VariantSpec spec;
    int succeeded = 0;
    int failed = 0;
    double mean_seconds = 0.0;
};

struct StudyResult {
    std::vector<ParameterSummary> rows;  // variant-major, then parameter order
    std::vector<VariantTiming> timings;
    std::vector<ReplicationRecord> records;  // sorted by (replication, variant)
    long simulation_redraws = 0;
};

/// Simulates psi_i ~ N(mu, Omega), y_ij = f(t_j, psi_i) + sigma eps_ij. Draws for which
/// the solver fails are redrawn; the number of redraws is added to *redraws.
Dataset simulate_dataset(const PopulationParams& truth, const PkScenario& scenario, Eigen::Index N,
                         std::uint64_t seed, long* redraws = nullptr);
Dataset simulate_dataset(const PopulationParams& truth, const StructuralModel& model,
                         const std::vector<double>& times, Eigen::Index N, std::uint64_t seed,
                         long* redraws = nullptr);

using Estimator = std::function<FitReport(const ModelVariant&, const Dataset&, const SaemConfig&,
                                          const PopulationParams&)>;

/// Seed of the emulator design for a given design size (shared across replications).
std::uint64_t design_seed(std::uint64_t study_seed, int n_design);
/// Seed of the simulated dataset of one replication.
std::uint64_t replication_seed(std::uint64_t study_seed, int replication);

/// Runs every variant on `replications` simulated datasets. Emulator banks are fitted
/// once per design size before the replications start. Throws FitError if more than
/// 10% of the fits of some variant fail.
StudyResult run_study(const StudyConfig& config, const Estimator& estimator = run_saem);

/// Aggregates per-replication records (bias, RMSE, coverage in %).
StudyResult summarize_study(const StudyConfig& config, std::vector<ReplicationRecord> records);

enum class TableFormat { Csv, Markdown };

/// Long table with columns parameter, variant, n_D, bias, RMSE, coverage;
/// numbers printed with 3 decimals (round half to even), NA for missing values.
std::string emit_table(const StudyResult& result, TableFormat format);
/// Parameters as rows, one bias/RMSE/coverage column group per variant.
std::string emit_wide_table(const StudyResult& result);
/// Inverse of emit_table(Csv).
std::vector<ParameterSummary> parse_table_csv(const std::string& csv);

/// "%.3f" with ties to even on the exact binary value; "NA" for NaN.
std::string format_fixed3(double v);

nlohmann::json study_to_json(const StudyConfig& config, const StudyResult& result);

}  // namespace ksaem
