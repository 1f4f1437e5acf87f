#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "ksaem/bench.hpp"

namespace ksaem {

inline constexpr int kSchemaVersion = 1;

/// Everything a CLI command may need, resolved from one JSON config file.
///
/// Top-level keys: schema_version (required, = 1), preset, seed, scenario, truth, init,
/// simulate, design, emulator, saem, fit, study, io. Unknown keys anywhere are
/// rejected with the offending key path.
struct RunConfig {
    StudyConfig study;         // scenario, truth, init, domain, emulator, saem, N, replications, variants
    int n_design = 25;         // emulate: design size
    std::optional<std::uint64_t> design_seed;  // emulate: defaults to design_seed(seed, n_design)
    std::optional<Eigen::MatrixXd> design_points;  // emulate: explicit design (overrides LHS)
    VariantKind fit_variant = VariantKind::Exact;
    std::string data_path;
    std::string bank_path;
    std::string out_dir = ".";
};

/// Parses and validates a config tree; throws ConfigError(key_path, message).
RunConfig parse_run_config(const nlohmann::json& j);
/// Reads a file and parses it (JSON syntax errors are reported as ConfigError too).
RunConfig load_run_config(const std::string& path);

/// The config with every default filled in, for --dry-run output and provenance.
nlohmann::json run_config_to_json(const RunConfig& cfg);

}  // namespace ksaem
