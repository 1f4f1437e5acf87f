#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "ksaem/likelihood.hpp"
#include "ksaem/saem.hpp"

namespace ksaem {

/// Dataset as CSV with header `id,time,y`; ids are 1-based, numbers printed with %.17g.
std::string dataset_to_csv(const Dataset& data);
/// Parses `id,time,y` CSV. Rows of one individual must be contiguous; times are kept
/// in file order. Throws ConfigError("data", ...) on malformed input.
Dataset dataset_from_csv(const std::string& text);

/// Report of one fit: estimates, standard errors, information matrix, diagnostics.
/// Wall-clock timings are not included (they would break byte-identical output).
nlohmann::json fit_report_to_json(const FitReport& fit, const std::vector<std::string>& psi_names);

/// Trajectory CSV: iter, mu_1.., omega_11.. (upper triangle), sigma2; one row per theta^(k).
std::string trajectory_to_csv(const FitReport& fit);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

/// JSON numbers with NaN / inf mapped to null.
nlohmann::json json_number(double v);
nlohmann::json json_vector(const Eigen::VectorXd& v);
nlohmann::json json_matrix(const Eigen::MatrixXd& m);

}  // namespace ksaem
