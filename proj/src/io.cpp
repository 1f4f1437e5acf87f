#include "ksaem/io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "ksaem/errors.hpp"

namespace ksaem {

std::string dataset_to_csv(const Dataset& data) {
    std::string out = "id,time,y\n";
    for (std::size_t i = 0; i < data.individuals.size(); ++i) {
        const auto& ind = data.individuals[i];
        for (std::size_t j = 0; j < ind.times.size(); ++j)
            out += fmt::format("{},{:.17g},{:.17g}\n", i + 1, ind.times[j], ind.y[static_cast<Eigen::Index>(j)]);
    }
    return out;
}

Dataset dataset_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("data", "empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "id,time,y") throw ConfigError("data", "header must be 'id,time,y'");

    Dataset data;
    std::vector<std::string> seen;
    std::string current;
    std::vector<double> ys;
    auto flush = [&] {
        if (current.empty()) return;
        data.individuals.back().y = Eigen::Map<Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size()));
        ys.clear();
    };
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 3) throw ConfigError("data", fmt::format("line {}: expected 3 fields", line_no));
        double t = 0.0, y = 0.0;
        try {
            std::size_t pos = 0;
            t = std::stod(f[1], &pos);
            if (pos != f[1].size()) throw std::invalid_argument("trailing characters");
            y = std::stod(f[2], &pos);
            if (pos != f[2].size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw ConfigError("data", fmt::format("line {}: cannot parse numbers", line_no));
        }
        if (f[0] != current) {
            for (const auto& s : seen)
                if (s == f[0]) throw ConfigError("data", fmt::format("line {}: rows of id {} are not contiguous", line_no, f[0]));
            flush();
            current = f[0];
            seen.push_back(current);
            data.individuals.emplace_back();
        }
        data.individuals.back().times.push_back(t);
        ys.push_back(y);
    }
    flush();
    try {
        data.validate();
    } catch (const std::exception& e) {
        throw ConfigError("data", e.what());
    }
    return data;
}

nlohmann::json json_number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json json_vector(const Eigen::VectorXd& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(json_number(v[k]));
    return a;
}

nlohmann::json json_matrix(const Eigen::MatrixXd& m) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(json_vector(m.row(r).transpose()));
    return a;
}

nlohmann::json fit_report_to_json(const FitReport& fit, const std::vector<std::string>& psi_names) {
    const PopulationParams& th = fit.theta_hat;
    const auto names = parameter_names(th.dim());
    nlohmann::json j;
    j["variant"] = to_string(fit.diagnostics.variant);
    j["psi_names"] = psi_names;
    j["theta_hat"] = {{"mu", json_vector(th.mu)},
                      {"omega", json_matrix(th.omega)},
                      {"sigma2", json_number(th.sigma_eps2)}};
    j["parameters"] = names;
    j["estimates"] = json_vector(flatten(th));
    if (fit.has_fisher) {
        j["std_errors"] = json_vector(fit.std_errors);
        j["fisher_information"] = json_matrix(fit.fisher);
        j["fisher_flags"] = {{"pseudo_inverse", fit.fisher_detail.pseudo_inverse},
                             {"negative_variance", fit.fisher_detail.negative_variance},
                             {"sigma2_supported", fit.fisher_detail.sigma2_supported}};
    } else {
        j["std_errors"] = nullptr;
        j["fisher_information"] = nullptr;
    }
    const Diagnostics& d = fit.diagnostics;
    j["diagnostics"] = {{"iterations", fit.gammas.size()},
                        {"acceptance_rate", json_number(d.acceptance_rate)},
                        {"transitions", d.transitions},
                        {"nonfinite_rejections", d.nonfinite_rejections},
                        {"extrapolations", d.extrapolations},
                        {"omega_floored", d.omega_floored},
                        {"final_proposal_scale", json_vector(d.final_proposal_scale)}};
    return j;
}

std::string trajectory_to_csv(const FitReport& fit) {
    if (fit.trajectory.empty()) return "iter\n";
    const auto names = parameter_names(fit.trajectory.front().dim());
    std::string out = "iter";
    for (const auto& n : names) out += "," + n;
    out += "\n";
    for (std::size_t k = 0; k < fit.trajectory.size(); ++k) {
        out += std::to_string(k);
        const Eigen::VectorXd v = flatten(fit.trajectory[k]);
        for (Eigen::Index p = 0; p < v.size(); ++p) out += fmt::format(",{:.17g}", v[p]);
        out += "\n";
    }
    return out;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path, "cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << text;
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace ksaem
