#include "ksaem/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "ksaem/errors.hpp"
#include "ksaem/random.hpp"

namespace ksaem {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kZ975 = 1.959963984540054;

std::vector<std::string> psi_names(PkKind kind) {
    if (kind == PkKind::FirstOrder) return {"log_ke", "log_ka", "log_Cl"};
    return {"log_V", "log_ka", "log_Vm"};
}

// Reported parameters: mu, diagonal of Omega, sigma2, as indices into flatten().
struct Reported {
    std::string name;
    Eigen::Index index;
};

std::vector<Reported> reported_parameters(PkKind kind, Eigen::Index d) {
    std::vector<std::string> names = psi_names(kind);
    if (static_cast<Eigen::Index>(names.size()) != d) {
        names.clear();
        for (Eigen::Index a = 0; a < d; ++a) names.push_back(fmt::format("psi{}", a + 1));
    }
    std::vector<Reported> out;
    for (Eigen::Index a = 0; a < d; ++a) out.push_back({"mu_" + names[static_cast<std::size_t>(a)], a});
    Eigen::Index p = d;
    for (Eigen::Index a = 0; a < d; ++a)
        for (Eigen::Index b = a; b < d; ++b, ++p)
            if (a == b) out.push_back({"omega2_" + names[static_cast<std::size_t>(a)], p});
    out.push_back({"sigma2", p});
    return out;
}

PopulationParams diagonal_params(std::vector<double> mu, std::vector<double> omega2, double sigma) {
    PopulationParams t;
    t.mu = Eigen::Map<Eigen::VectorXd>(mu.data(), static_cast<Eigen::Index>(mu.size()));
    t.omega = Eigen::Map<Eigen::VectorXd>(omega2.data(), static_cast<Eigen::Index>(omega2.size())).asDiagonal();
    t.sigma_eps2 = sigma * sigma;
    return t;
}

}  // namespace

std::string VariantSpec::label() const {
    if (kind == VariantKind::Exact) return to_string(kind);
    return fmt::format("{}(n_D={})", to_string(kind), n_design);
}

void StudyConfig::validate() const {
    scenario.validate();
    truth.validate();
    init.validate();
    if (scenario.times.empty()) throw DomainError("study: scenario needs observation times");
    if (truth.dim() != init.dim()) throw DomainError("study: truth and init dimensions differ");
    if (N < 2) throw DomainError("study: N must be >= 2");
    if (replications < 1) throw DomainError("study: replications must be >= 1");
    if (threads < 1) throw DomainError("study: threads must be >= 1");
    if (design_candidates < 1) throw DomainError("study: design_candidates must be >= 1");
    for (const auto& v : variants) {
        if (v.kind != VariantKind::Exact) {
            if (v.n_design < 2) throw DomainError("study: meta variants need n_D >= 2");
            domain.validate();
            if (domain.dim() != truth.dim()) throw DomainError("study: domain dimension differs from psi");
        }
    }
    saem.validate(truth.dim());
}

StudyConfig first_order_study() {
    StudyConfig c;
    c.scenario.kind = PkKind::FirstOrder;
    c.scenario.dose = 6.0;
    c.scenario.times = default_pk_times();
    c.truth = diagonal_params({-2.52, 0.4, -3.22}, {0.01, 0.01, 0.01}, 0.1);
    c.init = diagonal_params({-3.0, 1.0, -3.0}, {0.1, 0.1, 0.1}, 0.3);
    c.domain = Box((Eigen::VectorXd(3) << -4.0, 0.0, -4.5).finished(), (Eigen::VectorXd(3) << -1.0, 2.0, 2.0).finished());
    c.N = 36;
    return c;
}

StudyConfig michaelis_menten_study() {
    StudyConfig c;
    c.scenario.kind = PkKind::MichaelisMenten;
    c.scenario.dose = 100.0;
    c.scenario.fixed["log_km"] = -2.5;
    c.scenario.times = default_pk_times();
    // The early rise crosses k_m within a few thousandths of an hour at this dose.
    c.scenario.step = 0.0025;
    c.truth = diagonal_params({2.5, 1.0, -0.994}, {0.09, 0.09, 0.09}, 0.1);
    c.init = diagonal_params({2.0, 0.5, -0.5}, {0.1, 0.1, 0.1}, 0.3);
    c.domain = Box((Eigen::VectorXd(3) << 1.6, 0.0, -1.6).finished(), (Eigen::VectorXd(3) << 3.3, 2.1, -0.3).finished());
    c.N = 36;
    return c;
}

// ---------------------------------------------------------------------------
// Simulation

Dataset simulate_dataset(const PopulationParams& truth, const StructuralModel& model,
                         const std::vector<double>& times, Eigen::Index N, std::uint64_t seed, long* redraws) {
    if (!truth.mu.allFinite() || truth.omega.rows() != truth.dim() || truth.omega.cols() != truth.dim())
        throw DomainError("simulate: invalid truth");
    if (!(truth.sigma_eps2 >= 0.0)) throw DomainError("simulate: sigma_eps2 must be >= 0");
    if (N < 1) throw DomainError("simulate: N must be >= 1");
    // Symmetric square root; allows a singular (even zero) Omega.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (truth.omega + truth.omega.transpose()));
    if ((es.eigenvalues().array() < -1e-12).any()) throw DomainError("simulate: Omega is not positive semi-definite");
    const Eigen::MatrixXd root =
        es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
    const double sigma = std::sqrt(truth.sigma_eps2);

    Rng rng(seed);
    Dataset data;
    data.individuals.reserve(static_cast<std::size_t>(N));
    constexpr int max_redraws = 1000;
    for (Eigen::Index i = 0; i < N; ++i) {
        Eigen::VectorXd f;
        int tries = 0;
        for (;;) {
            const Eigen::VectorXd psi = truth.mu + root * rng.normal_vector(truth.dim());
            try {
                f = model(times, psi);
                if (f.allFinite()) break;
            } catch (const SolverError&) {
            }
            if (redraws) ++*redraws;
            if (++tries >= max_redraws) throw FitError("simulate: solver keeps failing for drawn parameters");
        }
        Individual ind;
        ind.times = times;
        ind.y = f + sigma * rng.normal_vector(f.size());
        data.individuals.push_back(std::move(ind));
    }
    return data;
}

Dataset simulate_dataset(const PopulationParams& truth, const PkScenario& scenario, Eigen::Index N,
                         std::uint64_t seed, long* redraws) {
    scenario.validate();
    return simulate_dataset(truth, make_structural_model(scenario), scenario.times, N, seed, redraws);
}

std::uint64_t design_seed(std::uint64_t study_seed, int n_design) {
    return derive_seed(study_seed, {0xD5, static_cast<std::uint64_t>(n_design)});
}

std::uint64_t replication_seed(std::uint64_t study_seed, int replication) {
    return derive_seed(study_seed, {0x5E, static_cast<std::uint64_t>(replication)});
}

// ---------------------------------------------------------------------------
// Study

StudyResult run_study(const StudyConfig& config, const Estimator& estimator) {
    config.validate();
    const StructuralModel model = make_structural_model(config.scenario);

    std::map<int, std::shared_ptr<const EmulatorBank>> banks;
    for (const auto& v : config.variants) {
        if (v.kind == VariantKind::Exact || banks.count(v.n_design)) continue;
        LhsOptions lhs;
        lhs.candidates = config.design_candidates;
        const Design design = lhs_design(config.domain, v.n_design, design_seed(config.seed, v.n_design), lhs);
        banks[v.n_design] = std::make_shared<const EmulatorBank>(
            EmulatorBank::fit(model, config.scenario.times, design, config.emulator));
    }
    std::vector<ModelVariant> variants;
    for (const auto& v : config.variants) {
        switch (v.kind) {
            case VariantKind::Exact: variants.push_back(ModelVariant::exact(model)); break;
            case VariantKind::Simple: variants.push_back(ModelVariant::simple(banks.at(v.n_design))); break;
            case VariantKind::Intermediate:
                variants.push_back(ModelVariant::intermediate(banks.at(v.n_design)));
                break;
            case VariantKind::Complete: variants.push_back(ModelVariant::complete(banks.at(v.n_design))); break;
        }
    }

    const int R = config.replications;
    const std::size_t V = variants.size();
    std::vector<ReplicationRecord> records(static_cast<std::size_t>(R) * V);
    std::vector<long> redraws(static_cast<std::size_t>(R), 0);

    auto run_replication = [&](int r) {
        const std::uint64_t rs = replication_seed(config.seed, r);
        Dataset data;
        std::string sim_error;
        try {
            data = simulate_dataset(config.truth, model, config.scenario.times, config.N, rs,
                                    &redraws[static_cast<std::size_t>(r)]);
        } catch (const std::exception& e) {
            sim_error = e.what();
        }
        SaemConfig saem = config.saem;
        saem.seed = derive_seed(rs, {1});
        for (std::size_t v = 0; v < V; ++v) {
            ReplicationRecord& rec = records[static_cast<std::size_t>(r) * V + v];
            rec.replication = r;
            rec.variant = v;
            if (!sim_error.empty()) {
                rec.error = sim_error;
                continue;
            }
            const auto t0 = std::chrono::steady_clock::now();
            try {
                const FitReport fit = estimator(variants[v], data, saem, config.init);
                rec.estimate = flatten(fit.theta_hat);
                rec.std_errors = fit.has_fisher && fit.std_errors.size() == rec.estimate.size()
                                     ? fit.std_errors
                                     : Eigen::VectorXd::Constant(rec.estimate.size(), kNaN);
                rec.ok = rec.estimate.allFinite();
                if (!rec.ok) rec.error = "non-finite estimate";
            } catch (const std::exception& e) {
                rec.error = e.what();
            }
            rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
    };

    const int threads = std::min(config.threads, R);
    if (threads <= 1) {
        for (int r = 0; r < R; ++r) run_replication(r);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < threads; ++w)
            pool.emplace_back([&] {
                for (int r = next++; r < R; r = next++) run_replication(r);
            });
        for (auto& th : pool) th.join();
    }

    StudyResult res = summarize_study(config, std::move(records));
    for (long c : redraws) res.simulation_redraws += c;
    for (const auto& t : res.timings) {
        const int total = t.succeeded + t.failed;
        if (t.failed * 10 > total)
            throw FitError(fmt::format("study: {} of {} fits failed for {}", t.failed, total, t.spec.label()));
    }
    return res;
}

StudyResult summarize_study(const StudyConfig& config, std::vector<ReplicationRecord> records) {
    std::sort(records.begin(), records.end(), [](const ReplicationRecord& a, const ReplicationRecord& b) {
        return a.replication != b.replication ? a.replication < b.replication : a.variant < b.variant;
    });
    StudyResult res;
    const Eigen::VectorXd truth = flatten(config.truth);
    const auto reported = reported_parameters(config.scenario.kind, config.truth.dim());

    for (std::size_t v = 0; v < config.variants.size(); ++v) {
        const VariantSpec& spec = config.variants[v];
        VariantTiming timing;
        timing.spec = spec;
        std::vector<const ReplicationRecord*> ok;
        double seconds = 0.0;
        for (const auto& rec : records) {
            if (rec.variant != v) continue;
            if (rec.ok) {
                ok.push_back(&rec);
                seconds += rec.seconds;
            } else {
                ++timing.failed;
            }
        }
        timing.succeeded = static_cast<int>(ok.size());
        timing.mean_seconds = ok.empty() ? kNaN : seconds / static_cast<double>(ok.size());
        res.timings.push_back(timing);

        for (const auto& par : reported) {
            ParameterSummary row;
            row.parameter = par.name;
            row.variant = to_string(spec.kind);
            row.n_design = spec.kind == VariantKind::Exact ? 0 : spec.n_design;
            const double t = truth[par.index];
            double err = 0.0, sq = 0.0;
            int hits = 0, with_se = 0;
            for (const auto* rec : ok) {
                const double e = rec->estimate[par.index] - t;
                err += e;
                sq += e * e;
                const double se = rec->std_errors[par.index];
                if (std::isfinite(se)) {
                    ++with_se;
                    if (std::abs(e) <= kZ975 * se) ++hits;
                }
            }
            const auto n = static_cast<double>(ok.size());
            if (ok.empty() || t == 0.0) {
                row.bias = kNaN;
                row.rmse = kNaN;
            } else {
                row.bias = 100.0 * (err / n) / t;
                row.rmse = 100.0 * std::sqrt(sq / n) / std::abs(t);
            }
            row.coverage = with_se ? 100.0 * hits / static_cast<double>(with_se) : kNaN;
            res.rows.push_back(row);
        }
    }
    res.records = std::move(records);
    return res;
}

// ---------------------------------------------------------------------------
// Tables

std::string format_fixed3(double v) {
    if (std::isnan(v)) return "NA";
    std::string s = fmt::format("{:.3f}", v);
    if (s == "-0.000") s = "0.000";
    return s;
}

std::string emit_table(const StudyResult& result, TableFormat format) {
    std::string out;
    if (format == TableFormat::Csv) {
        out += "parameter,variant,n_D,bias,RMSE,coverage\n";
        for (const auto& r : result.rows)
            out += fmt::format("{},{},{},{},{},{}\n", r.parameter, r.variant, r.n_design, format_fixed3(r.bias),
                               format_fixed3(r.rmse), format_fixed3(r.coverage));
    } else {
        out += "| parameter | variant | n_D | bias | RMSE | coverage |\n";
        out += "|---|---|---:|---:|---:|---:|\n";
        for (const auto& r : result.rows)
            out += fmt::format("| {} | {} | {} | {} | {} | {} |\n", r.parameter, r.variant,
                               r.n_design ? std::to_string(r.n_design) : std::string("-"), format_fixed3(r.bias),
                               format_fixed3(r.rmse), format_fixed3(r.coverage));
    }
    return out;
}

std::string emit_wide_table(const StudyResult& result) {
    std::vector<std::pair<std::string, int>> columns;
    std::vector<std::string> params;
    for (const auto& r : result.rows) {
        const std::pair<std::string, int> c{r.variant, r.n_design};
        if (std::find(columns.begin(), columns.end(), c) == columns.end()) columns.push_back(c);
        if (std::find(params.begin(), params.end(), r.parameter) == params.end()) params.push_back(r.parameter);
    }
    auto find = [&](const std::string& p, const std::pair<std::string, int>& c) -> const ParameterSummary* {
        for (const auto& r : result.rows)
            if (r.parameter == p && r.variant == c.first && r.n_design == c.second) return &r;
        return nullptr;
    };
    std::string out = "| parameter | |";
    std::string rule = "|---|---|";
    for (const auto& c : columns) {
        out += c.second ? fmt::format(" {} n_D={} |", c.first, c.second) : fmt::format(" {} |", c.first);
        rule += "---:|";
    }
    out += "\n" + rule + "\n";
    for (const auto& p : params) {
        for (const char* metric : {"Bias", "RMSE", "Cov."}) {
            out += fmt::format("| {} | {} |", std::string(metric) == "Bias" ? p : std::string(), metric);
            for (const auto& c : columns) {
                const auto* r = find(p, c);
                double v = kNaN;
                if (r) v = metric[0] == 'B' ? r->bias : metric[0] == 'R' ? r->rmse : r->coverage;
                out += " " + format_fixed3(v) + " |";
            }
            out += "\n";
        }
    }
    return out;
}

std::vector<ParameterSummary> parse_table_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line != "parameter,variant,n_D,bias,RMSE,coverage")
        throw DomainError("parse_table_csv: unexpected header");
    auto number = [](const std::string& s) { return s == "NA" ? kNaN : std::stod(s); };
    std::vector<ParameterSummary> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 6) throw DomainError("parse_table_csv: expected 6 fields in '" + line + "'");
        ParameterSummary r;
        r.parameter = f[0];
        r.variant = f[1];
        r.n_design = std::stoi(f[2]);
        r.bias = number(f[3]);
        r.rmse = number(f[4]);
        r.coverage = number(f[5]);
        rows.push_back(r);
    }
    return rows;
}

nlohmann::json study_to_json(const StudyConfig& config, const StudyResult& result) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json j;
    j["scenario"] = to_string(config.scenario.kind);
    j["N"] = config.N;
    j["replications"] = config.replications;
    j["seed"] = config.seed;
    j["simulation_redraws"] = result.simulation_redraws;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : result.rows)
        j["rows"].push_back({{"parameter", r.parameter},
                             {"variant", r.variant},
                             {"n_D", r.n_design},
                             {"bias", num(r.bias)},
                             {"rmse", num(r.rmse)},
                             {"coverage", num(r.coverage)}});
    j["variants"] = nlohmann::json::array();
    for (const auto& t : result.timings)
        j["variants"].push_back({{"variant", to_string(t.spec.kind)},
                                 {"n_D", t.spec.kind == VariantKind::Exact ? 0 : t.spec.n_design},
                                 {"succeeded", t.succeeded},
                                 {"failed", t.failed}});
    j["failures"] = nlohmann::json::array();
    for (const auto& rec : result.records)
        if (!rec.ok)
            j["failures"].push_back({{"replication", rec.replication},
                                     {"variant", config.variants[rec.variant].label()},
                                     {"error", rec.error}});
    return j;
}

}  // namespace ksaem
