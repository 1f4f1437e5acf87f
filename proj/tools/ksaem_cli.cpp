// ksaem: command-line front end (simulate, emulate, fit, bench).
//
// Exit codes: 0 success, 1 computation failure, 2 config/usage error, 3 SAEM divergence.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ksaem/bench.hpp"
#include "ksaem/config.hpp"
#include "ksaem/design.hpp"
#include "ksaem/emulator.hpp"
#include "ksaem/errors.hpp"
#include "ksaem/io.hpp"
#include "ksaem/models.hpp"
#include "ksaem/saem.hpp"

namespace fs = std::filesystem;
using namespace ksaem;

namespace {

enum Exit { kOk = 0, kComputation = 1, kUsage = 2, kDivergence = 3 };

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    int threads = 0;
    bool dry_run = false;
    std::string out_dir;
};

struct FitArgs {
    std::string data, variant, bank;
};

struct BenchArgs {
    int replications = 0;
    std::string variants;
};

std::vector<std::string> psi_names(const RunConfig& cfg) {
    const auto d = cfg.study.truth.dim();
    if (d == 3) {
        if (cfg.study.scenario.kind == PkKind::FirstOrder) return {"log_ke", "log_ka", "log_Cl"};
        return {"log_V", "log_ka", "log_Vm"};
    }
    std::vector<std::string> out;
    for (Eigen::Index a = 0; a < d; ++a) out.push_back(fmt::format("psi{}", a + 1));
    return out;
}

std::string output_path(const RunConfig& cfg, const std::string& name) {
    fs::create_directories(cfg.out_dir);
    return (fs::path(cfg.out_dir) / name).string();
}

// Timestamps and timings go to a sidecar log so that primary outputs stay byte-identical.
void sidecar(const RunConfig& cfg, const std::string& command, const nlohmann::json& info) {
    nlohmann::json j = info;
    j["command"] = command;
    j["finished_at"] = std::chrono::duration_cast<std::chrono::seconds>(
                           std::chrono::system_clock::now().time_since_epoch())
                           .count();
    std::ofstream(output_path(cfg, "run_log.jsonl"), std::ios::app) << j.dump() << "\n";
}

void print_plan(const RunConfig& cfg, const std::string& command, const std::vector<std::string>& steps) {
    std::cout << "dry run: " << command << "\n";
    for (const auto& s : steps) std::cout << "  - " << s << "\n";
    std::cout << "resolved config:\n" << run_config_to_json(cfg).dump(2) << "\n";
}

Design make_design(const RunConfig& cfg) {
    const StudyConfig& st = cfg.study;
    if (st.domain.dim() == 0) throw ConfigError("design.lower", "a design box is required");
    if (cfg.design_points) {
        Design d;
        d.points = *cfg.design_points;
        d.box = st.domain;
        for (Eigen::Index k = 0; k < d.size(); ++k)
            if (!d.box.contains(d.point(k)))
                throw ConfigError(fmt::format("design.points[{}]", k), "point lies outside the design box");
        return d;
    }
    const std::uint64_t seed = cfg.design_seed ? *cfg.design_seed : design_seed(st.seed, cfg.n_design);
    LhsOptions lhs;
    lhs.candidates = st.design_candidates;
    return lhs_design(st.domain, cfg.n_design, seed, lhs);
}

int cmd_simulate(const RunConfig& cfg, bool dry_run) {
    const StudyConfig& st = cfg.study;
    if (dry_run) {
        print_plan(cfg, "simulate",
                   {fmt::format("simulate N = {} individuals x {} times ({} scenario)", st.N,
                                st.scenario.times.size(), to_string(st.scenario.kind)),
                    "write " + (fs::path(cfg.out_dir) / "dataset.csv").string()});
        return kOk;
    }
    long redraws = 0;
    const Dataset data = simulate_dataset(st.truth, st.scenario, st.N, replication_seed(st.seed, 0), &redraws);
    write_text_file(output_path(cfg, "dataset.csv"), dataset_to_csv(data));
    if (redraws) std::cerr << "simulate: " << redraws << " parameter draws were redrawn after solver failures\n";
    sidecar(cfg, "simulate", {{"redraws", redraws}});
    return kOk;
}

int cmd_emulate(const RunConfig& cfg, bool dry_run) {
    const StudyConfig& st = cfg.study;
    if (dry_run) {
        print_plan(cfg, "emulate",
                   {fmt::format("design of n_D = {} points in d = {}", cfg.n_design, st.domain.dim()),
                    fmt::format("{} solver calls, one emulator per observation time ({} times)", cfg.n_design,
                                st.scenario.times.size()),
                    "write bank.json and emulate_report.json"});
        return kOk;
    }
    const Design design = make_design(cfg);
    long calls = 0;
    EmulatorBank bank;
    try {
        bank = EmulatorBank::fit(make_structural_model(st.scenario), st.scenario.times, design, st.emulator, &calls);
    } catch (const FitError& e) {
        std::cerr << "emulate: fit failed: " << e.what() << "\n";
        return kComputation;
    }
    nlohmann::json report;
    report["n_D"] = design.size();
    report["solver_calls"] = calls;
    report["solver_calls_per_time"] = calls;
    report["covering_distance"] = covering_distance(design, design.dim() <= 3 ? 21 : 5);
    report["min_pairwise_distance"] = json_number(min_pairwise_distance(design.points));
    report["per_time"] = nlohmann::json::array();
    for (std::size_t k = 0; k < bank.times().size(); ++k) {
        const Emulator& em = bank.emulators()[k];
        const Eigen::VectorXd loo = em.loo_residuals();
        report["per_time"].push_back({{"time", bank.times()[k]},
                                      {"sigma2", json_number(em.params().sigma2)},
                                      {"phi", json_number(em.params().phi)},
                                      {"loglik", json_number(em.loglik())},
                                      {"degenerate", em.degenerate()},
                                      {"loo_rmse", json_number(std::sqrt(loo.squaredNorm() / loo.size()))}});
    }
    write_text_file(output_path(cfg, "bank.json"), bank.to_json().dump() + "\n");
    write_text_file(output_path(cfg, "emulate_report.json"), report.dump(2) + "\n");
    sidecar(cfg, "emulate", {{"solver_calls", calls}});
    return kOk;
}

int cmd_fit(RunConfig cfg, const FitArgs& args, bool dry_run) {
    if (!args.data.empty()) cfg.data_path = args.data;
    if (!args.bank.empty()) cfg.bank_path = args.bank;
    if (!args.variant.empty()) {
        try {
            cfg.fit_variant = variant_kind_from_string(args.variant);
        } catch (const std::exception&) {
            throw ConfigError("--variant", "expected exact, simple, intermediate or complete");
        }
    }
    if (cfg.data_path.empty()) throw ConfigError("--data", "a dataset path is required (--data or io.data)");
    const bool meta = cfg.fit_variant != VariantKind::Exact;
    if (meta && cfg.bank_path.empty())
        throw ConfigError("--bank", fmt::format("the {} variant needs an emulator bank: run `ksaem emulate` and pass "
                                                "--bank <out-dir>/bank.json",
                                                to_string(cfg.fit_variant)));
    const Dataset data = dataset_from_csv(read_text_file(cfg.data_path));
    if (cfg.fit_variant == VariantKind::Complete)
        std::cerr << fmt::format(
            "warning: the complete variant factorises the joint {0} x {0} emulator covariance at every MCMC move; "
            "expect a much longer run than simple/intermediate\n",
            data.n_tot());
    if (dry_run) {
        print_plan(cfg, "fit",
                   {fmt::format("dataset: {} individuals, {} observations", data.N(), data.n_tot()),
                    fmt::format("variant: {}{}", to_string(cfg.fit_variant), meta ? " (bank " + cfg.bank_path + ")" : ""),
                    fmt::format("SAEM: {} iterations x {} MCMC sweeps", cfg.study.saem.k_iters, cfg.study.saem.m_mcmc),
                    "write fit_report.json and trajectory.csv"});
        return kOk;
    }
    ModelVariant variant;
    if (meta) {
        std::shared_ptr<const EmulatorBank> bank;
        try {
            bank = std::make_shared<const EmulatorBank>(
                EmulatorBank::from_json(nlohmann::json::parse(read_text_file(cfg.bank_path))));
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError("--bank", std::string("cannot load bank: ") + e.what());
        }
        switch (cfg.fit_variant) {
            case VariantKind::Simple: variant = ModelVariant::simple(bank); break;
            case VariantKind::Intermediate: variant = ModelVariant::intermediate(bank); break;
            default: variant = ModelVariant::complete(bank); break;
        }
    } else {
        variant = ModelVariant::exact(make_structural_model(cfg.study.scenario));
    }
    SaemConfig saem = cfg.study.saem;
    saem.seed = derive_seed(cfg.study.seed, {1});
    const FitReport fit = run_saem(variant, data, saem, cfg.study.init);
    write_text_file(output_path(cfg, "fit_report.json"), fit_report_to_json(fit, psi_names(cfg)).dump(2) + "\n");
    write_text_file(output_path(cfg, "trajectory.csv"), trajectory_to_csv(fit));
    sidecar(cfg, "fit", {{"variant", to_string(cfg.fit_variant)}, {"wall_seconds", fit.diagnostics.wall_seconds}});
    return kOk;
}

int cmd_bench(RunConfig cfg, const BenchArgs& args, bool dry_run) {
    StudyConfig& st = cfg.study;
    if (args.replications != 0) {
        if (args.replications < 1) throw ConfigError("--replications", "must be >= 1");
        st.replications = args.replications;
    }
    if (!args.variants.empty()) {
        nlohmann::json list = nlohmann::json::array();
        std::stringstream ss(args.variants);
        std::string item;
        while (std::getline(ss, item, ',')) list.push_back(item);
        // Reuse the config parser for variant syntax ("exact", "simple:100").
        nlohmann::json probe = run_config_to_json(cfg);
        probe["study"]["variants"] = list;
        try {
            st.variants = parse_run_config(probe).study.variants;
        } catch (const ConfigError& e) {
            throw ConfigError("--variants", e.what());
        }
    }
    if (st.variants.empty()) throw ConfigError("study.variants", "no variants to run");
    try {
        st.validate();
    } catch (const DomainError& e) {
        throw ConfigError("study", e.what());
    }
    if (dry_run) {
        std::vector<std::string> steps;
        std::set<int> sizes;
        for (const auto& v : st.variants)
            if (v.kind != VariantKind::Exact && sizes.insert(v.n_design).second)
                steps.push_back(fmt::format("prefit emulator bank with n_D = {}", v.n_design));
        std::string names;
        for (const auto& v : st.variants) names += (names.empty() ? "" : ", ") + v.label();
        steps.push_back(fmt::format("{} replications x N = {} individuals; variants: {}", st.replications, st.N, names));
        steps.push_back("write study.csv, study.md and study.json");
        print_plan(cfg, "bench", steps);
        return kOk;
    }
    for (const auto& v : st.variants)
        if (v.kind == VariantKind::Complete)
            std::cerr << "warning: the complete variant is much slower than the other variants\n";
    const StudyResult res = run_study(st);
    write_text_file(output_path(cfg, "study.csv"), emit_table(res, TableFormat::Csv));
    write_text_file(output_path(cfg, "study.md"),
                    emit_table(res, TableFormat::Markdown) + "\n" + emit_wide_table(res));
    write_text_file(output_path(cfg, "study.json"), study_to_json(st, res).dump(2) + "\n");
    nlohmann::json timing = nlohmann::json::array();
    for (const auto& t : res.timings) timing.push_back({{"variant", t.spec.label()}, {"mean_seconds", json_number(t.mean_seconds)}});
    sidecar(cfg, "bench", {{"timings", timing}});
    std::cout << emit_wide_table(res);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixed-effects estimation with SAEM-MCMC and Kriging emulators"};
    app.require_subcommand(1);
    Globals g;
    FitArgs fit_args;
    BenchArgs bench_args;
    app.add_option("--config", g.config, "JSON run configuration")->required();
    app.add_option("--seed", g.seed, "Overrides the config seed");
    app.add_option("--threads", g.threads, "Worker threads for bench replications")->check(CLI::PositiveNumber);
    app.add_flag("--dry-run", g.dry_run, "Validate the config and print the execution plan");
    app.add_option("--out-dir", g.out_dir, "Output directory (overrides io.out_dir)");
    auto* sim = app.add_subcommand("simulate", "Simulate a dataset (dataset.csv)");
    auto* emu = app.add_subcommand("emulate", "Fit an emulator bank (bank.json, emulate_report.json)");
    auto* fit = app.add_subcommand("fit", "Run SAEM on a dataset (fit_report.json, trajectory.csv)");
    fit->add_option("--data", fit_args.data, "Dataset CSV (id,time,y)");
    fit->add_option("--variant", fit_args.variant, "exact | simple | intermediate | complete");
    fit->add_option("--bank", fit_args.bank, "Emulator bank JSON (meta variants)");
    auto* bench = app.add_subcommand("bench", "Replicated estimation study (study.csv, study.md, study.json)");
    bench->add_option("--replications", bench_args.replications, "Overrides study.replications");
    bench->add_option("--variants", bench_args.variants, "Comma-separated list, e.g. exact,simple:100");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        RunConfig cfg = load_run_config(g.config);
        if (g.seed) cfg.study.seed = *g.seed;
        if (g.threads > 0) cfg.study.threads = g.threads;
        if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
        if (*sim) return cmd_simulate(cfg, g.dry_run);
        if (*emu) return cmd_emulate(cfg, g.dry_run);
        if (*fit) return cmd_fit(cfg, fit_args, g.dry_run);
        if (*bench) return cmd_bench(cfg, bench_args, g.dry_run);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return kDivergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kComputation;
    }
    return kUsage;
}
