#include "ksaem/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include <fmt/format.h>

#include "ksaem/errors.hpp"

namespace ksaem {

namespace {

using json = nlohmann::json;

// Typed, path-aware access to one JSON object of the config tree.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(display(), "expected an object");
    }

    void allow(std::initializer_list<const char*> keys) const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            bool known = false;
            for (const char* k : keys) known = known || it.key() == k;
            if (!known) throw ConfigError(key(it.key()), "unknown key");
        }
    }

    bool has(const char* k) const { return j_.contains(k); }
    Section sub(const char* k) const { return Section(j_.at(k), key(k)); }
    const json& raw(const char* k) const { return j_.at(k); }
    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

    double number(const char* k) const {
        const json& v = j_.at(k);
        if (!v.is_number()) throw ConfigError(key(k), "expected a number");
        return v.get<double>();
    }
    long integer(const char* k) const {
        const json& v = j_.at(k);
        if (!v.is_number_integer()) throw ConfigError(key(k), "expected an integer");
        return v.get<long>();
    }
    std::uint64_t unsigned_integer(const char* k) const {
        const json& v = j_.at(k);
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long>() < 0))
            throw ConfigError(key(k), "expected a non-negative integer");
        return v.get<std::uint64_t>();
    }
    bool boolean(const char* k) const {
        const json& v = j_.at(k);
        if (!v.is_boolean()) throw ConfigError(key(k), "expected true or false");
        return v.get<bool>();
    }
    std::string string(const char* k) const {
        const json& v = j_.at(k);
        if (!v.is_string()) throw ConfigError(key(k), "expected a string");
        return v.get<std::string>();
    }
    std::vector<double> numbers(const char* k) const {
        const json& v = j_.at(k);
        if (!v.is_array()) throw ConfigError(key(k), "expected an array of numbers");
        std::vector<double> out;
        for (std::size_t n = 0; n < v.size(); ++n) {
            if (!v[n].is_number()) throw ConfigError(fmt::format("{}[{}]", key(k), n), "expected a number");
            out.push_back(v[n].get<double>());
        }
        return out;
    }
    Eigen::MatrixXd matrix(const char* k) const {
        const json& v = j_.at(k);
        if (!v.is_array() || v.empty()) throw ConfigError(key(k), "expected a non-empty array of rows");
        Eigen::MatrixXd m;
        for (std::size_t r = 0; r < v.size(); ++r) {
            const std::string rk = fmt::format("{}[{}]", key(k), r);
            if (!v[r].is_array()) throw ConfigError(rk, "expected an array of numbers");
            if (r == 0) m.resize(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(v[0].size()));
            if (static_cast<Eigen::Index>(v[r].size()) != m.cols()) throw ConfigError(rk, "ragged matrix");
            for (std::size_t c = 0; c < v[r].size(); ++c) {
                if (!v[r][c].is_number()) throw ConfigError(fmt::format("{}[{}]", rk, c), "expected a number");
                m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[r][c].get<double>();
            }
        }
        return m;
    }

    const std::string& path() const { return path_; }

private:
    std::string display() const { return path_.empty() ? "<root>" : path_; }

    const json& j_;
    std::string path_;
};

Eigen::VectorXd to_vector(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json to_json_vector(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(v[k]);
    return a;
}

json to_json_matrix(const Eigen::MatrixXd& m) {
    json a = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(to_json_vector(m.row(r).transpose()));
    return a;
}

template <class F>
auto wrap(const std::string& key, F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(key, e.what());
    }
}

// truth / init: {"mu": [...], "omega": [[...]] | "omega_diag": [...], "sigma": sd}
void read_params(const Section& s, PopulationParams& p) {
    s.allow({"mu", "omega", "omega_diag", "sigma"});
    if (s.has("mu")) p.mu = to_vector(s.numbers("mu"));
    if (s.has("omega") && s.has("omega_diag")) throw ConfigError(s.key("omega"), "give either omega or omega_diag");
    if (s.has("omega")) p.omega = s.matrix("omega");
    if (s.has("omega_diag")) p.omega = to_vector(s.numbers("omega_diag")).asDiagonal();
    if (s.has("sigma")) {
        const double sd = s.number("sigma");
        if (!(sd > 0.0)) throw ConfigError(s.key("sigma"), "must be > 0");
        p.sigma_eps2 = sd * sd;
    }
    if (p.mu.size() == 0) throw ConfigError(s.key("mu"), "required");
    if (p.omega.rows() != p.mu.size() || p.omega.cols() != p.mu.size())
        throw ConfigError(s.key("omega"), "must be d x d with d = length of mu");
    wrap(s.path(), [&] { p.validate(); return 0; });
}

void read_scenario(const Section& s, PkScenario& sc) {
    s.allow({"kind", "dose", "fixed", "times", "step"});
    if (s.has("kind")) sc.kind = wrap(s.key("kind"), [&] { return pk_kind_from_string(s.string("kind")); });
    if (s.has("dose")) sc.dose = s.number("dose");
    if (s.has("fixed")) {
        const Section f = s.sub("fixed");
        f.allow({"log_km"});
        if (f.has("log_km")) sc.fixed["log_km"] = f.number("log_km");
    }
    if (s.has("times")) sc.times = s.numbers("times");
    if (s.has("step")) sc.step = s.number("step");
    wrap(s.path(), [&] { sc.validate(); return 0; });
    if (sc.times.empty()) throw ConfigError(s.key("times"), "at least one observation time is required");
}

void read_emulator(const Section& s, EmulatorOptions& e) {
    s.allow({"regressors", "kernel", "nugget", "phi_lower", "phi_upper", "normalize_inputs"});
    if (s.has("regressors"))
        e.regressors = wrap(s.key("regressors"), [&] { return regressor_basis_from_string(s.string("regressors")); });
    if (s.has("kernel")) e.kernel = wrap(s.key("kernel"), [&] { return kernel_family_from_string(s.string("kernel")); });
    if (s.has("nugget")) e.nugget = s.number("nugget");
    if (s.has("phi_lower")) e.phi_lower = s.number("phi_lower");
    if (s.has("phi_upper")) e.phi_upper = s.number("phi_upper");
    if (s.has("normalize_inputs")) e.normalize_inputs = s.boolean("normalize_inputs");
    if (!(e.nugget >= 0.0)) throw ConfigError(s.key("nugget"), "must be >= 0");
    if (!(e.phi_lower > 0.0 && e.phi_upper >= e.phi_lower)) throw ConfigError(s.key("phi_lower"), "need 0 < phi_lower <= phi_upper");
}

void read_saem(const Section& s, SaemConfig& c) {
    s.allow({"k_iters", "m_mcmc", "burn_in", "sa_exponent", "proposal_scale", "adapt_proposal", "target_acceptance",
             "prior_kernel", "compute_fisher", "fisher_iters"});
    if (s.has("k_iters")) c.k_iters = static_cast<int>(s.integer("k_iters"));
    if (s.has("m_mcmc")) c.m_mcmc = static_cast<int>(s.integer("m_mcmc"));
    if (s.has("burn_in")) c.burn_in = static_cast<int>(s.integer("burn_in"));
    if (s.has("sa_exponent")) c.sa_exponent = s.number("sa_exponent");
    if (s.has("proposal_scale")) c.proposal_scale = to_vector(s.numbers("proposal_scale"));
    if (s.has("adapt_proposal")) c.adapt_proposal = s.boolean("adapt_proposal");
    if (s.has("target_acceptance")) c.target_acceptance = s.number("target_acceptance");
    if (s.has("prior_kernel")) c.prior_kernel = s.boolean("prior_kernel");
    if (s.has("compute_fisher")) c.compute_fisher = s.boolean("compute_fisher");
    if (s.has("fisher_iters")) c.fisher_iters = static_cast<int>(s.integer("fisher_iters"));
}

VariantSpec read_variant(const json& v, const std::string& key) {
    VariantSpec spec;
    if (v.is_string()) {
        // "exact" or "simple:100"
        const std::string s = v.get<std::string>();
        const auto colon = s.find(':');
        spec.kind = wrap(key, [&] { return variant_kind_from_string(s.substr(0, colon)); });
        if (colon != std::string::npos)
            spec.n_design = wrap(key, [&] { return std::stoi(s.substr(colon + 1)); });
    } else {
        const Section sv(v, key);
        sv.allow({"kind", "n_D"});
        if (!sv.has("kind")) throw ConfigError(sv.key("kind"), "required");
        spec.kind = wrap(sv.key("kind"), [&] { return variant_kind_from_string(sv.string("kind")); });
        if (sv.has("n_D")) spec.n_design = static_cast<int>(sv.integer("n_D"));
    }
    if (spec.kind != VariantKind::Exact && spec.n_design < 2)
        throw ConfigError(key, "meta variants need n_D >= 2 (e.g. \"simple:100\")");
    return spec;
}

}  // namespace

RunConfig parse_run_config(const json& j) {
    const Section root(j, "");
    root.allow({"schema_version", "preset", "seed", "scenario", "truth", "init", "simulate", "design", "emulator",
                "saem", "fit", "study", "io"});
    if (!root.has("schema_version")) throw ConfigError("schema_version", "required");
    if (root.integer("schema_version") != kSchemaVersion)
        throw ConfigError("schema_version", fmt::format("unsupported version (expected {})", kSchemaVersion));

    RunConfig cfg;
    StudyConfig& st = cfg.study;
    if (root.has("preset")) {
        const std::string p = root.string("preset");
        if (p == "first_order") st = first_order_study();
        else if (p == "michaelis_menten") st = michaelis_menten_study();
        else throw ConfigError("preset", "expected first_order or michaelis_menten");
        cfg.study.variants.clear();
    } else {
        st.scenario.times = default_pk_times();
    }
    if (root.has("seed")) st.seed = root.unsigned_integer("seed");
    if (root.has("scenario")) read_scenario(root.sub("scenario"), st.scenario);
    else if (!root.has("preset")) throw ConfigError("scenario", "required unless a preset is given");
    if (root.has("truth")) read_params(root.sub("truth"), st.truth);
    if (root.has("init")) read_params(root.sub("init"), st.init);
    if (st.init.mu.size() == 0) st.init = st.truth;

    if (root.has("simulate")) {
        const Section s = root.sub("simulate");
        s.allow({"N"});
        if (s.has("N")) {
            const long N = s.integer("N");
            if (N < 1) throw ConfigError("simulate.N", "must be >= 1");
            st.N = static_cast<int>(N);
        }
    }
    if (root.has("design")) {
        const Section s = root.sub("design");
        s.allow({"lower", "upper", "n_D", "seed", "points", "candidates"});
        if (s.has("lower") || s.has("upper")) {
            if (!s.has("lower") || !s.has("upper")) throw ConfigError("design", "lower and upper go together");
            st.domain = wrap("design", [&] {
                return Box(to_vector(s.numbers("lower")), to_vector(s.numbers("upper")));
            });
        }
        if (s.has("n_D")) {
            const long n = s.integer("n_D");
            if (n < 2) throw ConfigError("design.n_D", "must be >= 2");
            cfg.n_design = static_cast<int>(n);
        }
        if (s.has("seed")) cfg.design_seed = s.unsigned_integer("seed");
        if (s.has("candidates")) {
            const long c = s.integer("candidates");
            if (c < 1) throw ConfigError("design.candidates", "must be >= 1");
            st.design_candidates = static_cast<int>(c);
        }
        if (s.has("points")) {
            cfg.design_points = s.matrix("points");
            cfg.n_design = static_cast<int>(cfg.design_points->rows());
        }
    }
    if (root.has("emulator")) read_emulator(root.sub("emulator"), st.emulator);
    if (root.has("saem")) read_saem(root.sub("saem"), st.saem);
    if (root.has("fit")) {
        const Section s = root.sub("fit");
        s.allow({"variant"});
        if (s.has("variant"))
            cfg.fit_variant = wrap("fit.variant", [&] { return variant_kind_from_string(s.string("variant")); });
    }
    if (root.has("study")) {
        const Section s = root.sub("study");
        s.allow({"replications", "variants", "threads"});
        if (s.has("replications")) {
            const long r = s.integer("replications");
            if (r < 1) throw ConfigError("study.replications", "must be >= 1");
            st.replications = static_cast<int>(r);
        }
        if (s.has("threads")) {
            const long t = s.integer("threads");
            if (t < 1) throw ConfigError("study.threads", "must be >= 1");
            st.threads = static_cast<int>(t);
        }
        if (s.has("variants")) {
            const json& v = s.raw("variants");
            if (!v.is_array()) throw ConfigError("study.variants", "expected an array");
            st.variants.clear();
            for (std::size_t k = 0; k < v.size(); ++k)
                st.variants.push_back(read_variant(v[k], fmt::format("study.variants[{}]", k)));
        }
    }
    if (root.has("io")) {
        const Section s = root.sub("io");
        s.allow({"data", "bank", "out_dir"});
        if (s.has("data")) cfg.data_path = s.string("data");
        if (s.has("bank")) cfg.bank_path = s.string("bank");
        if (s.has("out_dir")) cfg.out_dir = s.string("out_dir");
    }

    if (st.truth.mu.size() == 0) throw ConfigError("truth", "required unless a preset is given");
    if (st.init.dim() != st.truth.dim()) throw ConfigError("init.mu", "dimension differs from truth.mu");
    if (st.domain.dim() != 0 && st.domain.dim() != st.truth.dim())
        throw ConfigError("design.lower", "dimension differs from truth.mu");
    if (cfg.design_points && st.domain.dim() != 0 && cfg.design_points->cols() != st.domain.dim())
        throw ConfigError("design.points", "column count differs from the design box dimension");
    wrap("saem", [&] { st.saem.validate(st.truth.dim()); return 0; });
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("--config", "cannot open '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
    }
    return parse_run_config(j);
}

json run_config_to_json(const RunConfig& cfg) {
    const StudyConfig& st = cfg.study;
    auto params = [](const PopulationParams& p) {
        return json{{"mu", to_json_vector(p.mu)}, {"omega", to_json_matrix(p.omega)}, {"sigma", std::sqrt(p.sigma_eps2)}};
    };
    json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = st.seed;
    json sc{{"kind", to_string(st.scenario.kind)}, {"dose", st.scenario.dose}, {"step", st.scenario.step}};
    sc["times"] = st.scenario.times;
    sc["fixed"] = json::object();
    for (const auto& [k, v] : st.scenario.fixed) sc["fixed"][k] = v;
    j["scenario"] = sc;
    j["truth"] = params(st.truth);
    j["init"] = params(st.init);
    j["simulate"] = {{"N", st.N}};
    json d{{"n_D", cfg.n_design}, {"candidates", st.design_candidates}};
    if (st.domain.dim() > 0) {
        d["lower"] = to_json_vector(st.domain.lower);
        d["upper"] = to_json_vector(st.domain.upper);
    }
    if (cfg.design_seed) d["seed"] = *cfg.design_seed;
    if (cfg.design_points) d["points"] = to_json_matrix(*cfg.design_points);
    j["design"] = d;
    j["emulator"] = {{"regressors", to_string(st.emulator.regressors)},
                     {"kernel", to_string(st.emulator.kernel)},
                     {"nugget", st.emulator.nugget},
                     {"phi_lower", st.emulator.phi_lower},
                     {"phi_upper", st.emulator.phi_upper},
                     {"normalize_inputs", st.emulator.normalize_inputs}};
    json sa{{"k_iters", st.saem.k_iters},
            {"m_mcmc", st.saem.m_mcmc},
            {"burn_in", st.saem.burn_in},
            {"sa_exponent", st.saem.sa_exponent},
            {"adapt_proposal", st.saem.adapt_proposal},
            {"target_acceptance", st.saem.target_acceptance},
            {"prior_kernel", st.saem.prior_kernel},
            {"compute_fisher", st.saem.compute_fisher},
            {"fisher_iters", st.saem.fisher_iters}};
    if (st.saem.proposal_scale.size()) sa["proposal_scale"] = to_json_vector(st.saem.proposal_scale);
    j["saem"] = sa;
    j["fit"] = {{"variant", to_string(cfg.fit_variant)}};
    json vars = json::array();
    for (const auto& v : st.variants) vars.push_back(json{{"kind", to_string(v.kind)}, {"n_D", v.n_design}});
    j["study"] = {{"replications", st.replications}, {"threads", st.threads}, {"variants", vars}};
    j["io"] = {{"data", cfg.data_path}, {"bank", cfg.bank_path}, {"out_dir", cfg.out_dir}};
    return j;
}

}  // namespace ksaem
