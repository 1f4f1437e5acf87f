#include "ksaem/design.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <fmt/format.h>

#include "ksaem/errors.hpp"
#include "ksaem/random.hpp"

namespace ksaem {

Box::Box(Eigen::VectorXd lo, Eigen::VectorXd hi) : lower(std::move(lo)), upper(std::move(hi)) {
    validate();
}

void Box::validate() const {
    if (lower.size() == 0 || lower.size() != upper.size())
        throw DomainError("box: lower/upper must be non-empty and of equal dimension");
    for (Eigen::Index k = 0; k < lower.size(); ++k) {
        if (!std::isfinite(lower[k]) || !std::isfinite(upper[k]) || !(lower[k] < upper[k]))
            throw DomainError(fmt::format("box: need lower < upper in coordinate {} (got {} >= {})",
                                          k, lower[k], upper[k]));
    }
}

bool Box::contains(const Eigen::VectorXd& x) const {
    return x.size() == lower.size() && (x.array() >= lower.array()).all() &&
           (x.array() <= upper.array()).all();
}

bool Design::has_duplicates() const {
    for (Eigen::Index a = 0; a < points.rows(); ++a)
        for (Eigen::Index b = a + 1; b < points.rows(); ++b)
            if ((points.row(a) - points.row(b)).squaredNorm() == 0.0) return true;
    return false;
}

double min_pairwise_distance(const Eigen::MatrixXd& points) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < points.rows(); ++a)
        for (Eigen::Index b = a + 1; b < points.rows(); ++b)
            best = std::min(best, (points.row(a) - points.row(b)).squaredNorm());
    return std::sqrt(best);
}

namespace {

// One LHS draw in the unit cube; stratum index permuted per column, uniform jitter.
Eigen::MatrixXd unit_lhs(Eigen::Index n, Eigen::Index d, Rng& rng) {
    Eigen::MatrixXd u(n, d);
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
    for (Eigen::Index k = 0; k < d; ++k) {
        std::iota(perm.begin(), perm.end(), Eigen::Index{0});
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        for (Eigen::Index i = 0; i < n; ++i)
            u(i, k) = (static_cast<double>(perm[static_cast<std::size_t>(i)]) + rng.uniform()) /
                      static_cast<double>(n);
    }
    return u;
}

Eigen::MatrixXd to_box(const Eigen::MatrixXd& unit, const Box& box) {
    Eigen::MatrixXd x = unit;
    const Eigen::VectorXd w = box.width();
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        x.row(i) = (box.lower + unit.row(i).transpose().cwiseProduct(w)).transpose();
    return x;
}

}  // namespace

Design lhs_design(const Box& box, Eigen::Index n_points, std::uint64_t seed, const LhsOptions& opts) {
    box.validate();
    if (n_points < 1) throw DomainError("lhs_design: n_D must be >= 1");
    const Eigen::Index d = box.dim();
    Design design;
    design.box = box;
    design.seed = seed;
    if (n_points == 1) {
        design.points = (0.5 * (box.lower + box.upper)).transpose();
        return design;
    }
    Rng rng(seed);
    Eigen::MatrixXd best;
    double best_score = -1.0;
    const int draws = std::max(1, opts.candidates);
    for (int c = 0; c < draws; ++c) {
        Eigen::MatrixXd u = unit_lhs(n_points, d, rng);
        // Score in unit coordinates so that wide axes do not dominate.
        const double score = min_pairwise_distance(u);
        if (score > best_score) {
            best_score = score;
            best = std::move(u);
        }
    }
    design.points = to_box(best, box);
    // Rounding in the affine map can push a coordinate a few ulps past the bound.
    for (Eigen::Index i = 0; i < n_points; ++i)
        for (Eigen::Index k = 0; k < d; ++k)
            design.points(i, k) = std::clamp(design.points(i, k), box.lower[k], box.upper[k]);
    return design;
}

Design extend_design(const Design& base, Eigen::Index n_new, std::uint64_t seed, int pool_per_point) {
    base.box.validate();
    if (n_new < 0) throw DomainError("extend_design: n_new must be >= 0");
    const Eigen::Index d = base.box.dim();
    const Eigen::Index n0 = base.size();
    Design out;
    out.box = base.box;
    out.seed = base.seed;
    out.points.resize(n0 + n_new, d);
    if (n0 > 0) out.points.topRows(n0) = base.points;

    Rng rng(seed);
    const Eigen::Index pool_size = std::max<Eigen::Index>(1, pool_per_point) * std::max<Eigen::Index>(1, n_new);
    Eigen::MatrixXd pool(pool_size, d);
    for (Eigen::Index p = 0; p < pool_size; ++p)
        for (Eigen::Index k = 0; k < d; ++k) pool(p, k) = rng.uniform();
    pool = to_box(pool, base.box);

    const Eigen::VectorXd inv_w = base.box.width().cwiseInverse();
    auto unit_dist2 = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
        return (a - b).cwiseProduct(inv_w).squaredNorm();
    };
    std::vector<double> nearest(static_cast<std::size_t>(pool_size), std::numeric_limits<double>::infinity());
    for (Eigen::Index p = 0; p < pool_size; ++p)
        for (Eigen::Index i = 0; i < n0; ++i)
            nearest[p] = std::min(nearest[p], unit_dist2(pool.row(p).transpose(), base.points.row(i).transpose()));

    for (Eigen::Index m = 0; m < n_new; ++m) {
        auto it = std::max_element(nearest.begin(), nearest.end());
        const auto p_star = static_cast<Eigen::Index>(std::distance(nearest.begin(), it));
        const Eigen::VectorXd chosen = pool.row(p_star).transpose();
        out.points.row(n0 + m) = chosen.transpose();
        for (Eigen::Index p = 0; p < pool_size; ++p)
            nearest[p] = std::min(nearest[p], unit_dist2(pool.row(p).transpose(), chosen));
    }
    return out;
}

double covering_distance_at(const Eigen::MatrixXd& points, const Eigen::MatrixXd& eval) {
    if (points.rows() == 0) throw DomainError("covering_distance: empty design");
    double worst = 0.0;
    for (Eigen::Index e = 0; e < eval.rows(); ++e) {
        double nearest = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < points.rows(); ++i)
            nearest = std::min(nearest, (points.row(i) - eval.row(e)).squaredNorm());
        worst = std::max(worst, nearest);
    }
    return std::sqrt(worst);
}

double covering_distance(const Design& design, int resolution, const CoverageOptions& opts) {
    design.box.validate();
    if (resolution < 2) throw DomainError("covering_distance: resolution must be >= 2");
    if (design.size() == 0) throw DomainError("covering_distance: empty design");
    const Eigen::Index d = design.dim();
    const double n_grid = std::pow(static_cast<double>(resolution), static_cast<double>(d));
    const Eigen::VectorXd w = design.box.width();

    if (n_grid > opts.grid_cap) {
        if (!opts.monte_carlo_fallback)
            throw ResourceError(fmt::format("covering_distance: {}^{} grid points exceed cap {}",
                                            resolution, d, opts.grid_cap));
        Rng rng(derive_seed(design.seed, {0xC0FEu}));
        double worst = 0.0;
        Eigen::VectorXd x(d);
        for (Eigen::Index s = 0; s < opts.mc_samples; ++s) {
            for (Eigen::Index k = 0; k < d; ++k) x[k] = design.box.lower[k] + rng.uniform() * w[k];
            double nearest = std::numeric_limits<double>::infinity();
            for (Eigen::Index i = 0; i < design.size(); ++i)
                nearest = std::min(nearest, (design.points.row(i).transpose() - x).squaredNorm());
            worst = std::max(worst, nearest);
        }
        return std::sqrt(worst);
    }

    // Odometer walk over the regular grid.
    const auto total = static_cast<std::int64_t>(n_grid);
    std::vector<int> idx(static_cast<std::size_t>(d), 0);
    Eigen::VectorXd x(d);
    double worst = 0.0;
    for (std::int64_t g = 0; g < total; ++g) {
        for (Eigen::Index k = 0; k < d; ++k)
            x[k] = design.box.lower[k] + w[k] * idx[k] / static_cast<double>(resolution - 1);
        double nearest = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < design.size(); ++i)
            nearest = std::min(nearest, (design.points.row(i).transpose() - x).squaredNorm());
        worst = std::max(worst, nearest);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            if (++idx[k] < resolution) break;
            idx[k] = 0;
        }
    }
    return std::sqrt(worst);
}

std::string design_to_csv(const Design& design) {
    std::string out;
    for (Eigen::Index k = 0; k < design.dim(); ++k) out += fmt::format("{}x{}", k ? "," : "", k + 1);
    out += '\n';
    for (Eigen::Index i = 0; i < design.size(); ++i) {
        for (Eigen::Index k = 0; k < design.dim(); ++k)
            out += fmt::format("{}{:.17g}", k ? "," : "", design.points(i, k));
        out += '\n';
    }
    return out;
}

nlohmann::json box_to_json(const Box& box) {
    return {{"lower", std::vector<double>(box.lower.data(), box.lower.data() + box.lower.size())},
            {"upper", std::vector<double>(box.upper.data(), box.upper.data() + box.upper.size())}};
}

Box box_from_json(const nlohmann::json& j) {
    auto lo = j.at("lower").get<std::vector<double>>();
    auto hi = j.at("upper").get<std::vector<double>>();
    return Box(Eigen::Map<Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size())),
               Eigen::Map<Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size())));
}

nlohmann::json design_to_json(const Design& design) {
    nlohmann::json pts = nlohmann::json::array();
    for (Eigen::Index i = 0; i < design.size(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(design.dim()));
        for (Eigen::Index k = 0; k < design.dim(); ++k) row[static_cast<std::size_t>(k)] = design.points(i, k);
        pts.push_back(row);
    }
    return {{"box", box_to_json(design.box)}, {"points", pts}, {"seed", design.seed}};
}

Design design_from_json(const nlohmann::json& j) {
    Design design;
    design.box = box_from_json(j.at("box"));
    design.seed = j.value("seed", std::uint64_t{0});
    const auto& pts = j.at("points");
    design.points.resize(static_cast<Eigen::Index>(pts.size()), design.box.dim());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        auto row = pts[i].get<std::vector<double>>();
        if (static_cast<Eigen::Index>(row.size()) != design.box.dim())
            throw DomainError("design: point dimension does not match box");
        for (Eigen::Index k = 0; k < design.box.dim(); ++k)
            design.points(static_cast<Eigen::Index>(i), k) = row[static_cast<std::size_t>(k)];
    }
    return design;
}

}  // namespace ksaem
