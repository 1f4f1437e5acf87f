#pragma once

#include <cstdint>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace ksaem {

/// Axis-aligned bounded domain. lower[k] < upper[k] for every k.
struct Box {
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;

    Box() = default;
    Box(Eigen::VectorXd lo, Eigen::VectorXd hi);

    Eigen::Index dim() const { return lower.size(); }
    Eigen::VectorXd width() const { return upper - lower; }
    bool contains(const Eigen::VectorXd& x) const;
    /// Throws DomainError if the box is empty or degenerate in some coordinate.
    void validate() const;
};

/// A design of numerical experiments: n_D distinct points (rows) inside a box.
struct Design {
    Eigen::MatrixXd points;  // n_D x d
    Box box;
    std::uint64_t seed = 0;

    Eigen::Index size() const { return points.rows(); }
    Eigen::Index dim() const { return points.cols(); }
    Eigen::VectorXd point(Eigen::Index k) const { return points.row(k).transpose(); }
    bool has_duplicates() const;
};

struct LhsOptions {
    int candidates = 50;  // maximin re-draws
};

/// Latin hypercube design with maximin selection among `candidates` draws.
/// Each marginal has exactly one point per equal-width stratum. n_D = 1 is placed
/// at the box centre.
Design lhs_design(const Box& box, Eigen::Index n_points, std::uint64_t seed,
                  const LhsOptions& opts = {});

/// Append `n_new` points to a design by greedy farthest-point selection from a
/// uniform candidate pool. The result contains the input design as its first rows,
/// which gives nested designs D ⊂ D'.
Design extend_design(const Design& base, Eigen::Index n_new, std::uint64_t seed,
                     int pool_per_point = 200);

/// Smallest pairwise Euclidean distance between design points (infinity if n_D < 2).
double min_pairwise_distance(const Eigen::MatrixXd& points);

struct CoverageOptions {
    double grid_cap = 1e6;          // max number of grid evaluation points
    bool monte_carlo_fallback = true;
    Eigen::Index mc_samples = 1000000;
};

/// Approximates a_D = sup_x min_k ||x - x_k|| over the design box, from below.
/// Uses a regular grid of resolution^d points; when that exceeds the cap either
/// falls back to uniform Monte Carlo sampling or throws ResourceError.
double covering_distance(const Design& design, int resolution, const CoverageOptions& opts = {});

/// Covering distance restricted to an explicit set of evaluation points (rows).
double covering_distance_at(const Eigen::MatrixXd& points, const Eigen::MatrixXd& eval);

std::string design_to_csv(const Design& design);
nlohmann::json design_to_json(const Design& design);
Design design_from_json(const nlohmann::json& j);

nlohmann::json box_to_json(const Box& box);
Box box_from_json(const nlohmann::json& j);

}  // namespace ksaem
