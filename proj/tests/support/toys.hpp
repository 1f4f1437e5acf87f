#pragma once

// Small models with closed-form answers shared by the unit and acceptance tests.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "ksaem/likelihood.hpp"
#include "ksaem/random.hpp"

namespace toy {

inline Eigen::VectorXd v1(double x) { return Eigen::VectorXd::Constant(1, x); }

// f(t, psi) = psi for every t.
inline Eigen::VectorXd identity(const std::vector<double>& t, const Eigen::VectorXd& psi) {
    return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(t.size()), psi[0]);
}

inline ksaem::PopulationParams theta1(double mu, double omega2, double s2) {
    ksaem::PopulationParams th;
    th.mu = v1(mu);
    th.omega = Eigen::MatrixXd::Constant(1, 1, omega2);
    th.sigma_eps2 = s2;
    return th;
}

// y_ij = psi_i + eps_ij, psi_i ~ N(mu, omega2), n observations each at t = 1..n.
inline ksaem::Dataset linear_toy(int N, int n, double mu, double omega2, double s2, std::uint64_t seed) {
    ksaem::Rng rng(seed);
    ksaem::Dataset data;
    std::vector<double> t(static_cast<std::size_t>(n));
    std::iota(t.begin(), t.end(), 1.0);
    for (int i = 0; i < N; ++i) {
        const double psi = mu + std::sqrt(omega2) * rng.normal();
        Eigen::VectorXd y(n);
        for (int j = 0; j < n; ++j) y[j] = psi + std::sqrt(s2) * rng.normal();
        data.individuals.push_back({t, y});
    }
    return data;
}

// Closed-form maximum-likelihood estimate of the balanced linear toy.
inline ksaem::PopulationParams linear_toy_mle(const ksaem::Dataset& data) {
    const double N = static_cast<double>(data.N());
    const double n = static_cast<double>(data.individuals[0].y.size());
    Eigen::VectorXd means(data.N());
    double within = 0.0;
    for (Eigen::Index i = 0; i < data.N(); ++i) {
        const auto& y = data.individuals[static_cast<std::size_t>(i)].y;
        means[i] = y.mean();
        within += (y.array() - means[i]).square().sum();
    }
    const double s2 = within / (N * (n - 1.0));
    const double mu = means.mean();
    const double between = (means.array() - mu).square().sum() / N;
    return theta1(mu, between - s2 / n, s2);
}

// Standard error of the mean estimate: Var(mu_hat) = (omega2 + s2 / n) / N.
inline double linear_toy_mu_se(const ksaem::PopulationParams& theta, int N, int n) {
    return std::sqrt((theta.omega(0, 0) + theta.sigma_eps2 / n) / N);
}

}  // namespace toy
