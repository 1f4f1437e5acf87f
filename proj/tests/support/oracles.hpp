#pragma once

// Brute-force reference computations used by the unit and acceptance tests. They
// deliberately avoid the library's factorisations (dense LU inverses, plain loops).

#include <cmath>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

inline double kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double phi) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::exp(-phi * s);
}

// Rows of X -> regression matrix; linear = [1, x_1, ..., x_d], constant = [1].
inline Eigen::MatrixXd regressors(const Eigen::MatrixXd& X, bool linear) {
    Eigen::MatrixXd H(X.rows(), linear ? X.cols() + 1 : 1);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        H(i, 0) = 1.0;
        if (linear)
            for (Eigen::Index k = 0; k < X.cols(); ++k) H(i, k + 1) = X(i, k);
    }
    return H;
}

inline Eigen::MatrixXd correlation(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double phi) {
    Eigen::MatrixXd K(A.rows(), B.rows());
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        for (Eigen::Index j = 0; j < B.rows(); ++j) K(i, j) = kernel(A.row(i).transpose(), B.row(j).transpose(), phi);
    return K;
}

struct Gls {
    Eigen::VectorXd beta;
    double sigma2;
    double loglik;
};

// Generalised least squares with an explicit inverse of K + nugget I.
inline Gls gls(const Eigen::MatrixXd& X, const Eigen::VectorXd& z, bool linear, double phi, double nugget) {
    const auto n = X.rows();
    Eigen::MatrixXd S = correlation(X, X, phi);
    S.diagonal().array() += nugget;
    const Eigen::MatrixXd Si = S.fullPivLu().inverse();
    const Eigen::MatrixXd H = regressors(X, linear);
    Gls g;
    g.beta = (H.transpose() * Si * H).fullPivLu().solve(H.transpose() * Si * z);
    const Eigen::VectorXd r = z - H * g.beta;
    g.sigma2 = r.dot(Si * r) / static_cast<double>(n);
    const double logdet = std::log(S.fullPivLu().determinant());
    g.loglik = -0.5 * (n * std::log(2.0 * M_PI * g.sigma2) + logdet + n);
    return g;
}

struct Conditional {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

// Joint Gaussian [f(Xs); f(X)] with mean H beta and covariance sigma2 (K + nugget I on the
// design block); conditioned on f(X) = z through the Schur complement.
inline Conditional condition(const Eigen::MatrixXd& X, const Eigen::VectorXd& z, const Eigen::MatrixXd& Xs,
                             bool linear, const Eigen::VectorXd& beta, double sigma2, double phi, double nugget) {
    const auto n = X.rows(), m = Xs.rows();
    Eigen::MatrixXd all(m + n, X.cols());
    all << Xs, X;
    Eigen::MatrixXd joint = sigma2 * correlation(all, all, phi);
    joint.bottomRightCorner(n, n).diagonal().array() += sigma2 * nugget;
    const Eigen::VectorXd prior = regressors(all, linear) * beta;
    const Eigen::MatrixXd Sdd_inv = joint.bottomRightCorner(n, n).fullPivLu().inverse();
    const Eigen::MatrixXd Ssd = joint.topRightCorner(m, n);
    Conditional c;
    c.mean = prior.head(m) + Ssd * Sdd_inv * (z - prior.tail(n));
    c.cov = joint.topLeftCorner(m, m) - Ssd * Sdd_inv * Ssd.transpose();
    return c;
}

// log N(y; mean, cov) through an LU determinant and inverse.
inline double mvn_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    const auto lu = cov.fullPivLu();
    const Eigen::VectorXd r = y - mean;
    return -0.5 * (static_cast<double>(y.size()) * std::log(2.0 * M_PI) + std::log(lu.determinant()) +
                   r.dot(lu.solve(r)));
}

}  // namespace oracle
