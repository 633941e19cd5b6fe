#ifndef EBLMM_TEST_SUPPORT_HPP
#define EBLMM_TEST_SUPPORT_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "eblmm/design.hpp"
#include "eblmm/laplace.hpp"
#include "eblmm/params.hpp"

namespace testing_support {

using eblmm::MatrixXd;
using eblmm::VectorXd;

struct EffectShape {
    int levels;
    int dim;
};

inline double normal(std::mt19937_64& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Intercept plus standard normal columns.
inline MatrixXd covariates(std::mt19937_64& rng, int n, int cols) {
    MatrixXd out(n, cols);
    for (int i = 0; i < n; ++i) {
        out(i, 0) = 1.0;
        for (int k = 1; k < cols; ++k) out(i, k) = normal(rng);
    }
    return out;
}

/// Every level is used at least once; remaining rows get random levels.
inline std::vector<int> grouping(std::mt19937_64& rng, int n, int levels) {
    std::vector<int> g(n);
    for (int i = 0; i < n; ++i) g[i] = i < levels ? i : static_cast<int>(rng() % levels);
    std::shuffle(g.begin(), g.end(), rng);
    return g;
}

inline eblmm::ModelDesign random_design(std::mt19937_64& rng, int n, int p, const std::vector<EffectShape>& shapes) {
    eblmm::ModelDesign d;
    d.X = covariates(rng, n, p);
    d.y = VectorXd(n);
    for (int i = 0; i < n; ++i) d.y[i] = normal(rng);
    int r = 0;
    for (const auto& s : shapes) {
        eblmm::RandomEffectSpec e;
        e.name = "g" + std::to_string(r++);
        e.levels = s.levels;
        e.group_of = grouping(rng, n, s.levels);
        e.U = covariates(rng, n, s.dim);
        d.effects.push_back(std::move(e));
    }
    return d;
}

inline MatrixXd random_spd(std::mt19937_64& rng, int q, double scale = 1.0) {
    MatrixXd L(q, q);
    for (int i = 0; i < q; ++i) {
        for (int k = 0; k < q; ++k) L(i, k) = normal(rng);
    }
    MatrixXd s = 0.5 * L * L.transpose() / q + 0.5 * MatrixXd::Identity(q, q);
    return scale * 0.5 * (s + s.transpose());
}

inline eblmm::ModelParams random_params(std::mt19937_64& rng, const eblmm::Design& design) {
    eblmm::ModelParams p;
    p.beta = VectorXd(design.p());
    for (int k = 0; k < design.p(); ++k) p.beta[k] = normal(rng);
    for (const auto& e : design.effects()) p.sigmas.push_back(random_spd(rng, e.dim));
    p.sigma2 = uniform(rng, 0.5, 1.5);
    return p;
}

/// Draws y from the model itself so that fitted parameters are interior.
inline VectorXd draw_response(std::mt19937_64& rng, const eblmm::Design& design, const eblmm::ModelParams& truth) {
    VectorXd y = design.X() * truth.beta;
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto& e = design.effect(r);
        Eigen::LLT<MatrixXd> llt(truth.sigmas[r]);
        const MatrixXd L = llt.matrixL();
        for (int j = 0; j < e.levels; ++j) {
            VectorXd z(e.dim);
            for (int k = 0; k < e.dim; ++k) z[k] = normal(rng);
            const VectorXd g = L * z;
            for (int i : e.rows_by_level[j]) y[i] += e.U.row(i).dot(g);
        }
    }
    for (int i = 0; i < design.n(); ++i) y[i] += std::sqrt(truth.sigma2) * normal(rng);
    return y;
}

/// Dense K_r . U_r (face splitting), built row by row as kron(k_i, u_i).
inline MatrixXd dense_face_split(const std::vector<int>& group_of, const MatrixXd& U, int levels) {
    const int n = static_cast<int>(U.rows());
    const int q = static_cast<int>(U.cols());
    MatrixXd Z = MatrixXd::Zero(n, levels * q);
    for (int i = 0; i < n; ++i) {
        VectorXd k = VectorXd::Zero(levels);
        k[group_of[i]] = 1.0;
        for (int j = 0; j < levels; ++j) {
            for (int c = 0; c < q; ++c) Z(i, j * q + c) = k[j] * U(i, c);
        }
    }
    return Z;
}

inline MatrixXd kron_identity(int m, const MatrixXd& S) {
    const int q = static_cast<int>(S.rows());
    MatrixXd W = MatrixXd::Zero(m * q, m * q);
    for (int j = 0; j < m; ++j) W.block(j * q, j * q, q, q) = S;
    return W;
}

inline MatrixXd dense_covariance(const eblmm::ModelDesign& d, const eblmm::ModelParams& p) {
    const int n = static_cast<int>(d.y.size());
    MatrixXd V = p.sigma2 * MatrixXd::Identity(n, n);
    for (std::size_t r = 0; r < d.effects.size(); ++r) {
        const auto& e = d.effects[r];
        const MatrixXd Z = dense_face_split(e.group_of, e.U, e.levels);
        V += Z * kron_identity(e.levels, p.sigmas[r]) * Z.transpose();
    }
    return V;
}

/// Multivariate normal log-density with explicit inverse and determinant.
inline double dense_log_density(const VectorXd& x, const VectorXd& mean, const MatrixXd& cov) {
    const double n = static_cast<double>(x.size());
    const Eigen::FullPivLU<MatrixXd> lu(cov);
    const VectorXd r = x - mean;
    return -0.5 * n * std::log(2.0 * M_PI) - 0.5 * std::log(lu.determinant()) - 0.5 * r.dot(lu.inverse() * r);
}

/// Central finite-difference Hessian of f at x.
inline MatrixXd fd_hessian(const std::function<double(const VectorXd&)>& f, const VectorXd& x, double h) {
    const Eigen::Index d = x.size();
    MatrixXd H(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index k = i; k < d; ++k) {
            auto at = [&](double si, double sk) {
                VectorXd y = x;
                y[i] += si * h;
                y[k] += sk * h;
                return f(y);
            };
            const double v = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * h * h);
            H(i, k) = v;
            H(k, i) = v;
        }
    }
    return H;
}

inline VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x, double h) {
    VectorXd g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        VectorXd a = x, b = x;
        a[i] += h;
        b[i] -= h;
        g[i] = (f(a) - f(b)) / (2.0 * h);
    }
    return g;
}

/// max |a - b| / max(|b|_max, floor) over all entries.
inline double max_relative_error(const MatrixXd& a, const MatrixXd& b, double floor = 1e-12) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), floor);
}

} // namespace testing_support

#endif // EBLMM_TEST_SUPPORT_HPP
