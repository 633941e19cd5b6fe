#ifndef EBLMM_OPTIMIZE_HPP
#define EBLMM_OPTIMIZE_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace eblmm {

struct BoxOptions {
    /// Central-difference step on the optimization scale.
    double fd_step = 1e-4;
    /// Stop when a step moves every coordinate by less than this.
    double tolerance = 1e-6;
    /// Stop when the projected gradient is this small.
    double gradient_tolerance = 1e-6;
    int max_iterations = 100;
    /// Largest first step (infinity norm) before curvature is known.
    double initial_step = 1.0;
};

struct BoxResult {
    Eigen::VectorXd x;
    double value = std::numeric_limits<double>::infinity();
    int iterations = 0;
    int evaluations = 0;
    bool converged = false;
};

/// Minimizes f over lower <= x <= upper with projected BFGS, central
/// finite-difference gradients (one-sided at active bounds) and Armijo
/// backtracking along the projected path. Evaluations returning a
/// non-finite value are treated as infeasible. `on_accept` is called with
/// every accepted iterate.
inline BoxResult minimize_box(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x0,
                              const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                              const BoxOptions& options = {},
                              const std::function<void(const Eigen::VectorXd&)>& on_accept = {}) {
    using Eigen::VectorXd;
    const Eigen::Index d = x0.size();
    BoxResult out;
    auto project = [&](const VectorXd& x) { return x.cwiseMax(lower).cwiseMin(upper); };
    auto eval = [&](const VectorXd& x) {
        ++out.evaluations;
        const double v = f(x);
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    };
    auto gradient = [&](const VectorXd& x) {
        VectorXd g(d);
        for (Eigen::Index i = 0; i < d; ++i) {
            VectorXd hi = x;
            VectorXd lo = x;
            hi[i] = std::min(x[i] + options.fd_step, upper[i]);
            lo[i] = std::max(x[i] - options.fd_step, lower[i]);
            const double width = hi[i] - lo[i];
            g[i] = width > 0.0 ? (eval(hi) - eval(lo)) / width : 0.0;
        }
        return g;
    };
    // Components of g that could still decrease f without leaving the box.
    auto projected_gradient = [&](const VectorXd& x, const VectorXd& g) {
        VectorXd pg = g;
        for (Eigen::Index i = 0; i < d; ++i) {
            if ((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)) pg[i] = 0.0;
        }
        return pg;
    };

    VectorXd x = project(x0);
    double fx = eval(x);
    if (!std::isfinite(fx)) {
        out.x = x;
        out.value = fx;
        return out;
    }
    if (on_accept) on_accept(x);
    VectorXd g = gradient(x);
    Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(d, d);
    bool fresh = true;

    for (int it = 1; it <= options.max_iterations; ++it) {
        out.iterations = it;
        const VectorXd pg = projected_gradient(x, g);
        if (!pg.allFinite()) break;
        if (pg.cwiseAbs().maxCoeff() < options.gradient_tolerance) {
            out.converged = true;
            break;
        }
        VectorXd dir = -Hinv * pg;
        for (Eigen::Index i = 0; i < d; ++i) {
            if (pg[i] == 0.0) dir[i] = 0.0;
        }
        if (!(dir.dot(pg) < 0.0)) {
            Hinv.setIdentity();
            dir = -pg;
            fresh = true;
        }
        if (fresh) {
            const double len = dir.cwiseAbs().maxCoeff();
            if (len > options.initial_step) dir *= options.initial_step / len;
        }

        double t = 1.0;
        VectorXd x_new;
        double f_new = std::numeric_limits<double>::infinity();
        bool accepted = false;
        for (int k = 0; k < 40; ++k, t *= 0.5) {
            x_new = project(x + t * dir);
            if ((x_new - x).cwiseAbs().maxCoeff() < 1e-14) break;
            f_new = eval(x_new);
            if (f_new <= fx + 1e-4 * g.dot(x_new - x)) {
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            if (fresh) break;
            Hinv.setIdentity();
            fresh = true;
            continue;
        }
        if (on_accept) on_accept(x_new);
        const VectorXd s = x_new - x;
        const VectorXd g_new = gradient(x_new);
        const VectorXd y = g_new - g;
        const double step = s.cwiseAbs().maxCoeff();
        x = x_new;
        fx = f_new;
        g = g_new;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (fresh) Hinv *= sy / y.squaredNorm();
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
            Hinv = (I - rho * s * y.transpose()) * Hinv * (I - rho * y * s.transpose()) + rho * s * s.transpose();
            fresh = false;
        }
        if (step < options.tolerance) {
            out.converged = true;
            break;
        }
    }
    out.x = x;
    out.value = fx;
    return out;
}

} // namespace eblmm

#endif // EBLMM_OPTIMIZE_HPP
