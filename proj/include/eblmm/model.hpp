#ifndef EBLMM_MODEL_HPP
#define EBLMM_MODEL_HPP

#include <Eigen/Dense>

#include <cmath>

#include "eblmm/design.hpp"
#include "eblmm/linalg.hpp"
#include "eblmm/params.hpp"

namespace eblmm {

/// V = sigma^2 I + sum_r Z_r (I_{m_r} (x) Sigma_r) Z_r^T, accumulated one level
/// block U_{r,j} Sigma_r U_{r,j}^T at a time.
inline MatrixXd assemble_marginal_covariance(const Design& design, const ModelParams& params) {
    const int n = design.n();
    MatrixXd V = MatrixXd::Zero(n, n);
    V.diagonal().setConstant(params.sigma2);
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto& e = design.effect(r);
        const MatrixXd& sigma = params.sigmas[r];
        for (int j = 0; j < e.levels; ++j) {
            const auto& rows = e.rows_by_level[j];
            const MatrixXd Uj = e.level_block(j);
            const MatrixXd block = Uj * sigma * Uj.transpose();
            V(rows, rows) += block;
        }
    }
    return V;
}

/// Factorized marginal model at fixed parameters. Shared by the likelihood,
/// the E-step and the Hessian so V is factorized once per evaluation.
struct MarginalFactor {
    SpdFactor chol;
    VectorXd resid;      // y - X beta
    VectorXd precision_resid; // V^{-1} (y - X beta)
    double log_det = 0.0;
    double quad = 0.0;

    MarginalFactor(const Design& design, const ModelParams& params)
        : chol(assemble_marginal_covariance(design, params), "marginal covariance V") {
        resid = design.y() - design.X() * params.beta;
        precision_resid = chol.solve(resid);
        log_det = chol.log_det();
        quad = resid.dot(precision_resid);
    }

    double log_likelihood() const {
        return -0.5 * (static_cast<double>(resid.size()) * kLog2Pi + log_det + quad);
    }
};

inline double log_likelihood(const Design& design, const ModelParams& params) {
    return MarginalFactor(design, params).log_likelihood();
}

namespace detail {

/// Inverse-Wishart log-density of sigma under one effect prior; zero for the
/// flat (b = 0) and pinned (b = 1) conventions. Improper priors with
/// eta <= q - 1 contribute the kernel only.
inline double log_inverse_wishart(const MatrixXd& sigma, const EffectPrior& prior) {
    if (prior.is_flat() || prior.is_pinned()) {
        return 0.0;
    }
    const int q = prior.dim();
    const double eta = prior.dof();
    const MatrixXd phi = prior.scale();
    const SpdFactor chol(sigma, "Sigma");
    const double log_det_sigma = chol.log_det();
    double out = -0.5 * (eta + q + 1.0) * log_det_sigma - 0.5 * chol.solve(phi).trace();
    if (prior.is_proper()) {
        const double log_det_phi = SpdFactor(phi, "Phi").log_det();
        out += 0.5 * eta * log_det_phi - 0.5 * eta * q * std::log(2.0) -
               log_multivariate_gamma(q, 0.5 * eta);
    }
    return out;
}

} // namespace detail

/// log pi(theta | Theta) with every Theta-dependent normalizing constant.
inline double log_prior(const ModelParams& params, const PriorSpec& prior) {
    double out = 0.0;
    const double s2 = params.sigma2;
    const double log_s2 = std::log(s2);
    if (!prior.flat_beta()) {
        const double p = static_cast<double>(params.beta.size());
        out += 0.5 * p * (std::log(prior.lambda) - kLog2Pi - log_s2) -
               0.5 * prior.lambda * params.beta.squaredNorm() / s2;
    }
    if (!prior.flat_sigma2()) {
        const double a = prior.alpha;
        out += a * std::log(a) - std::lgamma(a) - (a + 1.0) * log_s2 - a / s2;
    }
    for (std::size_t r = 0; r < prior.effects.size(); ++r) {
        out += detail::log_inverse_wishart(params.sigmas[r], prior.effects[r]);
    }
    return out;
}

inline double log_posterior_unnormalized(const Design& design, const ModelParams& params,
                                         const PriorSpec& prior) {
    return log_likelihood(design, params) + log_prior(params, prior);
}

} // namespace eblmm

#endif // EBLMM_MODEL_HPP
