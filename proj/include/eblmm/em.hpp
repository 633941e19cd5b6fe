#ifndef EBLMM_EM_HPP
#define EBLMM_EM_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "eblmm/design.hpp"
#include "eblmm/error.hpp"
#include "eblmm/linalg.hpp"
#include "eblmm/model.hpp"
#include "eblmm/params.hpp"

namespace eblmm {

struct EmSettings {
    int max_iterations = 500;
    /// Stop once both the relative log-posterior change
    /// |dlp| / (1 + |lp|) and the largest relative parameter change
    /// |dtheta| / (1 + |theta|) fall below this value.
    double tolerance = 1e-8;
    /// Starting point; the scale-aware default is used when empty.
    std::optional<ModelParams> init;
};

inline void validate_settings(const EmSettings& settings) {
    if (settings.max_iterations < 1) {
        throw ValidationError("max_iterations must be at least 1", "max_iterations");
    }
    if (!(settings.tolerance > 0.0)) {
        throw ValidationError("tolerance must be positive", "tolerance");
    }
}

namespace detail {

inline ConditionalMoments e_step(const Design& design, const ModelParams& params,
                                 const MarginalFactor& factor) {
    const MatrixXd linv = factor.chol.inverse_lower();
    const VectorXd whitened = linv * factor.resid;
    const double s2 = params.sigma2;

    ConditionalMoments out;
    out.latent_trace = s2 * design.n() - s2 * s2 * linv.squaredNorm();
    out.mu.resize(design.num_effects());
    out.omega.resize(design.num_effects());
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto& e = design.effect(r);
        const MatrixXd& sigma = params.sigmas[r];
        // B = L^{-1} Z_r so that Z_r^T V^{-1} Z_r = B^T B.
        const MatrixXd B = linv * e.Z;
        const VectorXd score = B.transpose() * whitened;
        out.mu[r].resize(e.levels);
        out.omega[r].resize(e.levels);
        for (int j = 0; j < e.levels; ++j) {
            const auto Bj = B.middleCols(static_cast<Eigen::Index>(j) * e.dim, e.dim);
            const MatrixXd info = Bj.transpose() * Bj;
            VectorXd mu = sigma * score.segment(static_cast<Eigen::Index>(j) * e.dim, e.dim);
            MatrixXd omega = sigma - sigma * info * sigma + mu * mu.transpose();
            out.omega[r][j] = 0.5 * (omega + omega.transpose());
            out.mu[r][j] = std::move(mu);
        }
    }
    return out;
}

inline VectorXd latent_fit(const Design& design, const ConditionalMoments& moments) {
    VectorXd out = VectorXd::Zero(design.n());
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto& e = design.effect(r);
        VectorXd stacked(static_cast<Eigen::Index>(e.levels) * e.dim);
        for (int j = 0; j < e.levels; ++j) {
            stacked.segment(static_cast<Eigen::Index>(j) * e.dim, e.dim) = moments.mu[r][j];
        }
        out += e.Z * stacked;
    }
    return out;
}

/// Factor of X^T X + lambda I, reused across iterations of one fit.
class RidgeSystem {
public:
    RidgeSystem(const Design& design, double lambda) : X_(design.X()) {
        MatrixXd gram = X_.transpose() * X_;
        gram.diagonal().array() += lambda;
        llt_.compute(gram);
        const bool ok = llt_.info() == Eigen::Success &&
                        (llt_.matrixLLT().diagonal().array() > 0.0).all() && llt_.rcond() > 1e-13;
        if (!ok) {
            throw NumericalError("X^T X + lambda I is singular; X is rank deficient, use lambda > 0");
        }
    }

    VectorXd solve(const VectorXd& target) const { return llt_.solve(X_.transpose() * target); }

private:
    const MatrixXd& X_;
    Eigen::LLT<MatrixXd> llt_;
};

inline ModelParams m_step(const Design& design, const ConditionalMoments& moments, const PriorSpec& prior,
                          const RidgeSystem& ridge) {
    ModelParams next;
    const VectorXd zmu = latent_fit(design, moments);
    next.beta = ridge.solve(design.y() - zmu);

    next.sigmas.resize(design.num_effects());
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto& e = design.effect(r);
        const auto& pr = prior.effects[r];
        if (pr.is_pinned()) {
            next.sigmas[r] = mirror_lower(pr.mode);
            continue;
        }
        MatrixXd data_term = MatrixXd::Zero(e.dim, e.dim);
        for (const auto& omega : moments.omega[r]) {
            data_term += omega;
        }
        data_term /= static_cast<double>(e.levels);
        const double b = pr.strength;
        MatrixXd update = (1.0 - b) * data_term;
        if (!pr.is_flat()) {
            update += b * pr.mode;
        }
        next.sigmas[r] = mirror_lower(update);
    }

    const VectorXd fit_resid = design.y() - design.X() * next.beta - zmu;
    double numerator = fit_resid.squaredNorm() + moments.latent_trace;
    double denominator = design.n();
    if (!prior.flat_beta()) {
        numerator += prior.lambda * next.beta.squaredNorm();
        denominator += design.p();
    }
    if (!prior.flat_sigma2()) {
        numerator += 2.0 * prior.alpha;
        denominator += 2.0 * (prior.alpha + 1.0);
    }
    next.sigma2 = numerator / denominator;
    return next;
}

inline double max_relative_change(const ModelParams& a, const ModelParams& b) {
    auto rel = [](const auto& x, const auto& y) {
        return ((x - y).array().abs() / (1.0 + y.array().abs())).maxCoeff();
    };
    double out = rel(a.beta, b.beta);
    for (std::size_t r = 0; r < a.sigmas.size(); ++r) {
        out = std::max(out, rel(a.sigmas[r], b.sigmas[r]));
    }
    return std::max(out, std::abs(a.sigma2 - b.sigma2) / (1.0 + std::abs(b.sigma2)));
}

inline double sample_variance(const VectorXd& y) {
    if (y.size() < 2) return 0.0;
    return (y.array() - y.mean()).square().sum() / static_cast<double>(y.size() - 1);
}

} // namespace detail

/// Conditional moments of the random effects given y at `params`.
inline ConditionalMoments e_step(const Design& design, const ModelParams& params) {
    validate_params(design, params);
    return detail::e_step(design, params, MarginalFactor(design, params));
}

/// Closed-form maximizer of the E-step surrogate.
inline ModelParams m_step_map(const Design& design, const ConditionalMoments& moments, const PriorSpec& prior,
                              const ModelParams& current) {
    validate_params(design, current);
    validate_prior(design, prior);
    return detail::m_step(design, moments, prior, detail::RidgeSystem(design, prior.lambda));
}

/// Default starting point: ridge/OLS beta on X alone, Sigma_r = I var(y) / (R+1),
/// sigma^2 = var(y) / (R+1). Pinned effects start at their prior mode.
inline ModelParams default_init(const Design& design, const PriorSpec& prior) {
    const detail::RidgeSystem ridge(design, prior.lambda);
    ModelParams out;
    out.beta = ridge.solve(design.y());
    double v = detail::sample_variance(design.y());
    if (!(v > 0.0) || !std::isfinite(v)) {
        v = 1.0;
    }
    const double share = v / (design.num_effects() + 1.0);
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto& e = design.effect(r);
        if (prior.effects[r].is_pinned()) {
            out.sigmas.push_back(mirror_lower(prior.effects[r].mode));
        } else {
            out.sigmas.push_back(share * MatrixXd::Identity(e.dim, e.dim));
        }
    }
    out.sigma2 = share;
    return out;
}

/// One full EM update from `params`.
inline ModelParams em_iteration(const Design& design, const ModelParams& params, const PriorSpec& prior) {
    validate_params(design, params);
    validate_prior(design, prior);
    const MarginalFactor factor(design, params);
    return detail::m_step(design, detail::e_step(design, params, factor), prior,
                          detail::RidgeSystem(design, prior.lambda));
}

/// MAP estimate of theta for fixed hyperparameters by EM.
inline FitResult fit_map(const Design& design, const PriorSpec& prior, const EmSettings& settings = {}) {
    validate_prior(design, prior);
    validate_settings(settings);
    const detail::RidgeSystem ridge(design, prior.lambda);

    ModelParams params = settings.init ? *settings.init : default_init(design, prior);
    validate_params(design, params);
    for (int r = 0; r < design.num_effects(); ++r) {
        if (prior.effects[r].is_pinned()) {
            params.sigmas[r] = mirror_lower(prior.effects[r].mode);
        }
    }

    FitResult result;
    result.prior = prior;
    result.flat_beta_prior = prior.flat_beta();

    auto factor = std::make_unique<MarginalFactor>(design, params);
    double lp = factor->log_likelihood() + log_prior(params, prior);
    result.log_posterior_trace.push_back(lp);

    for (int it = 1; it <= settings.max_iterations; ++it) {
        const ConditionalMoments moments = detail::e_step(design, params, *factor);
        ModelParams next = detail::m_step(design, moments, prior, ridge);
        auto next_factor = std::make_unique<MarginalFactor>(design, next);
        const double next_lp = next_factor->log_likelihood() + log_prior(next, prior);
        const double lp_change = std::abs(next_lp - lp) / (1.0 + std::abs(lp));
        const double param_change = detail::max_relative_change(next, params);

        params = std::move(next);
        factor = std::move(next_factor);
        lp = next_lp;
        result.log_posterior_trace.push_back(lp);
        result.iterations = it;
        if (lp_change < settings.tolerance && param_change < settings.tolerance) {
            result.converged = true;
            break;
        }
    }
    result.params = std::move(params);
    return result;
}

/// Maximum-likelihood estimate: EM under the flat-prior convention.
inline FitResult fit_ml(const Design& design, const EmSettings& settings = {}) {
    return fit_map(design, PriorSpec::flat(design), settings);
}

} // namespace eblmm

#endif // EBLMM_EM_HPP
