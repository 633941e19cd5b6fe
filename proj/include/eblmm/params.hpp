#ifndef EBLMM_PARAMS_HPP
#define EBLMM_PARAMS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "eblmm/design.hpp"
#include "eblmm/error.hpp"
#include "eblmm/linalg.hpp"

namespace eblmm {

/// Model parameters theta = (beta, Sigma_1..Sigma_R, sigma^2).
struct ModelParams {
    VectorXd beta;
    std::vector<MatrixXd> sigmas;
    double sigma2 = 1.0;
};

inline void validate_params(const Design& design, const ModelParams& params) {
    if (params.beta.size() != design.p()) {
        throw ValidationError("beta has " + std::to_string(params.beta.size()) + " entries, expected " +
                                  std::to_string(design.p()),
                              "beta");
    }
    if (static_cast<int>(params.sigmas.size()) != design.num_effects()) {
        throw ValidationError("expected " + std::to_string(design.num_effects()) +
                                  " covariance matrices, got " + std::to_string(params.sigmas.size()),
                              "sigmas");
    }
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto& s = params.sigmas[r];
        const int q = design.effect(r).dim;
        if (s.rows() != q || s.cols() != q) {
            throw ValidationError("Sigma_" + std::to_string(r) + " must be " + std::to_string(q) + "x" +
                                      std::to_string(q),
                                  "sigmas");
        }
        if (!is_symmetric(s)) {
            throw ValidationError("Sigma_" + std::to_string(r) + " is not symmetric", "sigmas");
        }
        if (!is_positive_definite(s)) {
            throw ValidationError("Sigma_" + std::to_string(r) + " is not positive definite", "sigmas");
        }
    }
    if (!(params.sigma2 > 0.0) || !std::isfinite(params.sigma2)) {
        throw ValidationError("sigma2 must be positive and finite", "sigma2");
    }
}

/// Default shape = scale of the inverse-Gamma prior on sigma^2.
inline constexpr double kDefaultAlpha = 1e-3;

/// Inverse-Wishart prior on one Sigma_r in (mode, strength) form.
///
/// With m = levels and q = dim, the canonical parameters are
///   eta = b m / (1 - b) - q - 1,   Phi = (eta + q + 1) A,
/// so that the EM update is b A + (1 - b) mean_j Omega_j.
/// b = 0 is the improper flat prior (contributes nothing); b = 1 pins
/// Sigma_r to A.
struct EffectPrior {
    MatrixXd mode;
    double strength = 0.0;
    int levels = 0;

    int dim() const { return static_cast<int>(mode.rows()); }
    bool is_flat() const { return strength == 0.0; }
    bool is_pinned() const { return strength >= 1.0; }

    /// eta + q + 1 = b m / (1 - b).
    double weight() const { return strength * levels / (1.0 - strength); }
    double dof() const { return weight() - dim() - 1.0; }
    MatrixXd scale() const { return weight() * mode; }
    /// The normalizing constant exists only for eta > q - 1.
    bool is_proper() const { return !is_flat() && !is_pinned() && dof() > dim() - 1.0; }

    static EffectPrior from_canonical(double eta, const MatrixXd& phi, int levels) {
        const double w = eta + static_cast<double>(phi.rows()) + 1.0;
        return EffectPrior{phi / w, w / (levels + w), levels};
    }
};

/// Hyperparameters Theta = (lambda, {A_r, b_r}, alpha).
///
/// lambda = 0 and alpha = 0 select improper flat priors on beta and sigma^2
/// that contribute zero to the log-prior.
struct PriorSpec {
    double lambda = 0.0;
    double alpha = kDefaultAlpha;
    std::vector<EffectPrior> effects;

    bool flat_beta() const { return lambda == 0.0; }
    bool flat_sigma2() const { return alpha == 0.0; }

    /// lambda = 0, alpha = 0, b_r = 0: the MAP coincides with ML.
    static PriorSpec flat(const Design& design) {
        PriorSpec out;
        out.lambda = 0.0;
        out.alpha = 0.0;
        for (const auto& e : design.effects()) {
            out.effects.push_back({MatrixXd::Identity(e.dim, e.dim), 0.0, e.levels});
        }
        return out;
    }

    /// Same mode scale a I and strength b for every effect.
    static PriorSpec uniform(const Design& design, double lambda, double a, double b,
                             double alpha = kDefaultAlpha) {
        PriorSpec out;
        out.lambda = lambda;
        out.alpha = alpha;
        for (const auto& e : design.effects()) {
            out.effects.push_back({a * MatrixXd::Identity(e.dim, e.dim), b, e.levels});
        }
        return out;
    }
};

inline void validate_prior(const Design& design, const PriorSpec& prior) {
    if (!(prior.lambda >= 0.0) || !std::isfinite(prior.lambda)) {
        throw ValidationError("lambda must be finite and nonnegative", "lambda");
    }
    if (!(prior.alpha >= 0.0) || !std::isfinite(prior.alpha)) {
        throw ValidationError("alpha must be finite and nonnegative", "alpha");
    }
    if (static_cast<int>(prior.effects.size()) != design.num_effects()) {
        throw ValidationError("prior has " + std::to_string(prior.effects.size()) +
                                  " effect blocks, design has " + std::to_string(design.num_effects()),
                              "prior.effects");
    }
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto& e = prior.effects[r];
        const auto& d = design.effect(r);
        if (e.levels != d.levels) {
            throw ValidationError("prior for effect " + std::to_string(r) + " was built for " +
                                      std::to_string(e.levels) + " levels, design has " +
                                      std::to_string(d.levels),
                                  "prior.effects");
        }
        if (e.mode.rows() != d.dim || e.mode.cols() != d.dim) {
            throw ValidationError("prior mode of effect " + std::to_string(r) + " must be " +
                                      std::to_string(d.dim) + "x" + std::to_string(d.dim),
                                  "prior.effects");
        }
        if (!(e.strength >= 0.0 && e.strength <= 1.0)) {
            throw ValidationError("prior strength of effect " + std::to_string(r) + " must lie in [0, 1]",
                                  "prior.effects");
        }
        if (!e.is_flat() && (!is_symmetric(e.mode) || !is_positive_definite(e.mode))) {
            throw ValidationError("prior mode of effect " + std::to_string(r) +
                                      " must be symmetric positive definite",
                                  "prior.effects");
        }
    }
}

/// Posterior mean and second moment of every gamma_{r,j} given y.
struct ConditionalMoments {
    std::vector<std::vector<VectorXd>> mu;
    std::vector<std::vector<MatrixXd>> omega;
    /// tr(Z Cov(gamma | y) Z^T), the expected squared norm of the latent
    /// fit around its conditional mean, including all cross-level terms.
    double latent_trace = 0.0;
};

struct FitResult {
    ModelParams params;
    std::vector<double> log_posterior_trace;
    int iterations = 0;
    bool converged = false;
    PriorSpec prior;
    std::optional<double> marginal_log_likelihood;
    /// lambda = 0: the beta block of the prior was the improper flat prior.
    bool flat_beta_prior = false;
    /// -H was not positive definite (or sigma^2 hit the boundary) and its
    /// eigenvalues were clipped in the Laplace approximation.
    bool hessian_clipped = false;
};

} // namespace eblmm

#endif // EBLMM_PARAMS_HPP
