#ifndef EBLMM_PREDICT_HPP
#define EBLMM_PREDICT_HPP

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "eblmm/design.hpp"
#include "eblmm/error.hpp"
#include "eblmm/linalg.hpp"
#include "eblmm/model.hpp"
#include "eblmm/params.hpp"

namespace eblmm {

/// New observations to predict given an observed design.
///
/// `group_of[r][i]` is the level of new observation i in effect r; values
/// below m_r refer to observed levels, values >= m_r are fresh levels
/// (equal values denote the same fresh level).
struct PredictionProblem {
    Design observed;
    MatrixXd X_new;
    std::vector<std::vector<int>> group_of;
    std::vector<MatrixXd> U_new;
};

struct GaussianPredictive {
    VectorXd mean;
    MatrixXd covariance;
};

inline void validate_problem(const PredictionProblem& problem) {
    const auto& obs = problem.observed;
    const Eigen::Index k = problem.X_new.rows();
    if (problem.X_new.cols() != obs.p()) {
        throw ValidationError("X_new has " + std::to_string(problem.X_new.cols()) + " columns, expected " +
                                  std::to_string(obs.p()),
                              "X_new");
    }
    if (static_cast<int>(problem.group_of.size()) != obs.num_effects() ||
        static_cast<int>(problem.U_new.size()) != obs.num_effects()) {
        throw ValidationError("new data must describe all " + std::to_string(obs.num_effects()) + " effects",
                              "effects");
    }
    if (!problem.X_new.allFinite()) throw ValidationError("non-finite entries in X_new", "X_new");
    for (int r = 0; r < obs.num_effects(); ++r) {
        const auto& e = obs.effect(r);
        if (static_cast<Eigen::Index>(problem.group_of[r].size()) != k) {
            throw ValidationError("grouping of new data for " + e.name + " has the wrong length", e.name);
        }
        if (problem.U_new[r].rows() != k || problem.U_new[r].cols() != e.dim) {
            throw ValidationError("U_new of " + e.name + " must be " + std::to_string(k) + "x" +
                                      std::to_string(e.dim),
                                  e.name);
        }
        if (!problem.U_new[r].allFinite()) throw ValidationError("non-finite entries in U_new", e.name);
        for (int g : problem.group_of[r]) {
            if (g < 0) throw ValidationError("negative level in new data for " + e.name, e.name);
        }
    }
}

/// Conditional distribution of y_new given y_obs under `params`.
inline GaussianPredictive predict_conditional(const PredictionProblem& problem, const ModelParams& params) {
    validate_problem(problem);
    const Design& obs = problem.observed;
    validate_params(obs, params);
    const Eigen::Index k = problem.X_new.rows();

    MatrixXd V_nn = MatrixXd::Zero(k, k);
    V_nn.diagonal().setConstant(params.sigma2);
    MatrixXd C = MatrixXd::Zero(k, obs.n());
    for (int r = 0; r < obs.num_effects(); ++r) {
        const auto& e = obs.effect(r);
        const MatrixXd& sigma = params.sigmas[r];
        const auto& g = problem.group_of[r];
        const MatrixXd US = problem.U_new[r] * sigma;
        for (Eigen::Index i = 0; i < k; ++i) {
            for (Eigen::Index l = 0; l < k; ++l) {
                if (g[i] == g[l]) V_nn(i, l) += US.row(i).dot(problem.U_new[r].row(l));
            }
            if (g[i] < e.levels) {
                for (int row : e.rows_by_level[g[i]]) C(i, row) += US.row(i).dot(e.U.row(row));
            }
        }
    }

    const MarginalFactor factor(obs, params);
    GaussianPredictive out;
    out.mean = problem.X_new * params.beta + C * factor.precision_resid;
    const MatrixXd W = factor.chol.inverse_lower() * C.transpose();
    MatrixXd cov = V_nn - W.transpose() * W;
    out.covariance = 0.5 * (cov + cov.transpose());
    return out;
}

/// c(theta) = [X^T V^{-1} X]^{-1}.
inline MatrixXd fixed_effect_covariance(const Design& design, const ModelParams& params) {
    validate_params(design, params);
    const SpdFactor chol(assemble_marginal_covariance(design, params), "marginal covariance V");
    const MatrixXd W = chol.inverse_lower() * design.X();
    Eigen::LLT<MatrixXd> info(W.transpose() * W);
    if (info.info() != Eigen::Success || info.rcond() < 1e-14) {
        throw NumericalError("X^T V^{-1} X is singular; X is rank deficient");
    }
    MatrixXd out = info.solve(MatrixXd::Identity(design.p(), design.p()));
    return 0.5 * (out + out.transpose());
}

/// KL(p || q) between two Gaussians of equal dimension.
inline double kl_gaussian(const GaussianPredictive& p, const GaussianPredictive& q) {
    const Eigen::Index k = p.mean.size();
    if (q.mean.size() != k || p.covariance.rows() != k || q.covariance.rows() != k || p.covariance.cols() != k ||
        q.covariance.cols() != k) {
        throw ValidationError("KL divergence needs distributions of equal dimension", "dimension");
    }
    const SpdFactor cq(q.covariance, "covariance of q");
    const SpdFactor cp(p.covariance, "covariance of p");
    const MatrixXd L = cq.inverse_lower();
    const VectorXd diff = L * (q.mean - p.mean);
    const double trace = (L * cp.lower()).squaredNorm();
    const double value =
        0.5 * (trace + diff.squaredNorm() - static_cast<double>(k) + cq.log_det() - cp.log_det());
    return value < 0.0 ? 0.0 : value;
}

namespace detail {
inline void require_same_length(const VectorXd& a, const VectorXd& b) {
    if (a.size() != b.size() || a.size() == 0) {
        throw ValidationError("vectors must be non-empty and of equal length", "length");
    }
}
} // namespace detail

/// ||a - b||^2 / n: squared prediction error averaged over the n test points.
inline double rmse_conditional(const VectorXd& a, const VectorXd& b) {
    detail::require_same_length(a, b);
    return (a - b).squaredNorm() / static_cast<double>(a.size());
}

/// ||a - b||^2 without a divisor.
inline double rmse_conditional_total(const VectorXd& a, const VectorXd& b) {
    detail::require_same_length(a, b);
    return (a - b).squaredNorm();
}

} // namespace eblmm

#endif // EBLMM_PREDICT_HPP
