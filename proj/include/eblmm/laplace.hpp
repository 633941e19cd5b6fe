#ifndef EBLMM_LAPLACE_HPP
#define EBLMM_LAPLACE_HPP

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "eblmm/design.hpp"
#include "eblmm/em.hpp"
#include "eblmm/linalg.hpp"
#include "eblmm/model.hpp"
#include "eblmm/params.hpp"

namespace eblmm {

/// Flattening of theta: beta (p entries), then for each effect the lower
/// triangle of Sigma_r row by row ((0,0), (1,0), (1,1), (2,0), ...), then sigma^2.
class ParamCoordinates {
public:
    ParamCoordinates() = default;

    ParamCoordinates(int p, std::vector<int> dims) : p_(p), dims_(std::move(dims)) {
        int offset = p_;
        for (int q : dims_) {
            offsets_.push_back(offset);
            offset += q * (q + 1) / 2;
        }
        size_ = offset + 1;
    }

    explicit ParamCoordinates(const Design& design) : ParamCoordinates(design.p(), dims_of(design)) {}

    static ParamCoordinates of(const ModelParams& params) {
        std::vector<int> dims;
        for (const auto& s : params.sigmas) dims.push_back(static_cast<int>(s.rows()));
        return ParamCoordinates(static_cast<int>(params.beta.size()), std::move(dims));
    }

    int size() const { return size_; }
    int p() const { return p_; }
    int num_effects() const { return static_cast<int>(dims_.size()); }
    int dim(int r) const { return dims_[r]; }
    int sigma_offset(int r) const { return offsets_[r]; }
    int sigma_count(int r) const { return dims_[r] * (dims_[r] + 1) / 2; }
    /// Index of Sigma_r(a, b) for a >= b.
    int sigma_index(int r, int a, int b) const { return offsets_[r] + a * (a + 1) / 2 + b; }
    int sigma2_index() const { return size_ - 1; }

    /// Row/column (a, b), a >= b, of the k-th lower-triangle entry.
    static std::pair<int, int> entry(int k) {
        int a = 0;
        while ((a + 1) * (a + 2) / 2 <= k) ++a;
        return {a, k - a * (a + 1) / 2};
    }

    VectorXd flatten(const ModelParams& params) const {
        VectorXd out(size_);
        out.head(p_) = params.beta;
        for (int r = 0; r < num_effects(); ++r) {
            for (int k = 0; k < sigma_count(r); ++k) {
                const auto [a, b] = entry(k);
                out[offsets_[r] + k] = params.sigmas[r](a, b);
            }
        }
        out[sigma2_index()] = params.sigma2;
        return out;
    }

    ModelParams unflatten(const VectorXd& theta) const {
        ModelParams out;
        out.beta = theta.head(p_);
        for (int r = 0; r < num_effects(); ++r) {
            MatrixXd s = MatrixXd::Zero(dims_[r], dims_[r]);
            for (int k = 0; k < sigma_count(r); ++k) {
                const auto [a, b] = entry(k);
                s(a, b) = theta[offsets_[r] + k];
            }
            out.sigmas.push_back(mirror_lower(s));
        }
        out.sigma2 = theta[sigma2_index()];
        return out;
    }

    std::vector<bool> all() const { return std::vector<bool>(size_, true); }

    std::vector<bool> beta_only() const {
        std::vector<bool> mask(size_, false);
        for (int k = 0; k < p_; ++k) mask[k] = true;
        return mask;
    }

    std::vector<bool> sigma2_only() const {
        std::vector<bool> mask(size_, false);
        mask[sigma2_index()] = true;
        return mask;
    }

private:
    static std::vector<int> dims_of(const Design& design) {
        std::vector<int> dims;
        for (const auto& e : design.effects()) dims.push_back(e.dim);
        return dims;
    }

    int p_ = 0;
    std::vector<int> dims_;
    std::vector<int> offsets_;
    int size_ = 1;
};

namespace detail {

/// (E_ab v) for the symmetric elementary matrix with ones at (a,b) and (b,a).
inline void add_elementary_apply(Eigen::Ref<VectorXd> out, const Eigen::Ref<const VectorXd>& v, int a, int b) {
    out[a] += v[b];
    if (a != b) out[b] += v[a];
}

/// tr(E_ab M).
inline double elementary_trace(const Eigen::Ref<const MatrixXd>& m, int a, int b) {
    return a == b ? m(a, a) : m(a, b) + m(b, a);
}

/// Gradient and Hessian of the Gaussian log-likelihood in ParamCoordinates.
class LikelihoodDerivatives {
public:
    LikelihoodDerivatives(const Design& design, const ModelParams& params)
        : design_(design), coords_(design) {
        const SpdFactor chol(assemble_marginal_covariance(design, params), "marginal covariance V");
        P_ = chol.inverse();
        resid_ = design.y() - design.X() * params.beta;
        a_ = P_ * resid_;
        PX_ = P_ * design.X();
        const int R = design.num_effects();
        PZ_.resize(R);
        A_.resize(R);
        G_.resize(R);
        h_.resize(R);
        for (int r = 0; r < R; ++r) {
            const auto& e = design.effect(r);
            PZ_[r] = P_ * e.Z;
            A_[r] = e.Z.transpose() * a_;
            G_[r] = PZ_[r].transpose() * design.X();
            h_[r] = PZ_[r].transpose() * a_;
        }
        K_.resize(R);
        for (int r = 0; r < R; ++r) {
            K_[r].resize(R);
            for (int s = 0; s < R; ++s) {
                K_[r][s] = design.effect(r).Z.transpose() * PZ_[s];
            }
        }
    }

    VectorXd gradient() const {
        const int d = coords_.size();
        VectorXd g = VectorXd::Zero(d);
        g.head(design_.p()) = design_.X().transpose() * a_;
        for (int r = 0; r < design_.num_effects(); ++r) {
            const auto& e = design_.effect(r);
            for (int k = 0; k < coords_.sigma_count(r); ++k) {
                const auto [a, b] = ParamCoordinates::entry(k);
                double tr = 0.0;
                double quad = 0.0;
                for (int j = 0; j < e.levels; ++j) {
                    const Eigen::Index o = static_cast<Eigen::Index>(j) * e.dim;
                    tr += elementary_trace(K_[r][r].block(o, o, e.dim, e.dim), a, b);
                    const auto Aj = A_[r].segment(o, e.dim);
                    quad += a == b ? Aj[a] * Aj[a] : 2.0 * Aj[a] * Aj[b];
                }
                g[coords_.sigma_index(r, a, b)] = -0.5 * tr + 0.5 * quad;
            }
        }
        g[coords_.sigma2_index()] = -0.5 * P_.trace() + 0.5 * a_.squaredNorm();
        return g;
    }

    MatrixXd hessian() const {
        const int d = coords_.size();
        const int p = design_.p();
        const int R = design_.num_effects();
        const int s2 = coords_.sigma2_index();
        MatrixXd H = MatrixXd::Zero(d, d);

        H.topLeftCorner(p, p) = -design_.X().transpose() * PX_;
        const VectorXd beta_s2 = -PX_.transpose() * a_;
        H.block(0, s2, p, 1) = beta_s2;
        H(s2, s2) = 0.5 * P_.squaredNorm() - a_.dot(P_ * a_);

        // Stacked (I (x) E) A_r for every Sigma coordinate.
        std::vector<std::vector<VectorXd>> EA(R);
        std::vector<std::vector<std::pair<int, int>>> entries(R);
        for (int r = 0; r < R; ++r) {
            const auto& e = design_.effect(r);
            for (int k = 0; k < coords_.sigma_count(r); ++k) {
                const auto [a, b] = ParamCoordinates::entry(k);
                entries[r].emplace_back(a, b);
                VectorXd v = VectorXd::Zero(A_[r].size());
                for (int j = 0; j < e.levels; ++j) {
                    const Eigen::Index o = static_cast<Eigen::Index>(j) * e.dim;
                    add_elementary_apply(v.segment(o, e.dim), A_[r].segment(o, e.dim), a, b);
                }
                EA[r].push_back(std::move(v));
            }
        }

        for (int r = 0; r < R; ++r) {
            const auto& e = design_.effect(r);
            for (int k = 0; k < coords_.sigma_count(r); ++k) {
                const auto [a, b] = entries[r][k];
                const int u = coords_.sigma_index(r, a, b);
                H.block(0, u, p, 1) = -G_[r].transpose() * EA[r][k];
                double tr = 0.0;
                for (int j = 0; j < e.levels; ++j) {
                    const Eigen::Index o = static_cast<Eigen::Index>(j) * e.dim;
                    const MatrixXd T = PZ_[r].middleCols(o, e.dim).transpose() * PZ_[r].middleCols(o, e.dim);
                    tr += elementary_trace(T, a, b);
                }
                H(u, s2) = 0.5 * tr - EA[r][k].dot(h_[r]);
            }
        }

        for (int r = 0; r < R; ++r) {
            for (int s = r; s < R; ++s) {
                const MatrixXd& K = K_[r][s];
                const auto& er = design_.effect(r);
                const auto& es = design_.effect(s);
                // S(y, z, x, w) = sum_{j, j'} K[j q_r + y, j' q_s + z] K[j q_r + x, j' q_s + w]
                using Strided = Eigen::Map<const MatrixXd, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
                auto view = [&](int row, int col) {
                    return Strided(K.data() + row + static_cast<Eigen::Index>(col) * K.rows(), er.levels,
                                   es.levels,
                                   Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(
                                       static_cast<Eigen::Index>(es.dim) * K.rows(), er.dim));
                };
                auto S = [&](int y, int z, int x, int w) { return view(y, z).cwiseProduct(view(x, w)).sum(); };

                std::vector<VectorXd> KEA;
                for (const auto& v : EA[s]) KEA.push_back(K * v);

                for (int k = 0; k < coords_.sigma_count(r); ++k) {
                    const auto [a, b] = entries[r][k];
                    const int u = coords_.sigma_index(r, a, b);
                    const int l0 = (s == r) ? k : 0;
                    for (int l = l0; l < coords_.sigma_count(s); ++l) {
                        const auto [c, dd] = entries[s][l];
                        const int v = coords_.sigma_index(s, c, dd);
                        // tr(E_u K E_v K^T) summed over the nonzeros of both elementary matrices.
                        double tr = 0.0;
                        const std::pair<int, int> eu[2] = {{a, b}, {b, a}};
                        const std::pair<int, int> ev[2] = {{c, dd}, {dd, c}};
                        const int nu = a == b ? 1 : 2;
                        const int nv = c == dd ? 1 : 2;
                        for (int iu = 0; iu < nu; ++iu) {
                            for (int iv = 0; iv < nv; ++iv) {
                                const auto [x, y] = eu[iu];
                                const auto [z, w] = ev[iv];
                                tr += S(y, z, x, w);
                            }
                        }
                        H(u, v) = 0.5 * tr - EA[r][k].dot(KEA[l]);
                    }
                }
            }
        }
        return H.selfadjointView<Eigen::Upper>();
    }

private:
    const Design& design_;
    ParamCoordinates coords_;
    MatrixXd P_;
    VectorXd resid_;
    VectorXd a_;
    MatrixXd PX_;
    std::vector<MatrixXd> PZ_;
    std::vector<VectorXd> A_;
    std::vector<MatrixXd> G_;
    std::vector<VectorXd> h_;
    std::vector<std::vector<MatrixXd>> K_;
};

} // namespace detail

inline VectorXd gradient_log_likelihood(const Design& design, const ModelParams& params) {
    return detail::LikelihoodDerivatives(design, params).gradient();
}

/// Second derivatives of log f(y | theta) in ParamCoordinates.
inline MatrixXd hessian_log_likelihood(const Design& design, const ModelParams& params) {
    validate_params(design, params);
    return detail::LikelihoodDerivatives(design, params).hessian();
}

inline VectorXd gradient_log_prior(const ModelParams& params, const PriorSpec& prior) {
    const auto coords = ParamCoordinates::of(params);
    const int p = coords.p();
    const int s2i = coords.sigma2_index();
    const double s2 = params.sigma2;
    VectorXd g = VectorXd::Zero(coords.size());
    if (!prior.flat_beta()) {
        g.head(p) = -prior.lambda / s2 * params.beta;
        g[s2i] += -0.5 * p / s2 + 0.5 * prior.lambda * params.beta.squaredNorm() / (s2 * s2);
    }
    if (!prior.flat_sigma2()) {
        g[s2i] += -(prior.alpha + 1.0) / s2 + prior.alpha / (s2 * s2);
    }
    for (int r = 0; r < coords.num_effects(); ++r) {
        const auto& pr = prior.effects[r];
        if (pr.is_flat() || pr.is_pinned()) continue;
        const MatrixXd inv = SpdFactor(params.sigmas[r], "Sigma").inverse();
        const MatrixXd phi = pr.scale();
        const MatrixXd inner = inv * phi * inv;
        const double w = pr.weight();
        for (int k = 0; k < coords.sigma_count(r); ++k) {
            const auto [a, b] = ParamCoordinates::entry(k);
            g[coords.sigma_index(r, a, b)] =
                -0.5 * w * detail::elementary_trace(inv, a, b) + 0.5 * detail::elementary_trace(inner, a, b);
        }
    }
    return g;
}

/// Second derivatives of log pi(theta | Theta); only the beta, sigma^2 and
/// within-effect Sigma blocks are nonzero.
inline MatrixXd hessian_log_prior(const ModelParams& params, const PriorSpec& prior) {
    const auto coords = ParamCoordinates::of(params);
    const int p = coords.p();
    const int s2i = coords.sigma2_index();
    const double s2 = params.sigma2;
    MatrixXd H = MatrixXd::Zero(coords.size(), coords.size());
    double half_p = 0.0;
    double penalty = 0.0;
    if (!prior.flat_beta()) {
        H.topLeftCorner(p, p).diagonal().setConstant(-prior.lambda / s2);
        const VectorXd cross = prior.lambda / (s2 * s2) * params.beta;
        H.block(0, s2i, p, 1) = cross;
        H.block(s2i, 0, 1, p) = cross.transpose();
        half_p = 0.5 * p;
        penalty = prior.lambda * params.beta.squaredNorm();
    }
    double a1 = 0.0;
    if (!prior.flat_sigma2()) {
        a1 = prior.alpha + 1.0;
        penalty += 2.0 * prior.alpha;
    }
    H(s2i, s2i) = ((half_p + a1) * s2 - penalty) / (s2 * s2 * s2);

    for (int r = 0; r < coords.num_effects(); ++r) {
        const auto& pr = prior.effects[r];
        if (pr.is_flat() || pr.is_pinned()) continue;
        const MatrixXd inv = SpdFactor(params.sigmas[r], "Sigma").inverse();
        const MatrixXd ip = inv * pr.scale();
        const double w = pr.weight();
        const int q = coords.dim(r);
        auto elementary = [q](int a, int b) {
            MatrixXd E = MatrixXd::Zero(q, q);
            E(a, b) = 1.0;
            E(b, a) = 1.0;
            return E;
        };
        for (int k = 0; k < coords.sigma_count(r); ++k) {
            const auto [a, b] = ParamCoordinates::entry(k);
            const MatrixXd left = inv * elementary(a, b) * inv;
            for (int l = k; l < coords.sigma_count(r); ++l) {
                const auto [c, d] = ParamCoordinates::entry(l);
                const MatrixXd prod = left * elementary(c, d);
                const double value = 0.5 * w * prod.trace() - (prod * ip).trace();
                H(coords.sigma_index(r, a, b), coords.sigma_index(r, c, d)) = value;
                H(coords.sigma_index(r, c, d), coords.sigma_index(r, a, b)) = value;
            }
        }
    }
    return H;
}

inline VectorXd gradient_log_posterior(const Design& design, const ModelParams& params, const PriorSpec& prior) {
    return gradient_log_likelihood(design, params) + gradient_log_prior(params, prior);
}

inline MatrixXd hessian_log_posterior(const Design& design, const ModelParams& params, const PriorSpec& prior) {
    return hessian_log_likelihood(design, params) + hessian_log_prior(params, prior);
}

struct LaplaceOptions {
    /// Coordinates integrated over; the rest are held at the mode. Empty means all.
    std::vector<bool> mask;
    /// Refine the EM mode with guarded Newton steps on the masked coordinates.
    bool polish = true;
    int max_newton_steps = 20;
};

struct LaplaceEstimate {
    double log_marginal = 0.0;
    FitResult fit;
};

namespace detail {

inline std::vector<int> active_coordinates(const ParamCoordinates& coords, const PriorSpec& prior,
                                           const std::vector<bool>& mask) {
    std::vector<int> idx;
    for (int k = 0; k < coords.size(); ++k) {
        if (!mask.empty() && !mask[k]) continue;
        bool pinned = false;
        for (int r = 0; r < coords.num_effects(); ++r) {
            if (prior.effects[r].is_pinned() && k >= coords.sigma_offset(r) &&
                k < coords.sigma_offset(r) + coords.sigma_count(r)) {
                pinned = true;
            }
        }
        if (!pinned) idx.push_back(k);
    }
    return idx;
}

inline bool params_admissible(const ModelParams& params) {
    if (!(params.sigma2 > 0.0) || !params.beta.allFinite()) return false;
    for (const auto& s : params.sigmas) {
        if (!is_positive_definite(s)) return false;
    }
    return true;
}

/// Gradient and Hessian of the log-posterior from one factorization of V.
inline std::pair<VectorXd, MatrixXd> posterior_derivatives(const Design& design, const ModelParams& params,
                                                           const PriorSpec& prior) {
    const LikelihoodDerivatives lik(design, params);
    return {lik.gradient() + gradient_log_prior(params, prior), lik.hessian() + hessian_log_prior(params, prior)};
}

/// Newton ascent on the selected coordinates with step halving; every
/// accepted step increases the log-posterior. Stops once the Newton
/// decrement g^T (-H)^{-1} g falls below `decrement_tolerance`. Returns the
/// Hessian (restricted to idx) at the final point.
inline MatrixXd newton_polish(const Design& design, const PriorSpec& prior, const std::vector<int>& idx,
                              ModelParams& params, double& lp, std::vector<double>& trace, int max_steps,
                              double decrement_tolerance = 1e-12) {
    const ParamCoordinates coords(design);
    for (int step = 0;; ++step) {
        auto [grad, hess] = posterior_derivatives(design, params, prior);
        MatrixXd H = hess(idx, idx);
        if (step >= max_steps) return H;
        const VectorXd g = grad(idx);
        Eigen::LLT<MatrixXd> llt(-0.5 * (H + H.transpose()));
        if (llt.info() != Eigen::Success) return H;
        const VectorXd delta = llt.solve(g);
        if (!delta.allFinite() || g.dot(delta) < decrement_tolerance) return H;
        const VectorXd theta = coords.flatten(params);
        bool moved = false;
        double t = 1.0;
        for (int half = 0; half < 30; ++half, t *= 0.5) {
            VectorXd trial = theta;
            trial(idx) += t * delta;
            ModelParams candidate = coords.unflatten(trial);
            if (!params_admissible(candidate)) continue;
            double candidate_lp;
            try {
                candidate_lp = log_posterior_unnormalized(design, candidate, prior);
            } catch (const NumericalError&) {
                continue;
            }
            if (candidate_lp >= lp) {
                params = std::move(candidate);
                lp = candidate_lp;
                trace.push_back(lp);
                moved = true;
                break;
            }
        }
        if (!moved) return H;
    }
}

/// (d/2) log 2 pi + lp - 1/2 log det(-H) for a Hessian already restricted
/// to the integrated coordinates; the flag reports eigenvalue clipping.
inline std::pair<double, bool> laplace_value(double lp, const MatrixXd& H, bool boundary) {
    const MatrixXd neg = -0.5 * (H + H.transpose());
    bool clipped = false;
    double log_det = 0.0;
    Eigen::LLT<MatrixXd> llt(neg);
    if (!boundary && llt.info() == Eigen::Success && (llt.matrixLLT().diagonal().array() > 0.0).all()) {
        log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    } else {
        Eigen::SelfAdjointEigenSolver<MatrixXd> eig(neg, Eigen::EigenvaluesOnly);
        log_det = eig.eigenvalues().cwiseMax(1e-8).array().log().sum();
        clipped = true;
    }
    return {0.5 * static_cast<double>(H.rows()) * kLog2Pi + lp - 0.5 * log_det, clipped};
}

} // namespace detail

/// Laplace approximation at a given mode:
///   (d/2) log 2 pi + log L(theta*) - 1/2 log det(-H(theta*)).
/// Returns the value and whether eigenvalue clipping was needed.
inline std::pair<double, bool> laplace_at_mode(const Design& design, const PriorSpec& prior,
                                               const ModelParams& mode, const std::vector<bool>& mask = {}) {
    const ParamCoordinates coords(design);
    const auto idx = detail::active_coordinates(coords, prior, mask);
    const double lp = log_posterior_unnormalized(design, mode, prior);
    const MatrixXd H = hessian_log_posterior(design, mode, prior)(idx, idx);
    return detail::laplace_value(lp, H, mode.sigma2 < 1e-10);
}

/// MAP by EM (optionally Newton-polished), then the Laplace approximation
/// of the log marginal likelihood at the mode.
inline LaplaceEstimate laplace_log_marginal(const Design& design, const PriorSpec& prior,
                                            const EmSettings& settings = {}, const LaplaceOptions& options = {}) {
    LaplaceEstimate out;
    out.fit = fit_map(design, prior, settings);
    const ParamCoordinates coords(design);
    const auto idx = detail::active_coordinates(coords, prior, options.mask);
    std::pair<double, bool> result;
    if (options.polish && !idx.empty()) {
        double lp = out.fit.log_posterior_trace.back();
        const MatrixXd H = detail::newton_polish(design, prior, idx, out.fit.params, lp,
                                                 out.fit.log_posterior_trace, options.max_newton_steps);
        result = detail::laplace_value(lp, H, out.fit.params.sigma2 < 1e-10);
    } else {
        result = laplace_at_mode(design, prior, out.fit.params, options.mask);
    }
    out.log_marginal = result.first;
    out.fit.marginal_log_likelihood = result.first;
    out.fit.hessian_clipped = result.second;
    return out;
}

} // namespace eblmm

#endif // EBLMM_LAPLACE_HPP
