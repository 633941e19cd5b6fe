#ifndef EBLMM_EB_HPP
#define EBLMM_EB_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "eblmm/design.hpp"
#include "eblmm/em.hpp"
#include "eblmm/error.hpp"
#include "eblmm/laplace.hpp"
#include "eblmm/optimize.hpp"
#include "eblmm/parallel.hpp"
#include "eblmm/params.hpp"
#include "eblmm/rng.hpp"

namespace eblmm {

/// Search space for one random effect's inverse-Wishart prior.
struct EffectSearch {
    enum class Mode { ScaledIdentity, Fixed };
    /// ScaledIdentity: A = a I with a searched (or fixed by `scale`).
    /// Fixed: A = `fixed_mode`.
    Mode mode = Mode::ScaledIdentity;
    MatrixXd fixed_mode;
    /// Fixed strength instead of a search over b; 0 gives the flat prior.
    std::optional<double> strength;
    /// Fixed a for the ScaledIdentity mode.
    std::optional<double> scale;
};

struct HyperSearchSpec {
    std::vector<EffectSearch> effects;
    /// One a shared by every searched ScaledIdentity effect.
    bool shared_scale = false;
    bool optimize_lambda = false;
    /// Ridge intensity used when lambda is not searched.
    double lambda = 0.0;
    double alpha = kDefaultAlpha;
    double b_lower = 1e-3;
    double b_upper = 0.9;
    double a_lower = 1e-6;
    double a_upper = 1e6;
    /// Lower end of the log-scale lambda search; lambda = 0 is reached by
    /// optimize_lambda = false.
    double lambda_lower = 1e-8;
    double lambda_upper = 1e8;
    /// Searched b is kept where the inverse-Wishart is proper with
    /// eta >= q - 1 + proper_margin.
    double proper_margin = 1e-2;
    int multistarts = 3;
    std::uint64_t seed = 0;
    double tolerance = 1e-6;
    double fd_step = 1e-4;
    int max_iterations = 100;
    /// EM tolerance of the inner MAP solves.
    double inner_tolerance = 1e-6;
    int inner_max_iterations = 5000;

    /// a I mode and searched b for every effect.
    static HyperSearchSpec scaled_identity(const Design& design, bool shared_scale = true) {
        HyperSearchSpec out;
        out.shared_scale = shared_scale;
        out.effects.resize(design.num_effects());
        return out;
    }
};

inline void validate_search(const Design& design, const HyperSearchSpec& spec) {
    if (static_cast<int>(spec.effects.size()) != design.num_effects()) {
        throw ValidationError("search has " + std::to_string(spec.effects.size()) + " effect blocks, design has " +
                                  std::to_string(design.num_effects()),
                              "effects");
    }
    if (design.p() >= design.n() && !spec.optimize_lambda && spec.lambda == 0.0) {
        throw ValidationError("p >= n requires optimize_lambda or lambda > 0", "optimize_lambda");
    }
    if (spec.multistarts < 1) throw ValidationError("multistarts must be at least 1", "multistarts");
    if (!(0.0 < spec.b_lower && spec.b_lower < spec.b_upper && spec.b_upper < 1.0)) {
        throw ValidationError("b bounds must satisfy 0 < lower < upper < 1", "b_bounds");
    }
    if (!(0.0 < spec.a_lower && spec.a_lower < spec.a_upper && std::isfinite(spec.a_upper))) {
        throw ValidationError("a bounds must satisfy 0 < lower < upper < inf", "a_bounds");
    }
    if (!(0.0 < spec.lambda_lower && spec.lambda_lower < spec.lambda_upper && std::isfinite(spec.lambda_upper))) {
        throw ValidationError("lambda bounds must satisfy 0 < lower < upper < inf", "lambda_bounds");
    }
    if (!(spec.lambda >= 0.0) || !std::isfinite(spec.lambda)) {
        throw ValidationError("lambda must be finite and nonnegative", "lambda");
    }
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto& e = spec.effects[r];
        const int q = design.effect(r).dim;
        if (e.strength && !(*e.strength >= 0.0 && *e.strength <= 1.0)) {
            throw ValidationError("fixed strength of effect " + std::to_string(r) + " must lie in [0, 1]",
                                  "effects");
        }
        if (e.mode == EffectSearch::Mode::Fixed &&
            (e.fixed_mode.rows() != q || e.fixed_mode.cols() != q || !is_symmetric(e.fixed_mode) ||
             !is_positive_definite(e.fixed_mode))) {
            throw ValidationError("fixed mode of effect " + std::to_string(r) + " must be a " + std::to_string(q) +
                                      "x" + std::to_string(q) + " SPD matrix",
                                  "effects");
        }
        if (e.scale && !(*e.scale > 0.0)) {
            throw ValidationError("fixed scale of effect " + std::to_string(r) + " must be positive", "effects");
        }
    }
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double inv_logit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Map between the transformed search vector (logit b, log a, log lambda)
/// and a PriorSpec.
class HyperLayout {
public:
    HyperLayout(const Design& design, const HyperSearchSpec& spec) : design_(design), spec_(spec) {
        const int R = design.num_effects();
        b_index_.assign(R, -1);
        a_index_.assign(R, -1);
        int shared = -1;
        for (int r = 0; r < R; ++r) {
            const auto& e = spec.effects[r];
            if (!e.strength) {
                b_index_[r] = add("b_" + std::to_string(r), logit(b_floor(r)), logit(spec.b_upper));
            }
        }
        for (int r = 0; r < R; ++r) {
            const auto& e = spec.effects[r];
            const bool uses_mode = !(e.strength && *e.strength == 0.0);
            if (e.mode != EffectSearch::Mode::ScaledIdentity || e.scale || !uses_mode) continue;
            if (spec.shared_scale) {
                if (shared < 0) shared = add("a", std::log(spec.a_lower), std::log(spec.a_upper));
                a_index_[r] = shared;
            } else {
                a_index_[r] = add("a_" + std::to_string(r), std::log(spec.a_lower), std::log(spec.a_upper));
            }
        }
        if (spec.optimize_lambda) {
            lambda_index_ = add("lambda", std::log(spec.lambda_lower), std::log(spec.lambda_upper));
        }
    }

    int size() const { return static_cast<int>(names_.size()); }
    const std::vector<std::string>& names() const { return names_; }
    const Eigen::VectorXd& lower() const { return lower_; }
    const Eigen::VectorXd& upper() const { return upper_; }
    int b_index(int r) const { return b_index_[r]; }
    int a_index(int r) const { return a_index_[r]; }
    int lambda_index() const { return lambda_index_; }

    int index_of(const std::string& name) const {
        for (int k = 0; k < size(); ++k) {
            if (names_[k] == name) return k;
        }
        throw ValidationError("unknown hyperparameter '" + name + "'", "which");
    }

    /// Smallest searched b for effect r: the user bound, raised so that
    /// eta >= q - 1 + margin.
    double b_floor(int r) const {
        const double m = design_.effect(r).levels;
        const double q = design_.effect(r).dim;
        const double w = 2.0 * q + spec_.proper_margin;
        return std::max(spec_.b_lower, w / (m + w));
    }

    PriorSpec decode(const Eigen::VectorXd& x) const {
        PriorSpec out;
        out.alpha = spec_.alpha;
        out.lambda = lambda_index_ >= 0 ? std::exp(x[lambda_index_]) : spec_.lambda;
        for (int r = 0; r < design_.num_effects(); ++r) {
            const auto& e = spec_.effects[r];
            const auto& d = design_.effect(r);
            EffectPrior pr;
            pr.levels = d.levels;
            pr.strength = b_index_[r] >= 0 ? inv_logit(x[b_index_[r]]) : *e.strength;
            if (e.mode == EffectSearch::Mode::Fixed) {
                pr.mode = e.fixed_mode;
            } else {
                const double a = a_index_[r] >= 0 ? std::exp(x[a_index_[r]]) : e.scale.value_or(1.0);
                pr.mode = a * MatrixXd::Identity(d.dim, d.dim);
            }
            out.effects.push_back(std::move(pr));
        }
        return out;
    }

    /// Transformed vector with b, a, lambda given on their natural scale.
    Eigen::VectorXd encode(const std::vector<double>& b, const std::vector<double>& a, double lambda) const {
        Eigen::VectorXd x(size());
        for (int r = 0; r < design_.num_effects(); ++r) {
            if (b_index_[r] >= 0) x[b_index_[r]] = logit(b[r]);
            if (a_index_[r] >= 0) x[a_index_[r]] = std::log(a[r]);
        }
        if (lambda_index_ >= 0) x[lambda_index_] = std::log(lambda);
        return x.cwiseMax(lower_).cwiseMin(upper_);
    }

    /// Start k: the three declared corners (low b, a = 1), (high b, a = 1),
    /// (mid b, a = var(y)) with lambda = 1, then seeded uniform draws in
    /// the transformed box.
    Eigen::VectorXd start(int k, std::uint64_t seed) const {
        if (k >= 3) {
            RandomStream rng(seed, static_cast<std::uint32_t>(k), 0x5EA4C4u);
            Eigen::VectorXd x(size());
            for (int i = 0; i < size(); ++i) x[i] = lower_[i] + rng.uniform() * (upper_[i] - lower_[i]);
            return x;
        }
        const double frac[3] = {0.25, 0.75, 0.5};
        double scale = 1.0;
        if (k == 2) {
            scale = detail::sample_variance(design_.y());
            if (!(scale > 0.0)) scale = 1.0;
        }
        Eigen::VectorXd x(size());
        for (int r = 0; r < design_.num_effects(); ++r) {
            if (b_index_[r] >= 0) {
                const int i = b_index_[r];
                x[i] = lower_[i] + frac[k] * (upper_[i] - lower_[i]);
            }
            if (a_index_[r] >= 0) x[a_index_[r]] = std::log(scale);
        }
        if (lambda_index_ >= 0) x[lambda_index_] = 0.0;
        return x.cwiseMax(lower_).cwiseMin(upper_);
    }

private:
    int add(std::string name, double lo, double hi) {
        names_.push_back(std::move(name));
        lower_.conservativeResize(lower_.size() + 1);
        upper_.conservativeResize(upper_.size() + 1);
        lower_[lower_.size() - 1] = lo;
        upper_[upper_.size() - 1] = hi;
        return size() - 1;
    }

    const Design& design_;
    const HyperSearchSpec& spec_;
    std::vector<std::string> names_;
    Eigen::VectorXd lower_;
    Eigen::VectorXd upper_;
    std::vector<int> b_index_;
    std::vector<int> a_index_;
    int lambda_index_ = -1;
};

struct StartDiagnostics {
    Eigen::VectorXd start;
    Eigen::VectorXd optimum;
    double initial_log_marginal = -std::numeric_limits<double>::infinity();
    double log_marginal = -std::numeric_limits<double>::infinity();
    int iterations = 0;
    int evaluations = 0;
    bool converged = false;
    std::string error;
};

struct HyperFit {
    PriorSpec prior;
    FitResult fit;
    double log_marginal = 0.0;
    Eigen::VectorXd transformed;
    std::vector<std::string> names;
    std::vector<StartDiagnostics> starts;
    int best_start = 0;
};

namespace detail {

/// Laplace objective with warm starts: every evaluation starts EM from the
/// mode at the last accepted point.
class WarmObjective {
public:
    WarmObjective(const Design& design, const HyperLayout& layout, const HyperSearchSpec& spec)
        : design_(design), layout_(layout) {
        settings_.tolerance = spec.inner_tolerance;
        settings_.max_iterations = spec.inner_max_iterations;
    }

    LaplaceEstimate evaluate(const Eigen::VectorXd& x) const {
        EmSettings s = settings_;
        if (anchor_) s.init = *anchor_;
        return laplace_log_marginal(design_, layout_.decode(x), s);
    }

    double operator()(const Eigen::VectorXd& x) {
        double value = std::numeric_limits<double>::infinity();
        try {
            auto est = evaluate(x);
            last_ = std::move(est.fit.params);
            if (std::isfinite(est.log_marginal)) value = -est.log_marginal;
        } catch (const NumericalError&) {
            last_.reset();
        }
        if (!first_value_) first_value_ = value;
        return value;
    }

    /// Objective at the first point evaluated (the start).
    double first_value() const { return first_value_.value_or(std::numeric_limits<double>::infinity()); }

    void accept() {
        if (last_) anchor_ = last_;
    }

private:
    const Design& design_;
    const HyperLayout& layout_;
    EmSettings settings_;
    std::optional<ModelParams> anchor_;
    std::optional<ModelParams> last_;
    std::optional<double> first_value_;
};

} // namespace detail

/// Empirical-Bayes hyperparameters: maximizes the Laplace log marginal
/// likelihood over the transformed search vector from several starts and
/// keeps the best (ties go to the lower start index).
inline HyperFit optimize_hyperparameters(const Design& design, const HyperSearchSpec& spec) {
    validate_search(design, spec);
    const HyperLayout layout(design, spec);
    HyperFit out;
    out.names = layout.names();
    out.starts.resize(spec.multistarts);
    std::vector<std::optional<LaplaceEstimate>> finals(spec.multistarts);

    BoxOptions box;
    box.fd_step = spec.fd_step;
    box.tolerance = spec.tolerance;
    box.max_iterations = spec.max_iterations;

    parallel_for(spec.multistarts, [&](int k) {
        auto& diag = out.starts[k];
        diag.start = layout.start(k, spec.seed);
        detail::WarmObjective objective(design, layout, spec);
        try {
            if (layout.size() == 0) {
                diag.optimum = diag.start;
                diag.converged = true;
                finals[k] = objective.evaluate(diag.start);
                diag.initial_log_marginal = finals[k]->log_marginal;
            } else {
                const auto result =
                    minimize_box(std::ref(objective), diag.start, layout.lower(), layout.upper(), box,
                                 [&](const Eigen::VectorXd&) { objective.accept(); });
                diag.initial_log_marginal = -objective.first_value();
                diag.optimum = result.x;
                diag.iterations = result.iterations;
                diag.evaluations = result.evaluations;
                diag.converged = result.converged;
                if (!std::isfinite(result.value)) throw NumericalError("objective not finite at the start point");
                finals[k] = objective.evaluate(result.x);
            }
            diag.log_marginal = finals[k]->log_marginal;
        } catch (const Error& e) {
            diag.error = e.what();
        }
    });

    int best = -1;
    for (int k = 0; k < spec.multistarts; ++k) {
        if (finals[k] && (best < 0 || finals[k]->log_marginal > finals[best]->log_marginal)) best = k;
    }
    if (best < 0) {
        std::string msg = "hyperparameter search failed from every start:";
        for (int k = 0; k < spec.multistarts; ++k) msg += " [start " + std::to_string(k) + ": " + out.starts[k].error + "]";
        throw NumericalError(msg);
    }
    out.best_start = best;
    out.transformed = out.starts[best].optimum;
    out.prior = layout.decode(out.transformed);
    out.fit = std::move(finals[best]->fit);
    out.fit.prior = out.prior;
    out.log_marginal = finals[best]->log_marginal;
    return out;
}

struct ProfilePoint {
    double value = 0.0;
    double log_marginal = 0.0;
};

/// Laplace log marginal likelihood along one hyperparameter (natural
/// scale values in `grid`), others held at `base` (transformed scale;
/// defaults to the first start point).
inline std::vector<ProfilePoint> profile_hyperparameter(const Design& design, const HyperSearchSpec& spec,
                                                        const std::string& which, const std::vector<double>& grid,
                                                        std::optional<Eigen::VectorXd> base = std::nullopt) {
    validate_search(design, spec);
    const HyperLayout layout(design, spec);
    const int k = layout.index_of(which);
    Eigen::VectorXd x = base ? *base : layout.start(0, spec.seed);
    if (x.size() != layout.size()) throw ValidationError("base point has the wrong length", "base");
    EmSettings settings;
    settings.tolerance = spec.inner_tolerance;
    settings.max_iterations = spec.inner_max_iterations;
    std::vector<ProfilePoint> out;
    for (double v : grid) {
        const double t = which.rfind("b_", 0) == 0 ? logit(v) : std::log(v);
        if (!(t >= layout.lower()[k] - 1e-12 && t <= layout.upper()[k] + 1e-12)) {
            throw ValidationError("grid value " + std::to_string(v) + " lies outside the bounds of " + which, "grid");
        }
        x[k] = t;
        out.push_back({v, laplace_log_marginal(design, layout.decode(x), settings).log_marginal});
    }
    return out;
}

} // namespace eblmm

#endif // EBLMM_EB_HPP
