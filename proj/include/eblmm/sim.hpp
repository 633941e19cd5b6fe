#ifndef EBLMM_SIM_HPP
#define EBLMM_SIM_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "eblmm/design.hpp"
#include "eblmm/eb.hpp"
#include "eblmm/em.hpp"
#include "eblmm/error.hpp"
#include "eblmm/linalg.hpp"
#include "eblmm/parallel.hpp"
#include "eblmm/params.hpp"
#include "eblmm/predict.hpp"
#include "eblmm/rng.hpp"

namespace eblmm {

struct EffectScenario {
    /// Individual: the grouping is the individual (consecutive blocks of
    /// observations). Balanced: observations spread evenly over `levels`
    /// levels in random order, crossed with individuals.
    enum class Grouping { Individual, Balanced };
    /// ReuseX: U = X. FreshGaussian: intercept plus dim - 1 standard normal
    /// columns drawn independently of X.
    enum class Covariates { ReuseX, FreshGaussian };

    std::string name;
    Grouping grouping = Grouping::Individual;
    int levels = 0;
    Covariates covariates = Covariates::ReuseX;
    int dim = 3;
    MatrixXd sigma0;
};

struct ScenarioConfig {
    enum class NoiseRule { Explicit, BalanceVariance };
    enum class BetaSource { StandardNormal, Explicit };

    std::string name = "custom";
    int individuals = 60;
    int obs_per_individual = 4;
    /// Fixed-effect columns including the intercept.
    int p = 3;
    std::vector<EffectScenario> effects;
    NoiseRule noise_rule = NoiseRule::BalanceVariance;
    double sigma2 = 1.0;
    BetaSource beta_source = BetaSource::StandardNormal;
    VectorXd beta;
    int replicates = 50;
    std::uint64_t seed = 20240501;
    /// Draw X, groupings, U and beta once and share them across replicates;
    /// random effects and noise are redrawn per replicate.
    bool fixed_design = true;
    /// New observations per individual in the prediction scenarios.
    int new_per_individual = 1;

    int n() const { return individuals * obs_per_individual; }

    /// Sigma_0 = 0.7 I + 0.3 J.
    static MatrixXd default_sigma0(int q) {
        return 0.7 * MatrixXd::Identity(q, q) + 0.3 * MatrixXd::Ones(q, q);
    }

    /// 60 individuals x 4 observations, 4 crossed balanced cities,
    /// U_1 = U_2 = X with an intercept and two covariates.
    static ScenarioConfig re_regularization() {
        ScenarioConfig c;
        c.name = "re_regularization";
        c.effects.push_back({"individual", EffectScenario::Grouping::Individual, 60,
                             EffectScenario::Covariates::ReuseX, 3, default_sigma0(3)});
        c.effects.push_back({"city", EffectScenario::Grouping::Balanced, 4, EffectScenario::Covariates::ReuseX, 3,
                             default_sigma0(3)});
        return c;
    }

    /// Many fixed effects and one individual effect with intercept and two
    /// slopes on covariates separate from X.
    static ScenarioConfig joint_regularization(int p = 120, int individuals = 24) {
        ScenarioConfig c;
        c.name = "joint_regularization";
        c.individuals = individuals;
        c.p = p;
        c.replicates = 30;
        c.effects.push_back({"individual", EffectScenario::Grouping::Individual, individuals,
                             EffectScenario::Covariates::FreshGaussian, 3, default_sigma0(3)});
        return c;
    }
};

inline void validate_scenario(const ScenarioConfig& c) {
    if (c.individuals < 1 || c.obs_per_individual < 1) {
        throw ValidationError("individuals and obs_per_individual must be positive", "individuals");
    }
    if (c.p < 1) throw ValidationError("p must be at least 1", "p");
    if (c.replicates < 1) throw ValidationError("replicates must be at least 1", "replicates");
    if (c.new_per_individual < 1) throw ValidationError("new_per_individual must be at least 1", "new_per_individual");
    if (c.noise_rule == ScenarioConfig::NoiseRule::Explicit && !(c.sigma2 > 0.0)) {
        throw ValidationError("explicit sigma2 must be positive", "sigma2");
    }
    if (c.beta_source == ScenarioConfig::BetaSource::Explicit && c.beta.size() != c.p) {
        throw ValidationError("explicit beta must have p entries", "beta");
    }
    for (const auto& e : c.effects) {
        const int q = e.covariates == EffectScenario::Covariates::ReuseX ? c.p : e.dim;
        if (e.covariates == EffectScenario::Covariates::FreshGaussian && e.dim < 1) {
            throw ValidationError("effect " + e.name + " needs dim >= 1", e.name);
        }
        if (e.sigma0.rows() != q || e.sigma0.cols() != q || !is_symmetric(e.sigma0) ||
            !is_positive_definite(e.sigma0)) {
            throw ValidationError("Sigma_0 of effect " + e.name + " must be a " + std::to_string(q) + "x" +
                                      std::to_string(q) + " SPD matrix",
                                  e.name);
        }
        if (e.grouping == EffectScenario::Grouping::Balanced && (e.levels < 1 || e.levels > c.n())) {
            throw ValidationError("effect " + e.name + " needs 1 <= levels <= n", e.name);
        }
    }
}

/// Random stream purposes.
enum StreamPurpose : std::uint32_t {
    kStreamDesign = 1,
    kStreamLatent = 2,
    kStreamNoise = 3,
    kStreamNewRows = 4,
    kStreamSecondDesign = 5,
    kStreamSecondResponse = 6,
    kStreamSplits = 7,
};

/// sigma_0^2 under the balance rule: sum_r tr(Sigma_0r E[u u^T]); the
/// covariates are an intercept and independent standard normals, so
/// E[u u^T] = I.
inline double balanced_noise_variance(const ScenarioConfig& c) {
    double out = 0.0;
    for (const auto& e : c.effects) out += e.sigma0.trace();
    return out;
}

inline double true_noise_variance(const ScenarioConfig& c) {
    return c.noise_rule == ScenarioConfig::NoiseRule::Explicit ? c.sigma2 : balanced_noise_variance(c);
}

struct SimulatedDataset {
    ModelDesign design;
    ModelParams truth;
    /// gamma[r][j]: drawn random effect of level j in effect r.
    std::vector<std::vector<VectorXd>> gamma;
};

namespace detail {

inline MatrixXd draw_covariates(RandomStream& rng, Eigen::Index rows, int cols) {
    MatrixXd out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        out(i, 0) = 1.0;
        for (int k = 1; k < cols; ++k) out(i, k) = rng.normal();
    }
    return out;
}

inline std::vector<int> balanced_levels(RandomStream& rng, int n, int levels) {
    std::vector<int> out(n);
    for (int i = 0; i < n; ++i) out[i] = i % levels;
    for (int i = n - 1; i > 0; --i) std::swap(out[i], out[rng.below(static_cast<std::uint32_t>(i + 1))]);
    return out;
}

/// X, groupings and U for `per_individual` rows of every individual.
inline ModelDesign draw_design(const ScenarioConfig& c, RandomStream& rng, int per_individual) {
    const int n = c.individuals * per_individual;
    ModelDesign d;
    d.y = VectorXd::Zero(n);
    d.X = draw_covariates(rng, n, c.p);
    for (const auto& e : c.effects) {
        RandomEffectSpec spec;
        spec.name = e.name;
        if (e.grouping == EffectScenario::Grouping::Individual) {
            spec.levels = c.individuals;
            for (int i = 0; i < n; ++i) spec.group_of.push_back(i / per_individual);
        } else {
            spec.levels = std::min(e.levels, n);
            spec.group_of = balanced_levels(rng, n, spec.levels);
        }
        spec.U = e.covariates == EffectScenario::Covariates::ReuseX ? d.X : draw_covariates(rng, n, e.dim);
        d.effects.push_back(std::move(spec));
    }
    return d;
}

inline std::vector<std::vector<VectorXd>> draw_latent(const ScenarioConfig& c, const ModelDesign& d,
                                                      RandomStream& rng) {
    std::vector<std::vector<VectorXd>> gamma(c.effects.size());
    for (std::size_t r = 0; r < c.effects.size(); ++r) {
        const MatrixXd L = SpdFactor(c.effects[r].sigma0, "Sigma_0").lower();
        for (int j = 0; j < d.effects[r].levels; ++j) {
            VectorXd z(L.rows());
            for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = rng.normal();
            gamma[r].push_back(L * z);
        }
    }
    return gamma;
}

/// y = X beta + sum_r U_r(i) gamma_{r, k_r(i)} + eps.
inline VectorXd compose_response(const ModelDesign& d, const ModelParams& truth,
                                 const std::vector<std::vector<VectorXd>>& gamma, RandomStream& noise) {
    VectorXd y = d.X * truth.beta;
    for (std::size_t r = 0; r < d.effects.size(); ++r) {
        const auto& e = d.effects[r];
        for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += e.U.row(i).dot(gamma[r][e.group_of[i]]);
    }
    const double sd = std::sqrt(truth.sigma2);
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += sd * noise.normal();
    return y;
}

inline std::uint32_t design_replicate(const ScenarioConfig& c, int replicate) {
    return c.fixed_design ? 0u : static_cast<std::uint32_t>(replicate);
}

/// New rows for the individuals of `observed`: X and U drawn like the
/// training rows, balanced effects get balanced random levels among the
/// observed levels.
inline PredictionProblem draw_new_rows(const ScenarioConfig& c, const Design& observed, RandomStream& rng) {
    const ModelDesign rows = draw_design(c, rng, c.new_per_individual);
    PredictionProblem out;
    out.observed = observed;
    out.X_new = rows.X;
    for (const auto& e : rows.effects) {
        out.group_of.push_back(e.group_of);
        out.U_new.push_back(e.U);
    }
    return out;
}

} // namespace detail

inline ModelParams scenario_truth(const ScenarioConfig& c) {
    validate_scenario(c);
    ModelParams truth;
    if (c.beta_source == ScenarioConfig::BetaSource::Explicit) {
        truth.beta = c.beta;
    } else {
        RandomStream rng(c.seed, 0, kStreamDesign);
        // The design stream starts with beta so that it does not depend on n.
        truth.beta.resize(c.p);
        for (int k = 0; k < c.p; ++k) truth.beta[k] = rng.normal();
    }
    for (const auto& e : c.effects) truth.sigmas.push_back(e.sigma0);
    truth.sigma2 = true_noise_variance(c);
    return truth;
}

/// Training data for one replicate. Deterministic in (seed, replicate).
inline SimulatedDataset generate_dataset(const ScenarioConfig& c, int replicate) {
    validate_scenario(c);
    SimulatedDataset out;
    out.truth = scenario_truth(c);
    RandomStream design_rng(c.seed, detail::design_replicate(c, replicate), kStreamDesign);
    for (int k = 0; k < c.p; ++k) design_rng.normal();
    out.design = detail::draw_design(c, design_rng, c.obs_per_individual);
    RandomStream latent(c.seed, static_cast<std::uint32_t>(replicate), kStreamLatent);
    RandomStream noise(c.seed, static_cast<std::uint32_t>(replicate), kStreamNoise);
    out.gamma = detail::draw_latent(c, out.design, latent);
    out.design.y = detail::compose_response(out.design, out.truth, out.gamma, noise);
    return out;
}

/// The two prediction problems of one replicate: (i) new rows of the
/// training units conditioned on the training data; (ii) new rows of the
/// units of an independent dataset conditioned on that dataset.
struct PredictionScenarios {
    PredictionProblem same_units;
    PredictionProblem new_units;
};

inline PredictionScenarios prediction_scenarios(const ScenarioConfig& c, const Design& training, int replicate) {
    const std::uint32_t drep = detail::design_replicate(c, replicate);
    PredictionScenarios out;
    RandomStream rows_rng(c.seed, drep, kStreamNewRows);
    out.same_units = detail::draw_new_rows(c, training, rows_rng);

    const ModelParams truth = scenario_truth(c);
    RandomStream second_rng(c.seed, drep, kStreamSecondDesign);
    ModelDesign second = detail::draw_design(c, second_rng, c.obs_per_individual);
    RandomStream response_rng(c.seed, static_cast<std::uint32_t>(replicate), kStreamSecondResponse);
    const auto gamma = detail::draw_latent(c, second, response_rng);
    second.y = detail::compose_response(second, truth, gamma, response_rng);
    const Design second_design = validate_design(std::move(second));
    out.new_units = detail::draw_new_rows(c, second_design, second_rng);
    return out;
}

/// One tidy value.
struct ReportRow {
    int replicate = 0;
    std::string quantity;
    std::string estimator;
    double value = 0.0;
};

struct StudyReport {
    /// Lines written as '# ' comments above the CSV header.
    std::vector<std::string> header;
    std::vector<ReportRow> rows;
    /// (replicate, message) for replicates that failed.
    std::vector<std::pair<int, std::string>> failures;

    std::vector<double> values(const std::string& quantity, const std::string& estimator) const {
        std::vector<double> out;
        for (const auto& r : rows) {
            if (r.quantity == quantity && r.estimator == estimator) out.push_back(r.value);
        }
        return out;
    }
};

/// Shortest representation that reads back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline void write_report_csv(std::ostream& out, const StudyReport& report) {
    for (const auto& line : report.header) out << "# " << line << '\n';
    out << "replicate,quantity,estimator,value\n";
    for (const auto& r : report.rows) {
        out << r.replicate << ',' << r.quantity << ',' << r.estimator << ',' << format_double(r.value) << '\n';
    }
}

inline std::string describe_matrix(const MatrixXd& m) {
    std::string out = "[";
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        out += i ? "; " : "";
        for (Eigen::Index j = 0; j < m.cols(); ++j) out += (j ? " " : "") + format_double(m(i, j));
    }
    return out + "]";
}

inline std::vector<std::string> scenario_header(const ScenarioConfig& c) {
    std::vector<std::string> out;
    out.push_back("scenario=" + c.name + " n=" + std::to_string(c.n()) + " p=" + std::to_string(c.p) +
                  " replicates=" + std::to_string(c.replicates) + " seed=" + std::to_string(c.seed) +
                  " fixed_design=" + (c.fixed_design ? "true" : "false"));
    for (const auto& e : c.effects) {
        out.push_back("effect=" + e.name + " levels=" +
                      std::to_string(e.grouping == EffectScenario::Grouping::Individual ? c.individuals : e.levels) +
                      " q=" + std::to_string(e.covariates == EffectScenario::Covariates::ReuseX ? c.p : e.dim) +
                      " covariates=" + (e.covariates == EffectScenario::Covariates::ReuseX ? "reuse_x" : "fresh_gaussian") +
                      " sigma0=" + describe_matrix(e.sigma0));
    }
    if (c.noise_rule == ScenarioConfig::NoiseRule::BalanceVariance) {
        out.push_back("sigma0^2=" + format_double(true_noise_variance(c)) +
                      " (balance rule: sum_r tr(Sigma0_r E[u u^T]) with E[u u^T] = I)");
    } else {
        out.push_back("sigma0^2=" + format_double(c.sigma2) + " (explicit)");
    }
    out.push_back("designs fixed across replicates; random effects and noise redrawn per replicate");
    return out;
}

namespace detail {

inline void add_param_rows(std::vector<ReportRow>& rows, int rep, const std::string& estimator,
                           const ModelParams& params, const std::vector<EffectScenario>& effects) {
    for (Eigen::Index k = 0; k < params.beta.size(); ++k) {
        rows.push_back({rep, "beta_" + std::to_string(k), estimator, params.beta[k]});
    }
    for (std::size_t r = 0; r < params.sigmas.size(); ++r) {
        const MatrixXd& s = params.sigmas[r];
        for (Eigen::Index a = 0; a < s.rows(); ++a) {
            for (Eigen::Index b = 0; b <= a; ++b) {
                rows.push_back({rep,
                                "sigma_" + effects[r].name + "_" + std::to_string(a) + std::to_string(b), estimator,
                                s(a, b)});
            }
        }
    }
    rows.push_back({rep, "sigma2", estimator, params.sigma2});
}

inline void add_hyper_rows(std::vector<ReportRow>& rows, int rep, const std::string& estimator,
                           const PriorSpec& prior, const std::vector<EffectScenario>& effects) {
    for (std::size_t r = 0; r < prior.effects.size(); ++r) {
        rows.push_back({rep, "b_" + effects[r].name, estimator, prior.effects[r].strength});
        rows.push_back({rep, "a_" + effects[r].name, estimator, prior.effects[r].mode(0, 0)});
    }
    rows.push_back({rep, "lambda", estimator, prior.lambda});
}

inline HyperSearchSpec fill_search(HyperSearchSpec spec, const Design& design) {
    if (spec.effects.empty()) spec.effects.resize(design.num_effects());
    return spec;
}

template <typename Body>
StudyReport run_replicates(const ScenarioConfig& c, Body&& body) {
    std::vector<std::vector<ReportRow>> slots(c.replicates);
    std::vector<std::string> errors(c.replicates);
    parallel_for(c.replicates, [&](int rep) {
        try {
            body(rep, slots[rep]);
        } catch (const std::exception& e) {
            slots[rep].clear();
            errors[rep] = e.what();
            if (errors[rep].empty()) errors[rep] = "unknown failure";
        }
    });
    StudyReport report;
    report.header = scenario_header(c);
    for (int rep = 0; rep < c.replicates; ++rep) {
        for (auto& row : slots[rep]) report.rows.push_back(std::move(row));
        if (!errors[rep].empty()) report.failures.emplace_back(rep, errors[rep]);
        report.rows.push_back({rep, "failed", "all", errors[rep].empty() ? 0.0 : 1.0});
    }
    return report;
}

inline double predictive_kl(const PredictionProblem& problem, const ModelParams& estimate,
                            const GaussianPredictive& truth, VectorXd* mean = nullptr) {
    const auto pred = predict_conditional(problem, estimate);
    if (mean) *mean = pred.mean;
    return kl_gaussian(pred, truth);
}

} // namespace detail

struct ReStudyOptions {
    EmSettings ml_settings = [] {
        EmSettings s;
        s.max_iterations = 1000;
        return s;
    }();
    /// Search template; effect blocks are filled with the a I / searched-b
    /// default when empty.
    HyperSearchSpec search = [] {
        HyperSearchSpec s;
        s.shared_scale = true;
        return s;
    }();
};

/// Per replicate: ML and EB fits, their parameter estimates, the EB
/// hyperparameters, c(theta_0) - c(theta_hat) diagonals and the predictive
/// KL divergences to the truth in both prediction scenarios.
inline StudyReport run_re_regularization_study(const ScenarioConfig& c, const ReStudyOptions& options = {}) {
    validate_scenario(c);
    const ModelParams truth = scenario_truth(c);
    StudyReport report = detail::run_replicates(c, [&](int rep, std::vector<ReportRow>& rows) {
        const SimulatedDataset data = generate_dataset(c, rep);
        const Design design = validate_design(data.design);
        const FitResult ml = fit_ml(design, options.ml_settings);
        const HyperFit eb = optimize_hyperparameters(design, detail::fill_search(options.search, design));

        detail::add_param_rows(rows, rep, "truth", truth, c.effects);
        detail::add_param_rows(rows, rep, "ML", ml.params, c.effects);
        detail::add_param_rows(rows, rep, "EB", eb.fit.params, c.effects);
        detail::add_hyper_rows(rows, rep, "EB", eb.prior, c.effects);
        rows.push_back({rep, "log_marginal", "EB", eb.log_marginal});
        rows.push_back({rep, "converged", "ML", ml.converged ? 1.0 : 0.0});
        rows.push_back({rep, "converged", "EB", eb.fit.converged ? 1.0 : 0.0});
        rows.push_back({rep, "iterations", "ML", static_cast<double>(ml.iterations)});

        const MatrixXd c0 = fixed_effect_covariance(design, truth);
        const MatrixXd c_ml = fixed_effect_covariance(design, ml.params);
        const MatrixXd c_eb = fixed_effect_covariance(design, eb.fit.params);
        for (int k = 0; k < c.p; ++k) {
            rows.push_back({rep, "c_error_" + std::to_string(k), "ML", c0(k, k) - c_ml(k, k)});
            rows.push_back({rep, "c_error_" + std::to_string(k), "EB", c0(k, k) - c_eb(k, k)});
        }

        const PredictionScenarios scen = prediction_scenarios(c, design, rep);
        const std::pair<const char*, const PredictionProblem*> problems[2] = {{"i", &scen.same_units},
                                                                              {"ii", &scen.new_units}};
        for (const auto& [label, problem] : problems) {
            const GaussianPredictive target = predict_conditional(*problem, truth);
            VectorXd mean_ml, mean_eb;
            const double kl_ml = detail::predictive_kl(*problem, ml.params, target, &mean_ml);
            const double kl_eb = detail::predictive_kl(*problem, eb.fit.params, target, &mean_eb);
            const std::string s(label);
            rows.push_back({rep, "kl_" + s, "ML", kl_ml});
            rows.push_back({rep, "kl_" + s, "EB", kl_eb});
            rows.push_back({rep, "kl_diff_" + s, "ML-EB", kl_ml - kl_eb});
            rows.push_back({rep, "rmse_" + s, "ML", rmse_conditional_total(mean_ml, target.mean)});
            rows.push_back({rep, "rmse_" + s, "EB", rmse_conditional_total(mean_eb, target.mean)});
        }
    });
    return report;
}

struct JointStudyOptions {
    /// Search template for the joint fit; the lambda-only fit uses the same
    /// settings with every strength fixed at 0.
    HyperSearchSpec search = [] {
        HyperSearchSpec s;
        s.shared_scale = true;
        s.optimize_lambda = true;
        return s;
    }();
};

/// Per replicate: a lambda-only fit (random-effect prior flat) and a joint
/// fit over (lambda, a, b); beta error, hyperparameters and the predictive
/// KL divergences of both.
inline StudyReport run_joint_regularization_study(const ScenarioConfig& c, const JointStudyOptions& options = {}) {
    validate_scenario(c);
    const ModelParams truth = scenario_truth(c);
    StudyReport report = detail::run_replicates(c, [&](int rep, std::vector<ReportRow>& rows) {
        const SimulatedDataset data = generate_dataset(c, rep);
        const Design design = validate_design(data.design);

        HyperSearchSpec lambda_only = detail::fill_search(options.search, design);
        lambda_only.optimize_lambda = true;
        for (auto& e : lambda_only.effects) e.strength = 0.0;
        HyperSearchSpec joint = detail::fill_search(options.search, design);
        joint.optimize_lambda = true;

        const HyperFit fit_l = optimize_hyperparameters(design, lambda_only);
        const HyperFit fit_j = optimize_hyperparameters(design, joint);

        detail::add_param_rows(rows, rep, "truth", truth, c.effects);
        detail::add_param_rows(rows, rep, "lambda_only", fit_l.fit.params, c.effects);
        detail::add_param_rows(rows, rep, "joint", fit_j.fit.params, c.effects);
        detail::add_hyper_rows(rows, rep, "lambda_only", fit_l.prior, c.effects);
        detail::add_hyper_rows(rows, rep, "joint", fit_j.prior, c.effects);
        rows.push_back({rep, "log_marginal", "lambda_only", fit_l.log_marginal});
        rows.push_back({rep, "log_marginal", "joint", fit_j.log_marginal});
        const double rmse_l = rmse_conditional(fit_l.fit.params.beta, truth.beta);
        const double rmse_j = rmse_conditional(fit_j.fit.params.beta, truth.beta);
        rows.push_back({rep, "beta_rmse", "lambda_only", rmse_l});
        rows.push_back({rep, "beta_rmse", "joint", rmse_j});

        const PredictionScenarios scen = prediction_scenarios(c, design, rep);
        const std::pair<const char*, const PredictionProblem*> problems[2] = {{"i", &scen.same_units},
                                                                              {"ii", &scen.new_units}};
        for (const auto& [label, problem] : problems) {
            const GaussianPredictive target = predict_conditional(*problem, truth);
            const double kl_l = detail::predictive_kl(*problem, fit_l.fit.params, target);
            const double kl_j = detail::predictive_kl(*problem, fit_j.fit.params, target);
            const std::string s(label);
            rows.push_back({rep, "kl_" + s, "lambda_only", kl_l});
            rows.push_back({rep, "kl_" + s, "joint", kl_j});
            rows.push_back({rep, "kl_diff_" + s, "lambda_only-joint", kl_l - kl_j});
        }
    });
    return report;
}

} // namespace eblmm

#endif // EBLMM_SIM_HPP
