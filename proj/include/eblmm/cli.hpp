#ifndef EBLMM_CLI_HPP
#define EBLMM_CLI_HPP

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "eblmm/design.hpp"
#include "eblmm/eb.hpp"
#include "eblmm/em.hpp"
#include "eblmm/error.hpp"
#include "eblmm/io.hpp"
#include "eblmm/laplace.hpp"
#include "eblmm/parallel.hpp"
#include "eblmm/params.hpp"
#include "eblmm/predict.hpp"
#include "eblmm/rng.hpp"
#include "eblmm/sim.hpp"

namespace eblmm::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kValidation = 2, kNumerical = 3, kInternal = 4 };

// ---------------------------------------------------------------------------
// Typed access to config objects. Every object is checked for unknown keys.

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ValidationError(where + " must be a JSON object", where);
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known) throw ValidationError("unknown key '" + key + "' in " + where, where + "." + key);
    }
}

inline std::string path_of(const std::string& where, const std::string& key) {
    return where.empty() ? key : where + "." + key;
}

inline const json* find(const json& j, const std::string& key) {
    const auto it = j.find(key);
    return it == j.end() ? nullptr : &*it;
}

inline std::string get_string(const json& j, const std::string& key, const std::string& where,
                              std::optional<std::string> fallback = std::nullopt) {
    const json* v = find(j, key);
    if (!v) {
        if (fallback) return *fallback;
        throw ValidationError("missing required key '" + path_of(where, key) + "'", path_of(where, key));
    }
    if (!v->is_string()) throw ValidationError(path_of(where, key) + " must be a string", path_of(where, key));
    return v->get<std::string>();
}

inline double get_number(const json& j, const std::string& key, const std::string& where,
                         std::optional<double> fallback = std::nullopt) {
    const json* v = find(j, key);
    if (!v) {
        if (fallback) return *fallback;
        throw ValidationError("missing required key '" + path_of(where, key) + "'", path_of(where, key));
    }
    if (!v->is_number()) throw ValidationError(path_of(where, key) + " must be a number", path_of(where, key));
    return v->get<double>();
}

inline long long get_integer(const json& j, const std::string& key, const std::string& where,
                             std::optional<long long> fallback = std::nullopt) {
    const json* v = find(j, key);
    if (!v) {
        if (fallback) return *fallback;
        throw ValidationError("missing required key '" + path_of(where, key) + "'", path_of(where, key));
    }
    if (!v->is_number_integer()) {
        throw ValidationError(path_of(where, key) + " must be an integer", path_of(where, key));
    }
    return v->get<long long>();
}

inline bool get_bool(const json& j, const std::string& key, const std::string& where, bool fallback) {
    const json* v = find(j, key);
    if (!v) return fallback;
    if (!v->is_boolean()) throw ValidationError(path_of(where, key) + " must be true or false", path_of(where, key));
    return v->get<bool>();
}

inline std::vector<std::string> get_strings(const json& j, const std::string& key, const std::string& where,
                                            bool required = false) {
    const json* v = find(j, key);
    if (!v) {
        if (required) throw ValidationError("missing required key '" + path_of(where, key) + "'", path_of(where, key));
        return {};
    }
    if (!v->is_array()) throw ValidationError(path_of(where, key) + " must be an array of strings", path_of(where, key));
    std::vector<std::string> out;
    for (const auto& e : *v) {
        if (!e.is_string()) {
            throw ValidationError(path_of(where, key) + " must be an array of strings", path_of(where, key));
        }
        out.push_back(e.get<std::string>());
    }
    return out;
}

inline std::pair<double, double> get_bounds(const json& j, const std::string& key, const std::string& where,
                                            std::pair<double, double> fallback) {
    const json* v = find(j, key);
    if (!v) return fallback;
    if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number()) {
        throw ValidationError(path_of(where, key) + " must be [lower, upper]", path_of(where, key));
    }
    return {(*v)[0].get<double>(), (*v)[1].get<double>()};
}

inline MatrixXd get_matrix(const json& v, const std::string& where) {
    if (!v.is_array() || v.empty()) throw ValidationError(where + " must be a non-empty array of rows", where);
    const std::size_t rows = v.size();
    std::size_t cols = 0;
    MatrixXd out;
    for (std::size_t i = 0; i < rows; ++i) {
        if (!v[i].is_array()) throw ValidationError(where + " must be an array of rows", where);
        if (i == 0) {
            cols = v[i].size();
            out.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        }
        if (v[i].size() != cols) throw ValidationError(where + " has rows of different lengths", where);
        for (std::size_t k = 0; k < cols; ++k) {
            if (!v[i][k].is_number()) throw ValidationError(where + " must contain numbers", where);
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = v[i][k].get<double>();
        }
    }
    return out;
}

inline json matrix_json(const MatrixXd& m) {
    json out = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
        out.push_back(std::move(row));
    }
    return out;
}

inline json vector_json(const VectorXd& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

inline json read_json_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open config file '" + path.string() + "'", path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("config file '" + path.string() + "' is not valid JSON: " + e.what(), path.string());
    }
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

// ---------------------------------------------------------------------------
// Model columns and design construction.

constexpr const char* kInterceptName = "(Intercept)";

struct EffectColumns {
    std::string name;
    std::string group;
    std::vector<std::string> covariates;
    bool intercept = true;
};

struct ModelColumns {
    std::string data;
    std::string response;
    std::vector<std::string> fixed;
    bool intercept = true;
    std::vector<EffectColumns> effects;

    std::vector<std::string> fixed_names() const {
        std::vector<std::string> out;
        if (intercept) out.push_back(kInterceptName);
        out.insert(out.end(), fixed.begin(), fixed.end());
        return out;
    }
};

inline std::vector<std::string> covariate_names(const EffectColumns& e) {
    std::vector<std::string> out;
    if (e.intercept) out.push_back(kInterceptName);
    out.insert(out.end(), e.covariates.begin(), e.covariates.end());
    return out;
}

inline std::vector<EffectColumns> parse_effects(const json& j, const std::string& where) {
    if (!j.is_array()) throw ValidationError(where + " must be an array", where);
    std::vector<EffectColumns> out;
    std::set<std::string> names;
    for (std::size_t k = 0; k < j.size(); ++k) {
        const std::string w = where + "[" + std::to_string(k) + "]";
        check_keys(j[k], w, {"name", "group", "covariates", "intercept"});
        EffectColumns e;
        e.group = get_string(j[k], "group", w);
        e.name = get_string(j[k], "name", w, e.group);
        e.covariates = get_strings(j[k], "covariates", w);
        e.intercept = get_bool(j[k], "intercept", w, true);
        if (!e.intercept && e.covariates.empty()) {
            throw ValidationError(w + " needs an intercept or at least one covariate", w);
        }
        if (!names.insert(e.name).second) throw ValidationError("duplicate random effect name '" + e.name + "'", w);
        out.push_back(std::move(e));
    }
    return out;
}

inline ModelColumns parse_columns(const json& j, const std::string& where, const fs::path& base, bool with_effects) {
    ModelColumns m;
    m.data = resolve(base, get_string(j, "data", where)).string();
    m.response = get_string(j, "response", where);
    m.fixed = get_strings(j, "fixed_effects", where);
    m.intercept = get_bool(j, "intercept", where, true);
    if (!m.intercept && m.fixed.empty()) {
        throw ValidationError("the model needs an intercept or at least one fixed effect", "fixed_effects");
    }
    if (with_effects) {
        const json* re = find(j, "random_effects");
        if (re) m.effects = parse_effects(*re, path_of(where, "random_effects"));
    }
    return m;
}

inline json columns_json(const ModelColumns& m) {
    json effects = json::array();
    for (const auto& e : m.effects) {
        effects.push_back({{"name", e.name}, {"group", e.group}, {"covariates", e.covariates},
                           {"intercept", e.intercept}});
    }
    return {{"data", m.data},         {"response", m.response},   {"fixed_effects", m.fixed},
            {"intercept", m.intercept}, {"random_effects", effects}};
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

/// Labels of one grouping factor mapped to 0-based levels in
/// first-appearance order.
struct LevelMap {
    std::vector<std::string> labels;
    std::map<std::string, int> index;

    int add(const std::string& label) {
        const auto it = index.find(label);
        if (it != index.end()) return it->second;
        const int k = static_cast<int>(labels.size());
        labels.push_back(label);
        index.emplace(label, k);
        return k;
    }

    /// Rejects labels that differ only by surrounding whitespace.
    void check_unambiguous(const std::string& column) const {
        std::map<std::string, std::string> seen;
        for (const auto& l : labels) {
            const auto [it, inserted] = seen.emplace(trim(l), l);
            if (!inserted) {
                throw ValidationError("ambiguous level labels '" + it->second + "' and '" + l + "' in column '" +
                                          column + "'",
                                      column);
            }
        }
    }
};

inline MatrixXd columns_matrix(const CsvTable& table, const std::vector<std::string>& names, bool intercept) {
    const Eigen::Index n = static_cast<Eigen::Index>(table.rows.size());
    MatrixXd out(n, static_cast<Eigen::Index>(names.size()) + (intercept ? 1 : 0));
    Eigen::Index col = 0;
    if (intercept) out.col(col++).setOnes();
    for (const auto& name : names) {
        const auto values = table.numeric(name);
        for (Eigen::Index i = 0; i < n; ++i) out(i, col) = values[i];
        ++col;
    }
    return out;
}

struct LoadedData {
    ModelDesign design;
    std::vector<LevelMap> levels;
};

inline LoadedData load_design(const CsvTable& table, const ModelColumns& m) {
    if (table.rows.empty()) throw ValidationError("data file '" + m.data + "' has no rows", m.data);
    LoadedData out;
    const auto y = table.numeric(m.response);
    out.design.y = Eigen::Map<const VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
    out.design.X = columns_matrix(table, m.fixed, m.intercept);
    for (const auto& e : m.effects) {
        LevelMap map;
        RandomEffectSpec spec;
        spec.name = e.name;
        for (const auto& label : table.strings(e.group)) spec.group_of.push_back(map.add(label));
        map.check_unambiguous(e.group);
        spec.levels = static_cast<int>(map.labels.size());
        spec.U = columns_matrix(table, e.covariates, e.intercept);
        out.design.effects.push_back(std::move(spec));
        out.levels.push_back(std::move(map));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prior and solver settings.

struct PriorConfig {
    enum class Mode { Flat, Fixed, EmpiricalBayes };
    Mode mode = Mode::Flat;
    PriorSpec fixed;
    HyperSearchSpec search;
};

inline EmSettings parse_em(const json* j) {
    EmSettings s;
    if (!j) return s;
    check_keys(*j, "em", {"max_iterations", "tolerance"});
    s.max_iterations = static_cast<int>(get_integer(*j, "max_iterations", "em", s.max_iterations));
    s.tolerance = get_number(*j, "tolerance", "em", s.tolerance);
    validate_settings(s);
    return s;
}

inline HyperSearchSpec parse_search(const json* j, int num_effects, const std::string& where) {
    HyperSearchSpec s;
    s.shared_scale = true;
    s.effects.resize(num_effects);
    if (!j) return s;
    check_keys(*j, where,
               {"shared_scale", "optimize_lambda", "lambda", "alpha", "b_bounds", "a_bounds", "lambda_bounds",
                "multistarts", "tolerance", "fd_step", "max_iterations", "inner_tolerance", "inner_max_iterations",
                "proper_margin", "effects"});
    s.shared_scale = get_bool(*j, "shared_scale", where, true);
    s.optimize_lambda = get_bool(*j, "optimize_lambda", where, false);
    s.lambda = get_number(*j, "lambda", where, 0.0);
    s.alpha = get_number(*j, "alpha", where, kDefaultAlpha);
    std::tie(s.b_lower, s.b_upper) = get_bounds(*j, "b_bounds", where, {s.b_lower, s.b_upper});
    std::tie(s.a_lower, s.a_upper) = get_bounds(*j, "a_bounds", where, {s.a_lower, s.a_upper});
    std::tie(s.lambda_lower, s.lambda_upper) =
        get_bounds(*j, "lambda_bounds", where, {s.lambda_lower, s.lambda_upper});
    s.multistarts = static_cast<int>(get_integer(*j, "multistarts", where, s.multistarts));
    s.tolerance = get_number(*j, "tolerance", where, s.tolerance);
    s.fd_step = get_number(*j, "fd_step", where, s.fd_step);
    s.max_iterations = static_cast<int>(get_integer(*j, "max_iterations", where, s.max_iterations));
    s.inner_tolerance = get_number(*j, "inner_tolerance", where, s.inner_tolerance);
    s.inner_max_iterations = static_cast<int>(get_integer(*j, "inner_max_iterations", where, s.inner_max_iterations));
    s.proper_margin = get_number(*j, "proper_margin", where, s.proper_margin);
    if (!(s.alpha >= 0.0)) throw ValidationError("alpha must be nonnegative", path_of(where, "alpha"));
    if (!(s.tolerance > 0.0) || !(s.fd_step > 0.0) || !(s.inner_tolerance > 0.0) || s.max_iterations < 1 ||
        s.inner_max_iterations < 1 || !(s.proper_margin > 0.0)) {
        throw ValidationError("search tolerances, steps and iteration limits must be positive", where);
    }
    if (const json* effects = find(*j, "effects")) {
        const std::string w = path_of(where, "effects");
        if (!effects->is_array() || static_cast<int>(effects->size()) != num_effects) {
            throw ValidationError(w + " must list one entry per random effect", w);
        }
        for (int r = 0; r < num_effects; ++r) {
            const std::string wr = w + "[" + std::to_string(r) + "]";
            const json& e = (*effects)[r];
            check_keys(e, wr, {"strength", "scale", "mode"});
            if (find(e, "strength")) s.effects[r].strength = get_number(e, "strength", wr);
            if (find(e, "scale")) s.effects[r].scale = get_number(e, "scale", wr);
            if (const json* m = find(e, "mode")) {
                s.effects[r].mode = EffectSearch::Mode::Fixed;
                s.effects[r].fixed_mode = get_matrix(*m, path_of(wr, "mode"));
            }
        }
    }
    return s;
}

inline PriorConfig parse_prior(const json* j, const Design& design, const std::string& where) {
    PriorConfig out;
    out.fixed = PriorSpec::flat(design);
    if (!j) return out;
    const std::string mode = get_string(*j, "mode", where, std::string("flat"));
    if (mode == "flat") {
        check_keys(*j, where, {"mode"});
        out.mode = PriorConfig::Mode::Flat;
    } else if (mode == "fixed") {
        check_keys(*j, where, {"mode", "lambda", "alpha", "effects"});
        out.mode = PriorConfig::Mode::Fixed;
        out.fixed.lambda = get_number(*j, "lambda", where, 0.0);
        out.fixed.alpha = get_number(*j, "alpha", where, kDefaultAlpha);
        if (const json* effects = find(*j, "effects")) {
            const std::string w = path_of(where, "effects");
            if (!effects->is_array() || static_cast<int>(effects->size()) != design.num_effects()) {
                throw ValidationError(w + " must list one entry per random effect", w);
            }
            for (int r = 0; r < design.num_effects(); ++r) {
                const std::string wr = w + "[" + std::to_string(r) + "]";
                const json& e = (*effects)[r];
                check_keys(e, wr, {"strength", "scale", "mode"});
                const int q = design.effect(r).dim;
                auto& pr = out.fixed.effects[r];
                pr.strength = get_number(e, "strength", wr);
                if (const json* m = find(e, "mode")) {
                    if (find(e, "scale")) throw ValidationError(wr + " takes either scale or mode", wr);
                    pr.mode = get_matrix(*m, path_of(wr, "mode"));
                } else {
                    pr.mode = get_number(e, "scale", wr, 1.0) * MatrixXd::Identity(q, q);
                }
            }
        }
        validate_prior(design, out.fixed);
    } else if (mode == "empirical_bayes") {
        check_keys(*j, where, {"mode", "search"});
        out.mode = PriorConfig::Mode::EmpiricalBayes;
        out.search = parse_search(find(*j, "search"), design.num_effects(), path_of(where, "search"));
        validate_search(design, out.search);
    } else {
        throw ValidationError(path_of(where, "mode") + " must be flat, fixed or empirical_bayes",
                              path_of(where, "mode"));
    }
    return out;
}

inline json prior_json(const PriorSpec& prior, const std::string& mode) {
    json effects = json::array();
    for (const auto& e : prior.effects) {
        json item = {{"strength", e.strength}, {"mode", matrix_json(e.mode)}};
        if (!e.is_flat() && !e.is_pinned()) {
            item["eta"] = e.dof();
            item["phi"] = matrix_json(e.scale());
        }
        effects.push_back(std::move(item));
    }
    return {{"mode", mode}, {"lambda", prior.lambda}, {"alpha", prior.alpha}, {"effects", effects}};
}

/// Fit under a configured prior; returns the fit and the marginal
/// likelihood when the prior is proper enough to define it.
struct ModelFit {
    FitResult fit;
    std::optional<HyperFit> eb;
    std::optional<double> log_marginal;
    std::string mode;
};

inline ModelFit fit_with_prior(const Design& design, const PriorConfig& prior, const EmSettings& em,
                               std::uint64_t seed) {
    ModelFit out;
    switch (prior.mode) {
    case PriorConfig::Mode::Flat:
        out.mode = "flat";
        out.fit = fit_ml(design, em);
        break;
    case PriorConfig::Mode::Fixed: {
        out.mode = "fixed";
        auto est = laplace_log_marginal(design, prior.fixed, em);
        out.fit = std::move(est.fit);
        out.log_marginal = est.log_marginal;
        break;
    }
    case PriorConfig::Mode::EmpiricalBayes: {
        out.mode = "empirical_bayes";
        HyperSearchSpec search = prior.search;
        search.seed = seed;
        out.eb = optimize_hyperparameters(design, search);
        out.fit = out.eb->fit;
        out.log_marginal = out.eb->log_marginal;
        break;
    }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Command plumbing.

struct CommandOptions {
    fs::path config;
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out;
};

inline fs::path output_dir(const json& config, const CommandOptions& opt, const fs::path& base) {
    if (opt.out) return *opt.out;
    if (config.is_object()) {
        if (const json* o = find(config, "output_dir")) {
            if (o->is_string()) return resolve(base, o->get<std::string>());
        }
    }
    return fs::current_path();
}

inline std::uint64_t seed_of(const json& config, const CommandOptions& opt, long long fallback = 0) {
    if (opt.seed) return *opt.seed;
    const long long s = get_integer(config, "seed", "", fallback);
    if (s < 0) throw ValidationError("seed must be nonnegative", "seed");
    return static_cast<std::uint64_t>(s);
}

inline void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

/// Runs a command body, mapping errors to the exit-code contract and
/// writing error.json next to the outputs.
template <typename Body>
int run_command(const char* name, const CommandOptions& opt, Body&& body) {
    fs::path out = opt.out.value_or(fs::current_path());
    int code = kOk;
    std::string kind;
    std::string message;
    std::string subject;
    try {
        const json config = read_json_file(opt.config);
        out = output_dir(config, opt, opt.config.parent_path());
        body(config, out);
        return kOk;
    } catch (const ValidationError& e) {
        code = kValidation;
        kind = "validation";
        message = e.what();
        subject = e.subject();
    } catch (const NumericalError& e) {
        code = kNumerical;
        kind = "numerical";
        message = e.what();
    } catch (const std::exception& e) {
        code = kInternal;
        kind = "internal";
        message = e.what();
    }
    std::cerr << "eblmm " << name << ": " << message << "\n";
    try {
        json err = {{"command", name}, {"exit_code", code}, {"kind", kind}, {"message", message}};
        if (!subject.empty()) err["subject"] = subject;
        write_json(out / "error.json", err);
    } catch (const std::exception& e) {
        std::cerr << "eblmm " << name << ": could not write error.json: " << e.what() << "\n";
    }
    return code;
}

// ---------------------------------------------------------------------------
// fit

inline json fit_document(const ModelColumns& columns, const LoadedData& data, const Design& design,
                         const ModelFit& fit, std::uint64_t seed) {
    const ModelParams& p = fit.fit.params;
    json effects = json::array();
    json sigmas = json::array();
    for (int r = 0; r < design.num_effects(); ++r) {
        effects.push_back({{"name", design.effect(r).name},
                           {"levels", design.effect(r).levels},
                           {"dim", design.effect(r).dim},
                           {"labels", data.levels[r].labels},
                           {"covariate_names", covariate_names(columns.effects[r])}});
        sigmas.push_back(matrix_json(p.sigmas[r]));
    }
    json doc = {{"format", "eblmm-fit/1"},
                {"model", columns_json(columns)},
                {"n", design.n()},
                {"p", design.p()},
                {"fixed_effect_names", columns.fixed_names()},
                {"effects", effects},
                {"params", {{"beta", vector_json(p.beta)}, {"sigmas", sigmas}, {"sigma2", p.sigma2}}},
                {"prior", prior_json(fit.fit.prior, fit.mode)},
                {"log_likelihood", log_likelihood(design, p)},
                {"log_posterior", fit.fit.log_posterior_trace.back()},
                {"log_marginal", fit.log_marginal ? json(*fit.log_marginal) : json(nullptr)},
                {"fixed_effect_covariance", matrix_json(fixed_effect_covariance(design, p))},
                {"converged", fit.fit.converged},
                {"iterations", fit.fit.iterations},
                {"hessian_clipped", fit.fit.hessian_clipped},
                {"flat_beta_prior", fit.fit.flat_beta_prior},
                {"seed", seed}};
    if (fit.eb) {
        json starts = json::array();
        for (const auto& s : fit.eb->starts) {
            starts.push_back({{"log_marginal", std::isfinite(s.log_marginal) ? json(s.log_marginal) : json(nullptr)},
                              {"initial_log_marginal", std::isfinite(s.initial_log_marginal)
                                                           ? json(s.initial_log_marginal)
                                                           : json(nullptr)},
                              {"iterations", s.iterations},
                              {"evaluations", s.evaluations},
                              {"converged", s.converged},
                              {"error", s.error}});
        }
        json hyper = json::object();
        for (std::size_t k = 0; k < fit.eb->names.size(); ++k) hyper[fit.eb->names[k]] = fit.eb->transformed[k];
        doc["empirical_bayes"] = {{"transformed_optimum", hyper}, {"best_start", fit.eb->best_start}, {"starts", starts}};
    }
    return doc;
}

inline std::string estimates_csv(const ModelColumns& columns, const Design& design, const ModelFit& fit) {
    std::ostringstream out;
    out << "quantity,term,value\n";
    const ModelParams& p = fit.fit.params;
    const auto fixed = columns.fixed_names();
    for (Eigen::Index k = 0; k < p.beta.size(); ++k) {
        out << "beta," << csv_field(fixed[k]) << ',' << format_double(p.beta[k]) << '\n';
    }
    for (int r = 0; r < design.num_effects(); ++r) {
        const auto names = covariate_names(columns.effects[r]);
        for (Eigen::Index a = 0; a < p.sigmas[r].rows(); ++a) {
            for (Eigen::Index b = 0; b <= a; ++b) {
                out << csv_field("sigma_" + design.effect(r).name) << ',' << csv_field(names[a] + ":" + names[b])
                    << ',' << format_double(p.sigmas[r](a, b)) << '\n';
            }
        }
    }
    out << "sigma2,," << format_double(p.sigma2) << '\n';
    if (fit.mode != "flat") {
        out << "lambda,," << format_double(fit.fit.prior.lambda) << '\n';
        for (int r = 0; r < design.num_effects(); ++r) {
            const auto& e = fit.fit.prior.effects[r];
            out << csv_field("b_" + design.effect(r).name) << ",," << format_double(e.strength) << '\n';
            out << csv_field("a_" + design.effect(r).name) << ",," << format_double(e.mode(0, 0)) << '\n';
        }
    }
    if (fit.log_marginal) out << "log_marginal,," << format_double(*fit.log_marginal) << '\n';
    return out.str();
}

inline int cmd_fit(const CommandOptions& opt) {
    return run_command("fit", opt, [&](const json& config, const fs::path& out) {
        check_keys(config, "config", {"data", "response", "fixed_effects", "intercept", "random_effects", "prior", "em",
                                      "output_dir", "seed"});
        const fs::path base = opt.config.parent_path();
        const ModelColumns columns = parse_columns(config, "", base, true);
        const std::uint64_t seed = seed_of(config, opt);
        const EmSettings em = parse_em(find(config, "em"));
        const CsvTable table = read_csv(columns.data);
        const LoadedData data = load_design(table, columns);
        const Design design = validate_design(data.design);
        const PriorConfig prior = parse_prior(find(config, "prior"), design, "prior");
        const ModelFit fit = fit_with_prior(design, prior, em, seed);
        write_json(out / "fit.json", fit_document(columns, data, design, fit, seed));
        write_file_atomic(out / "estimates.csv", estimates_csv(columns, design, fit));
    });
}

// ---------------------------------------------------------------------------
// predict

inline ModelColumns columns_from_fit(const json& fit) {
    const json* model = find(fit, "model");
    if (!model) throw ValidationError("fit file has no model section", "model");
    return parse_columns(*model, "model", fs::path(), true);
}

inline ModelParams params_from_fit(const json& fit) {
    const json* p = find(fit, "params");
    if (!p || !p->is_object()) throw ValidationError("fit file has no params section", "params");
    ModelParams out;
    const json* beta = find(*p, "beta");
    if (!beta || !beta->is_array()) throw ValidationError("fit file params.beta is missing", "params.beta");
    out.beta.resize(static_cast<Eigen::Index>(beta->size()));
    for (std::size_t k = 0; k < beta->size(); ++k) {
        if (!(*beta)[k].is_number()) throw ValidationError("params.beta must contain numbers", "params.beta");
        out.beta[static_cast<Eigen::Index>(k)] = (*beta)[k].get<double>();
    }
    const json* sigmas = find(*p, "sigmas");
    if (!sigmas || !sigmas->is_array()) throw ValidationError("fit file params.sigmas is missing", "params.sigmas");
    for (const auto& s : *sigmas) out.sigmas.push_back(get_matrix(s, "params.sigmas"));
    out.sigma2 = get_number(*p, "sigma2", "params");
    return out;
}

inline int cmd_predict(const CommandOptions& opt) {
    return run_command("predict", opt, [&](const json& config, const fs::path& out) {
        check_keys(config, "config", {"fit", "new_data", "full_covariance", "output_dir", "seed"});
        const fs::path base = opt.config.parent_path();
        const json fit = read_json_file(resolve(base, get_string(config, "fit", "")));
        const fs::path new_path = resolve(base, get_string(config, "new_data", ""));
        const bool full = get_bool(config, "full_covariance", "", false);

        const ModelColumns columns = columns_from_fit(fit);
        const ModelParams params = params_from_fit(fit);
        const LoadedData data = load_design(read_csv(columns.data), columns);
        const json* effects = find(fit, "effects");
        if (!effects || !effects->is_array() || effects->size() != data.levels.size()) {
            throw ValidationError("fit file effects do not match its model", "effects");
        }
        for (std::size_t r = 0; r < data.levels.size(); ++r) {
            if (get_strings((*effects)[r], "labels", "effects") != data.levels[r].labels) {
                throw ValidationError("training data no longer matches the fit (levels of " + columns.effects[r].name +
                                          " changed)",
                                      columns.effects[r].group);
            }
        }

        const CsvTable fresh = read_csv(new_path.string());
        if (fresh.rows.empty()) throw ValidationError("new data file has no rows", new_path.string());
        PredictionProblem problem;
        problem.observed = validate_design(data.design);
        problem.X_new = columns_matrix(fresh, columns.fixed, columns.intercept);
        std::vector<std::vector<bool>> is_fresh;
        for (std::size_t r = 0; r < columns.effects.size(); ++r) {
            const auto& e = columns.effects[r];
            LevelMap map = data.levels[r];
            std::vector<int> groups;
            std::vector<bool> flags;
            for (const auto& label : fresh.strings(e.group)) {
                const int g = map.add(label);
                groups.push_back(g);
                flags.push_back(g >= static_cast<int>(data.levels[r].labels.size()));
            }
            map.check_unambiguous(e.group);
            problem.group_of.push_back(std::move(groups));
            problem.U_new.push_back(columns_matrix(fresh, e.covariates, e.intercept));
            is_fresh.push_back(std::move(flags));
        }
        const GaussianPredictive pred = predict_conditional(problem, params);

        std::ostringstream csv;
        csv << "row,mean,variance";
        for (const auto& e : columns.effects) csv << ',' << csv_field("fresh_" + e.name);
        csv << '\n';
        for (Eigen::Index i = 0; i < pred.mean.size(); ++i) {
            csv << i << ',' << format_double(pred.mean[i]) << ',' << format_double(pred.covariance(i, i));
            for (const auto& flags : is_fresh) csv << ',' << (flags[i] ? 1 : 0);
            csv << '\n';
        }
        write_file_atomic(out / "predictions.csv", csv.str());
        if (full) {
            std::ostringstream cov;
            for (Eigen::Index k = 0; k < pred.mean.size(); ++k) cov << (k ? "," : "") << "c" << k;
            cov << '\n';
            for (Eigen::Index i = 0; i < pred.mean.size(); ++i) {
                for (Eigen::Index k = 0; k < pred.mean.size(); ++k) {
                    cov << (k ? "," : "") << format_double(pred.covariance(i, k));
                }
                cov << '\n';
            }
            write_file_atomic(out / "covariance.csv", cov.str());
        }
    });
}

// ---------------------------------------------------------------------------
// cv

struct CvVariant {
    std::string name;
    std::vector<EffectColumns> effects;
    json prior;
};

struct CvRow {
    int split = 0;
    std::string variant;
    double rmse = 0.0;
    int n_test = 0;
};

/// Test rows of one split: one random observation of every unit level
/// with at least two observations; units seen once stay in training.
inline std::vector<bool> cv_test_rows(const std::vector<std::string>& units, std::uint64_t seed, int split) {
    LevelMap map;
    std::vector<std::vector<int>> rows;
    for (std::size_t i = 0; i < units.size(); ++i) {
        const int g = map.add(units[i]);
        if (g >= static_cast<int>(rows.size())) rows.emplace_back();
        rows[g].push_back(static_cast<int>(i));
    }
    RandomStream rng(seed, static_cast<std::uint32_t>(split), kStreamSplits);
    std::vector<bool> test(units.size(), false);
    for (const auto& r : rows) {
        if (r.size() < 2) continue;
        test[r[rng.below(static_cast<std::uint32_t>(r.size()))]] = true;
    }
    return test;
}

inline CsvTable subset(const CsvTable& table, const std::vector<bool>& keep, bool value) {
    CsvTable out;
    out.header = table.header;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        if (keep[i] == value) out.rows.push_back(table.rows[i]);
    }
    return out;
}

/// Squared prediction error per test point of one variant on one split.
inline double cv_score(const CsvTable& train, const CsvTable& test, const ModelColumns& columns,
                       const json* prior_config, const EmSettings& em, std::uint64_t seed) {
    const LoadedData data = load_design(train, columns);
    const Design design = validate_design(data.design);
    const PriorConfig prior = parse_prior(prior_config, design, "prior");
    const ModelFit fit = fit_with_prior(design, prior, em, seed);

    PredictionProblem problem;
    problem.observed = design;
    problem.X_new = columns_matrix(test, columns.fixed, columns.intercept);
    for (std::size_t r = 0; r < columns.effects.size(); ++r) {
        LevelMap map = data.levels[r];
        std::vector<int> groups;
        for (const auto& label : test.strings(columns.effects[r].group)) groups.push_back(map.add(label));
        problem.group_of.push_back(std::move(groups));
        problem.U_new.push_back(columns_matrix(test, columns.effects[r].covariates, columns.effects[r].intercept));
    }
    const auto pred = predict_conditional(problem, fit.fit.params);
    const auto y = test.numeric(columns.response);
    return rmse_conditional(pred.mean, Eigen::Map<const VectorXd>(y.data(), static_cast<Eigen::Index>(y.size())));
}

struct CvConfig {
    ModelColumns base;
    std::string unit;
    int splits = 10;
    std::vector<CvVariant> variants;
    EmSettings em;
};

inline CvConfig parse_cv(const json& config, const fs::path& base) {
    check_keys(config, "config", {"data", "response", "fixed_effects", "intercept", "unit", "splits", "variants", "em",
                                  "output_dir", "seed"});
    CvConfig out;
    out.base = parse_columns(config, "", base, false);
    out.unit = get_string(config, "unit", "");
    out.splits = static_cast<int>(get_integer(config, "splits", "", 10));
    if (out.splits < 1) throw ValidationError("splits must be at least 1", "splits");
    out.em = parse_em(find(config, "em"));
    const json* variants = find(config, "variants");
    if (!variants || !variants->is_array() || variants->empty()) {
        throw ValidationError("variants must be a non-empty array", "variants");
    }
    std::set<std::string> names;
    for (std::size_t k = 0; k < variants->size(); ++k) {
        const std::string w = "variants[" + std::to_string(k) + "]";
        const json& v = (*variants)[k];
        check_keys(v, w, {"name", "random_effects", "prior"});
        CvVariant variant;
        variant.name = get_string(v, "name", w);
        if (!names.insert(variant.name).second) throw ValidationError("duplicate variant name '" + variant.name + "'", w);
        if (const json* re = find(v, "random_effects")) variant.effects = parse_effects(*re, path_of(w, "random_effects"));
        if (const json* p = find(v, "prior")) variant.prior = *p;
        out.variants.push_back(std::move(variant));
    }
    return out;
}

/// Every (split, variant) score; rows ordered by split then variant.
inline std::vector<CvRow> cross_validate(const CsvTable& table, const CvConfig& cv, std::uint64_t seed) {
    const auto units = table.strings(cv.unit);
    std::vector<CvRow> rows(static_cast<std::size_t>(cv.splits) * cv.variants.size());
    parallel_for(static_cast<int>(rows.size()), [&](int k) {
        const int split = k / static_cast<int>(cv.variants.size());
        const auto& variant = cv.variants[k % cv.variants.size()];
        const auto test_rows = cv_test_rows(units, seed, split);
        const CsvTable train = subset(table, test_rows, false);
        const CsvTable test = subset(table, test_rows, true);
        if (test.rows.empty()) throw ValidationError("no unit has two or more observations", cv.unit);
        ModelColumns columns = cv.base;
        columns.effects = variant.effects;
        const json* prior = variant.prior.is_null() ? nullptr : &variant.prior;
        rows[k] = {split, variant.name, cv_score(train, test, columns, prior, cv.em, seed),
                   static_cast<int>(test.rows.size())};
    });
    return rows;
}

inline int cmd_crossvalidate(const CommandOptions& opt) {
    return run_command("cv", opt, [&](const json& config, const fs::path& out) {
        const CvConfig cv = parse_cv(config, opt.config.parent_path());
        const std::uint64_t seed = seed_of(config, opt);
        const CsvTable table = read_csv(cv.base.data);
        const auto rows = cross_validate(table, cv, seed);
        std::ostringstream csv;
        csv << "split,variant,rmse,n_test\n";
        for (const auto& r : rows) {
            csv << r.split << ',' << csv_field(r.variant) << ',' << format_double(r.rmse) << ',' << r.n_test << '\n';
        }
        write_file_atomic(out / "cv.csv", csv.str());
    });
}

// ---------------------------------------------------------------------------
// simulate

inline std::string level_label(const std::string& effect, int level) {
    char buf[64];
    if (effect == "individual") {
        std::snprintf(buf, sizeof buf, "ind_%03d", level + 1);
    } else {
        std::snprintf(buf, sizeof buf, "%s_%d", effect.c_str(), level + 1);
    }
    return buf;
}

inline ScenarioConfig parse_scenario(const json& config, std::uint64_t seed) {
    const std::string name = get_string(config, "scenario", "", std::string("re_regularization"));
    ScenarioConfig c;
    if (name == "re_regularization") {
        c = ScenarioConfig::re_regularization();
    } else if (name == "joint_regularization") {
        c = ScenarioConfig::joint_regularization();
    } else {
        throw ValidationError("scenario must be re_regularization or joint_regularization", "scenario");
    }
    c.seed = seed;
    c.individuals = static_cast<int>(get_integer(config, "individuals", "", c.individuals));
    c.obs_per_individual = static_cast<int>(get_integer(config, "obs_per_individual", "", c.obs_per_individual));
    c.replicates = static_cast<int>(get_integer(config, "replicates", "", c.replicates));
    c.new_per_individual = static_cast<int>(get_integer(config, "new_per_individual", "", c.new_per_individual));
    c.fixed_design = get_bool(config, "fixed_design", "", c.fixed_design);
    const int p = static_cast<int>(get_integer(config, "p", "", c.p));
    const int cities = static_cast<int>(get_integer(config, "cities", "", 4));
    for (auto& e : c.effects) {
        if (e.grouping == EffectScenario::Grouping::Individual) e.levels = c.individuals;
        if (e.grouping == EffectScenario::Grouping::Balanced) e.levels = cities;
        if (e.covariates == EffectScenario::Covariates::ReuseX && p != c.p) e.sigma0 = ScenarioConfig::default_sigma0(p);
    }
    c.p = p;
    if (const json* s = find(config, "sigma0")) {
        const MatrixXd sigma0 = get_matrix(*s, "sigma0");
        for (auto& e : c.effects) e.sigma0 = sigma0;
    }
    if (const json* s = find(config, "sigma2")) {
        if (!s->is_number()) throw ValidationError("sigma2 must be a number", "sigma2");
        c.noise_rule = ScenarioConfig::NoiseRule::Explicit;
        c.sigma2 = s->get<double>();
    }
    validate_scenario(c);
    return c;
}

inline std::string dataset_csv(const ScenarioConfig& c, const ModelDesign& d) {
    std::ostringstream out;
    out << 'y';
    for (int k = 1; k < c.p; ++k) out << ",x" << k;
    for (const auto& e : c.effects) {
        if (e.covariates == EffectScenario::Covariates::FreshGaussian) {
            for (int k = 1; k < e.dim; ++k) out << ',' << e.name << "_u" << k;
        }
    }
    for (const auto& e : c.effects) out << ',' << e.name;
    out << '\n';
    for (Eigen::Index i = 0; i < d.y.size(); ++i) {
        out << format_double(d.y[i]);
        for (int k = 1; k < c.p; ++k) out << ',' << format_double(d.X(i, k));
        for (std::size_t r = 0; r < c.effects.size(); ++r) {
            if (c.effects[r].covariates == EffectScenario::Covariates::FreshGaussian) {
                for (int k = 1; k < c.effects[r].dim; ++k) out << ',' << format_double(d.effects[r].U(i, k));
            }
        }
        for (std::size_t r = 0; r < c.effects.size(); ++r) {
            out << ',' << level_label(c.effects[r].name, d.effects[r].group_of[i]);
        }
        out << '\n';
    }
    return out.str();
}

/// Config that fits the written dataset with the empirical-Bayes prior.
inline json dataset_fit_config(const ScenarioConfig& c) {
    json fixed = json::array();
    for (int k = 1; k < c.p; ++k) fixed.push_back("x" + std::to_string(k));
    json effects = json::array();
    for (const auto& e : c.effects) {
        json covs = json::array();
        if (e.covariates == EffectScenario::Covariates::ReuseX) {
            covs = fixed;
        } else {
            for (int k = 1; k < e.dim; ++k) covs.push_back(e.name + "_u" + std::to_string(k));
        }
        effects.push_back({{"name", e.name}, {"group", e.name}, {"covariates", covs}, {"intercept", true}});
    }
    const bool wide = c.p >= c.n();
    return {{"data", "dataset.csv"},
            {"response", "y"},
            {"fixed_effects", fixed},
            {"intercept", true},
            {"random_effects", effects},
            {"prior", {{"mode", "empirical_bayes"}, {"search", {{"shared_scale", true}, {"optimize_lambda", wide}}}}},
            {"seed", c.seed}};
}

inline int cmd_simulate(const CommandOptions& opt) {
    return run_command("simulate", opt, [&](const json& config, const fs::path& out) {
        check_keys(config, "config", {"scenario", "individuals", "obs_per_individual", "p", "cities", "replicates",
                                      "new_per_individual", "fixed_design", "sigma0", "sigma2", "replicate", "study",
                                      "output_dir", "seed"});
        const std::uint64_t seed = seed_of(config, opt, static_cast<long long>(ScenarioConfig{}.seed));
        const ScenarioConfig c = parse_scenario(config, seed);
        const int replicate = static_cast<int>(get_integer(config, "replicate", "", 0));
        if (replicate < 0) throw ValidationError("replicate must be nonnegative", "replicate");
        const SimulatedDataset data = generate_dataset(c, replicate);
        write_file_atomic(out / "dataset.csv", dataset_csv(c, data.design));

        json sigmas = json::array();
        json effects = json::array();
        for (std::size_t r = 0; r < c.effects.size(); ++r) {
            sigmas.push_back(matrix_json(data.truth.sigmas[r]));
            effects.push_back({{"name", c.effects[r].name}, {"levels", data.design.effects[r].levels},
                               {"dim", data.design.effects[r].U.cols()}});
        }
        json truth = {{"format", "eblmm-truth/1"},
                      {"scenario", c.name},
                      {"seed", seed},
                      {"replicate", replicate},
                      {"n", c.n()},
                      {"p", c.p},
                      {"effects", effects},
                      {"params", {{"beta", vector_json(data.truth.beta)}, {"sigmas", sigmas}, {"sigma2", data.truth.sigma2}}},
                      {"header", scenario_header(c)}};
        write_json(out / "truth.json", truth);
        write_json(out / "fit_config.json", dataset_fit_config(c));

        if (get_bool(config, "study", "", false)) {
            const StudyReport report = c.name == "joint_regularization" ? run_joint_regularization_study(c)
                                                                        : run_re_regularization_study(c);
            std::ostringstream csv;
            write_report_csv(csv, report);
            write_file_atomic(out / "report.csv", csv.str());
            json failures = json::array();
            for (const auto& [rep, msg] : report.failures) failures.push_back({{"replicate", rep}, {"message", msg}});
            write_json(out / "failures.json", failures);
        }
    });
}

} // namespace eblmm::cli

#endif // EBLMM_CLI_HPP
