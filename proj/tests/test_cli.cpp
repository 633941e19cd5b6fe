#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "eblmm/eb.hpp"
#include "eblmm/io.hpp"
#include "eblmm/predict.hpp"
#include "eblmm/sim.hpp"

using namespace eblmm;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("eblmm_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

json read_json(const fs::path& path) { return json::parse(read_text(path)); }

int run_cli(const std::string& command, const fs::path& config, const std::string& extra = "") {
    const std::string cmd = std::string(EBLMM_CLI_PATH) + " " + command + " --config '" + config.string() + "' " +
                            extra + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

VectorXd to_vector(const json& j) {
    VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    return v;
}

MatrixXd to_matrix(const json& j) {
    MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        for (std::size_t k = 0; k < j[i].size(); ++k) m(i, k) = j[i][k].get<double>();
    }
    return m;
}

ModelParams params_of(const json& fit) {
    ModelParams p;
    p.beta = to_vector(fit["params"]["beta"]);
    for (const auto& s : fit["params"]["sigmas"]) p.sigmas.push_back(to_matrix(s));
    p.sigma2 = fit["params"]["sigma2"].get<double>();
    return p;
}

// y = 1 + 2 x1 - x2 + noise; g has three levels, h two.
std::string grouped_csv() {
    std::ostringstream s;
    s << "y,x1,x2,g,h\n";
    const double x1[] = {0.1, -0.4, 1.3, 0.7, -1.1, 0.2, 0.9, -0.3, 0.5, 1.8, -0.6, 0.0};
    const double x2[] = {1.0, 0.3, -0.2, 0.8, 0.5, -1.4, 0.6, 0.1, -0.7, 0.4, 1.2, -0.5};
    const double e[] = {0.3, -0.2, 0.1, 0.4, -0.5, 0.2, 0.0, -0.1, 0.6, -0.3, 0.2, -0.4};
    const double shift[] = {0.8, -0.5, 0.1};
    for (int i = 0; i < 12; ++i) {
        s << format_double(1.0 + 2.0 * x1[i] - x2[i] + shift[i % 3] + e[i]) << ',' << x1[i] << ',' << x2[i] << ",g"
          << i % 3 << ",h" << i % 2 << '\n';
    }
    return s.str();
}

} // namespace

TEST(CliFit, OrdinaryLeastSquaresWithoutRandomEffects) {
    const fs::path dir = fresh_dir("ols");
    write_text(dir / "d.csv", "y,x\n1,0\n3,1\n2,2\n6,3\n5,4\n");
    write_text(dir / "c.json", R"({"data":"d.csv","response":"y","fixed_effects":["x"],"prior":{"mode":"flat"},
                                  "output_dir":"out"})");
    ASSERT_EQ(run_cli("fit", dir / "c.json"), 0);
    const json fit = read_json(dir / "out" / "fit.json");
    // Normal equations by hand: sum x = 10, sum x^2 = 30, sum y = 17, sum xy = 45, n = 5.
    const double slope = (5.0 * 45.0 - 10.0 * 17.0) / (5.0 * 30.0 - 100.0);
    const double intercept = (17.0 - slope * 10.0) / 5.0;
    EXPECT_NEAR(fit["params"]["beta"][0].get<double>(), intercept, 1e-8);
    EXPECT_NEAR(fit["params"]["beta"][1].get<double>(), slope, 1e-8);
    EXPECT_EQ(fit["fixed_effect_names"], json({"(Intercept)", "x"}));
    const CsvTable est = read_csv((dir / "out" / "estimates.csv").string());
    EXPECT_EQ(est.header, (std::vector<std::string>{"quantity", "term", "value"}));
}

TEST(CliFit, MissingColumnIsValidationError) {
    const fs::path dir = fresh_dir("missing");
    write_text(dir / "d.csv", "y,x\n1,0\n3,1\n2,2\n");
    write_text(dir / "c.json", R"({"data":"d.csv","response":"y","fixed_effects":["x9"],"output_dir":"out"})");
    EXPECT_EQ(run_cli("fit", dir / "c.json"), 2);
    const json err = read_json(dir / "out" / "error.json");
    EXPECT_EQ(err["exit_code"], 2);
    EXPECT_EQ(err["subject"], "x9");
    EXPECT_NE(err["message"].get<std::string>().find("x9"), std::string::npos);
}

TEST(CliFit, ContractExitCodes) {
    const fs::path dir = fresh_dir("codes");
    write_text(dir / "d.csv", "y,x,z\n1,0,0\n3,1,2\n2,2,4\n4,3,6\n");
    write_text(dir / "unknown.json", R"({"data":"d.csv","response":"y","colour":"red","output_dir":"a"})");
    EXPECT_EQ(run_cli("fit", dir / "unknown.json"), 2);
    EXPECT_EQ(read_json(dir / "a" / "error.json")["kind"], "validation");
    write_text(dir / "collinear.json", R"({"data":"d.csv","response":"y","fixed_effects":["x","z"],"output_dir":"b"})");
    EXPECT_EQ(run_cli("fit", dir / "collinear.json"), 3);
    EXPECT_EQ(read_json(dir / "b" / "error.json")["exit_code"], 3);
    EXPECT_EQ(run_cli("fit", dir / "no_such_file.json"), 2);
    write_text(dir / "broken.json", "{\"data\": ");
    EXPECT_EQ(run_cli("fit", dir / "broken.json", "--out " + (dir / "c").string()), 2);
}

TEST(CliSimulate, DefaultScenarioAndSeedRepetition) {
    const fs::path dir = fresh_dir("simulate");
    write_text(dir / "s.json", R"({"scenario":"re_regularization"})");
    ASSERT_EQ(run_cli("simulate", dir / "s.json", "--out " + (dir / "a").string()), 0);
    ASSERT_EQ(run_cli("simulate", dir / "s.json", "--out " + (dir / "b").string()), 0);
    ASSERT_EQ(run_cli("simulate", dir / "s.json", "--seed 99 --out " + (dir / "c").string()), 0);
    for (const char* f : {"dataset.csv", "truth.json", "fit_config.json"}) {
        EXPECT_EQ(read_text(dir / "a" / f), read_text(dir / "b" / f)) << f;
    }
    EXPECT_NE(read_text(dir / "a" / "dataset.csv"), read_text(dir / "c" / "dataset.csv"));

    const CsvTable t = read_csv((dir / "a" / "dataset.csv").string());
    EXPECT_EQ(t.rows.size(), 240u);
    const auto ind = t.strings("individual");
    const auto city = t.strings("city");
    EXPECT_EQ(std::set<std::string>(ind.begin(), ind.end()).size(), 60u);
    EXPECT_EQ(std::set<std::string>(city.begin(), city.end()).size(), 4u);
    EXPECT_EQ(ind[0].substr(0, 4), "ind_");
    EXPECT_EQ(city[0].substr(0, 5), "city_");

    // Values round-trip exactly.
    const SimulatedDataset lib = generate_dataset(ScenarioConfig::re_regularization(), 0);
    const auto y = t.numeric("y");
    for (int i = 0; i < 240; ++i) ASSERT_EQ(y[i], lib.design.y[i]);
}

TEST(CliFit, EmpiricalBayesMatchesLibrary) {
    const fs::path dir = fresh_dir("eb");
    write_text(dir / "s.json", R"({"scenario":"re_regularization","output_dir":"sim"})");
    ASSERT_EQ(run_cli("simulate", dir / "s.json"), 0);
    ASSERT_EQ(run_cli("fit", dir / "sim" / "fit_config.json", "--out " + (dir / "fit").string()), 0);
    const json fit = read_json(dir / "fit" / "fit.json");
    EXPECT_EQ(fit["n"], 240);

    const Design d = validate_design(generate_dataset(ScenarioConfig::re_regularization(), 0).design);
    HyperSearchSpec spec = HyperSearchSpec::scaled_identity(d);
    spec.seed = fit["seed"].get<std::uint64_t>();
    const HyperFit lib = optimize_hyperparameters(d, spec);
    const json& got = fit["empirical_bayes"]["transformed_optimum"];
    ASSERT_EQ(got.size(), lib.names.size());
    for (std::size_t k = 0; k < lib.names.size(); ++k) {
        EXPECT_NEAR(got.at(lib.names[k]).get<double>(), lib.transformed[static_cast<Eigen::Index>(k)], 1e-4) << lib.names[k];
    }
    EXPECT_NEAR(fit["log_marginal"].get<double>(), lib.log_marginal, 1e-6);
    for (int r = 0; r < 2; ++r) {
        EXPECT_NEAR(fit["prior"]["effects"][r]["strength"].get<double>(), lib.prior.effects[r].strength, 1e-4);
    }
}

TEST(CliPredict, FreshLevelsLibraryAgreementAndHandCase) {
    const fs::path dir = fresh_dir("predict");
    write_text(dir / "d.csv", grouped_csv());
    write_text(dir / "c.json", R"({"data":"d.csv","response":"y","fixed_effects":["x1","x2"],
        "random_effects":[{"group":"g"},{"group":"h","intercept":true,"covariates":["x1"]}],
        "prior":{"mode":"fixed","lambda":0,"effects":[{"strength":0.5,"scale":1},{"strength":0.5,"scale":1}]},
        "output_dir":"fit"})");
    ASSERT_EQ(run_cli("fit", dir / "c.json"), 0);
    const json fit = read_json(dir / "fit" / "fit.json");
    const ModelParams p = params_of(fit);

    write_text(dir / "new.csv", "x1,x2,g,h\n0.5,0.5,new1,new2\n-1,2,new1,new3\n0.3,0.1,g1,h0\n1.5,-0.5,g2,fresh\n");
    write_text(dir / "p.json", R"({"fit":"fit/fit.json","new_data":"new.csv","full_covariance":true,"output_dir":"pred"})");
    ASSERT_EQ(run_cli("predict", dir / "p.json"), 0);
    const CsvTable pred = read_csv((dir / "pred" / "predictions.csv").string());
    const auto mean = pred.numeric("mean");
    const auto var = pred.numeric("variance");
    EXPECT_EQ(pred.strings("fresh_g"), (std::vector<std::string>{"1", "1", "0", "0"}));
    EXPECT_EQ(pred.strings("fresh_h"), (std::vector<std::string>{"1", "1", "0", "1"}));

    // Library call on the same data; labels in first-appearance order g0, g1, g2 and h0, h1.
    const CsvTable train = read_csv((dir / "d.csv").string());
    ModelDesign raw;
    const auto y = train.numeric("y"), x1 = train.numeric("x1"), x2 = train.numeric("x2");
    raw.y = Eigen::Map<const VectorXd>(y.data(), 12);
    raw.X.resize(12, 3);
    RandomEffectSpec g{"g", {}, MatrixXd::Ones(12, 1), 3}, h{"h", {}, MatrixXd::Ones(12, 2), 2};
    for (int i = 0; i < 12; ++i) {
        raw.X.row(i) << 1.0, x1[i], x2[i];
        g.group_of.push_back(i % 3);
        h.group_of.push_back(i % 2);
        h.U(i, 1) = x1[i];
    }
    raw.effects = {g, h};
    PredictionProblem prob{validate_design(raw), MatrixXd(4, 3), {{3, 3, 1, 2}, {2, 3, 0, 4}}, {MatrixXd::Ones(4, 1), MatrixXd::Ones(4, 2)}};
    prob.X_new << 1, 0.5, 0.5, 1, -1, 2, 1, 0.3, 0.1, 1, 1.5, -0.5;
    prob.U_new[1].col(1) << 0.5, -1, 0.3, 1.5;
    const GaussianPredictive lib = predict_conditional(prob, p);
    for (int i = 0; i < 4; ++i) {
        EXPECT_NEAR(mean[i], lib.mean[i], 1e-10);
        EXPECT_NEAR(var[i], lib.covariance(i, i), 1e-10);
    }
    // All levels fresh: mean is X_new beta.
    EXPECT_NEAR(mean[0], prob.X_new.row(0).dot(p.beta), 1e-10);
    EXPECT_NEAR(mean[1], prob.X_new.row(1).dot(p.beta), 1e-10);
    const CsvTable cov = read_csv((dir / "pred" / "covariance.csv").string());
    EXPECT_EQ(cov.rows.size(), 4u);
    EXPECT_NEAR(cov.numeric("c1")[0], lib.covariance(0, 1), 1e-10);
}

TEST(CliPredict, ThreeRowHandConditioning) {
    const fs::path dir = fresh_dir("hand");
    write_text(dir / "d.csv", "y,g\n1,a\n3,a\n2,b\n");
    write_text(dir / "c.json", R"({"data":"d.csv","response":"y","random_effects":[{"group":"g"}],
        "prior":{"mode":"flat"},"output_dir":"fit"})");
    ASSERT_EQ(run_cli("fit", dir / "c.json"), 0);
    json fit = read_json(dir / "fit" / "fit.json");
    // Replace the estimates with known values; two observations in level a, one in b.
    fit["params"] = {{"beta", {0.5}}, {"sigmas", {{{2.0}}}}, {"sigma2", 1.0}};
    write_text(dir / "fit" / "fit.json", fit.dump());
    write_text(dir / "new.csv", "g\na\n");
    write_text(dir / "p.json", R"({"fit":"fit/fit.json","new_data":"new.csv","output_dir":"pred"})");
    ASSERT_EQ(run_cli("predict", dir / "p.json"), 0);
    const CsvTable pred = read_csv((dir / "pred" / "predictions.csv").string());
    // V_oo = [[3,2,0],[2,3,0],[0,0,3]], c = (2,2,0): c V^-1 = (0.4, 0.4, 0).
    EXPECT_NEAR(pred.numeric("mean")[0], 0.5 + 0.4 * (0.5 + 2.5), 1e-12);
    EXPECT_NEAR(pred.numeric("variance")[0], 3.0 - 1.6, 1e-12);
}

TEST(CliPredict, AmbiguousLabelsAreValidationErrors) {
    const fs::path dir = fresh_dir("ambiguous");
    write_text(dir / "d.csv", "y,g\n1,a\n3,a \n2,b\n4,b\n");
    write_text(dir / "c.json", R"({"data":"d.csv","response":"y","random_effects":[{"group":"g"}],"output_dir":"fit"})");
    EXPECT_EQ(run_cli("fit", dir / "c.json"), 2);
    EXPECT_EQ(read_json(dir / "fit" / "error.json")["subject"], "g");
}

TEST(CliCrossValidate, ShapeDeterminismAndCityEffect) {
    const fs::path dir = fresh_dir("cv");
    write_text(dir / "s.json", R"({"scenario":"re_regularization","sigma0":[[4,0,0],[0,1,0],[0,0,1]],"output_dir":"sim"})");
    ASSERT_EQ(run_cli("simulate", dir / "s.json"), 0);
    write_text(dir / "cv.json", R"({"data":"sim/dataset.csv","response":"y","fixed_effects":["x1","x2"],
        "unit":"individual","splits":10,"output_dir":"cv",
        "variants":[
          {"name":"individual","random_effects":[{"group":"individual"}],"prior":{"mode":"flat"}},
          {"name":"individual_again","random_effects":[{"group":"individual"}],"prior":{"mode":"flat"}},
          {"name":"individual_city","random_effects":[{"group":"individual"},{"group":"city"}],"prior":{"mode":"flat"}}]})");
    ASSERT_EQ(run_cli("cv", dir / "cv.json"), 0);
    const CsvTable t = read_csv((dir / "cv" / "cv.csv").string());
    ASSERT_EQ(t.rows.size(), 30u);
    const auto variant = t.strings("variant");
    const auto rmse = t.numeric("rmse");
    const auto n_test = t.numeric("n_test");
    std::map<std::string, std::vector<double>> by;
    for (std::size_t i = 0; i < rmse.size(); ++i) {
        by[variant[i]].push_back(rmse[i]);
        EXPECT_EQ(n_test[i], 60.0);
    }
    EXPECT_EQ(by["individual"], by["individual_again"]);
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return 0.5 * (v[4] + v[5]);
    };
    EXPECT_LT(median(by["individual_city"]), median(by["individual"]));

    ASSERT_EQ(run_cli("cv", dir / "cv.json", "--out " + (dir / "cv2").string()), 0);
    EXPECT_EQ(read_text(dir / "cv" / "cv.csv"), read_text(dir / "cv2" / "cv.csv"));
}
