#include <CLI11.hpp>

#include <iostream>

#include "eblmm/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Linear mixed models with empirical-Bayes conjugate priors"};
    app.require_subcommand(1);

    eblmm::cli::CommandOptions options;
    std::string config;
    std::uint64_t seed = 0;
    std::string out;

    auto add = [&](const char* name, const char* help) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config, "JSON config file")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "Override the config seed");
        sub->add_option("--out", out, "Output directory (overrides output_dir)");
        return sub;
    };
    CLI::App* fit = add("fit", "Fit a model to a CSV file");
    CLI::App* simulate = add("simulate", "Generate a simulated dataset");
    CLI::App* predict = add("predict", "Predict new observations from a fit");
    CLI::App* cv = add("cv", "Cross-validate model variants");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : eblmm::cli::kValidation;
    }

    options.config = config;
    for (CLI::App* sub : {fit, simulate, predict, cv}) {
        if (sub->parsed() && sub->count("--seed")) options.seed = seed;
        if (sub->parsed() && sub->count("--out")) options.out = out;
    }

    if (fit->parsed()) return eblmm::cli::cmd_fit(options);
    if (simulate->parsed()) return eblmm::cli::cmd_simulate(options);
    if (predict->parsed()) return eblmm::cli::cmd_predict(options);
    return eblmm::cli::cmd_crossvalidate(options);
}
