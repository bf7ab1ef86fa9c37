// SPDX-License-Identifier: Apache-2.0
// tsmoe command-line interface.
//
// Settings come from the JSON file given by --config (unknown keys are
// rejected); command-line flags override the file; anything unset keeps its
// default. Every command writes the fully resolved configuration to
// <out>/resolved_config.json.
#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include "tsmoe/commands.hpp"
#include "tsmoe/errors.hpp"

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> threads;
    std::optional<std::string> checkpoint;
    std::optional<std::string> centroids;
    std::optional<std::size_t> steps;
};

tsmoe::RunConfig resolve(const Flags& f) {
    tsmoe::Json j = f.config.empty() ? tsmoe::Json::object() : tsmoe::read_json_file(f.config);
    if (!j.is_object()) throw tsmoe::ConfigError(f.config + ": top level must be an object");
    if (f.seed) j["seed"] = *f.seed;
    if (f.out) j["out"] = *f.out;
    if (f.threads) j["threads"] = *f.threads;
    if (f.checkpoint) j["checkpoint"] = *f.checkpoint;
    if (f.centroids) j["centroids"] = *f.centroids;
    if (f.steps) {
        if (!j.contains("train")) j["train"] = tsmoe::Json::object();
        j["train"]["steps"] = *f.steps;
    }
    return tsmoe::run_config_from_json(j);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tsmoe: sparse mixture-of-experts time-series forecasting"};
    app.require_subcommand(1);
    Flags flags;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config, "JSON configuration file");
        sub->add_option("--seed", flags.seed, "global seed (training, sampling, k-means)");
        sub->add_option("--out", flags.out, "output directory");
        sub->add_option("--threads", flags.threads, "worker threads")->check(CLI::PositiveNumber);
    };

    using Command = std::function<void(const tsmoe::RunConfig&)>;
    std::vector<std::pair<CLI::App*, Command>> commands;

    auto* train = app.add_subcommand("train", "train a model and write checkpoint + metrics.csv");
    add_common(train);
    train->add_option("--centroids", flags.centroids, "centroid file for the cluster gate");
    train->add_option("--steps", flags.steps, "number of optimizer steps");
    commands.emplace_back(train, tsmoe::cmd_train);

    auto* fit = app.add_subcommand("fit-gate", "fit cluster centroids from a trained checkpoint");
    add_common(fit);
    fit->add_option("--checkpoint", flags.checkpoint, "source checkpoint");
    commands.emplace_back(fit, tsmoe::cmd_fit_gate);

    auto* fc = app.add_subcommand("forecast", "sample forecasts for every series of the data source");
    add_common(fc);
    fc->add_option("--checkpoint", flags.checkpoint, "model checkpoint");
    commands.emplace_back(fc, tsmoe::cmd_forecast);

    auto* ev = app.add_subcommand("eval", "rolling-window benchmark against seasonal naive");
    add_common(ev);
    ev->add_option("--checkpoint", flags.checkpoint, "model checkpoint, or \"seasonal-naive\"");
    commands.emplace_back(ev, tsmoe::cmd_eval);

    auto* an = app.add_subcommand("analyze", "routing statistics and embedding export");
    add_common(an);
    an->add_option("--checkpoint", flags.checkpoint, "model checkpoint");
    commands.emplace_back(an, tsmoe::cmd_analyze);

    auto* sw = app.add_subcommand("sweep", "train and evaluate one run per value of an axis");
    add_common(sw);
    sw->add_option("--centroids", flags.centroids, "centroid file for cluster-gate runs");
    sw->add_option("--steps", flags.steps, "number of optimizer steps per run");
    commands.emplace_back(sw, tsmoe::cmd_sweep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        for (auto& [sub, run] : commands) {
            if (sub->parsed()) run(resolve(flags));
        }
    } catch (...) {
        return tsmoe::exit_code_for_current_exception();
    }
    return 0;
}
