// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "support.hpp"
#include "tsmoe/checkpoint.hpp"
#include "tsmoe/commands.hpp"
#include "tsmoe/config.hpp"
#include "tsmoe/errors.hpp"

using namespace tsmoe;
using namespace tsmoe::test;
namespace fs = std::filesystem;

namespace {

int code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (...) {
        return exit_code_for_current_exception();
    }
    return 0;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig tiny_run(const fs::path& out) {
    RunConfig c = default_run_config();
    c.out = out.string();
    c.train.model = tiny_config();
    c.train.steps = 6;
    c.train.warmup_steps = 2;
    c.train.batch_size = 4;
    c.train.context_patches = 6;
    c.train.log_interval = 3;
    c.data.synthetic_spec.length = 160;
    c.data.synthetic_spec.series_per_group = 1;
    c.data.holdout_tail = 16;
    c.eval.data = c.data;
    c.eval.data.holdout_tail = 0;
    c.protocol.horizon = 8;
    c.protocol.windows = 2;
    c.protocol.context_length = 64;
    c.protocol.n_samples = 5;
    c.forecast.horizon = 8;
    c.forecast.n_samples = 5;
    c.forecast.context_length = 64;
    c.fit_gate.n_clusters = c.train.model.n_experts;
    c.fit_gate.iterations = 10;
    c.fit_gate.batch_size = 32;
    c.analysis.stages = {"input-projection", "layer-0-residual"};
    c.analysis.max_patches = 12;
    return c;
}

} // namespace

TEST_CASE("config serialization round trips") {
    const RunConfig c = default_run_config();
    const Json j = to_json(c);
    const RunConfig back = run_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(back.train == c.train);

    ModelConfig m = tiny_config(GateKind::Cluster);
    m.objective = Objective::MaskedEncoder;
    CHECK(model_config_from_json(to_json(m)) == m);
    TrainConfig t;
    t.model = m;
    t.lr_max = 3e-4;
    t.normalizer = NormalizerKind::MedianIqr;
    CHECK(train_config_from_json(to_json(t)) == t);
}

TEST_CASE("config errors") {
    CHECK_THROWS_AS(run_config_from_json(Json{{"bogus", 1}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(Json{{"model", {{"d_modle", 8}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(Json{{"train", {{"steps", -1}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(Json{{"model", {{"top_k", 100}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(Json{{"threads", 0}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(Json{{"forecast", {{"quantiles", {0.5, 1.5}}}}}), ConfigError);
    try {
        run_config_from_json(Json{{"protocol", {{"horizn", 3}}}});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("horizn") != std::string::npos);
    }
}

TEST_CASE("shipped configs parse") {
    std::size_t n = 0;
    for (const auto& entry : fs::directory_iterator(TSMOE_CONFIG_DIR)) {
        if (entry.path().extension() != ".json") continue;
        ++n;
        CHECK_NOTHROW(run_config_from_json(read_json_file(entry.path().string())));
    }
    CHECK(n >= 4);
    const RunConfig dense = run_config_from_json(read_json_file(std::string(TSMOE_CONFIG_DIR) + "/dense_matched.json"));
    CHECK(dense.train.model.d_ff == 2 * default_run_config().train.model.d_ff);
    const RunConfig desk = run_config_from_json(read_json_file(std::string(TSMOE_CONFIG_DIR) + "/small_desk.json"));
    CHECK(desk.train == default_run_config().train);
}

TEST_CASE("global seed reaches every consumer") {
    const RunConfig c = run_config_from_json(Json{{"seed", 17}});
    CHECK(c.train.seed == 17);
    CHECK(c.protocol.seed == 17);
}

TEST_CASE("exit codes") {
    CHECK(code_of([] {}) == 0);
    CHECK(code_of([] { throw ConfigError("x"); }) == 2);
    CHECK(code_of([] { throw NumericalError("x"); }) == 3);
    CHECK(code_of([] { throw IoError("x"); }) == 4);
    CHECK(code_of([] { throw FormatError("x"); }) == 4);
    CHECK(code_of([] { throw std::runtime_error("x"); }) == 1);
    CHECK(code_of([] { throw 5; }) == 1);
    CHECK(code_of([] { read_json_file("/nonexistent/cfg.json"); }) == 4);
}

TEST_CASE("command pipeline") {
    TempDir dir("pipeline");
    RunConfig c = tiny_run(dir / "train");
    cmd_train(c);
    const fs::path ckpt = dir / "train" / "checkpoint.moef";
    REQUIRE(fs::exists(ckpt));
    CHECK(fs::exists(dir / "train" / "resolved_config.json"));
    const std::string metrics = slurp(dir / "train" / "metrics.csv");
    CHECK(metrics.rfind("step,pred_loss,balance_loss,lr,wall_ms\n", 0) == 0);
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);
    // The resolved config reproduces the run.
    CHECK(to_json(run_config_from_json(read_json_file((dir / "train" / "resolved_config.json").string()))) == to_json(c));

    c.checkpoint = ckpt.string();
    c.out = (dir / "gate").string();
    cmd_fit_gate(c);
    const fs::path cents = dir / "gate" / "centroids.moef";
    REQUIRE(fs::exists(cents));
    const auto sets = centroids_from_checkpoint(load_checkpoint(cents));
    CHECK(sets.size() == c.train.model.layers);
    CHECK(sets.at(0).centroids.rows() == c.train.model.n_experts);

    c.out = (dir / "fc").string();
    cmd_forecast(c);
    CHECK(fs::file_size(dir / "fc" / "forecasts.jsonl") > 0);

    c.out = (dir / "eval").string();
    cmd_eval(c);
    const Json report = Json::parse(slurp(dir / "eval" / "eval_report.json"));
    CHECK(report.at("aggregate").at("agg_mae_vs_naive").get<double>() > 0.0);

    c.out = (dir / "naive").string();
    c.checkpoint = "seasonal-naive";
    cmd_eval(c);
    const Json naive = Json::parse(slurp(dir / "naive" / "eval_report.json"));
    CHECK(naive.at("aggregate").at("agg_mae_vs_naive").get<double>() == 1.0);

    c.checkpoint = ckpt.string();
    c.out = (dir / "an").string();
    cmd_analyze(c);
    for (const char* f : {"routing_trace.csv", "concentration.csv", "freq_divergence.csv", "periodicity.csv",
                          "embeddings_input-projection.csv", "embeddings_layer-0-residual.csv"}) {
        CHECK_MESSAGE(fs::exists(dir / "an" / f), f);
    }

    RunConfig cl = tiny_run(dir / "cluster");
    cl.train.model.gate_kind = GateKind::Cluster;
    CHECK_THROWS_AS(cmd_train(cl), ConfigError);
    cl.centroids = cents.string();
    cmd_train(cl);
    CHECK(fs::exists(dir / "cluster" / "checkpoint.moef"));

    RunConfig dense = tiny_run(dir / "dense");
    dense.train.model.ffn = FfnKind::Dense;
    dense.checkpoint.clear();
    cmd_train(dense);
    dense.checkpoint = (dir / "dense" / "checkpoint.moef").string();
    dense.out = (dir / "dense_an").string();
    cmd_analyze(dense);
    CHECK(fs::exists(dir / "dense_an" / "embeddings_input-projection.csv"));
    CHECK_FALSE(fs::exists(dir / "dense_an" / "routing_trace.csv"));

    RunConfig missing = c;
    missing.checkpoint = (dir / "nope.moef").string();
    CHECK(code_of([&] { cmd_forecast(missing); }) == 4);
}

TEST_CASE("sweep records failures per run") {
    TempDir dir("sweep");
    RunConfig c = tiny_run(dir.path());
    c.train.steps = 3;
    c.train.warmup_steps = 1;
    c.sweep.axis = "n_experts";
    c.sweep.values = {Json(3), Json(1)};
    c.train.model.top_k = 2;
    cmd_sweep(c);
    const std::string csv = slurp(dir / "sweep.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.find("n_experts,3,") != std::string::npos);
    CHECK(csv.find("failed: ") != std::string::npos); // top_k 2 > 1 expert
    c.sweep.axis = "depth";
    CHECK_THROWS_AS(cmd_sweep(c), ConfigError);
}
